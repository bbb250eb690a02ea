//! Reference pixels and target spectrum.
//!
//! Reference coordinates are drawn once per region from the eroded annual
//! mask, so every candidate date of a region is read at the same locations.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{AnnualMask, Coord, Grid, Scene, Spectrum};

pub const DEFAULT_SEED_NAMESPACE: u64 = 0x4d41_4e47_4f5f_5245;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignatureConfig {
    pub k_pixels: usize,
    /// Side of the square structuring element.
    pub structuring_element: usize,
    pub rng_seed_namespace: u64,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        SignatureConfig {
            k_pixels: 10,
            structuring_element: 5,
            rng_seed_namespace: DEFAULT_SEED_NAMESPACE,
        }
    }
}

impl SignatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_pixels == 0 {
            return Err(Error::Config("k_pixels must be at least 1".into()));
        }
        if self.structuring_element.is_multiple_of(2) {
            return Err(Error::EvenElement(self.structuring_element));
        }
        Ok(())
    }
}

/// Which rung of the erosion ladder produced the reference set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceProvenance {
    Eroded { side: usize },
    RawMask,
}

impl fmt::Display for ReferenceProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferenceProvenance::Eroded { side } => write!(f, "eroded{side}x{side}"),
            ReferenceProvenance::RawMask => f.write_str("raw_mask"),
        }
    }
}

impl Serialize for ReferenceProvenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ReferenceProvenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "raw_mask" {
            return Ok(ReferenceProvenance::RawMask);
        }
        s.strip_prefix("eroded")
            .and_then(|rest| rest.split_once('x'))
            .filter(|(a, b)| a == b)
            .and_then(|(a, _)| a.parse().ok())
            .map(|side| ReferenceProvenance::Eroded { side })
            .ok_or_else(|| serde::de::Error::custom(format!("unknown provenance {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    /// Row-major ordered, distinct.
    pub coords: Vec<Coord>,
    pub provenance: ReferenceProvenance,
}

/// Row-wise AND over a `side`-wide window, treating outside as false.
fn erode_rows(grid: &Grid<bool>, radius: usize) -> Grid<bool> {
    let (h, w) = grid.dims();
    let mut out = Grid::filled(w, h, false);
    let mut prefix = vec![0usize; w + 1];
    for r in 0..h {
        for c in 0..w {
            prefix[c + 1] = prefix[c] + usize::from(*grid.get(r, c));
        }
        for c in radius..w.saturating_sub(radius) {
            if prefix[c + radius + 1] - prefix[c - radius] == 2 * radius + 1 {
                out.set(r, c, true);
            }
        }
    }
    out
}

fn transpose(grid: &Grid<bool>) -> Grid<bool> {
    let (h, w) = grid.dims();
    Grid::from_fn(h, w, |r, c| *grid.get(c, r))
}

/// Binary erosion by a `side`×`side` square, zero-padded at the border.
pub fn erode(mask: &Grid<bool>, side: usize) -> Result<Grid<bool>> {
    if side.is_multiple_of(2) {
        return Err(Error::EvenElement(side));
    }
    let radius = side / 2;
    let rows = erode_rows(mask, radius);
    Ok(transpose(&erode_rows(&transpose(&rows), radius)))
}

/// 64-bit seed derived from the namespace and region id.
pub fn region_seed(namespace: u64, region_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(namespace.to_le_bytes());
    hasher.update(region_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn draw(coords: Vec<Coord>, k: usize, seed: u64) -> Vec<Coord> {
    if coords.len() <= k {
        return coords;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, coords.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| coords[i]).collect()
}

/// Picks up to `k_pixels` reference coordinates.
///
/// `eroded` is the mask eroded at `cfg.structuring_element`. When it is
/// empty the mask is re-eroded with a 3×3 element, then the raw mask is used.
pub fn sample_reference_pixels(
    eroded: &Grid<bool>,
    mask: &AnnualMask,
    cfg: &SignatureConfig,
    region_id: &str,
) -> Result<ReferenceSet> {
    if !mask.has_target() {
        return Err(Error::NoTargetClass);
    }
    if eroded.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: mask.dims(),
            actual: eroded.dims(),
        });
    }
    let seed = region_seed(cfg.rng_seed_namespace, region_id);
    let mut candidates = eroded.true_coords();
    let mut provenance = ReferenceProvenance::Eroded {
        side: cfg.structuring_element,
    };
    if candidates.is_empty() && cfg.structuring_element > 3 {
        candidates = erode(&mask.grid, 3)?.true_coords();
        provenance = ReferenceProvenance::Eroded { side: 3 };
    }
    if candidates.is_empty() {
        candidates = mask.grid.true_coords();
        provenance = ReferenceProvenance::RawMask;
    }
    Ok(ReferenceSet {
        coords: draw(candidates, cfg.k_pixels, seed),
        provenance,
    })
}

/// Erodes and samples in one step.
pub fn reference_pixels(mask: &AnnualMask, cfg: &SignatureConfig) -> Result<ReferenceSet> {
    cfg.validate()?;
    let eroded = erode(&mask.grid, cfg.structuring_element)?;
    sample_reference_pixels(&eroded, mask, cfg, &mask.region_id)
}

/// Per-band mean over the reference pixels valid in this scene.
pub fn target_spectrum(scene: &Scene, refs: &ReferenceSet) -> Result<Spectrum> {
    let bands = scene.bands();
    let mut sum = vec![0.0; bands];
    let mut buf = vec![0.0; bands];
    let mut used = 0usize;
    for &(r, c) in &refs.coords {
        if r >= scene.height() || c >= scene.width() || !scene.is_valid(r, c) {
            continue;
        }
        scene.spectrum_into(r, c, &mut buf);
        sum.iter_mut().zip(&buf).for_each(|(s, v)| *s += v);
        used += 1;
    }
    if used == 0 {
        return Err(Error::SignatureUnobservable);
    }
    Spectrum::new(sum.into_iter().map(|s| s / used as f64).collect())
}
