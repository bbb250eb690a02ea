//! Synthetic regions with a known best acquisition date.
//!
//! Background pixels are Gaussian with a configurable mean and covariance.
//! Mangrove pixels get an extra displacement whose Mahalanobis length (under
//! the background covariance) equals that date's separability, so a date with
//! separability 6 places the target class 6σ from the background.

use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{cloud_fraction, coverage};
use crate::ingest::{self, ManifestRecord};
use crate::matched_filter::Cholesky;
use crate::raster::{AnnualMask, Grid, Scene};
use crate::signature::region_seed;
use crate::spectral_index::BandRoles;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskGeometry {
    /// Centred disc with radius `radius_frac · tile_size`.
    Disc {
        radius_frac: f64,
    },
    /// Two-pixel-wide diagonal band; survives no 3×3 erosion.
    Fringe,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub tile_size: usize,
    pub bands: usize,
    pub background_mean: Vec<f64>,
    /// Row-major B×B, positive definite.
    pub background_covariance: Vec<f64>,
    /// Direction of the target displacement in whitened units.
    pub target_direction: Vec<f64>,
    /// Target displacement per date, in background σ.
    pub separability: Vec<f64>,
    /// Cloud fraction per date.
    pub cloud_fraction: Vec<f64>,
    pub first_date: NaiveDate,
    pub date_step_days: u64,
    pub geometry: MaskGeometry,
    /// Where green, NIR and SWIR1 sit in the generated stack.
    pub band_roles: BandRoles,
    /// Share of background pixels drawn with a 5× wider spread.
    pub contamination: f64,
    pub seed: u64,
}

/// Five-band default: blue, green, red, NIR, SWIR1.
impl Default for SynthSpec {
    fn default() -> Self {
        let sd = [0.010, 0.012, 0.015, 0.020, 0.018];
        let corr = 0.3;
        let mut cov = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                cov[i * 5 + j] = sd[i] * sd[j] * if i == j { 1.0 } else { corr };
            }
        }
        SynthSpec {
            tile_size: 32,
            bands: 5,
            background_mean: vec![0.06, 0.08, 0.07, 0.12, 0.10],
            background_covariance: cov,
            target_direction: vec![0.2, 0.5, 0.1, 1.0, 0.3],
            separability: vec![0.5, 6.0, 0.5],
            cloud_fraction: vec![0.01, 0.02, 0.0],
            first_date: NaiveDate::from_ymd_opt(2020, 1, 10).unwrap(),
            date_step_days: 30,
            geometry: MaskGeometry::Disc { radius_frac: 0.3 },
            band_roles: BandRoles {
                green_index: 1,
                nir_index: 3,
                swir1_index: 4,
            },
            contamination: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let b = self.bands;
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.tile_size == 0 || b == 0 {
            return bad("empty tile");
        }
        if self.background_mean.len() != b || self.target_direction.len() != b {
            return bad("mean and direction need one entry per band");
        }
        if self.background_covariance.len() != b * b {
            return bad("covariance must be bands x bands");
        }
        if self.separability.is_empty() || self.separability.len() != self.cloud_fraction.len() {
            return bad("separability and cloud schedules must be non-empty and equal in length");
        }
        if self.cloud_fraction.iter().any(|c| !(0.0..=1.0).contains(c)) || !(0.0..=1.0).contains(&self.contamination) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.target_direction.iter().all(|&v| v == 0.0) {
            return bad("target direction is zero");
        }
        self.band_roles.validate(b)?;
        Cholesky::factor(&self.background_covariance, b).map(|_| ())
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.separability.len())
            .map(|i| self.first_date + Days::new(self.date_step_days * i as u64))
            .collect()
    }

    /// Index of the largest separability, earliest on ties.
    pub fn planted_best(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.separability.iter().enumerate() {
            if s > self.separability[best] {
                best = i;
            }
        }
        best
    }

    fn mask(&self, region_id: &str) -> AnnualMask {
        let n = self.tile_size;
        let grid = match self.geometry {
            MaskGeometry::Disc { radius_frac } => {
                let centre = (n as f64 - 1.0) / 2.0;
                let radius = radius_frac * n as f64;
                Grid::from_fn(n, n, |r, c| {
                    let (dr, dc) = (r as f64 - centre, c as f64 - centre);
                    dr * dr + dc * dc <= radius * radius
                })
            }
            MaskGeometry::Fringe => Grid::from_fn(n, n, |r, c| r == c || r == c + 1),
            MaskGeometry::Empty => Grid::filled(n, n, false),
        };
        AnnualMask::new(region_id, grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRegion {
    pub mask: AnnualMask,
    pub scenes: Vec<Scene>,
    pub planted_best: usize,
}

fn lower_times(l: &Cholesky, b: usize, z: &[f64], out: &mut [f64]) {
    let lower = l.lower();
    for i in 0..b {
        out[i] = (0..=i).map(|k| lower[i * b + k] * z[k]).sum();
    }
}

pub fn generate_region(spec: &SynthSpec, region_id: &str) -> Result<SynthRegion> {
    spec.validate()?;
    let (n, b) = (spec.tile_size, spec.bands);
    let factor = Cholesky::factor(&spec.background_covariance, b)?;
    let norm = spec.target_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit: Vec<f64> = spec.target_direction.iter().map(|v| v / norm).collect();
    let mut unit_shift = vec![0.0; b];
    lower_times(&factor, b, &unit, &mut unit_shift);

    let mask = spec.mask(region_id);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plane = n * n;
    let mut z = vec![0.0; b];
    let mut x = vec![0.0; b];
    let mut scenes = Vec::with_capacity(spec.separability.len());
    for (t, date) in spec.dates().into_iter().enumerate() {
        let sep = spec.separability[t];
        let mut pixels = vec![0.0; plane * b];
        for p in 0..plane {
            let wide = rng.random_bool(spec.contamination);
            for zk in z.iter_mut() {
                *zk = rng.sample::<f64, _>(StandardNormal) * if wide { 5.0 } else { 1.0 };
            }
            lower_times(&factor, b, &z, &mut x);
            let target = mask.grid.as_slice()[p];
            for k in 0..b {
                let mut v = spec.background_mean[k] + x[k];
                if target {
                    v += sep * unit_shift[k];
                }
                pixels[k * plane + p] = v;
            }
        }
        let clouded = (spec.cloud_fraction[t] * plane as f64).round() as usize;
        let mut valid = vec![true; plane];
        for p in rand::seq::index::sample(&mut rng, plane, clouded) {
            valid[p] = false;
            for k in 0..b {
                pixels[k * plane + p] = 0.8;
            }
        }
        let valid = Grid::new(n, n, valid)?;
        let scene = Scene::new(region_id, date, n, n, b, pixels, valid)?.with_footprint(Grid::filled(n, n, true))?;
        scenes.push(scene);
    }
    Ok(SynthRegion {
        mask,
        scenes,
        planted_best: spec.planted_best(),
    })
}

/// A corpus of regions derived from one template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub template: SynthSpec,
    pub regions: usize,
    pub countries: Vec<String>,
    /// Cycled across regions; empty means the template geometry.
    pub geometries: Vec<MaskGeometry>,
    /// Rotate the separability and cloud schedules by region index so the
    /// planted date varies.
    pub rotate_schedule: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            template: SynthSpec::default(),
            regions: 8,
            countries: ["IDN", "BRA", "AUS", "MEX", "NGA"].map(String::from).to_vec(),
            geometries: vec![],
            rotate_schedule: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub region_id: String,
    pub country_iso3: String,
    pub planted_date: NaiveDate,
    pub geometry: MaskGeometry,
}

impl CorpusSpec {
    pub fn region_id(&self, i: usize) -> String {
        format!("R{i:05}")
    }

    /// Spec and country for region `i`.
    pub fn region_spec(&self, i: usize) -> Result<(SynthSpec, String)> {
        if self.countries.is_empty() {
            return Err(Error::Config("corpus needs at least one country".into()));
        }
        let mut spec = self.template.clone();
        spec.seed = region_seed(self.seed, &self.region_id(i));
        if !self.geometries.is_empty() {
            spec.geometry = self.geometries[i % self.geometries.len()];
        }
        if self.rotate_schedule {
            let len = spec.separability.len().max(1);
            spec.separability.rotate_right(i % len);
            spec.cloud_fraction.rotate_right(i % len);
        }
        Ok((spec, self.countries[i % self.countries.len()].clone()))
    }
}

/// Writes MSR1 tiles, `manifest.jsonl` and `truth.jsonl` under `out`.
pub fn write_corpus(corpus: &CorpusSpec, out: &Path) -> Result<(Vec<ManifestRecord>, Vec<TruthRecord>)> {
    for sub in ["images", "validity", "masks"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let mut records = Vec::new();
    let mut truth = Vec::new();
    for i in 0..corpus.regions {
        let (spec, country) = corpus.region_spec(i)?;
        let id = corpus.region_id(i);
        let region = generate_region(&spec, &id)?;
        let mask_rel = format!("masks/{id}.msr");
        ingest::write_mask(&region.mask, &out.join(&mask_rel))?;
        for scene in &region.scenes {
            let stem = format!("{id}_{}", scene.sensing_date.format("%Y%m%d"));
            let image_rel = format!("images/{stem}.msr");
            let validity_rel = format!("validity/{stem}.msr");
            ingest::write_scene(scene, &out.join(&image_rel))?;
            ingest::write_validity(scene, &out.join(&validity_rel))?;
            records.push(ManifestRecord {
                region_id: id.clone(),
                country_iso3: country.clone(),
                sensing_date: scene.sensing_date,
                image_path: image_rel,
                mask_path: mask_rel.clone(),
                validity_path: Some(validity_rel),
                cloud_fraction: Some(cloud_fraction(scene)),
                coverage: Some(coverage(scene)),
            });
        }
        truth.push(TruthRecord {
            region_id: id,
            country_iso3: country,
            planted_date: region.scenes[region.planted_best].sensing_date,
            geometry: spec.geometry,
        });
    }
    ingest::write_manifest(&out.join("manifest.jsonl"), None, &records)?;
    ingest::write_jsonl(&out.join("truth.jsonl"), None, &truth)?;
    Ok((records, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_best_follows_schedule() {
        let spec = SynthSpec {
            separability: vec![0.5, 6.0, 0.5],
            ..Default::default()
        };
        assert_eq!(generate_region(&spec, "r").unwrap().planted_best, 1);
    }

    #[test]
    fn empty_geometry_has_no_target() {
        let spec = SynthSpec {
            geometry: MaskGeometry::Empty,
            ..Default::default()
        };
        assert!(!generate_region(&spec, "r").unwrap().mask.has_target());
    }

    #[test]
    fn same_seed_same_scenes() {
        let spec = SynthSpec {
            seed: 99,
            contamination: 0.1,
            ..Default::default()
        };
        let a = generate_region(&spec, "r").unwrap();
        let b = generate_region(&spec, "r").unwrap();
        for (x, y) in a.scenes.iter().zip(&b.scenes) {
            let bits = |s: &Scene| s.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
            assert_eq!(x.valid(), y.valid());
        }
        let c = generate_region(&SynthSpec { seed: 100, ..spec }, "r").unwrap();
        assert_ne!(a.scenes[0].pixels(), c.scenes[0].pixels());
    }

    #[test]
    fn cloud_schedule_applied() {
        let spec = SynthSpec {
            cloud_fraction: vec![0.0, 0.25, 1.0],
            ..Default::default()
        };
        let r = generate_region(&spec, "r").unwrap();
        let cf: Vec<f64> = r.scenes.iter().map(cloud_fraction).collect();
        assert_eq!(cf, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn target_displacement_has_requested_mahalanobis_length() {
        let spec = SynthSpec::default();
        let b = spec.bands;
        let factor = Cholesky::factor(&spec.background_covariance, b).unwrap();
        let norm = spec.target_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = spec.target_direction.iter().map(|v| v / norm).collect();
        let mut shift = vec![0.0; b];
        lower_times(&factor, b, &unit, &mut shift);
        let w = factor.solve(&shift);
        let maha: f64 = w.iter().zip(&shift).map(|(a, b)| a * b).sum();
        assert!((maha - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SynthSpec::default();
        s.cloud_fraction.pop();
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.background_covariance[0] = -1.0;
        assert!(s.validate().is_err());
        let s = SynthSpec {
            target_direction: vec![0.0; 5],
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn corpus_rotates_planted_dates() {
        let corpus = CorpusSpec::default();
        let planted: Vec<usize> = (0..3)
            .map(|i| corpus.region_spec(i).unwrap().0.planted_best())
            .collect();
        assert_eq!(planted, vec![1, 2, 0]);
    }
}
