//! MSR1 tile files and newline-delimited JSON manifests.
//!
//! MSR1 layout (all integers little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 0-3   | magic `MSR1`                            |
//! | 4-7   | width (u32)                             |
//! | 8-11  | height (u32)                            |
//! | 12-15 | bands (u32)                             |
//! | 16    | dtype (1 = float32)                     |
//! | 17    | layout (1 = band-sequential)            |
//! | 18..  | payload, band-sequential, row-major, f32 |
//!
//! Validity grids are MSR1 files with values in {0, 1}. Band 0 marks valid
//! (observed, cloud-free) pixels. An optional band 1 marks the sensor
//! footprint so cloud and coverage can be separated.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{AnnualMask, Grid, Scene};

pub const MAGIC: [u8; 4] = *b"MSR1";
pub const HEADER_LEN: usize = 18;
pub const DTYPE_F32: u8 = 1;
pub const LAYOUT_BSQ: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileFileHeader {
    pub width: u32,
    pub height: u32,
    pub bands: u32,
    pub dtype: u8,
    pub layout: u8,
}

impl TileFileHeader {
    pub fn f32_bsq(width: u32, height: u32, bands: u32) -> Self {
        TileFileHeader {
            width,
            height,
            bands,
            dtype: DTYPE_F32,
            layout: LAYOUT_BSQ,
        }
    }

    /// Number of samples in the payload, checked for overflow and zero.
    pub fn sample_count(&self) -> Result<usize> {
        let (w, h, b) = (self.width, self.height, self.bands);
        if w == 0 || h == 0 || b == 0 {
            return Err(Error::DegenerateDimensions {
                width: w,
                height: h,
                bands: b,
            });
        }
        (w as usize)
            .checked_mul(h as usize)
            .and_then(|n| n.checked_mul(b as usize))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or(Error::DimensionOverflow {
                width: w,
                height: h,
                bands: b,
            })
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.width.to_le_bytes());
        out[8..12].copy_from_slice(&self.height.to_le_bytes());
        out[12..16].copy_from_slice(&self.bands.to_le_bytes());
        out[16] = self.dtype;
        out[17] = self.layout;
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let header = TileFileHeader {
            width: u32_at(4),
            height: u32_at(8),
            bands: u32_at(12),
            dtype: bytes[16],
            layout: bytes[17],
        };
        if header.dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(header.dtype));
        }
        if header.layout != LAYOUT_BSQ {
            return Err(Error::UnsupportedLayout(header.layout));
        }
        header.sample_count()?;
        Ok(header)
    }
}

/// Raw decoded MSR1 contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub header: TileFileHeader,
    pub samples: Vec<f32>,
}

impl Raster {
    pub fn width(&self) -> usize {
        self.header.width as usize
    }

    pub fn height(&self) -> usize {
        self.header.height as usize
    }

    pub fn bands(&self) -> usize {
        self.header.bands as usize
    }

    fn band_as_bools(&self, band: usize) -> Grid<bool> {
        let plane = self.width() * self.height();
        let data = self.samples[band * plane..(band + 1) * plane]
            .iter()
            .map(|&v| v > 0.5)
            .collect();
        Grid::new(self.width(), self.height(), data).expect("plane size")
    }
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let header = TileFileHeader::parse(bytes)?;
    let n = header.sample_count()?;
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let samples = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Raster { header, samples })
}

pub fn encode_raster(raster: &Raster) -> Result<Vec<u8>> {
    let n = raster.header.sample_count()?;
    if raster.samples.len() != n {
        return Err(Error::Truncated {
            expected: n,
            found: raster.samples.len(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n);
    out.extend_from_slice(&raster.header.to_bytes());
    for v in &raster.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

pub fn write_raster(raster: &Raster, path: &Path) -> Result<()> {
    let bytes = encode_raster(raster)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("dimension {n} exceeds u32")))
}

/// Loads a scene. Without a validity file every pixel is valid.
pub fn read_scene(
    image_path: &Path,
    validity_path: Option<&Path>,
    region_id: &str,
    sensing_date: NaiveDate,
) -> Result<Scene> {
    let raster = read_raster(image_path)?;
    let (w, h, b) = (raster.width(), raster.height(), raster.bands());
    let (valid, footprint) = match validity_path {
        Some(p) => {
            let v = read_raster(p)?;
            if (v.height(), v.width()) != (h, w) {
                return Err(Error::DimensionMismatch {
                    expected: (h, w),
                    actual: (v.height(), v.width()),
                });
            }
            let footprint = (v.bands() >= 2).then(|| v.band_as_bools(1));
            (v.band_as_bools(0), footprint)
        }
        None => (Grid::filled(w, h, true), None),
    };
    let pixels = raster.samples.iter().map(|&v| v as f64).collect();
    let scene = Scene::new(region_id, sensing_date, w, h, b, pixels, valid)?;
    match footprint {
        Some(f) => scene.with_footprint(f),
        None => Ok(scene),
    }
}

fn scene_raster(scene: &Scene) -> Result<Raster> {
    let plane = scene.width() * scene.height();
    let valid = scene.valid().as_slice();
    for (i, v) in scene.pixels().iter().enumerate() {
        if !v.is_finite() && valid[i % plane] {
            let p = i % plane;
            return Err(Error::NonFiniteReflectance {
                row: p / scene.width(),
                col: p % scene.width(),
                band: i / plane,
            });
        }
    }
    Ok(Raster {
        header: TileFileHeader::f32_bsq(
            dim_u32(scene.width())?,
            dim_u32(scene.height())?,
            dim_u32(scene.bands())?,
        ),
        samples: scene.pixels().iter().map(|&v| v as f32).collect(),
    })
}

/// Writes the scene's reflectances as an MSR1 file.
pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    write_raster(&scene_raster(scene)?, path)
}

/// Writes the validity grid (and footprint, as band 1, when present).
pub fn write_validity(scene: &Scene, path: &Path) -> Result<()> {
    let to_f32 = |g: &Grid<bool>| {
        g.as_slice()
            .iter()
            .map(|&b| if b { 1.0f32 } else { 0.0 })
            .collect::<Vec<_>>()
    };
    let mut samples = to_f32(scene.valid());
    let mut bands = 1;
    if let Some(f) = scene.footprint() {
        samples.extend(to_f32(f));
        bands = 2;
    }
    let raster = Raster {
        header: TileFileHeader::f32_bsq(dim_u32(scene.width())?, dim_u32(scene.height())?, bands),
        samples,
    };
    write_raster(&raster, path)
}

pub fn read_mask(path: &Path, region_id: &str) -> Result<AnnualMask> {
    let raster = read_raster(path)?;
    Ok(AnnualMask::new(region_id, raster.band_as_bools(0)))
}

pub fn write_mask(mask: &AnnualMask, path: &Path) -> Result<()> {
    let raster = Raster {
        header: TileFileHeader::f32_bsq(dim_u32(mask.grid.width())?, dim_u32(mask.grid.height())?, 1),
        samples: mask
            .grid
            .as_slice()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect(),
    };
    write_raster(&raster, path)
}

/// One candidate acquisition as listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub region_id: String,
    pub country_iso3: String,
    pub sensing_date: NaiveDate,
    pub image_path: String,
    pub mask_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl ManifestRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.region_id.is_empty() {
            return Err("empty region_id".into());
        }
        if !is_iso3(&self.country_iso3) {
            return Err(format!("country_iso3 {:?} is not a 3-letter code", self.country_iso3));
        }
        if self.image_path.is_empty() || self.mask_path.is_empty() {
            return Err("empty path".into());
        }
        if matches!(&self.validity_path, Some(p) if p.is_empty()) {
            return Err("empty validity_path".into());
        }
        for (name, v) in [("cloud_fraction", self.cloud_fraction), ("coverage", self.coverage)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} {v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn is_iso3(code: &str) -> bool {
    code.len() == 3 && code.bytes().all(|b| b.is_ascii_alphabetic())
}

/// Header line written first into every JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceLine {
    provenance: Provenance,
}

/// Provenance headers and failure trailers are metadata, not records.
fn is_provenance_line(value: &serde_json::Value) -> bool {
    value
        .as_object()
        .is_some_and(|o| o.len() == 1 && (o.contains_key("provenance") || o.contains_key("failures")))
}

/// Reads JSON-per-line records, skipping blank lines, provenance headers
/// and failure trailers.
/// Each item is paired with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |e: serde_json::Error| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(err)?;
        if is_provenance_line(&value) {
            continue;
        }
        out.push((line_no, serde_json::from_value(value).map_err(err)?));
    }
    Ok(out)
}

/// Reads the provenance header of a JSONL file, if it has one.
pub fn read_provenance(path: &Path) -> Result<Option<Provenance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        return Ok(serde_json::from_str::<ProvenanceLine>(&line).ok().map(|p| p.provenance));
    }
    Ok(None)
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    provenance: Option<&Provenance>,
    items: impl IntoIterator<Item = T>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if let Some(p) = provenance {
        let line = ProvenanceLine { provenance: p.clone() };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest, rejecting malformed lines and duplicate
/// `(region_id, sensing_date)` pairs.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in read_jsonl::<ManifestRecord>(path)? {
        rec.validate().map_err(|message| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        })?;
        if !seen.insert((rec.region_id.clone(), rec.sensing_date)) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line,
                message: Error::DuplicateRecord {
                    region_id: rec.region_id,
                    date: rec.sensing_date.to_string(),
                }
                .to_string(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, provenance: Option<&Provenance>, records: &[ManifestRecord]) -> Result<()> {
    write_jsonl(path, provenance, records)
}

/// Resolves a manifest-relative path.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, m, d).unwrap()
    }

    #[test]
    fn header_is_eighteen_bytes() {
        let h = TileFileHeader::f32_bsq(2, 3, 4).to_bytes();
        assert_eq!(h.len(), 18);
        assert_eq!(&h[0..4], b"MSR1");
        assert_eq!(&h[4..8], &2u32.to_le_bytes());
        assert_eq!(&h[8..12], &3u32.to_le_bytes());
        assert_eq!(&h[12..16], &4u32.to_le_bytes());
        assert_eq!((h[16], h[17]), (1, 1));
    }

    #[test]
    fn reads_two_by_two_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.msr");
        let mut bytes = TileFileHeader::f32_bsq(2, 2, 1).to_bytes().to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let s = read_scene(&path, None, "r", date(1, 1)).unwrap();
        assert_eq!(s.pixel(0, 0, 0), 1.0);
        assert_eq!(s.pixel(0, 1, 0), 2.0);
        assert_eq!(s.pixel(1, 1, 0), 4.0);
        assert_eq!(s.valid().count_true(), 4);
    }

    #[test]
    fn rejects_zero_width() {
        let bytes = TileFileHeader::f32_bsq(0, 2, 1).to_bytes();
        let err = decode_raster(&bytes).unwrap_err();
        assert!(matches!(err, Error::DegenerateDimensions { width: 0, .. }));
        assert!(err.to_string().contains("degenerate dimensions"));
    }

    #[test]
    fn rejects_bad_magic_truncation_and_codes() {
        let mut bytes = TileFileHeader::f32_bsq(2, 2, 1).to_bytes().to_vec();
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(matches!(
            decode_raster(&bytes),
            Err(Error::Truncated {
                expected: 34,
                found: 30
            })
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_raster(&bad), Err(Error::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[16] = 2;
        assert!(matches!(decode_raster(&bad), Err(Error::UnsupportedDtype(2))));

        let mut bad = bytes;
        bad[17] = 9;
        assert!(matches!(decode_raster(&bad), Err(Error::UnsupportedLayout(9))));
    }

    #[test]
    fn rejects_overflowing_dimensions() {
        let bytes = TileFileHeader::f32_bsq(u32::MAX, u32::MAX, u32::MAX).to_bytes();
        assert!(matches!(decode_raster(&bytes), Err(Error::DimensionOverflow { .. })));
    }

    #[test]
    fn write_rejects_empty_raster() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster {
            header: TileFileHeader::f32_bsq(0, 0, 1),
            samples: vec![],
        };
        assert!(write_raster(&r, &dir.path().join("e.msr")).is_err());
    }

    #[test]
    fn validity_and_footprint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let valid = Grid::new(2, 1, vec![true, false]).unwrap();
        let foot = Grid::new(2, 1, vec![true, true]).unwrap();
        let scene = Scene::new("r", date(2, 2), 2, 1, 1, vec![0.5, f64::NAN], valid)
            .unwrap()
            .with_footprint(foot)
            .unwrap();
        let img = dir.path().join("i.msr");
        let val = dir.path().join("v.msr");
        write_scene(&scene, &img).unwrap();
        write_validity(&scene, &val).unwrap();
        let back = read_scene(&img, Some(&val), "r", date(2, 2)).unwrap();
        assert_eq!(back.valid(), scene.valid());
        assert_eq!(back.footprint(), scene.footprint());
        assert_eq!(back.pixel(0, 0, 0), 0.5);
        assert!(back.pixel(0, 1, 0).is_nan());
    }

    fn record(region: &str, d: NaiveDate) -> ManifestRecord {
        ManifestRecord {
            region_id: region.into(),
            country_iso3: "IDN".into(),
            sensing_date: d,
            image_path: "img.msr".into(),
            mask_path: "mask.msr".into(),
            validity_path: None,
            cloud_fraction: Some(0.01),
            coverage: Some(1.0),
        }
    }

    #[test]
    fn manifest_empty_and_two_dates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());

        write_manifest(&path, None, &[record("a", date(1, 1)), record("a", date(1, 2))]).unwrap();
        assert_eq!(read_manifest(&path).unwrap().len(), 2);
    }

    #[test]
    fn manifest_duplicate_reports_second_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = [
            record("a", date(1, 1)),
            record("b", date(1, 1)),
            record("a", date(1, 1)),
        ];
        write_manifest(&path, None, &recs).unwrap();
        match read_manifest(&path).unwrap_err() {
            Error::Manifest { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("region a on 2020-01-01"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn manifest_malformed_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&record("a", date(1, 1))).unwrap();
        fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest { line: 2, .. })));

        let mut bad = record("a", date(1, 1));
        bad.cloud_fraction = Some(1.5);
        fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn provenance_header_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let prov = Provenance {
            tool: "t".into(),
            version: "0".into(),
            command: "filter".into(),
            config_hash: "00".into(),
            seeds: Default::default(),
        };
        write_manifest(&path, Some(&prov), &[record("a", date(3, 3))]).unwrap();
        assert_eq!(read_manifest(&path).unwrap().len(), 1);
        assert_eq!(read_provenance(&path).unwrap(), Some(prov));
    }

    fn arb_record() -> impl Strategy<Value = ManifestRecord> {
        (
            "[a-z0-9_]{1,8}",
            "[A-Z]{3}",
            1u32..=366,
            "[a-z/]{1,10}",
            proptest::option::of(0.0f64..=1.0),
            proptest::option::of(0.0f64..=1.0),
            proptest::option::of("[a-z]{1,5}"),
        )
            .prop_map(|(r, c, doy, p, cf, cov, vp)| ManifestRecord {
                region_id: r,
                country_iso3: c,
                sensing_date: NaiveDate::from_yo_opt(2020, doy).unwrap(),
                image_path: format!("{p}.msr"),
                mask_path: format!("{p}.mask"),
                validity_path: vp,
                cloud_fraction: cf,
                coverage: cov,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn raster_bytes_round_trip(
            w in 1u32..6, h in 1u32..6, b in 1u32..4,
            seed in proptest::collection::vec(any::<u32>(), 1..200)
        ) {
            let n = (w * h * b) as usize;
            let samples: Vec<f32> = (0..n).map(|i| f32::from_bits(seed[i % seed.len()] & 0x7f7f_ffff)).collect();
            let raster = Raster { header: TileFileHeader::f32_bsq(w, h, b), samples };
            let bytes = encode_raster(&raster).unwrap();
            prop_assert_eq!(bytes.len(), 18 + 4 * n);
            let back = decode_raster(&bytes).unwrap();
            prop_assert_eq!(encode_raster(&back).unwrap(), bytes);
        }

        #[test]
        fn manifest_serialize_idempotent(recs in proptest::collection::vec(arb_record(), 0..8)) {
            let text: String = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
            let parsed: Vec<ManifestRecord> = text
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect();
            prop_assert_eq!(&parsed, &recs);
            let again: String = parsed.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
            prop_assert_eq!(again, text);
        }
    }
}
