//! Candidate pool construction: cloud ceiling, coverage floor, target year.

use std::collections::BTreeMap;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ManifestRecord;
use crate::raster::{Grid, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Cloud-fraction ceiling, exclusive.
    pub kappa: f64,
    /// Coverage floor, inclusive.
    pub omega: f64,
    pub year: i32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            kappa: 0.05,
            omega: 0.50,
            year: 2020,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) || !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!(
                "kappa {} and omega {} must lie in [0, 1]",
                self.kappa, self.omega
            )));
        }
        Ok(())
    }

    /// The pool membership predicate.
    pub fn accepts(&self, rec: &ManifestRecord) -> bool {
        match (rec.cloud_fraction, rec.coverage) {
            (Some(c), Some(o)) => c < self.kappa && o >= self.omega && rec.sensing_date.year() == self.year,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub region_id: String,
    /// Ascending by sensing date.
    pub candidates: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub regions_total: usize,
    pub regions_empty: usize,
    pub candidates_kept: usize,
    pub candidates_dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSet {
    /// Non-empty pools, ordered by region id.
    pub pools: Vec<CandidatePool>,
    /// Regions whose every record failed the predicate, ordered.
    pub empty_regions: Vec<String>,
    pub summary: FilterSummary,
}

/// Out-of-footprint pixels under the merged-grid heuristic: fully invalid
/// rows and columns contiguous with a tile edge. A fully invalid tile is
/// attributed to cloud.
fn inferred_footprint(valid: &Grid<bool>) -> Grid<bool> {
    let (h, w) = valid.dims();
    if valid.count_true() == 0 {
        return Grid::filled(w, h, true);
    }
    let row_empty: Vec<bool> = (0..h).map(|r| (0..w).all(|c| !valid.get(r, c))).collect();
    let col_empty: Vec<bool> = (0..w).map(|c| (0..h).all(|r| !valid.get(r, c))).collect();
    let edge_block = |empty: &[bool]| {
        let n = empty.len();
        let lead = empty.iter().take_while(|&&e| e).count();
        let trail = empty.iter().rev().take_while(|&&e| e).count();
        (0..n).map(move |i| i < lead || i >= n - trail).collect::<Vec<_>>()
    };
    let rows_out = edge_block(&row_empty);
    let cols_out = edge_block(&col_empty);
    Grid::from_fn(w, h, |r, c| !(rows_out[r] || cols_out[c]))
}

fn footprint_of(scene: &Scene) -> Grid<bool> {
    match scene.footprint() {
        Some(f) => f.clone(),
        None => inferred_footprint(scene.valid()),
    }
}

/// Share of the tile that is inside the footprint but invalid.
pub fn cloud_fraction(scene: &Scene) -> f64 {
    let foot = footprint_of(scene);
    let clouded = foot
        .as_slice()
        .iter()
        .zip(scene.valid().as_slice())
        .filter(|(&f, &v)| f && !v)
        .count();
    clouded as f64 / foot.len() as f64
}

/// Share of the tile inside the sensor footprint.
pub fn coverage(scene: &Scene) -> f64 {
    let foot = footprint_of(scene);
    foot.count_true() as f64 / foot.len() as f64
}

/// Groups records by region and keeps the ones passing the predicate.
pub fn build_pool(records: &[ManifestRecord], cfg: &FilterConfig) -> PoolSet {
    let mut by_region: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
    for rec in records {
        by_region.entry(rec.region_id.as_str()).or_default().push(rec);
    }
    let mut summary = FilterSummary {
        regions_total: by_region.len(),
        ..Default::default()
    };
    let mut pools = Vec::new();
    let mut empty_regions = Vec::new();
    for (region, recs) in by_region {
        let mut kept: Vec<ManifestRecord> = recs.iter().filter(|r| cfg.accepts(r)).map(|r| (*r).clone()).collect();
        summary.candidates_dropped += recs.len() - kept.len();
        summary.candidates_kept += kept.len();
        if kept.is_empty() {
            summary.regions_empty += 1;
            empty_regions.push(region.to_string());
            continue;
        }
        kept.sort_by(|a, b| {
            a.sensing_date
                .cmp(&b.sensing_date)
                .then_with(|| a.image_path.cmp(&b.image_path))
        });
        pools.push(CandidatePool {
            region_id: region.to_string(),
            candidates: kept,
        });
    }
    PoolSet {
        pools,
        empty_regions,
        summary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn scene_with(valid: Grid<bool>) -> Scene {
        let (h, w) = valid.dims();
        let date = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
        Scene::new("r", date, w, h, 1, vec![0.1; w * h], valid).unwrap()
    }

    fn rec(region: &str, month: u32, c: f64, o: f64) -> ManifestRecord {
        ManifestRecord {
            region_id: region.into(),
            country_iso3: "PHL".into(),
            sensing_date: NaiveDate::from_ymd_opt(2020, month, 1).unwrap(),
            image_path: format!("{region}_{month}.msr"),
            mask_path: format!("{region}.mask"),
            validity_path: None,
            cloud_fraction: Some(c),
            coverage: Some(o),
        }
    }

    #[test]
    fn all_valid_scene() {
        let s = scene_with(Grid::filled(8, 8, true));
        assert_eq!(cloud_fraction(&s), 0.0);
        assert_eq!(coverage(&s), 1.0);
    }

    #[test]
    fn scattered_clouds_count() {
        // 6554 invalid pixels, none forming a full edge row or column.
        let mut n = 0;
        let valid = Grid::from_fn(256, 256, |r, c| {
            let cloud = (r * 256 + c) % 10 == 3 && n < 6554;
            if cloud {
                n += 1;
            }
            !cloud
        });
        assert_eq!(valid.len() - valid.count_true(), 6554);
        let s = scene_with(valid);
        assert!((cloud_fraction(&s) - 0.1).abs() < 1e-4);
        assert_eq!(cloud_fraction(&s), 6554.0 / 65536.0);
        assert_eq!(coverage(&s), 1.0);
    }

    #[test]
    fn fully_clouded() {
        let s = scene_with(Grid::filled(16, 16, false));
        assert_eq!(cloud_fraction(&s), 1.0);
        let s = s.with_footprint(Grid::filled(16, 16, true)).unwrap();
        assert_eq!(cloud_fraction(&s), 1.0);
        assert_eq!(coverage(&s), 1.0);
    }

    #[test]
    fn half_swath() {
        let s = scene_with(Grid::from_fn(16, 16, |_, c| c < 8));
        assert_eq!(coverage(&s), 0.5);
        assert_eq!(cloud_fraction(&s), 0.0);
    }

    #[test]
    fn three_quarter_swath_with_explicit_footprint() {
        let foot = Grid::from_fn(16, 16, |r, _| r >= 4);
        assert_eq!(foot.count_true(), 192);
        let mut valid = foot.clone();
        valid.set(10, 10, false);
        let s = scene_with(valid).with_footprint(foot).unwrap();
        assert_eq!(coverage(&s), 0.75);
        assert_eq!(cloud_fraction(&s), 1.0 / 256.0);
    }

    #[test]
    fn interior_gap_is_cloud_edge_gap_is_footprint() {
        // Leading two columns missing, plus an interior invalid column.
        let s = scene_with(Grid::from_fn(8, 4, |_, c| c >= 2 && c != 5));
        assert_eq!(coverage(&s), 24.0 / 32.0);
        assert_eq!(cloud_fraction(&s), 4.0 / 32.0);
    }

    #[test]
    fn boundary_semantics() {
        let cfg = FilterConfig::default();
        assert!(cfg.accepts(&rec("a", 1, 0.04, 0.60)));
        assert!(!cfg.accepts(&rec("a", 1, 0.05, 0.60)));
        assert!(cfg.accepts(&rec("a", 1, 0.01, 0.50)));
        assert!(!cfg.accepts(&rec("a", 1, 0.01, 0.4999)));
        let mut other_year = rec("a", 1, 0.0, 1.0);
        other_year.sensing_date = NaiveDate::from_ymd_opt(2019, 12, 31).unwrap();
        assert!(!cfg.accepts(&other_year));
        let mut missing = rec("a", 1, 0.0, 1.0);
        missing.coverage = None;
        assert!(!cfg.accepts(&missing));
    }

    #[test]
    fn pools_sorted_and_empty_reported() {
        let recs = vec![
            rec("b", 5, 0.0, 1.0),
            rec("b", 2, 0.0, 1.0),
            rec("a", 3, 0.9, 1.0),
            rec("b", 9, 0.2, 1.0),
        ];
        let out = build_pool(&recs, &FilterConfig::default());
        assert_eq!(out.empty_regions, vec!["a".to_string()]);
        assert_eq!(out.pools.len(), 1);
        let months: Vec<u32> = out.pools[0].candidates.iter().map(|r| r.sensing_date.month()).collect();
        assert_eq!(months, vec![2, 5]);
        assert_eq!(
            out.summary,
            FilterSummary {
                regions_total: 2,
                regions_empty: 1,
                candidates_kept: 2,
                candidates_dropped: 2
            }
        );
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig {
            kappa: 1.2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FilterConfig::default().validate().is_ok());
    }

    fn arb_records() -> impl Strategy<Value = Vec<ManifestRecord>> {
        proptest::collection::vec((0usize..4, 1u32..=12, 0.0f64..0.2, 0.3f64..1.0), 0..40).prop_map(|v| {
            let mut seen = std::collections::HashSet::new();
            v.into_iter()
                .filter(|(r, m, _, _)| seen.insert((*r, *m)))
                .map(|(r, m, c, o)| rec(&format!("r{r}"), m, c, o))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn pool_equals_brute_force(recs in arb_records(), kappa in 0.0f64..0.2, omega in 0.3f64..1.0) {
            let cfg = FilterConfig { kappa, omega, year: 2020 };
            let out = build_pool(&recs, &cfg);
            let mut expected: Vec<&ManifestRecord> = recs
                .iter()
                .filter(|r| r.cloud_fraction.unwrap() < kappa && r.coverage.unwrap() >= omega)
                .collect();
            expected.sort_by(|a, b| (&a.region_id, a.sensing_date).cmp(&(&b.region_id, b.sensing_date)));
            let got: Vec<&ManifestRecord> = out.pools.iter().flat_map(|p| p.candidates.iter()).collect();
            prop_assert_eq!(got, expected);
            prop_assert_eq!(out.summary.candidates_kept + out.summary.candidates_dropped, recs.len());
        }

        #[test]
        fn monotone_in_thresholds(recs in arb_records(), k1 in 0.0f64..0.2, dk in 0.0f64..0.1, o1 in 0.3f64..1.0, dout in 0.0f64..0.3) {
            let tight = build_pool(&recs, &FilterConfig { kappa: k1, omega: o1, year: 2020 });
            let loose = build_pool(&recs, &FilterConfig { kappa: k1 + dk, omega: (o1 - dout).max(0.0), year: 2020 });
            for pool in &tight.pools {
                let other = loose.pools.iter().find(|p| p.region_id == pool.region_id).unwrap();
                prop_assert!(other.candidates.len() >= pool.candidates.len());
            }
        }
    }
}
