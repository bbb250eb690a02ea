//! Fisher-ratio scoring of candidate detection maps and per-region selection.

use std::cmp::Ordering;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::CandidatePool;
use crate::ingest::ManifestRecord;
use crate::matched_filter::{background_stats, detect, MatchedFilterConfig};
use crate::raster::{class_pixel_sets, AnnualMask, Category, Coord, DetectionMap, Method, RegionMeta, Scene};
use crate::signature::{reference_pixels, target_spectrum, ReferenceSet, SignatureConfig};
use crate::spectral_index::{mvi_map, BandRoles};

/// Population moments of the response over each class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mu_m: f64,
    pub mu_b: f64,
    pub var_m: f64,
    pub var_b: f64,
    pub n_m: usize,
    pub n_b: usize,
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn defined_values(dmap: &DetectionMap, coords: &[Coord]) -> Vec<f64> {
    coords.iter().filter_map(|&(r, c)| dmap.value(r, c)).collect()
}

/// Mean and variance of `dmap` over each class, skipping undefined pixels.
pub fn class_stats(dmap: &DetectionMap, mangrove: &[Coord], background: &[Coord]) -> Result<ClassStats> {
    let m = defined_values(dmap, mangrove);
    let b = defined_values(dmap, background);
    if m.is_empty() || b.is_empty() {
        return Err(Error::SignatureUnobservable);
    }
    let (mu_m, var_m) = moments(&m);
    let (mu_b, var_b) = moments(&b);
    Ok(ClassStats {
        mu_m,
        mu_b,
        var_m,
        var_b,
        n_m: m.len(),
        n_b: b.len(),
    })
}

/// Fisher discriminant ratio. Zero spread gives `+∞` for distinct means and
/// `0` for equal ones.
pub fn fdr(stats: &ClassStats) -> f64 {
    let gap = stats.mu_m - stats.mu_b;
    let spread = stats.var_m + stats.var_b;
    if spread == 0.0 {
        return if gap == 0.0 { 0.0 } else { f64::INFINITY };
    }
    gap * gap / spread
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Scored,
    InvalidInsufficientBackground,
    InvalidSignatureUnobservable,
    NegativePath,
}

/// `+∞` is written as the string `"inf"`.
mod j_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            None => None,
            Some(Repr::Num(x)) => Some(x),
            Some(Repr::Text(t)) if t == "inf" => Some(f64::INFINITY),
            Some(Repr::Text(t)) => return Err(serde::de::Error::custom(format!("bad J value {t:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub region_id: String,
    pub sensing_date: NaiveDate,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_fraction: Option<f64>,
    #[serde(default)]
    pub stats: Option<ClassStats>,
    #[serde(default, with = "j_serde")]
    pub j_value: Option<f64>,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl CandidateScore {
    fn unscored(rec: &ManifestRecord, method: Method, status: CandidateStatus, reason: Option<String>) -> Self {
        CandidateScore {
            region_id: rec.region_id.clone(),
            sensing_date: rec.sensing_date,
            method,
            cloud_fraction: rec.cloud_fraction,
            stats: None,
            j_value: None,
            status,
            reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    ArgmaxJ,
    CloudMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub region_id: String,
    pub chosen_date: NaiveDate,
    pub method: Method,
    pub selection_rule: SelectionRule,
    pub references: Option<ReferenceSet>,
    pub all_scores: Vec<CandidateScore>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub signature: SignatureConfig,
    pub matched_filter: MatchedFilterConfig,
    pub band_roles: BandRoles,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        self.signature.validate()?;
        self.matched_filter.validate()
    }
}

/// Response map for one candidate, or the status explaining why there is none.
pub fn response_map(
    scene: &Scene,
    mask: &AnnualMask,
    refs: Option<&ReferenceSet>,
    method: Method,
    cfg: &SelectionConfig,
) -> Result<std::result::Result<DetectionMap, (CandidateStatus, Error)>> {
    if scene.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: mask.dims(),
            actual: scene.dims(),
        });
    }
    use CandidateStatus::*;
    match method {
        Method::Mvi => Ok(Ok(mvi_map(scene, &cfg.band_roles)?)),
        Method::MatchedFilter => {
            let refs = refs.ok_or(Error::NoTargetClass)?;
            let target = match target_spectrum(scene, refs) {
                Ok(t) => t,
                Err(e @ Error::SignatureUnobservable) => return Ok(Err((InvalidSignatureUnobservable, e))),
                Err(e) => return Err(e),
            };
            let stats = match background_stats(scene, mask, &cfg.matched_filter) {
                Ok(s) => s,
                Err(
                    e @ (Error::InsufficientBackground { .. }
                    | Error::DegenerateBackground
                    | Error::NotPositiveDefinite),
                ) => return Ok(Err((InvalidInsufficientBackground, e))),
                Err(e) => return Err(e),
            };
            match detect(scene, &stats, &target) {
                Ok(d) => Ok(Ok(d)),
                Err(e @ Error::DegenerateSignature) => Ok(Err((InvalidSignatureUnobservable, e))),
                Err(e) => Err(e),
            }
        }
    }
}

/// Scores one candidate scene of a positive region.
pub fn score_candidate(
    rec: &ManifestRecord,
    scene: &Scene,
    mask: &AnnualMask,
    refs: Option<&ReferenceSet>,
    method: Method,
    cfg: &SelectionConfig,
) -> Result<(CandidateScore, Option<DetectionMap>)> {
    let dmap = match response_map(scene, mask, refs, method, cfg)? {
        Ok(d) => d,
        Err((status, e)) => return Ok((CandidateScore::unscored(rec, method, status, Some(e.to_string())), None)),
    };
    let (mangrove, background) = class_pixel_sets(mask, scene.valid())?;
    let score = match class_stats(&dmap, &mangrove, &background) {
        Ok(stats) => CandidateScore {
            stats: Some(stats),
            j_value: Some(fdr(&stats)),
            status: CandidateStatus::Scored,
            ..CandidateScore::unscored(rec, method, CandidateStatus::Scored, None)
        },
        Err(e) => CandidateScore::unscored(
            rec,
            method,
            CandidateStatus::InvalidSignatureUnobservable,
            Some(e.to_string()),
        ),
    };
    Ok((score, Some(dmap)))
}

/// Ranks `(J, date)` so that larger J wins and, on ties, the earlier date.
fn better(a: (f64, NaiveDate), b: (f64, NaiveDate)) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => a.1 < b.1,
        _ => false,
    }
}

/// Earliest-dated maximum J among scored candidates.
pub fn argmax_j(scores: &[CandidateScore]) -> Option<NaiveDate> {
    let mut best: Option<(f64, NaiveDate)> = None;
    for s in scores {
        let (CandidateStatus::Scored, Some(j)) = (s.status, s.j_value) else {
            continue;
        };
        if j.is_nan() {
            continue;
        }
        if best.is_none_or(|b| better((j, s.sensing_date), b)) {
            best = Some((j, s.sensing_date));
        }
    }
    best.map(|b| b.1)
}

/// Lowest cloud fraction, earliest date on ties.
pub fn cloud_min(records: &[ManifestRecord]) -> Option<NaiveDate> {
    records
        .iter()
        .min_by(|a, b| {
            let ca = a.cloud_fraction.unwrap_or(f64::INFINITY);
            let cb = b.cloud_fraction.unwrap_or(f64::INFINITY);
            ca.total_cmp(&cb).then(a.sensing_date.cmp(&b.sensing_date))
        })
        .map(|r| r.sensing_date)
}

/// Selects the best acquisition of a region, streaming each candidate's
/// response map to `sink`.
pub fn select_best_with<L, S>(
    pool: &CandidatePool,
    mask: &AnnualMask,
    method: Method,
    cfg: &SelectionConfig,
    load: L,
    mut sink: S,
) -> Result<SelectionResult>
where
    L: Fn(&ManifestRecord) -> Result<Scene>,
    S: FnMut(&ManifestRecord, &DetectionMap) -> Result<()>,
{
    if pool.candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    if !mask.has_target() {
        let all_scores = pool
            .candidates
            .iter()
            .map(|r| CandidateScore::unscored(r, method, CandidateStatus::NegativePath, None))
            .collect();
        return Ok(SelectionResult {
            region_id: pool.region_id.clone(),
            chosen_date: cloud_min(&pool.candidates).expect("non-empty pool"),
            method,
            selection_rule: SelectionRule::CloudMin,
            references: None,
            all_scores,
        });
    }

    let refs = match method {
        Method::MatchedFilter => Some(reference_pixels(mask, &cfg.signature)?),
        Method::Mvi => None,
    };
    let mut all_scores = Vec::with_capacity(pool.candidates.len());
    for rec in &pool.candidates {
        let scene = load(rec)?;
        let (score, dmap) = score_candidate(rec, &scene, mask, refs.as_ref(), method, cfg)?;
        if let Some(d) = &dmap {
            sink(rec, d)?;
        }
        all_scores.push(score);
    }
    let (chosen_date, selection_rule) = match argmax_j(&all_scores) {
        Some(d) => (d, SelectionRule::ArgmaxJ),
        None => (
            cloud_min(&pool.candidates).expect("non-empty pool"),
            SelectionRule::CloudMin,
        ),
    };
    Ok(SelectionResult {
        region_id: pool.region_id.clone(),
        chosen_date,
        method,
        selection_rule,
        references: refs,
        all_scores,
    })
}

pub fn select_best<L>(
    pool: &CandidatePool,
    mask: &AnnualMask,
    method: Method,
    cfg: &SelectionConfig,
    load: L,
) -> Result<SelectionResult>
where
    L: Fn(&ManifestRecord) -> Result<Scene>,
{
    select_best_with(pool, mask, method, cfg, load, |_, _| Ok(()))
}

pub const CLOUD_MIN_NOTE: &str = "cloud_min: no scored candidate or no target class; lowest cloud fraction chosen";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    #[serde(flatten)]
    pub score: CandidateScore,
    pub chosen: bool,
}

/// One region's line in the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region_id: String,
    pub country_iso3: String,
    pub mangrove_fraction: f64,
    pub category: Category,
    pub chosen_date: NaiveDate,
    pub image_path: String,
    pub mask_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_path: Option<String>,
    pub method: Method,
    pub selection_rule: SelectionRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<String>,
    #[serde(default)]
    pub references: Option<ReferenceSet>,
    pub candidates: Vec<ScoreEntry>,
}

impl RegionReport {
    pub fn meta(&self) -> RegionMeta {
        RegionMeta {
            region_id: self.region_id.clone(),
            country_iso3: self.country_iso3.clone(),
            mangrove_fraction: self.mangrove_fraction,
            category: self.category,
        }
    }
}

/// A finished region awaiting report assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSelection {
    pub meta: RegionMeta,
    pub result: SelectionResult,
    pub chosen: ManifestRecord,
}

/// Builds report lines ordered by region id.
pub fn rank_report(selections: &[RegionSelection]) -> Vec<RegionReport> {
    let mut out: Vec<RegionReport> = selections
        .iter()
        .map(|s| {
            let r = &s.result;
            RegionReport {
                region_id: r.region_id.clone(),
                country_iso3: s.meta.country_iso3.clone(),
                mangrove_fraction: s.meta.mangrove_fraction,
                category: s.meta.category,
                chosen_date: r.chosen_date,
                image_path: s.chosen.image_path.clone(),
                mask_path: s.chosen.mask_path.clone(),
                validity_path: s.chosen.validity_path.clone(),
                method: r.method,
                selection_rule: r.selection_rule,
                deviation: (r.selection_rule == SelectionRule::CloudMin).then(|| CLOUD_MIN_NOTE.to_string()),
                references: r.references.clone(),
                candidates: r
                    .all_scores
                    .iter()
                    .map(|sc| ScoreEntry {
                        score: sc.clone(),
                        chosen: sc.sensing_date == r.chosen_date,
                    })
                    .collect(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;
    use proptest::prelude::*;

    fn map(values: Vec<f64>) -> DetectionMap {
        let n = values.len();
        DetectionMap {
            grid: Grid::new(n, 1, values).unwrap(),
            method: Method::MatchedFilter,
        }
    }

    fn coords(range: std::ops::Range<usize>) -> Vec<Coord> {
        range.map(|c| (0, c)).collect()
    }

    #[test]
    fn constant_classes() {
        let s = class_stats(&map(vec![1.0, 1.0, 0.0, 0.0]), &coords(0..2), &coords(2..4)).unwrap();
        assert_eq!((s.mu_m, s.mu_b, s.var_m, s.var_b), (1.0, 0.0, 0.0, 0.0));
        assert_eq!(fdr(&s), f64::INFINITY);
    }

    #[test]
    fn population_variance() {
        let s = class_stats(&map(vec![1.0, 3.0, 0.0, 0.5]), &coords(0..2), &coords(2..4)).unwrap();
        assert_eq!((s.mu_m, s.var_m), (2.0, 1.0));
    }

    #[test]
    fn undefined_pixels_skipped_and_empty_class_rejected() {
        let s = class_stats(&map(vec![1.0, f64::NAN, 0.0]), &coords(0..2), &coords(2..3)).unwrap();
        assert_eq!(s.n_m, 1);
        assert!(matches!(
            class_stats(&map(vec![f64::NAN, 0.0]), &coords(0..1), &coords(1..2)),
            Err(Error::SignatureUnobservable)
        ));
    }

    fn stats(mu_m: f64, mu_b: f64, var_m: f64, var_b: f64) -> ClassStats {
        ClassStats {
            mu_m,
            mu_b,
            var_m,
            var_b,
            n_m: 1,
            n_b: 1,
        }
    }

    #[test]
    fn fdr_conventions() {
        assert_eq!(fdr(&stats(1.0, 0.0, 0.5, 0.5)), 1.0);
        assert_eq!(fdr(&stats(0.3, 0.3, 0.5, 0.1)), 0.0);
        assert_eq!(fdr(&stats(0.3, 0.3, 0.0, 0.0)), 0.0);
        assert_eq!(fdr(&stats(0.3, 0.1, 0.0, 0.0)), f64::INFINITY);
    }

    fn scored(day: u32, j: Option<f64>) -> CandidateScore {
        CandidateScore {
            region_id: "r".into(),
            sensing_date: NaiveDate::from_ymd_opt(2020, 1, day).unwrap(),
            method: Method::MatchedFilter,
            cloud_fraction: None,
            stats: None,
            j_value: j,
            status: if j.is_some() {
                CandidateStatus::Scored
            } else {
                CandidateStatus::InvalidInsufficientBackground
            },
            reason: None,
        }
    }

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, d).unwrap()
    }

    #[test]
    fn argmax_picks_larger_j() {
        assert_eq!(argmax_j(&[scored(1, Some(0.46)), scored(2, Some(2.87))]), Some(day(2)));
        assert_eq!(argmax_j(&[scored(1, Some(1.92)), scored(2, Some(0.11))]), Some(day(1)));
    }

    #[test]
    fn argmax_ties_and_infinities() {
        assert_eq!(argmax_j(&[scored(5, Some(1.0)), scored(3, Some(1.0))]), Some(day(3)));
        let s = [
            scored(4, Some(f64::INFINITY)),
            scored(2, Some(1e300)),
            scored(9, Some(f64::INFINITY)),
        ];
        assert_eq!(argmax_j(&s), Some(day(4)));
        assert_eq!(argmax_j(&[scored(1, None)]), None);
    }

    #[test]
    fn j_value_json() {
        let mut s = scored(1, Some(f64::INFINITY));
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"j_value\":\"inf\""));
        assert_eq!(serde_json::from_str::<CandidateScore>(&text).unwrap(), s);
        s.j_value = Some(2.5);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<CandidateScore>(&text).unwrap(), s);
    }

    proptest! {
        #[test]
        fn argmax_order_independent_and_monotone(
            js in proptest::collection::vec((1u32..28, 0u8..6), 1..12),
            rotate in 0usize..12,
        ) {
            let mut seen = std::collections::HashSet::new();
            let scores: Vec<CandidateScore> = js
                .into_iter()
                .filter(|(d, _)| seen.insert(*d))
                .map(|(d, j)| scored(d, Some(j as f64 * 0.5)))
                .collect();
            let base = argmax_j(&scores).unwrap();
            let mut rotated = scores.clone();
            rotated.rotate_left(rotate % scores.len());
            prop_assert_eq!(argmax_j(&rotated), Some(base));
            let transformed: Vec<CandidateScore> = scores
                .iter()
                .map(|s| CandidateScore { j_value: s.j_value.map(|j| (j + 1.0).ln() * 3.0 + 7.0), ..s.clone() })
                .collect();
            prop_assert_eq!(argmax_j(&transformed), Some(base));
            let best = scores.iter().find(|s| s.sensing_date == base).unwrap().j_value.unwrap();
            prop_assert!(scores.iter().all(|s| s.j_value.unwrap() <= best));
        }

        #[test]
        fn j_affine_invariant(
            values in proptest::collection::vec(-5.0f64..5.0, 6..40),
            a in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
            b in -100.0f64..100.0,
        ) {
            let half = values.len() / 2;
            let m = coords(0..half);
            let bg = coords(half..values.len());
            let j0 = fdr(&class_stats(&map(values.clone()), &m, &bg).unwrap());
            let j1 = fdr(&class_stats(&map(values.iter().map(|v| a * v + b).collect()), &m, &bg).unwrap());
            prop_assume!(j0.is_finite() && j0 > 1e-6);
            prop_assert!((j0 - j1).abs() <= 1e-9 * j0.max(1.0), "{} vs {}", j0, j1);
        }
    }
}
