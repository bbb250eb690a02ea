//! Mangrove-fraction strata, composition balancing and the country-disjoint
//! train/val/test split.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Category, RegionMeta};
use crate::signature::region_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StratifyConfig {
    pub strong_min: f64,
    pub mid_min: f64,
    /// `positive : negative`.
    pub pos_neg_ratio: [u32; 2],
    /// `strong : mid : weak`.
    pub strong_mid_weak_ratio: [u32; 3],
    /// Largest relative shortfall of a positive stratum, against its
    /// target, that is absorbed by the other strata instead of shrinking
    /// the whole positive set.
    pub ratio_tolerance: f64,
    pub seed: u64,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        StratifyConfig {
            strong_min: 0.15,
            mid_min: 0.05,
            pos_neg_ratio: [1, 1],
            strong_mid_weak_ratio: [2, 2, 1],
            ratio_tolerance: 0.03,
            seed: 0,
        }
    }
}

impl StratifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.mid_min && self.mid_min < self.strong_min && self.strong_min < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < mid_min ({}) < strong_min ({}) < 1",
                self.mid_min, self.strong_min
            )));
        }
        if self.pos_neg_ratio.contains(&0) || self.strong_mid_weak_ratio.iter().all(|&w| w == 0) {
            return Err(Error::Config("ratios must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ratio_tolerance) {
            return Err(Error::Config(format!(
                "ratio_tolerance {} outside [0, 1)",
                self.ratio_tolerance
            )));
        }
        Ok(())
    }

    pub fn categorize(&self, f: f64) -> Result<Category> {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::FractionOutOfRange(f));
        }
        Ok(if f >= self.strong_min {
            Category::StrongPositive
        } else if f >= self.mid_min {
            Category::MidPositive
        } else if f > 0.0 {
            Category::WeakPositive
        } else {
            Category::PureNegative
        })
    }
}

/// Stratum for a mangrove fraction under the default thresholds.
pub fn categorize(f: f64) -> Result<Category> {
    StratifyConfig::default().categorize(f)
}

/// Splits `total` by `weights` with largest-remainder rounding. Ties in the
/// remainder go to the earlier index.
pub fn largest_remainder(total: usize, weights: &[u32]) -> Vec<usize> {
    let wsum: u64 = weights.iter().map(|&w| w as u64).sum();
    if wsum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights
        .iter()
        .map(|&w| (total as u128 * w as u128 / wsum as u128) as usize)
        .collect();
    let mut rems: Vec<(u128, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((total as u128 * w as u128) % wsum as u128, i))
        .collect();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = total - out.iter().sum::<usize>();
    for &(_, i) in rems.iter().take(left) {
        out[i] += 1;
    }
    out
}

/// Per-category counts in `Category::ALL` order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub strong_positive: usize,
    pub mid_positive: usize,
    pub weak_positive: usize,
    pub pure_negative: usize,
}

impl CategoryCounts {
    pub fn from_array(a: [usize; 4]) -> Self {
        CategoryCounts {
            strong_positive: a[0],
            mid_positive: a[1],
            weak_positive: a[2],
            pure_negative: a[3],
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [
            self.strong_positive,
            self.mid_positive,
            self.weak_positive,
            self.pure_negative,
        ]
    }

    pub fn positives(&self) -> usize {
        self.strong_positive + self.mid_positive + self.weak_positive
    }

    pub fn of<'a>(items: impl IntoIterator<Item = &'a Category>) -> Self {
        let mut a = [0usize; 4];
        for c in items {
            a[category_index(*c)] += 1;
        }
        Self::from_array(a)
    }
}

fn category_index(c: Category) -> usize {
    Category::ALL.iter().position(|&x| x == c).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioOutcome {
    /// Ordered by region id.
    pub selected: Vec<RegionMeta>,
    pub supply: CategoryCounts,
    /// Largest-remainder targets for the chosen positive total.
    pub targets: CategoryCounts,
    pub counts: CategoryCounts,
    /// `target − supply` for strata that could not meet their target.
    pub shortfall: CategoryCounts,
}

/// Tries to allocate `positives` across the three positive strata.
fn allocate(positives: usize, supply: &[usize; 3], weights: &[u32; 3], tol: f64) -> Option<([usize; 3], [usize; 3])> {
    let target = largest_remainder(positives, weights);
    let mut n = [0usize; 3];
    let mut cap = [0usize; 3];
    let mut deficit = 0usize;
    for k in 0..3 {
        if supply[k] < target[k] {
            if (target[k] - supply[k]) as f64 > tol * target[k] as f64 {
                return None;
            }
            deficit += target[k] - supply[k];
        }
        n[k] = target[k].min(supply[k]);
        cap[k] = supply[k].min((target[k] as f64 * (1.0 + tol)).floor() as usize);
    }
    while deficit > 0 {
        let open: Vec<usize> = (0..3).filter(|&k| cap[k] > n[k] && weights[k] > 0).collect();
        if open.is_empty() {
            return None;
        }
        let w: Vec<u32> = open.iter().map(|&k| weights[k]).collect();
        let mut given = 0;
        for (share, &k) in largest_remainder(deficit, &w).into_iter().zip(&open) {
            let take = share.min(cap[k] - n[k]);
            n[k] += take;
            given += take;
        }
        if given == 0 {
            return None;
        }
        deficit -= given;
    }
    Some((n, [target[0], target[1], target[2]]))
}

fn sample_sorted(mut items: Vec<&RegionMeta>, k: usize, seed: u64) -> Vec<&RegionMeta> {
    items.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    if items.len() <= k {
        return items;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// Subsamples regions to the configured positive:negative and
/// strong:mid:weak ratios.
pub fn enforce_ratios(regions: &[RegionMeta], cfg: &StratifyConfig) -> Result<RatioOutcome> {
    cfg.validate()?;
    let supply = CategoryCounts::of(regions.iter().map(|r| &r.category));
    let s = supply.as_array();
    let pos_supply = supply.positives();
    let neg_supply = supply.pure_negative;
    if pos_supply == 0 || neg_supply == 0 {
        return Err(Error::CannotBalance {
            positives: pos_supply,
            negatives: neg_supply,
        });
    }
    let [a, b] = cfg.pos_neg_ratio.map(|x| x as usize);
    let pos_cap = pos_supply.min(neg_supply * a / b);
    let pos_supply3 = [s[0], s[1], s[2]];
    let (pos_counts, pos_targets) = (1..=pos_cap)
        .rev()
        .find_map(|p| allocate(p, &pos_supply3, &cfg.strong_mid_weak_ratio, cfg.ratio_tolerance))
        .ok_or(Error::CannotBalance {
            positives: pos_supply,
            negatives: neg_supply,
        })?;
    let positives: usize = pos_counts.iter().sum();
    let negatives = (positives * b / a).min(neg_supply);

    let counts = [pos_counts[0], pos_counts[1], pos_counts[2], negatives];
    let targets = [pos_targets[0], pos_targets[1], pos_targets[2], positives * b / a];
    let mut selected: Vec<RegionMeta> = Vec::with_capacity(counts.iter().sum());
    for (k, cat) in Category::ALL.iter().enumerate() {
        let stratum: Vec<&RegionMeta> = regions.iter().filter(|r| r.category == *cat).collect();
        let seed = region_seed(cfg.seed, &format!("stratum:{k}"));
        selected.extend(sample_sorted(stratum, counts[k], seed).into_iter().cloned());
    }
    selected.sort_by(|x, y| x.region_id.cmp(&y.region_id));
    let shortfall = std::array::from_fn(|k| targets[k].saturating_sub(s[k]));
    Ok(RatioOutcome {
        selected,
        supply,
        targets: CategoryCounts::from_array(targets),
        counts: CategoryCounts::from_array(counts),
        shortfall: CategoryCounts::from_array(shortfall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub region_id: String,
    pub country_iso3: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    /// Ordered by region id.
    pub assignments: Vec<SplitAssignment>,
    pub countries: BTreeMap<String, Split>,
    /// Achieved region-count fraction per split, train/val/test.
    pub achieved: [f64; 3],
    pub target: [f64; 3],
    /// Set when some split misses its target by more than five points.
    pub degenerate: bool,
}

pub const SPLIT_DEGENERATE_TOLERANCE: f64 = 0.05;

/// Assigns whole countries to train/val/test by greedy packing on region
/// counts: largest country first, each into the split furthest below its
/// target. Equal-sized countries are ordered by a seeded key.
pub fn country_disjoint_split(regions: &[RegionMeta], ratios: [u32; 3], seed: u64) -> Result<SplitOutcome> {
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in regions {
        if r.country_iso3.is_empty() {
            return Err(Error::Config(format!("region {} has no country", r.region_id)));
        }
        *sizes.entry(r.country_iso3.as_str()).or_default() += 1;
    }
    if sizes.len() < 3 {
        return Err(Error::TooFewCountries(sizes.len()));
    }
    let wsum: u32 = ratios.iter().sum();
    if wsum == 0 {
        return Err(Error::Config("split ratios must not all be zero".into()));
    }
    let target: [f64; 3] = ratios.map(|w| w as f64 / wsum as f64);
    let total = regions.len() as f64;

    let mut order: Vec<(&str, usize, u64)> = sizes.iter().map(|(&c, &n)| (c, n, region_seed(seed, c))).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(b.0)));

    let mut filled = [0usize; 3];
    let mut countries = BTreeMap::new();
    for (country, n, _) in order {
        let k = (0..3)
            .max_by(|&i, &j| {
                let di = target[i] * total - filled[i] as f64;
                let dj = target[j] * total - filled[j] as f64;
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .unwrap();
        filled[k] += n;
        countries.insert(country.to_string(), Split::ALL[k]);
    }

    let mut assignments: Vec<SplitAssignment> = regions
        .iter()
        .map(|r| SplitAssignment {
            region_id: r.region_id.clone(),
            country_iso3: r.country_iso3.clone(),
            split: countries[&r.country_iso3],
        })
        .collect();
    assignments.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    let achieved = filled.map(|n| n as f64 / total);
    let degenerate = (0..3).any(|k| (achieved[k] - target[k]).abs() > SPLIT_DEGENERATE_TOLERANCE);
    Ok(SplitOutcome {
        assignments,
        countries,
        achieved,
        target,
        degenerate,
    })
}

/// One line of the curated dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub region_id: String,
    pub country_iso3: String,
    pub mangrove_fraction: f64,
    pub category: Category,
    pub sensing_date: NaiveDate,
    pub image_path: String,
    pub mask_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl DatasetRecord {
    pub fn meta(&self) -> RegionMeta {
        RegionMeta {
            region_id: self.region_id.clone(),
            country_iso3: self.country_iso3.clone(),
            mangrove_fraction: self.mangrove_fraction,
            category: self.category,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositionSummary {
    pub total: usize,
    pub per_category: CategoryCounts,
    pub per_split: BTreeMap<String, CategoryCounts>,
    pub per_country: BTreeMap<String, CategoryCounts>,
}

pub fn composition_stats(records: &[DatasetRecord]) -> CompositionSummary {
    let mut per_split: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    let mut per_country: HashMap<&str, [usize; 4]> = HashMap::new();
    let mut per_category = [0usize; 4];
    for r in records {
        let k = category_index(r.category);
        per_category[k] += 1;
        let split = match r.split {
            Some(s) => serde_json::to_value(s).unwrap().as_str().unwrap().to_string(),
            None => "unassigned".to_string(),
        };
        per_split.entry(split).or_default()[k] += 1;
        per_country.entry(r.country_iso3.as_str()).or_default()[k] += 1;
    }
    CompositionSummary {
        total: records.len(),
        per_category: CategoryCounts::from_array(per_category),
        per_split: per_split
            .into_iter()
            .map(|(k, v)| (k, CategoryCounts::from_array(v)))
            .collect(),
        per_country: per_country
            .into_iter()
            .map(|(k, v)| (k.to_string(), CategoryCounts::from_array(v)))
            .collect(),
    }
}
