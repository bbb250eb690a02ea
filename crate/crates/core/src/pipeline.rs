//! Batch orchestration: filter → select → stratify → split → stats.
//!
//! Regions are independent work units run on a rayon pool. Results are
//! collected in region order, so outputs do not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{build_pool, cloud_fraction, coverage, CandidatePool, FilterConfig, FilterSummary, PoolSet};
use crate::ingest::{self, ManifestRecord, Provenance, Raster, TileFileHeader};
use crate::ranking::{rank_report, select_best_with, RegionReport, RegionSelection, SelectionConfig};
use crate::raster::{mangrove_fraction, DetectionMap, Method, RegionMeta};
use crate::stratify::{
    composition_stats, country_disjoint_split, enforce_ratios, CompositionSummary, DatasetRecord, RatioOutcome,
    SplitOutcome, StratifyConfig,
};

pub const TOOL: &str = "mango-curate";
/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "MANGO_CURATE_WORKERS";

fn default_method() -> Method {
    Method::MatchedFilter
}

fn default_split_ratios() -> [u32; 3] {
    [8, 1, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    pub selection: SelectionConfig,
    #[serde(default = "default_method")]
    pub method: Method,
    pub stratify: StratifyConfig,
    #[serde(default = "default_split_ratios")]
    pub split_ratios: [u32; 3],
    pub split_seed: u64,
    /// Not part of the config hash: outputs are identical at any count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            filter: FilterConfig::default(),
            selection: SelectionConfig::default(),
            method: default_method(),
            stratify: StratifyConfig::default(),
            split_ratios: default_split_ratios(),
            split_seed: 0,
            workers: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.selection.validate()?;
        self.stratify.validate()?;
        if self.split_ratios.iter().all(|&w| w == 0) {
            return Err(Error::Config("split ratios must not all be zero".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form, worker count excluded.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig {
            workers: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            (
                "reference_sampling".to_string(),
                self.selection.signature.rng_seed_namespace,
            ),
            ("stratify".to_string(), self.stratify.seed),
            ("split".to_string(), self.split_seed),
        ])
    }

    pub fn provenance(&self, command: &str) -> Provenance {
        Provenance {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: self.hash(),
            seeds: self.seeds(),
        }
    }

    /// Explicit count, else the environment variable, else all cores.
    pub fn worker_count(&self) -> usize {
        self.workers
            .or_else(|| std::env::var(WORKERS_ENV).ok()?.parse().ok().filter(|&n| n > 0))
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.worker_count())
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}

/// A region that could not be processed. The batch continues without it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub region_id: String,
    pub stage: String,
    pub message: String,
}

impl Failure {
    fn new(region_id: &str, stage: &str, e: &Error) -> Self {
        log::warn!("{stage}: region {region_id}: {e}");
        Failure {
            region_id: region_id.to_string(),
            stage: stage.to_string(),
            message: e.to_string(),
        }
    }
}

/// Resolves the relative paths of manifest records.
#[derive(Debug, Clone)]
pub struct Locations {
    /// Base for image and validity paths, normally the manifest's directory.
    pub base: PathBuf,
    /// Base for mask paths; defaults to `base`.
    pub masks: Option<PathBuf>,
}

impl Locations {
    pub fn for_manifest(manifest: &Path, masks: Option<&Path>) -> Self {
        Locations {
            base: manifest
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf(),
            masks: masks.map(Path::to_path_buf),
        }
    }

    pub fn image(&self, rec: &ManifestRecord) -> PathBuf {
        ingest::resolve(&self.base, &rec.image_path)
    }

    pub fn validity(&self, rec: &ManifestRecord) -> Option<PathBuf> {
        rec.validity_path.as_deref().map(|p| ingest::resolve(&self.base, p))
    }

    pub fn mask(&self, rec: &ManifestRecord) -> PathBuf {
        ingest::resolve(self.masks.as_deref().unwrap_or(&self.base), &rec.mask_path)
    }

    pub fn load_scene(&self, rec: &ManifestRecord) -> Result<crate::raster::Scene> {
        ingest::read_scene(
            &self.image(rec),
            self.validity(rec).as_deref(),
            &rec.region_id,
            rec.sensing_date,
        )
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Re-expresses a path relative to `from` so it stays valid when written
/// into a file under `to`. Relative paths are kept when the two coincide.
pub fn rebase(p: &str, from: &Path, to: &Path) -> String {
    if Path::new(p).is_absolute() || absolute(from) == absolute(to) {
        return p.to_string();
    }
    absolute(&from.join(p)).to_string_lossy().into_owned()
}

fn rebase_record(rec: &mut ManifestRecord, loc: &Locations, to: &Path) {
    rec.image_path = rebase(&rec.image_path, &loc.base, to);
    rec.mask_path = rebase(&rec.mask_path, loc.masks.as_deref().unwrap_or(&loc.base), to);
    rec.validity_path = rec.validity_path.as_deref().map(|v| rebase(v, &loc.base, to));
}

/// Fills absent cloud/coverage fields from the validity grids.
pub fn fill_measurements(records: &mut [ManifestRecord], loc: &Locations, pool: &rayon::ThreadPool) -> Vec<Failure> {
    let results: Vec<Option<Failure>> = pool.install(|| {
        records
            .par_iter_mut()
            .map(|rec| {
                if rec.cloud_fraction.is_some() && rec.coverage.is_some() {
                    return None;
                }
                match loc.load_scene(rec) {
                    Ok(scene) => {
                        rec.cloud_fraction.get_or_insert(cloud_fraction(&scene));
                        rec.coverage.get_or_insert(coverage(&scene));
                        None
                    }
                    Err(e) => Some(Failure::new(&rec.region_id, "filter", &e)),
                }
            })
            .collect()
    });
    results.into_iter().flatten().collect()
}

pub struct FilterOutput {
    pub pools: PoolSet,
    pub failures: Vec<Failure>,
}

pub fn run_filter(
    mut records: Vec<ManifestRecord>,
    loc: &Locations,
    cfg: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> FilterOutput {
    let failures = fill_measurements(&mut records, loc, pool);
    FilterOutput {
        pools: build_pool(&records, &cfg.filter),
        failures,
    }
}

/// Groups an already-filtered manifest into pools without re-applying the
/// predicate.
pub fn group_pools(records: &[ManifestRecord]) -> Vec<CandidatePool> {
    let mut by_region: BTreeMap<&str, Vec<ManifestRecord>> = BTreeMap::new();
    for r in records {
        by_region.entry(&r.region_id).or_default().push(r.clone());
    }
    by_region
        .into_iter()
        .map(|(id, mut candidates)| {
            candidates.sort_by(|a, b| {
                a.sensing_date
                    .cmp(&b.sensing_date)
                    .then_with(|| a.image_path.cmp(&b.image_path))
            });
            CandidatePool {
                region_id: id.to_string(),
                candidates,
            }
        })
        .collect()
}

fn dump_map(dir: &Path, rec: &ManifestRecord, dmap: &DetectionMap) -> Result<()> {
    let (h, w) = dmap.grid.dims();
    let raster = Raster {
        header: TileFileHeader::f32_bsq(w as u32, h as u32, 1),
        samples: dmap.grid.as_slice().iter().map(|&v| v as f32).collect(),
    };
    let name = format!(
        "{}_{}_{}.msr",
        rec.region_id,
        rec.sensing_date.format("%Y%m%d"),
        dmap.method
    );
    ingest::write_raster(&raster, &dir.join(name))
}

fn select_region(
    pool: &CandidatePool,
    loc: &Locations,
    cfg: &PipelineConfig,
    dump: Option<&Path>,
) -> Result<RegionSelection> {
    let first = pool.candidates.first().ok_or(Error::NoCandidates)?;
    let mask = ingest::read_mask(&loc.mask(first), &pool.region_id)?;
    let fraction = mangrove_fraction(&mask)?;
    let meta = RegionMeta {
        region_id: pool.region_id.clone(),
        country_iso3: first.country_iso3.clone(),
        mangrove_fraction: fraction,
        category: cfg.stratify.categorize(fraction)?,
    };
    let result = select_best_with(
        pool,
        &mask,
        cfg.method,
        &cfg.selection,
        |rec| loc.load_scene(rec),
        |rec, dmap| match dump {
            Some(dir) => dump_map(dir, rec, dmap),
            None => Ok(()),
        },
    )?;
    let chosen = pool
        .candidates
        .iter()
        .find(|r| r.sensing_date == result.chosen_date)
        .expect("chosen date comes from the pool")
        .clone();
    Ok(RegionSelection { meta, result, chosen })
}

pub struct SelectOutput {
    pub reports: Vec<RegionReport>,
    pub failures: Vec<Failure>,
}

/// Selects one acquisition per region. Paths in the report are rebased to
/// `out_dir`.
pub fn run_select(
    pools: &[CandidatePool],
    loc: &Locations,
    cfg: &PipelineConfig,
    dump: Option<&Path>,
    out_dir: &Path,
    pool: &rayon::ThreadPool,
) -> Result<SelectOutput> {
    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let results: Vec<Result<RegionSelection>> = pool.install(|| {
        pools
            .par_iter()
            .map(|p| {
                log::debug!("select: region {}", p.region_id);
                select_region(p, loc, cfg, dump)
            })
            .collect()
    });
    let mut selections = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in pools.iter().zip(results) {
        match r {
            Ok(mut s) => {
                rebase_record(&mut s.chosen, loc, out_dir);
                selections.push(s);
            }
            Err(e) => failures.push(Failure::new(&p.region_id, "select", &e)),
        }
    }
    Ok(SelectOutput {
        reports: rank_report(&selections),
        failures,
    })
}

fn dataset_record(r: &RegionReport) -> DatasetRecord {
    DatasetRecord {
        region_id: r.region_id.clone(),
        country_iso3: r.country_iso3.clone(),
        mangrove_fraction: r.mangrove_fraction,
        category: r.category,
        sensing_date: r.chosen_date,
        image_path: r.image_path.clone(),
        mask_path: r.mask_path.clone(),
        validity_path: r.validity_path.clone(),
        split: None,
    }
}

/// Subsamples the report to the configured composition.
pub fn run_stratify(reports: &[RegionReport], cfg: &StratifyConfig) -> Result<(Vec<DatasetRecord>, RatioOutcome)> {
    let metas: Vec<RegionMeta> = reports.iter().map(RegionReport::meta).collect();
    let outcome = enforce_ratios(&metas, cfg)?;
    let keep: BTreeSet<&str> = outcome.selected.iter().map(|m| m.region_id.as_str()).collect();
    let mut records: Vec<DatasetRecord> = reports
        .iter()
        .filter(|r| keep.contains(r.region_id.as_str()))
        .map(dataset_record)
        .collect();
    records.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    Ok((records, outcome))
}

pub fn run_split(
    mut records: Vec<DatasetRecord>,
    ratios: [u32; 3],
    seed: u64,
) -> Result<(Vec<DatasetRecord>, SplitOutcome)> {
    let metas: Vec<RegionMeta> = records.iter().map(DatasetRecord::meta).collect();
    let outcome = country_disjoint_split(&metas, ratios, seed)?;
    for r in &mut records {
        r.split = Some(outcome.countries[&r.country_iso3]);
    }
    records.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    Ok((records, outcome))
}

/// A JSON document carrying its provenance next to the payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<()> {
    let doc = Stamped {
        provenance: provenance.clone(),
        body,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct FailureTrailer<'a> {
    failures: &'a [Failure],
}

/// JSONL with a provenance header and, when needed, a failure trailer.
pub fn write_records<T: Serialize>(
    path: &Path,
    provenance: &Provenance,
    items: &[T],
    failures: &[Failure],
) -> Result<()> {
    ingest::write_jsonl(path, Some(provenance), items)?;
    if !failures.is_empty() {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut line = serde_json::to_vec(&FailureTrailer { failures })?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Everything a full pipeline run produced.
pub struct PipelineOutput {
    pub filter: FilterSummary,
    pub empty_regions: Vec<String>,
    pub reports: Vec<RegionReport>,
    pub ratios: RatioOutcome,
    pub split: SplitOutcome,
    pub dataset: Vec<DatasetRecord>,
    pub stats: CompositionSummary,
    pub failures: Vec<Failure>,
}

pub const FILTERED: &str = "filtered.jsonl";
pub const FILTER_SUMMARY: &str = "filter_summary.json";
pub const REPORT: &str = "report.jsonl";
pub const STRATIFIED: &str = "strat.jsonl";
pub const SPLITS: &str = "splits.jsonl";
pub const STATS: &str = "stats.json";

#[derive(Serialize)]
struct FilterDoc<'a> {
    #[serde(flatten)]
    summary: &'a FilterSummary,
    empty_regions: &'a [String],
}

/// Runs every stage, writing each stage's output under `out_dir`.
pub fn run_pipeline(
    manifest: &Path,
    masks: Option<&Path>,
    out_dir: &Path,
    cfg: &PipelineConfig,
    dump: Option<&Path>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = cfg.thread_pool()?;
    let loc = Locations::for_manifest(manifest, masks);
    let records = ingest::read_manifest(manifest)?;

    let filtered = run_filter(records, &loc, cfg, &pool);
    let mut failures = filtered.failures;
    let kept: Vec<ManifestRecord> = filtered
        .pools
        .pools
        .iter()
        .flat_map(|p| p.candidates.iter().cloned())
        .collect();
    let mut kept_out = kept.clone();
    for r in &mut kept_out {
        rebase_record(r, &loc, out_dir);
    }
    ingest::write_manifest(&out_dir.join(FILTERED), Some(&cfg.provenance("filter")), &kept_out)?;
    write_json(
        &out_dir.join(FILTER_SUMMARY),
        &cfg.provenance("filter"),
        &FilterDoc {
            summary: &filtered.pools.summary,
            empty_regions: &filtered.pools.empty_regions,
        },
    )?;
    log::info!(
        "filter: {} regions, {} empty, {} candidates kept",
        filtered.pools.summary.regions_total,
        filtered.pools.summary.regions_empty,
        filtered.pools.summary.candidates_kept
    );

    let selected = run_select(&filtered.pools.pools, &loc, cfg, dump, out_dir, &pool)?;
    failures.extend(selected.failures);
    write_records(
        &out_dir.join(REPORT),
        &cfg.provenance("select"),
        &selected.reports,
        &failures,
    )?;
    log::info!("select: {} regions reported", selected.reports.len());

    let (strat, ratios) = run_stratify(&selected.reports, &cfg.stratify)?;
    write_records(&out_dir.join(STRATIFIED), &cfg.provenance("stratify"), &strat, &[])?;
    let (dataset, split) = run_split(strat, cfg.split_ratios, cfg.split_seed)?;
    write_records(&out_dir.join(SPLITS), &cfg.provenance("split"), &dataset, &[])?;
    let stats = composition_stats(&dataset);
    write_json(&out_dir.join(STATS), &cfg.provenance("stats"), &stats)?;
    Ok(PipelineOutput {
        filter: filtered.pools.summary,
        empty_regions: filtered.pools.empty_regions,
        reports: selected.reports,
        ratios,
        split,
        dataset,
        stats,
        failures,
    })
}
