//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::ingest::{self, ManifestRecord};
use crate::pipeline::{self, Locations, PipelineConfig, WORKERS_ENV};
use crate::ranking::RegionReport;
use crate::raster::Method;
use crate::stratify::{composition_stats, DatasetRecord};
use crate::synth::{self, CorpusSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "mango-curate",
    version,
    about = "Curate single-date image/mask pairs from multi-date candidate pools"
)]
struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Keep candidates under the cloud ceiling and over the coverage floor.
    Filter(FilterArgs),
    /// Score each candidate and pick one acquisition per region.
    Select(SelectArgs),
    /// Subsample the report to the category composition.
    Stratify(SeededIo),
    /// Assign whole countries to train/val/test.
    Split(SeededIo),
    /// Category counts per split and country.
    Stats(StatsArgs),
    /// Write a synthetic corpus with known best dates.
    Synth(SynthArgs),
    /// Run filter, select, stratify, split and stats in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    year: Option<i32>,
    /// Also write the summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Mf,
    Mvi,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Mf => Method::MatchedFilter,
            MethodArg::Mvi => Method::Mvi,
        }
    }
}

#[derive(Args, Debug)]
struct SelectionFlags {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Write every response map as a single-band MSR1 file.
    #[arg(long)]
    dump_detections: Option<PathBuf>,
    /// Relative covariance ridge.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Reference pixels per region.
    #[arg(long)]
    k: Option<usize>,
    /// Erosion element side.
    #[arg(long)]
    element: Option<usize>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Base directory for mask paths; defaults to the manifest's directory.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: SelectionFlags,
}

#[derive(Args, Debug)]
struct SeededIo {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Required unless a config file is given.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seeds both the stratify and split stages; required unless a config
    /// file is given.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: SelectionFlags,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::EvenElement(_) | Error::FractionOutOfRange(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    Ok(cfg)
}

fn apply_selection(cfg: &mut PipelineConfig, f: &SelectionFlags) {
    if let Some(m) = f.method {
        cfg.method = m.into();
    }
    if let Some(e) = f.epsilon {
        cfg.selection.matched_filter.epsilon = e;
    }
    if let Some(k) = f.k {
        cfg.selection.signature.k_pixels = k;
    }
    if let Some(s) = f.element {
        cfg.selection.signature.structuring_element = s;
    }
}

fn require_seed(cli: &Cli, seed: Option<u64>) -> Result<Option<u64>> {
    if seed.is_none() && cli.config.is_none() {
        return Err(Error::Config("--seed is required unless --config is given".into()));
    }
    Ok(seed)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    let d = parent_dir(p);
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(ingest::read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::Filter(a) => {
            if let Some(k) = a.kappa {
                cfg.filter.kappa = k;
            }
            if let Some(o) = a.omega {
                cfg.filter.omega = o;
            }
            if let Some(y) = a.year {
                cfg.filter.year = y;
            }
            cfg.validate()?;
            let pool = cfg.thread_pool()?;
            let loc = Locations::for_manifest(&a.manifest, None);
            let out = pipeline::run_filter(ingest::read_manifest(&a.manifest)?, &loc, &cfg, &pool);
            let out_dir = parent_dir(&a.out);
            let kept: Vec<ManifestRecord> = out
                .pools
                .pools
                .iter()
                .flat_map(|p| p.candidates.iter())
                .map(|r| {
                    let mut r = r.clone();
                    r.image_path = pipeline::rebase(&r.image_path, &loc.base, &out_dir);
                    r.mask_path = pipeline::rebase(&r.mask_path, &loc.base, &out_dir);
                    r.validity_path = r.validity_path.map(|v| pipeline::rebase(&v, &loc.base, &out_dir));
                    r
                })
                .collect();
            ensure_parent(&a.out)?;
            let prov = cfg.provenance("filter");
            pipeline::write_records(&a.out, &prov, &kept, &out.failures)?;
            if let Some(s) = &a.summary {
                ensure_parent(s)?;
                pipeline::write_json(s, &prov, &out.pools.summary)?;
            }
            print_json(&out.pools.summary)
        }
        Command::Select(a) => {
            apply_selection(&mut cfg, &a.flags);
            cfg.validate()?;
            let pool = cfg.thread_pool()?;
            let loc = Locations::for_manifest(&a.manifest, a.masks.as_deref());
            let pools = pipeline::group_pools(&ingest::read_manifest(&a.manifest)?);
            ensure_parent(&a.out)?;
            let out = pipeline::run_select(
                &pools,
                &loc,
                &cfg,
                a.flags.dump_detections.as_deref(),
                &parent_dir(&a.out),
                &pool,
            )?;
            pipeline::write_records(&a.out, &cfg.provenance("select"), &out.reports, &out.failures)?;
            log::info!("select: {} regions, {} failures", out.reports.len(), out.failures.len());
            Ok(())
        }
        Command::Stratify(a) => {
            if let Some(s) = require_seed(cli, a.seed)? {
                cfg.stratify.seed = s;
            }
            cfg.validate()?;
            let reports: Vec<RegionReport> = read_records(&a.input)?;
            let (records, outcome) = pipeline::run_stratify(&reports, &cfg.stratify)?;
            ensure_parent(&a.out)?;
            pipeline::write_records(&a.out, &cfg.provenance("stratify"), &records, &[])?;
            print_json(&serde_json::json!({
                "supply": outcome.supply,
                "targets": outcome.targets,
                "counts": outcome.counts,
                "shortfall": outcome.shortfall,
            }))
        }
        Command::Split(a) => {
            if let Some(s) = require_seed(cli, a.seed)? {
                cfg.split_seed = s;
            }
            cfg.validate()?;
            let records: Vec<DatasetRecord> = read_records(&a.input)?;
            let (records, outcome) = pipeline::run_split(records, cfg.split_ratios, cfg.split_seed)?;
            ensure_parent(&a.out)?;
            pipeline::write_records(&a.out, &cfg.provenance("split"), &records, &[])?;
            if outcome.degenerate {
                log::warn!(
                    "split: achieved fractions {:?} miss the target {:?}",
                    outcome.achieved,
                    outcome.target
                );
            }
            print_json(&serde_json::json!({
                "achieved": outcome.achieved,
                "target": outcome.target,
                "degenerate": outcome.degenerate,
                "countries": outcome.countries,
            }))
        }
        Command::Stats(a) => {
            let records: Vec<DatasetRecord> = read_records(&a.input)?;
            let stats = composition_stats(&records);
            if let Some(out) = &a.out {
                ensure_parent(out)?;
                pipeline::write_json(out, &cfg.provenance("stats"), &stats)?;
            }
            print_json(&stats)
        }
        Command::Synth(a) => {
            let text = fs::read_to_string(&a.spec).map_err(|e| Error::io(&a.spec, e))?;
            let spec: CorpusSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.spec.display())))?;
            spec.template.validate()?;
            let (records, truth) = synth::write_corpus(&spec, &a.out)?;
            let mut suggested = PipelineConfig::default();
            suggested.selection.band_roles = spec.template.band_roles;
            suggested.filter.year = chrono::Datelike::year(&spec.template.first_date);
            let path = a.out.join("config.json");
            let mut text = serde_json::to_string_pretty(&suggested)?;
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            print_json(&serde_json::json!({
                "regions": truth.len(),
                "records": records.len(),
                "manifest": a.out.join("manifest.jsonl"),
                "config": path,
            }))
        }
        Command::Pipeline(a) => {
            apply_selection(&mut cfg, &a.flags);
            if let Some(s) = require_seed(cli, a.seed)? {
                cfg.stratify.seed = s;
                cfg.split_seed = s;
            }
            let out = pipeline::run_pipeline(
                &a.manifest,
                a.masks.as_deref(),
                &a.out,
                &cfg,
                a.flags.dump_detections.as_deref(),
            )?;
            if !out.failures.is_empty() {
                log::warn!("{} regions failed; see the report trailer", out.failures.len());
            }
            print_json(&out.stats)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["mango-curate", "--help"]), EXIT_OK);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["mango-curate", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mango-curate", "stats"]), EXIT_USAGE);
    }

    #[test]
    fn seedless_stratify_is_usage_error() {
        assert_eq!(run(["mango-curate", "stratify", "--in", "a", "--out", "b"]), EXIT_USAGE);
    }

    #[test]
    fn missing_input_is_data_error() {
        assert_eq!(
            run(["mango-curate", "stats", "--in", "/nonexistent/x.jsonl"]),
            EXIT_DATA
        );
    }
}
