//! Command-line front end. Every stage reads and writes files under a run
//! directory and records itself in the directory's `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::characterization::{
    channel_stats, compare_3gpp, comparison_text, empirical_cdf, write_cdf_csv, write_comparison_csv, CaseSummary,
    ChannelStats, ReferenceTable, SpreadLevel,
};
use crate::clustering::{dbscan, write_cluster_csv, ClusterResult};
use crate::error::{Error, Result};
use crate::params::{load_config, ParamBundle};
use crate::pipeline::{
    cluster_set, estimate_scan, foliage_stats, generate_route, roundtrip, route_pdp, scan_set, write_checks_csv,
    write_route_pdp_csv,
};
use crate::propagation::LinkCase;
use crate::sounder::{load_scan, save_scan, Pulse};
use crate::synth::{load_mpc_csv, save_mpc_csv, MpcSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;

/// Fewest links per case a round trip accepts.
pub const MIN_REALIZATIONS: usize = 50;

#[derive(Debug, Parser)]
#[command(name = "thz-umi", version, about = "220 GHz UMi channel simulation and characterization")]
pub struct Cli {
    /// Parameter file (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Mpc,
    Cluster,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One multipath set per Rx position of the configured scene.
    Generate,
    /// Simulate direction scans of multipath sets.
    Scan {
        /// MpcSet CSV files, or directories holding them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Extract multipath components from scans.
    Estimate {
        /// Scan files, or directories holding them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Group multipath components with MCD-DBSCAN.
    Cluster {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Channel statistics per link and fits per case.
    Characterize {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Reference table (TOML) for the comparison; bundled one when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Compute DS/ASA/ESA over components or over cluster centroids.
        #[arg(long, value_enum, default_value_t = Level::Mpc)]
        spread_level: Level,
    },
    /// Synthetic links through the whole chain, checked against the config.
    Roundtrip {
        /// Links per case.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Omnidirectional PDPs along the route as a distance × delay matrix.
    RoutePdp,
    /// Foliage loss draws, CDF and Gaussian fit.
    FoliageStats {
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Scan { .. } => "scan",
            Command::Estimate { .. } => "estimate",
            Command::Cluster { .. } => "cluster",
            Command::Characterize { .. } => "characterize",
            Command::Roundtrip { .. } => "roundtrip",
            Command::RoutePdp => "route-pdp",
            Command::FoliageStats { .. } => "foliage-stats",
        }
    }
}

/// One command run recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub started: String,
    pub finished: String,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(&path, e.to_string()))
    }

    /// Replaces any earlier record of the same command.
    pub fn record(&mut self, stage: StageRecord) {
        self.stages.retain(|s| s.command != stage.command);
        self.stages.push(stage);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Domain(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn config_hash(params: &ParamBundle) -> String {
    Sha256::digest(params.to_json().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) => EXIT_VALIDATION,
        Error::Parse { .. } | Error::Schema { .. } | Error::Io { .. } => EXIT_SCHEMA,
        _ => EXIT_FAILURE,
    }
}

/// What a command produced: files written and whether its checks passed.
struct Outcome {
    outputs: Vec<PathBuf>,
    passed: bool,
}

struct Ctx<'a> {
    params: &'a ParamBundle,
    seed: u64,
    out: &'a Path,
    pulse: Pulse,
    written: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn write_with(&mut self, path: PathBuf, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Domain(e.to_string()))?;
        self.write_with(path, |w| writeln!(w, "{text}"))
    }
}

/// Files named on the command line, with directories expanded to their
/// entries carrying `ext`, sorted by name.
pub fn expand_inputs(inputs: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == ext))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("input files"));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "set".into(), |s| s.to_string_lossy().into_owned())
}

pub fn set_file_name(set: &MpcSet, i: usize) -> String {
    format!("rx_{:02}", set.link.map_or(i, |l| l.rx_index))
}

fn cmd_generate(ctx: &mut Ctx) -> Result<Outcome> {
    let sets = generate_route(ctx.params, ctx.seed)?;
    let dir = ctx.dir("mpc")?;
    for (i, set) in sets.iter().enumerate() {
        let path = dir.join(format!("{}.csv", set_file_name(set, i)));
        save_mpc_csv(&path, set)?;
        ctx.written.push(path);
    }
    Ok(Outcome {
        outputs: Vec::new(),
        passed: true,
    })
}

fn cmd_scan(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<Outcome> {
    let files = expand_inputs(inputs, "csv")?;
    let dir = ctx.dir("scan")?;
    let (params, pulse, seed) = (ctx.params, &ctx.pulse, ctx.seed);
    let written = files
        .par_iter()
        .map(|f| {
            let set = load_mpc_csv(f)?;
            let scan = scan_set(&set, params, pulse, seed)?;
            let path = dir.join(format!("{}.dss", stem(f)));
            save_scan(&path, &scan)?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.written.extend(written);
    Ok(Outcome {
        outputs: Vec::new(),
        passed: true,
    })
}

fn cmd_estimate(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<Outcome> {
    let files = expand_inputs(inputs, "dss")?;
    let dir = ctx.dir("estimate")?;
    let (params, pulse) = (ctx.params, &ctx.pulse);
    for f in &files {
        let scan = load_scan(f)?;
        if scan.plan != params.plan || scan.grid != params.grid {
            return Err(Error::schema(f, "scan frequency plan or grid differs from the configuration"));
        }
        let set = estimate_scan(&scan, params, pulse)?;
        let path = dir.join(format!("{}.csv", stem(f)));
        save_mpc_csv(&path, &set)?;
        ctx.written.push(path);
    }
    Ok(Outcome {
        outputs: Vec::new(),
        passed: true,
    })
}

fn cmd_cluster(ctx: &mut Ctx, inputs: &[PathBuf]) -> Result<Outcome> {
    let files = expand_inputs(inputs, "csv")?;
    let dir = ctx.dir("cluster")?;
    let labels = ctx.dir("cluster/labels")?;
    for f in &files {
        let mut set = load_mpc_csv(f)?;
        let result = cluster_set(&mut set, ctx.params)?;
        let path = dir.join(format!("{}.csv", stem(f)));
        save_mpc_csv(&path, &set)?;
        ctx.written.push(path);
        ctx.write_with(labels.join(format!("{}.csv", stem(f))), |w| write_cluster_csv(w, &result))?;
    }
    Ok(Outcome {
        outputs: Vec::new(),
        passed: true,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkStats {
    pub file: String,
    pub stats: ChannelStats,
}

/// Statistics of labelled sets; sets without labels are clustered first.
pub fn characterize_sets(params: &ParamBundle, sets: &[MpcSet], level: SpreadLevel) -> Result<Vec<ChannelStats>> {
    sets.iter()
        .map(|set| {
            let clusters = if !set.is_empty() && set.mpcs.iter().all(|m| m.cluster_id.is_some()) {
                ClusterResult::from_set(set, params.clustering)
            } else {
                dbscan(&set.mpcs, &params.clustering)?
            };
            channel_stats(set, &clusters, level)
        })
        .collect()
}

/// Per-case summaries of the links whose case is known, LoS first.
pub fn summarize(params: &ParamBundle, stats: &[ChannelStats]) -> Result<Vec<CaseSummary>> {
    let mut out = Vec::new();
    for case in [LinkCase::Los, LinkCase::Olos] {
        let group: Vec<ChannelStats> = stats.iter().filter(|s| s.case == Some(case)).cloned().collect();
        if !group.is_empty() {
            out.push(CaseSummary::from_stats(case, &group, params.plan.center_freq)?);
        }
    }
    Ok(out)
}

fn cmd_characterize(ctx: &mut Ctx, inputs: &[PathBuf], reference: Option<&Path>, level: Level) -> Result<Outcome> {
    let files = expand_inputs(inputs, "csv")?;
    let mut sets = Vec::with_capacity(files.len());
    for f in &files {
        let set = load_mpc_csv(f)?;
        if set.link.is_none() {
            return Err(Error::schema(f, "missing link metadata (rx_index, distance, case)"));
        }
        if set.is_empty() {
            return Err(Error::schema(f, "no multipath components to characterize"));
        }
        sets.push(set);
    }
    let level = match level {
        Level::Mpc => SpreadLevel::Mpc,
        Level::Cluster => SpreadLevel::Cluster,
    };
    let stats = characterize_sets(ctx.params, &sets, level)?;
    let summaries = summarize(ctx.params, &stats)?;
    let reference = match reference {
        Some(p) => ReferenceTable::load(p)?,
        None => ReferenceTable::builtin(),
    };
    let rows = compare_3gpp(&summaries, &reference);
    let text = comparison_text(&rows);
    print!("{text}");

    let dir = ctx.dir("characterize")?;
    let links: Vec<LinkStats> = files
        .iter()
        .zip(stats)
        .map(|(f, stats)| LinkStats {
            file: f.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            stats,
        })
        .collect();
    ctx.write_json(dir.join("stats.json"), &links)?;
    ctx.write_json(dir.join("fits.json"), &summaries)?;
    let mut csv = Vec::new();
    write_comparison_csv(&mut csv, &rows)?;
    ctx.write_with(dir.join("comparison.csv"), |w| w.write_all(&csv))?;
    ctx.write_with(dir.join("comparison.txt"), |w| w.write_all(text.as_bytes()))?;
    Ok(Outcome {
        outputs: Vec::new(),
        passed: true,
    })
}

fn cmd_roundtrip(ctx: &mut Ctx, n: usize) -> Result<Outcome> {
    if n < MIN_REALIZATIONS {
        return Err(Error::Validation(vec![crate::error::Violation::new(
            "n",
            format!("at least {MIN_REALIZATIONS} realizations per case"),
        )]));
    }
    let report = roundtrip(ctx.params, n, ctx.seed, &ctx.pulse)?;
    print!("{}", report.text());
    let dir = ctx.dir("roundtrip")?;
    ctx.write_json(dir.join("report.json"), &report)?;
    let mut csv = Vec::new();
    write_checks_csv(&mut csv, &report.rows)?;
    ctx.write_with(dir.join("checks.csv"), |w| w.write_all(&csv))?;
    Ok(Outcome {
        outputs: Vec::new(),
        passed: report.passed(),
    })
}

fn cmd_route_pdp(ctx: &mut Ctx) -> Result<Outcome> {
    let pdp = route_pdp(ctx.params, ctx.seed, &ctx.pulse)?;
    let path = ctx.out.join("route_pdp.csv");
    ctx.write_with(path, |w| write_route_pdp_csv(w, &pdp))?;
    Ok(Outcome {
        outputs: Vec::new(),
        passed: true,
    })
}

fn cmd_foliage_stats(ctx: &mut Ctx, n: usize) -> Result<Outcome> {
    let stats = foliage_stats(ctx.params, n, ctx.seed)?;
    let dir = ctx.dir("foliage")?;
    let draws = stats.draws.clone();
    ctx.write_with(dir.join("draws.csv"), |w| {
        writeln!(w, "loss_db")?;
        draws.iter().try_for_each(|d| writeln!(w, "{d}"))
    })?;
    let cdf = empirical_cdf(&stats.draws)?;
    ctx.write_with(dir.join("cdf.csv"), |w| write_cdf_csv(w, &cdf))?;
    ctx.write_json(dir.join("fit.json"), &stats.fit)?;
    if let (Some(m), Some(s)) = (stats.fit.param("mean"), stats.fit.param("std")) {
        println!("foliage loss: mean {m:.2} dB, std {s:.2} dB over {n} draws");
    }
    Ok(Outcome {
        outputs: Vec::new(),
        passed: true,
    })
}

fn execute(cli: &Cli, params: &ParamBundle) -> Result<bool> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let started = Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true);
    let mut ctx = Ctx {
        params,
        seed: cli.seed,
        out: &cli.out,
        pulse: Pulse::new(params.plan.n_samples),
        written: Vec::new(),
    };
    let outcome = match &cli.command {
        Command::Generate => cmd_generate(&mut ctx),
        Command::Scan { inputs } => cmd_scan(&mut ctx, inputs),
        Command::Estimate { inputs } => cmd_estimate(&mut ctx, inputs),
        Command::Cluster { inputs } => cmd_cluster(&mut ctx, inputs),
        Command::Characterize {
            inputs,
            reference,
            spread_level,
        } => cmd_characterize(&mut ctx, inputs, reference.as_deref(), *spread_level),
        Command::Roundtrip { n } => cmd_roundtrip(&mut ctx, *n),
        Command::RoutePdp => cmd_route_pdp(&mut ctx),
        Command::FoliageStats { n } => cmd_foliage_stats(&mut ctx, *n),
    }?;
    let outputs = ctx
        .written
        .iter()
        .chain(&outcome.outputs)
        .map(|p| {
            p.strip_prefix(&cli.out)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        })
        .collect();
    let mut manifest = RunManifest::load(&cli.out)?;
    manifest.record(StageRecord {
        command: cli.command.name().to_string(),
        config_sha256: config_hash(params),
        seed: cli.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started,
        finished: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        outputs,
    });
    manifest.save(&cli.out)?;
    Ok(outcome.passed)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let params = match &cli.config {
        Some(p) => load_config(p),
        None => ParamBundle::default().validated(),
    };
    let result = params.and_then(|params| match cli.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Domain(e.to_string()))
            .and_then(|pool| pool.install(|| execute(cli, &params))),
        None => execute(cli, &params),
    });
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: {} checks failed", cli.command.name());
            EXIT_VALIDATION
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (program name first) and runs them.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            }
        }
    }
}
