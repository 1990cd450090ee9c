//! The `offload-calib` command line: `gen`, `calibrate`, `simulate`, `sweep`.
//!
//! Each subcommand folds its flags over an optional `--config` manifest
//! (flags win), then runs one of the `cmd_*` functions below. Exit status is
//! 0 on success, 1 for usage or configuration errors and 2 for data errors.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::calib::{CalibrationResult, SearchConfig};
use crate::cascade::{
    calibrate_exits, decisions_to_csv, run_cascade, CalibrationSet, ConfidenceRule, ExitDecision,
    ExitPolicy,
};
use crate::config::{
    fork_seed, ExperimentConfig, GenMode, GeneratorSpec, Scenario, DEFAULT_VALIDATION_FRACTION,
};
use crate::error::Error;
use crate::latency::{Aggregation, LatencyProfile};
use crate::metrics::{
    evaluate, reports_to_csv, sweep, Batching, DeadlineSpec, EvalSettings, ExperimentReport,
    DEFAULT_BATCH_SIZE,
};
use crate::syngen::BranchParams;
use crate::trace::{parse_trace, split_dataset, write_trace, DatasetSplit, TraceDataset};

/// p_tar values swept when no grid is given.
pub const DEFAULT_P_TAR_GRID: [f64; 3] = [0.75, 0.825, 0.85];

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "offload-calib",
    version,
    about = "Calibration-aware early-exit offloading simulator"
)]
pub struct Cli {
    /// Experiment manifest (TOML or JSON). Relative paths that do not exist
    /// are looked up in $OFFLOAD_CALIB_CONFIG_DIR.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic logit trace.
    Gen(GenArgs),
    /// Fit one temperature per exit on the validation split.
    Calibrate(CalibrateArgs),
    /// Run the cascade on the test split and report every metric.
    Simulate(SimulateArgs),
    /// Sweep p_tar x t_tar for the conventional and calibrated policies.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub mode: Option<GenMode>,
    #[arg(long, value_enum)]
    pub scenario: Option<Scenario>,
    /// Number of classes.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Dirichlet concentration (oracle mode).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Miscalibration scale (oracle mode).
    #[arg(long, allow_hyphen_values = true)]
    pub s: Option<f64>,
    /// Cascade exit as SIGNAL:SIGMA:SCALE; repeat once per exit.
    #[arg(long = "branch", value_parser = parse_branch)]
    pub branches: Vec<BranchParams>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn parse_branch(s: &str) -> std::result::Result<BranchParams, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected SIGNAL:SIGMA:SCALE, got {s:?}"));
    }
    let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
    Ok(BranchParams::new(
        num(parts[0])?,
        num(parts[1])?,
        num(parts[2])?,
    ))
}

#[derive(Debug, Args, Default)]
pub struct SourceArgs {
    /// Trace file (JSON Lines).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Generate the trace in memory from a built-in scenario instead.
    #[arg(long, value_enum)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct PolicyArgs {
    /// Confidence rule: max-probability or entropy.
    #[arg(long)]
    pub rule: Option<ConfidenceRule>,
    /// Number of exits hosted on the device.
    #[arg(long)]
    pub device_exits: Option<usize>,
    /// Calibrate on the samples that reach each exit rather than on all of them.
    #[arg(long)]
    pub branch_restricted: bool,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    /// Latency profile (TOML or JSON). Defaults to the illustrative profile.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub drop_partial_batch: bool,
    /// Batch time aggregation: mean or sum.
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Target confidence; required with --branch-restricted.
    #[arg(long)]
    pub p_tar: Option<f64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub p_tar: Option<f64>,
    /// Deadline in seconds; enables the missed-deadline probability.
    #[arg(long)]
    pub t_tar: Option<f64>,
    /// Comma-separated temperatures, one per exit.
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Option<Vec<f64>>,
    /// Calibration file written by `calibrate`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Fit temperatures on the validation split before simulating.
    #[arg(long)]
    pub calibrate: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write one CSV line per test-split decision.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, value_delimiter = ',')]
    pub p_tar_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub t_tar_grid: Option<Vec<f64>>,
    /// Calibration file for the calibrated rows; fitted on the validation
    /// split when absent.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

impl SourceArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(t) = &self.trace {
            cfg.trace = Some(t.clone());
            cfg.generator = None;
        }
        if let Some(s) = self.scenario {
            cfg.generator = Some(GeneratorSpec {
                scenario: Some(s),
                ..GeneratorSpec::default()
            });
            cfg.trace = None;
        }
        cfg.seed = self.seed.or(cfg.seed);
        cfg.validation_fraction = self.validation_fraction.or(cfg.validation_fraction);
    }
}

impl PolicyArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        cfg.confidence_rule = self.rule.or(cfg.confidence_rule);
        cfg.device_exit_count = self.device_exits.or(cfg.device_exit_count);
        if self.branch_restricted {
            cfg.branch_restricted = Some(true);
        }
    }
}

impl EvalArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.profile.is_some() {
            cfg.profile = self.profile.clone();
        }
        cfg.batch_size = self.batch_size.or(cfg.batch_size);
        if self.drop_partial_batch {
            cfg.drop_partial_batch = Some(true);
        }
        cfg.aggregation = self.aggregation.or(cfg.aggregation);
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("offload-calib: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::Gen(args) => {
            apply_gen(&args, &mut cfg);
            let out = cmd_gen(&cfg)?;
            println!(
                "wrote {}: N={} K={} B={} mode={} seed={}",
                out.path.display(),
                out.dataset.len(),
                out.dataset.num_classes(),
                out.dataset.num_exits(),
                out.dataset
                    .metadata()
                    .get("mode")
                    .map(String::as_str)
                    .unwrap_or("?"),
                cfg.seed()
            );
        }
        Command::Calibrate(args) => {
            args.source.apply(&mut cfg);
            args.policy.apply(&mut cfg);
            cfg.p_tar = args.p_tar.or(cfg.p_tar);
            if args.output.is_some() {
                cfg.output.calibration = args.output.clone();
            }
            let out = cmd_calibrate(&cfg)?;
            for (i, r) in out.results.iter().enumerate() {
                println!(
                    "exit {}: T={:.4} nll {:.4} -> {:.4} (n={}{})",
                    i + 1,
                    r.temperature,
                    r.nll_before,
                    r.nll_after,
                    r.num_samples,
                    if r.clamped { ", clamped" } else { "" }
                );
            }
            println!("wrote {}", out.path.display());
        }
        Command::Simulate(args) => {
            args.source.apply(&mut cfg);
            args.policy.apply(&mut cfg);
            args.eval.apply(&mut cfg);
            cfg.p_tar = args.p_tar.or(cfg.p_tar);
            cfg.t_tar = args.t_tar.or(cfg.t_tar);
            if let Some(t) = &args.temperatures {
                cfg.temperatures = Some(t.clone());
            }
            if let Some(c) = &args.calibration {
                cfg.calibration = Some(c.clone());
            }
            if args.calibrate {
                cfg.calibrate = Some(true);
            }
            set_if(&mut cfg.output.csv, &args.csv);
            set_if(&mut cfg.output.json, &args.json);
            set_if(&mut cfg.output.decisions, &args.decisions);
            let out = cmd_simulate(&cfg)?;
            let r = &out.report;
            println!(
                "p_tar={} calibrated={} test={} device_prob={:.4} device_acc={} total_acc={:.4} outage={} missed={}",
                r.p_tar,
                r.calibrated,
                out.decisions.len(),
                r.device_classification_probability,
                fmt_opt(r.device_accuracy),
                r.total_accuracy,
                fmt_opt(r.outage_probability),
                fmt_opt(r.missed_deadline_probability),
            );
        }
        Command::Sweep(args) => {
            args.source.apply(&mut cfg);
            args.policy.apply(&mut cfg);
            args.eval.apply(&mut cfg);
            if let Some(g) = &args.p_tar_grid {
                cfg.p_tar_grid = Some(g.clone());
            }
            if let Some(g) = &args.t_tar_grid {
                cfg.t_tar_grid = Some(g.clone());
            }
            if let Some(c) = &args.calibration {
                cfg.calibration = Some(c.clone());
            }
            set_if(&mut cfg.output.csv, &args.csv);
            set_if(&mut cfg.output.json, &args.json);
            let out = cmd_sweep(&cfg)?;
            println!(
                "wrote {} rows to {}",
                out.reports.len(),
                out.csv_path.display()
            );
        }
    }
    Ok(())
}

fn set_if(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| "undefined".into())
}

fn apply_gen(args: &GenArgs, cfg: &mut ExperimentConfig) {
    let mut spec = cfg.generator.clone().unwrap_or_default();
    spec.mode = args.mode.or(spec.mode);
    spec.scenario = args.scenario.or(spec.scenario);
    spec.k = args.k.or(spec.k);
    spec.n = args.n.or(spec.n);
    spec.alpha = args.alpha.or(spec.alpha);
    spec.s = args.s.or(spec.s);
    if !args.branches.is_empty() {
        spec.branches = args.branches.clone();
    }
    cfg.generator = Some(spec);
    cfg.seed = args.seed.or(cfg.seed);
    set_if(&mut cfg.output.trace, &args.output);
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let io = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    std::fs::create_dir_all(&dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_trace_file(path: &Path) -> CliResult<TraceDataset> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_trace(BufReader::new(file))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_calibration_file(path: &Path) -> CliResult<Vec<CalibrationResult>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Loads the configured trace (file or generator) and describes its origin.
pub fn load_dataset(cfg: &ExperimentConfig) -> CliResult<(TraceDataset, String)> {
    match (&cfg.trace, &cfg.generator) {
        (Some(_), Some(_)) => Err(config_err(
            "give either a trace file or a generator, not both",
        )),
        (None, None) => Err(config_err("no trace source: pass --trace or --scenario")),
        (Some(path), None) => Ok((read_trace_file(path)?, path.display().to_string())),
        (None, Some(spec)) => {
            let seed = fork_seed(cfg.seed(), "generate");
            let ds = spec.generate(seed)?;
            let desc = format!("generated ({:?} mode, seed {seed})", spec.mode()).to_lowercase();
            Ok((ds, desc))
        }
    }
}

fn split(cfg: &ExperimentConfig, dataset: &TraceDataset) -> CliResult<DatasetSplit> {
    let fraction = cfg
        .validation_fraction
        .unwrap_or(DEFAULT_VALIDATION_FRACTION);
    Ok(split_dataset(
        dataset,
        fraction,
        fork_seed(cfg.seed(), "split"),
    )?)
}

fn calibration_set(cfg: &ExperimentConfig) -> CliResult<CalibrationSet> {
    if !cfg.branch_restricted.unwrap_or(false) {
        return Ok(CalibrationSet::All);
    }
    let p_tar = cfg
        .p_tar
        .ok_or_else(|| config_err("--branch-restricted needs --p-tar"))?;
    Ok(CalibrationSet::Reaching {
        p_tar,
        rule: cfg.confidence_rule.unwrap_or_default(),
    })
}

fn device_exit_count(cfg: &ExperimentConfig, num_exits: usize) -> usize {
    cfg.device_exit_count
        .unwrap_or_else(|| num_exits.saturating_sub(1).max(1))
}

fn load_profile(cfg: &ExperimentConfig, device_exits: usize) -> CliResult<LatencyProfile> {
    let profile = match &cfg.profile {
        Some(path) => LatencyProfile::from_path(path)?,
        None => match device_exits {
            1 => LatencyProfile::illustrative(),
            2 => LatencyProfile::illustrative_two_branch(),
            d => {
                return Err(config_err(format!(
                    "no built-in latency profile for {d} device exits; pass --profile"
                )))
            }
        },
    };
    if profile.device_exits() != device_exits {
        return Err(config_err(format!(
            "latency profile has {} device segments but the policy hosts {device_exits} exits on the device",
            profile.device_exits()
        )));
    }
    Ok(profile)
}

fn eval_settings(cfg: &ExperimentConfig) -> CliResult<EvalSettings> {
    Ok(EvalSettings {
        batching: Batching::new(
            cfg.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            cfg.drop_partial_batch.unwrap_or(false),
        )?,
        aggregation: cfg.aggregation.unwrap_or_default(),
    })
}

#[derive(Debug)]
pub struct GenOutcome {
    pub path: PathBuf,
    pub dataset: TraceDataset,
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> CliResult<GenOutcome> {
    let spec = cfg
        .generator
        .clone()
        .ok_or_else(|| config_err("no generator configured"))?;
    let dataset = spec.generate(fork_seed(cfg.seed(), "generate"))?;
    let path = cfg
        .output
        .trace
        .clone()
        .unwrap_or_else(|| PathBuf::from("trace.jsonl"));
    let mut bytes = Vec::new();
    write_trace(&dataset, &mut bytes)?;
    write_atomic(&path, &bytes)?;
    Ok(GenOutcome { path, dataset })
}

#[derive(Debug)]
pub struct CalibrateOutcome {
    pub path: PathBuf,
    pub results: Vec<CalibrationResult>,
    pub split: DatasetSplit,
}

pub fn cmd_calibrate(cfg: &ExperimentConfig) -> CliResult<CalibrateOutcome> {
    let (dataset, _) = load_dataset(cfg)?;
    let split = split(cfg, &dataset)?;
    let results = calibrate_exits(
        &split.validation,
        &SearchConfig::default(),
        calibration_set(cfg)?,
    )?;
    let path = cfg
        .output
        .calibration
        .clone()
        .unwrap_or_else(|| PathBuf::from("calibration.json"));
    write_json(&path, &results)?;
    Ok(CalibrateOutcome {
        path,
        results,
        split,
    })
}

#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub source: String,
    pub seed: u64,
    pub split_seed: u64,
    pub validation_fraction: f64,
    pub num_validation: usize,
    pub num_test: usize,
    pub batch_size: usize,
    pub drop_partial_batch: bool,
    pub aggregation: Aggregation,
    pub profile: LatencyProfile,
}

#[derive(Serialize)]
struct SimulateJson<'a> {
    meta: &'a RunMeta,
    policy: &'a ExitPolicy,
    calibration: &'a Option<Vec<CalibrationResult>>,
    report: &'a ExperimentReport,
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub meta: RunMeta,
    pub policy: ExitPolicy,
    pub calibration: Option<Vec<CalibrationResult>>,
    pub split: DatasetSplit,
    pub decisions: Vec<ExitDecision>,
    pub report: ExperimentReport,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

fn run_meta(
    cfg: &ExperimentConfig,
    source: String,
    split: &DatasetSplit,
    settings: &EvalSettings,
    profile: &LatencyProfile,
) -> RunMeta {
    RunMeta {
        source,
        seed: cfg.seed(),
        split_seed: split.seed,
        validation_fraction: cfg
            .validation_fraction
            .unwrap_or(DEFAULT_VALIDATION_FRACTION),
        num_validation: split.validation.len(),
        num_test: split.test.len(),
        batch_size: settings.batching.size,
        drop_partial_batch: settings.batching.drop_partial,
        aggregation: settings.aggregation,
        profile: profile.clone(),
    }
}

/// Temperatures for the configured policy, plus the fit results when the
/// temperatures came from a calibration.
fn resolve_temperatures(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
) -> CliResult<(Vec<f64>, Option<Vec<CalibrationResult>>)> {
    let b = split.test.num_exits();
    let sources = [
        cfg.temperatures.is_some(),
        cfg.calibration.is_some(),
        cfg.calibrate.unwrap_or(false),
    ];
    if sources.iter().filter(|&&s| s).count() > 1 {
        return Err(config_err(
            "give at most one of --temperatures, --calibration, --calibrate",
        ));
    }
    let (temps, fits) = if let Some(t) = &cfg.temperatures {
        (t.clone(), None)
    } else if let Some(path) = &cfg.calibration {
        let fits = read_calibration_file(path)?;
        (fits.iter().map(|r| r.temperature).collect(), Some(fits))
    } else if cfg.calibrate.unwrap_or(false) {
        let fits = calibrate_exits(
            &split.validation,
            &SearchConfig::default(),
            calibration_set(cfg)?,
        )?;
        (fits.iter().map(|r| r.temperature).collect(), Some(fits))
    } else {
        (vec![1.0; b], None)
    };
    if temps.len() != b {
        return Err(config_err(format!(
            "{} temperatures given for a trace with {b} exits",
            temps.len()
        )));
    }
    Ok((temps, fits))
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> CliResult<SimulateOutcome> {
    let (dataset, source) = load_dataset(cfg)?;
    let split = split(cfg, &dataset)?;
    let b = dataset.num_exits();
    let p_tar = cfg.p_tar.ok_or_else(|| config_err("--p-tar is required"))?;
    let (temperatures, calibration) = resolve_temperatures(cfg, &split)?;
    let policy = ExitPolicy::new(
        p_tar,
        temperatures,
        cfg.confidence_rule.unwrap_or_default(),
        device_exit_count(cfg, b),
    )?;
    let profile = load_profile(cfg, policy.device_exit_count)?;
    let settings = eval_settings(cfg)?;
    let deadline = cfg.t_tar.map(DeadlineSpec::new).transpose()?;

    let decisions = run_cascade(&split.test, &policy)?;
    let report = evaluate(
        &decisions,
        p_tar,
        policy.is_calibrated(),
        &profile,
        deadline,
        settings,
    )?;
    let meta = run_meta(cfg, source, &split, &settings, &profile);

    let csv_path = cfg
        .output
        .csv
        .clone()
        .unwrap_or_else(|| PathBuf::from("report.csv"));
    let json_path = cfg
        .output
        .json
        .clone()
        .unwrap_or_else(|| PathBuf::from("report.json"));
    write_atomic(
        &csv_path,
        reports_to_csv(std::slice::from_ref(&report)).as_bytes(),
    )?;
    write_json(
        &json_path,
        &SimulateJson {
            meta: &meta,
            policy: &policy,
            calibration: &calibration,
            report: &report,
        },
    )?;
    if let Some(path) = &cfg.output.decisions {
        write_atomic(path, decisions_to_csv(&decisions).as_bytes())?;
    }

    Ok(SimulateOutcome {
        meta,
        policy,
        calibration,
        split,
        decisions,
        report,
        csv_path,
        json_path,
    })
}

#[derive(Serialize)]
struct SweepJson<'a> {
    meta: &'a RunMeta,
    calibration: &'a [CalibrationResult],
    reports: &'a [ExperimentReport],
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub meta: RunMeta,
    pub calibration: Vec<CalibrationResult>,
    /// Conventional rows first, then calibrated; `p_tar` outer, `t_tar` inner.
    pub reports: Vec<ExperimentReport>,
    pub csv_path: PathBuf,
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> CliResult<SweepOutcome> {
    let (dataset, source) = load_dataset(cfg)?;
    let split = split(cfg, &dataset)?;
    let b = dataset.num_exits();
    let p_grid = cfg
        .p_tar_grid
        .clone()
        .unwrap_or_else(|| DEFAULT_P_TAR_GRID.to_vec());
    let t_grid = cfg
        .t_tar_grid
        .clone()
        .ok_or_else(|| config_err("--t-tar-grid is required"))?;
    if p_grid.is_empty() || t_grid.is_empty() {
        return Err(config_err("sweep grids must not be empty"));
    }

    let calibration = match &cfg.calibration {
        Some(path) => read_calibration_file(path)?,
        None => calibrate_exits(
            &split.validation,
            &SearchConfig::default(),
            calibration_set(cfg)?,
        )?,
    };
    if calibration.len() != b {
        return Err(config_err(format!(
            "calibration has {} exits, trace has {b}",
            calibration.len()
        )));
    }
    let rule = cfg.confidence_rule.unwrap_or_default();
    let d = device_exit_count(cfg, b);
    // p_tar is replaced per grid point
    let conventional = ExitPolicy::new(0.5, vec![1.0; b], rule, d)?;
    let calibrated = ExitPolicy::new(
        0.5,
        calibration.iter().map(|r| r.temperature).collect(),
        rule,
        d,
    )?;
    let profile = load_profile(cfg, d)?;
    let settings = eval_settings(cfg)?;

    let mut reports = sweep(
        &split.test,
        &conventional,
        &p_grid,
        &t_grid,
        &profile,
        settings,
    )?;
    let mut cal_reports = sweep(
        &split.test,
        &calibrated,
        &p_grid,
        &t_grid,
        &profile,
        settings,
    )?;
    // a fit that lands exactly on T = 1 everywhere still labels its rows calibrated
    for r in &mut cal_reports {
        r.calibrated = true;
    }
    reports.append(&mut cal_reports);

    let meta = run_meta(cfg, source, &split, &settings, &profile);
    let csv_path = cfg
        .output
        .csv
        .clone()
        .unwrap_or_else(|| PathBuf::from("sweep.csv"));
    write_atomic(&csv_path, reports_to_csv(&reports).as_bytes())?;
    if let Some(path) = &cfg.output.json {
        write_json(
            path,
            &SweepJson {
                meta: &meta,
                calibration: &calibration,
                reports: &reports,
            },
        )?;
    }
    Ok(SweepOutcome {
        meta,
        calibration,
        reports,
        csv_path,
    })
}
