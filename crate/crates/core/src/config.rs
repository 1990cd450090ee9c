//! Experiment manifests and seed derivation.
//!
//! An experiment is described by a TOML (or JSON) file whose fields mirror
//! the command-line flags; flags given on the command line win. Every field
//! is optional so one manifest can serve all subcommands.
//!
//! All randomness comes from the top-level `seed`. Each consumer gets its own
//! stream via [`fork_seed`]: generation uses `fork_seed(seed, "generate")` and
//! the validation/test split uses `fork_seed(seed, "split")`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::ConfidenceRule;
use crate::error::{Error, Result};
use crate::latency::Aggregation;
use crate::syngen::{
    demo_scenario, gen_cascade_trace, gen_oracle_trace, two_branch_scenario, BranchParams,
    CascadeGenConfig, OracleGenConfig,
};
use crate::trace::TraceDataset;

/// Environment variable naming the directory searched for relative
/// `--config` paths that do not exist in the working directory.
pub const CONFIG_DIR_ENV: &str = "OFFLOAD_CALIB_CONFIG_DIR";

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.3;
pub const DEFAULT_SEED: u64 = 0;

/// Derives an independent seed for `purpose` from a top-level seed:
/// SplitMix64 applied to `seed XOR fnv1a64(purpose)`.
pub fn fork_seed(seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GenMode {
    Oracle,
    Cascade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// One overconfident side branch plus the cloud exit.
    Demo,
    /// Two overconfident side branches plus the cloud exit.
    TwoBranch,
}

/// Synthetic trace source. Unset fields fall back to the scenario (cascade
/// mode) or to small defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub mode: Option<GenMode>,
    pub scenario: Option<Scenario>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub alpha: Option<f64>,
    pub s: Option<f64>,
    #[serde(default)]
    pub branches: Vec<BranchParams>,
}

impl GeneratorSpec {
    pub fn mode(&self) -> GenMode {
        match (self.mode, self.scenario) {
            (Some(m), _) => m,
            (None, Some(_)) => GenMode::Cascade,
            (None, None) if !self.branches.is_empty() => GenMode::Cascade,
            (None, None) => GenMode::Oracle,
        }
    }

    pub fn oracle_config(&self, seed: u64) -> Result<OracleGenConfig> {
        let cfg = OracleGenConfig {
            num_classes: self.k.unwrap_or(10),
            num_samples: self.n.unwrap_or(10_000),
            alpha: self.alpha.unwrap_or(0.5),
            scale: self.s.unwrap_or(1.0),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cascade_config(&self, seed: u64) -> Result<CascadeGenConfig> {
        let mut cfg = match self.scenario.unwrap_or(Scenario::Demo) {
            Scenario::Demo => demo_scenario(seed),
            Scenario::TwoBranch => two_branch_scenario(seed),
        };
        if let Some(k) = self.k {
            cfg.num_classes = k;
        }
        if let Some(n) = self.n {
            cfg.num_samples = n;
        }
        if !self.branches.is_empty() {
            cfg.branches = self.branches.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Generates the trace with `seed` (already forked for generation).
    pub fn generate(&self, seed: u64) -> Result<TraceDataset> {
        match self.mode() {
            GenMode::Oracle => gen_oracle_trace(&self.oracle_config(seed)?),
            GenMode::Cascade => gen_cascade_trace(&self.cascade_config(seed)?),
        }
    }
}

/// Output paths; which ones are used depends on the subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub trace: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub decisions: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub trace: Option<PathBuf>,
    pub generator: Option<GeneratorSpec>,
    pub profile: Option<PathBuf>,
    pub p_tar: Option<f64>,
    pub p_tar_grid: Option<Vec<f64>>,
    pub t_tar: Option<f64>,
    pub t_tar_grid: Option<Vec<f64>>,
    pub temperatures: Option<Vec<f64>>,
    pub calibration: Option<PathBuf>,
    pub calibrate: Option<bool>,
    pub branch_restricted: Option<bool>,
    pub confidence_rule: Option<ConfidenceRule>,
    pub device_exit_count: Option<usize>,
    pub batch_size: Option<usize>,
    pub drop_partial_batch: Option<bool>,
    pub aggregation: Option<Aggregation>,
    pub validation_fraction: Option<f64>,
    #[serde(default)]
    pub output: OutputPaths,
}

impl ExperimentConfig {
    /// Reads a manifest. Relative paths inside it are resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path = resolve_config_path(path);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::arg(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::arg(format!("{}: {e}", path.display())))?,
            _ => {
                toml::from_str(&text).map_err(|e| Error::arg(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        fix(&mut self.trace);
        fix(&mut self.profile);
        fix(&mut self.calibration);
        fix(&mut self.output.trace);
        fix(&mut self.output.calibration);
        fix(&mut self.output.csv);
        fix(&mut self.output.json);
        fix(&mut self.output.decisions);
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }
}

fn resolve_config_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(CONFIG_DIR_ENV) {
        Some(dir) => Path::new(&dir).join(path),
        None => path.to_path_buf(),
    }
}
