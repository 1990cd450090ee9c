//! Synthetic logit traces with known calibration properties.
//!
//! Two generators are provided:
//!
//! - **oracle** (single exit): each sample draws a posterior `q` from a
//!   symmetric Dirichlet, a label from `q`, and emits `z = s * ln q`. The
//!   temperature that recovers `q` is exactly `s`, so a temperature fit
//!   has a known target.
//! - **cascade** (multi-exit): a uniform label shared by all exits, with
//!   per-exit logits `z_i = s_i * (b_i * onehot(y) + eps_i)` and independent
//!   Gaussian noise `eps_i ~ N(0, sigma_i^2)`. The true posterior at exit `i`
//!   is `softmax(u * b_i / sigma_i^2)` with `u = z_i / s_i`, so its calibrating
//!   temperature is `s_i * sigma_i^2 / b_i`; choosing `b_i = sigma_i^2` makes
//!   `s_i` the miscalibration factor.
//!
//! Both use ChaCha8 seeded from the config seed and draw in sample order, so a
//! config always produces the same bits.

pub mod oracle;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{LogitRecord, TraceDataset};

/// Floor applied to `ln q` before scaling.
pub const LOG_PROB_FLOOR: f64 = -700.0;

const RNG_NAME: &str = "chacha8 (rand_chacha 0.9, rand_distr 0.5.1)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleGenConfig {
    pub num_classes: usize,
    pub num_samples: usize,
    /// Symmetric Dirichlet concentration.
    pub alpha: f64,
    /// Miscalibration scale `s`; the calibrating temperature.
    pub scale: f64,
    pub seed: u64,
}

impl OracleGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::arg("oracle generator needs at least 2 classes"));
        }
        if self.num_samples < 1 {
            return Err(Error::arg("oracle generator needs at least 1 sample"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::arg(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::arg(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

/// Generator parameters for one exit of a cascade trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchParams {
    /// Logit bonus of the true class, before scaling.
    pub signal: f64,
    pub noise_sigma: f64,
    /// Miscalibration scale applied to the whole logit vector.
    pub scale: f64,
}

impl BranchParams {
    pub const fn new(signal: f64, noise_sigma: f64, scale: f64) -> Self {
        Self {
            signal,
            noise_sigma,
            scale,
        }
    }

    /// Temperature that makes this exit's scaled softmax the true posterior.
    pub fn calibrating_temperature(&self) -> f64 {
        self.scale * self.noise_sigma * self.noise_sigma / self.signal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeGenConfig {
    pub num_classes: usize,
    pub num_samples: usize,
    pub branches: Vec<BranchParams>,
    pub seed: u64,
}

impl CascadeGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::arg("cascade generator needs at least 2 classes"));
        }
        if self.num_samples < 1 {
            return Err(Error::arg("cascade generator needs at least 1 sample"));
        }
        if self.branches.is_empty() {
            return Err(Error::arg("cascade generator needs at least one branch"));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if !(b.signal >= 0.0 && b.signal.is_finite()) {
                return Err(Error::arg(format!(
                    "branch {}: signal must be non-negative",
                    i + 1
                )));
            }
            if !(b.noise_sigma > 0.0 && b.noise_sigma.is_finite()) {
                return Err(Error::arg(format!(
                    "branch {}: noise sigma must be positive",
                    i + 1
                )));
            }
            if !(b.scale > 0.0 && b.scale.is_finite()) {
                return Err(Error::arg(format!(
                    "branch {}: scale must be positive",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Ten-class, 10,000-sample single-side-branch scenario: a weak device
/// branch made 3x overconfident, and a strong calibrated cloud exit.
pub fn demo_scenario(seed: u64) -> CascadeGenConfig {
    CascadeGenConfig {
        num_classes: 10,
        num_samples: 10_000,
        branches: vec![
            BranchParams::new(4.0, 2.0, 3.0),
            BranchParams::new(10.24, 3.2, 1.0),
        ],
        seed,
    }
}

/// [`demo_scenario`] with a second, stronger and equally overconfident
/// device branch inserted before the cloud exit.
pub fn two_branch_scenario(seed: u64) -> CascadeGenConfig {
    CascadeGenConfig {
        num_classes: 10,
        num_samples: 10_000,
        branches: vec![
            BranchParams::new(4.0, 2.0, 3.0),
            BranchParams::new(6.25, 2.5, 3.0),
            BranchParams::new(10.24, 3.2, 1.0),
        ],
        seed,
    }
}

/// An oracle-mode trace together with the posterior each record was built from.
#[derive(Debug, Clone)]
pub struct OracleTrace {
    pub dataset: TraceDataset,
    pub posteriors: Vec<Vec<f64>>,
}

pub fn gen_oracle_trace(cfg: &OracleGenConfig) -> Result<TraceDataset> {
    gen_oracle_trace_with_posteriors(cfg).map(|t| t.dataset)
}

pub fn gen_oracle_trace_with_posteriors(cfg: &OracleGenConfig) -> Result<OracleTrace> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let gamma = Gamma::new(cfg.alpha, 1.0).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut records = Vec::with_capacity(cfg.num_samples);
    let mut posteriors = Vec::with_capacity(cfg.num_samples);
    for id in 0..cfg.num_samples {
        let q = loop {
            let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            // all components underflowing to zero; redraw
            if total > 0.0 && total.is_finite() {
                break draws.into_iter().map(|g| g / total).collect::<Vec<_>>();
            }
        };
        let label = sample_categorical(&q, rng.random::<f64>());
        let logits = q
            .iter()
            .map(|&p| cfg.scale * p.ln().max(LOG_PROB_FLOOR))
            .collect();
        records.push(LogitRecord {
            sample_id: id as u64,
            label,
            logits: vec![logits],
        });
        posteriors.push(q);
    }

    let mut meta = BTreeMap::new();
    meta.insert("mode".into(), "oracle".into());
    meta.insert("k".into(), k.to_string());
    meta.insert("n".into(), cfg.num_samples.to_string());
    meta.insert("alpha".into(), cfg.alpha.to_string());
    meta.insert("s".into(), cfg.scale.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("rng".into(), RNG_NAME.into());
    Ok(OracleTrace {
        dataset: TraceDataset::new(k, 1, meta, records)?,
        posteriors,
    })
}

/// Inverse-CDF draw from `probs` using a uniform `u` in `[0, 1)`.
fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum just under 1
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

pub fn gen_cascade_trace(cfg: &CascadeGenConfig) -> Result<TraceDataset> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let noise = cfg
        .branches
        .iter()
        .map(|b| Normal::new(0.0, b.noise_sigma).map_err(|e| Error::arg(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut records = Vec::with_capacity(cfg.num_samples);
    for id in 0..cfg.num_samples {
        let label = rng.random_range(0..k);
        let logits = cfg
            .branches
            .iter()
            .zip(&noise)
            .map(|(b, dist)| {
                (0..k)
                    .map(|c| {
                        let signal = if c == label { b.signal } else { 0.0 };
                        b.scale * (signal + dist.sample(&mut rng))
                    })
                    .collect()
            })
            .collect();
        records.push(LogitRecord {
            sample_id: id as u64,
            label,
            logits,
        });
    }

    let mut meta = BTreeMap::new();
    meta.insert("mode".into(), "cascade".into());
    meta.insert("k".into(), k.to_string());
    meta.insert("n".into(), cfg.num_samples.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("rng".into(), RNG_NAME.into());
    let branches: Vec<String> = cfg
        .branches
        .iter()
        .map(|b| format!("{}:{}:{}", b.signal, b.noise_sigma, b.scale))
        .collect();
    meta.insert("branches".into(), branches.join(","));
    TraceDataset::new(k, cfg.branches.len(), meta, records)
}
