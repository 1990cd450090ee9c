//! The early-exit decision rule.
//!
//! A sample walks the exits in order. At exit `i` its logits are
//! temperature-scaled, turned into a confidence, and the sample stops there
//! if the confidence reaches `p_tar`. The final exit always answers. Exits
//! `1..=D` run on the device; anything deeper means the sample was offloaded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{
    fit_temperature, scaled_softmax, CalibrationResult, ProbabilityVector, SearchConfig,
};
use crate::error::{Error, Result};
use crate::trace::{LogitRecord, TraceDataset};

/// How a probability vector is reduced to a single confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceRule {
    /// The largest class probability.
    #[default]
    MaxProbability,
    /// `1 - H(p) / ln K`, so the same `p_tar` scale applies as for
    /// max-probability.
    Entropy,
}

impl fmt::Display for ConfidenceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfidenceRule::MaxProbability => f.write_str("max-probability"),
            ConfidenceRule::Entropy => f.write_str("entropy"),
        }
    }
}

impl FromStr for ConfidenceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-probability" | "max-prob" | "max" => Ok(ConfidenceRule::MaxProbability),
            "entropy" => Ok(ConfidenceRule::Entropy),
            other => Err(Error::arg(format!("unknown confidence rule {other:?}"))),
        }
    }
}

/// Returns `(predicted_class, confidence)`. The predicted class is the
/// argmax under either rule, with ties going to the lowest index.
pub fn confidence_of(probs: &ProbabilityVector, rule: ConfidenceRule) -> (usize, f64) {
    let (class, max) = probs.argmax();
    let confidence = match rule {
        ConfidenceRule::MaxProbability => max,
        ConfidenceRule::Entropy => {
            let p = probs.as_slice();
            let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            (1.0 - h / (p.len() as f64).ln()).clamp(0.0, 1.0)
        }
    };
    (class, confidence)
}

/// Per-exit temperatures, target confidence and device/cloud partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub p_tar: f64,
    /// One temperature per exit; all ones is the uncalibrated policy.
    pub temperatures: Vec<f64>,
    #[serde(default)]
    pub confidence_rule: ConfidenceRule,
    /// Number of leading exits hosted by the device.
    pub device_exit_count: usize,
}

impl ExitPolicy {
    pub fn new(
        p_tar: f64,
        temperatures: Vec<f64>,
        confidence_rule: ConfidenceRule,
        device_exit_count: usize,
    ) -> Result<Self> {
        let policy = Self {
            p_tar,
            temperatures,
            confidence_rule,
            device_exit_count,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// A policy with every temperature at 1.
    pub fn conventional(p_tar: f64, num_exits: usize, device_exit_count: usize) -> Result<Self> {
        Self::new(
            p_tar,
            vec![1.0; num_exits],
            ConfidenceRule::MaxProbability,
            device_exit_count,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_tar > 0.0 && self.p_tar < 1.0) {
            return Err(Error::arg(format!("p_tar {} not in (0, 1)", self.p_tar)));
        }
        self.check_structure()
    }

    fn check_structure(&self) -> Result<()> {
        if let Some(t) = self
            .temperatures
            .iter()
            .find(|t| !(t.is_finite() && **t > 0.0))
        {
            return Err(Error::arg(format!("temperature {t} must be positive")));
        }
        let b = self.temperatures.len();
        if self.device_exit_count < 1 || self.device_exit_count > b {
            return Err(Error::arg(format!(
                "device exit count {} not in 1..={b}",
                self.device_exit_count
            )));
        }
        Ok(())
    }

    pub fn num_exits(&self) -> usize {
        self.temperatures.len()
    }

    /// True when any temperature differs from 1.
    pub fn is_calibrated(&self) -> bool {
        self.temperatures.iter().any(|&t| t != 1.0)
    }

    pub fn with_p_tar(&self, p_tar: f64) -> Self {
        Self {
            p_tar,
            ..self.clone()
        }
    }
}

/// Where and how one sample was classified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub sample_id: u64,
    /// 1-based exit that produced the answer.
    pub exit_index: usize,
    pub predicted_class: usize,
    pub label: usize,
    pub confidence: f64,
    pub on_device: bool,
    pub correct: bool,
}

/// Runs the exit rule on one record.
///
/// `p_tar` is used as given, so values outside the open unit interval behave
/// as their limits (0 always fires at exit 1). [`ExitPolicy::validate`]
/// enforces the production range.
pub fn decide_exit(record: &LogitRecord, policy: &ExitPolicy) -> Result<ExitDecision> {
    policy.check_structure()?;
    let b = policy.num_exits();
    if record.num_exits() != b {
        return Err(Error::DimensionMismatch(format!(
            "sample {} has {} exits, policy has {b}",
            record.sample_id,
            record.num_exits()
        )));
    }
    for (i, (z, &t)) in record.logits.iter().zip(&policy.temperatures).enumerate() {
        let exit_index = i + 1;
        let probs = scaled_softmax(z, t)?;
        let (predicted_class, confidence) = confidence_of(&probs, policy.confidence_rule);
        if exit_index == b || confidence >= policy.p_tar {
            return Ok(ExitDecision {
                sample_id: record.sample_id,
                exit_index,
                predicted_class,
                label: record.label,
                confidence,
                on_device: exit_index <= policy.device_exit_count,
                correct: predicted_class == record.label,
            });
        }
    }
    unreachable!("the final exit always fires")
}

/// One decision per record, in dataset order.
pub fn run_cascade(dataset: &TraceDataset, policy: &ExitPolicy) -> Result<Vec<ExitDecision>> {
    if dataset.num_exits() != policy.num_exits() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} exits, policy has {}",
            dataset.num_exits(),
            policy.num_exits()
        )));
    }
    dataset
        .records()
        .iter()
        .map(|r| decide_exit(r, policy))
        .collect()
}

/// Which validation samples calibrate each exit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationSet {
    /// Every validation sample, at every exit.
    All,
    /// At exit `i`, only the samples that reach it: those no earlier exit
    /// accepted under the temperatures already fitted for those exits.
    Reaching { p_tar: f64, rule: ConfidenceRule },
}

/// Fits one temperature per exit, shallowest first.
pub fn calibrate_exits(
    validation: &TraceDataset,
    search: &SearchConfig,
    set: CalibrationSet,
) -> Result<Vec<CalibrationResult>> {
    let b = validation.num_exits();
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut results = Vec::with_capacity(b);
    let mut remaining: Vec<&LogitRecord> = validation.records().iter().collect();
    for exit in 1..=b {
        let logits: Vec<&[f64]> = remaining.iter().map(|r| r.exit_logits(exit)).collect();
        let labels: Vec<usize> = remaining.iter().map(|r| r.label).collect();
        if logits.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "no validation sample reaches exit {exit}"
            )));
        }
        let fit = fit_temperature(&logits, &labels, search)?;
        if let CalibrationSet::Reaching { p_tar, rule } = set {
            let mut kept = Vec::with_capacity(remaining.len());
            for r in remaining {
                let probs = scaled_softmax(r.exit_logits(exit), fit.temperature)?;
                if confidence_of(&probs, rule).1 < p_tar {
                    kept.push(r);
                }
            }
            remaining = kept;
        }
        results.push(fit);
    }
    Ok(results)
}

/// `sample_id,exit_index,on_device,predicted,label,confidence,correct`
pub fn decisions_to_csv(decisions: &[ExitDecision]) -> String {
    let mut out =
        String::from("sample_id,exit_index,on_device,predicted,label,confidence,correct\n");
    for d in decisions {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            d.sample_id,
            d.exit_index,
            d.on_device,
            d.predicted_class,
            d.label,
            d.confidence,
            d.correct
        ));
    }
    out
}
