//! Reliability metrics over a set of exit decisions.
//!
//! Aggregate ratios (on-device classification probability, device and total
//! accuracy) use every decision. Outage and missed-deadline probabilities
//! are batch statistics: decisions are cut into consecutive batches in
//! dataset order and each batch is judged against `p_tar` (and `t_tar`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cascade::{run_cascade, ExitDecision, ExitPolicy};
use crate::error::{Error, Result};
use crate::latency::{batch_time, Aggregation, LatencyProfile};
use crate::trace::{batch_slices, TraceDataset};

/// Batch size used for outage and missed-deadline statistics by default.
pub const DEFAULT_BATCH_SIZE: usize = 512;

/// Application deadline on a batch's aggregated inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadlineSpec {
    pub t_tar: f64,
}

impl DeadlineSpec {
    pub fn new(t_tar: f64) -> Result<Self> {
        if t_tar.is_nan() || t_tar <= 0.0 {
            return Err(Error::arg(format!("deadline {t_tar} must be positive")));
        }
        Ok(Self { t_tar })
    }
}

/// How decisions are cut into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batching {
    pub size: usize,
    /// Discard a trailing batch smaller than `size`.
    pub drop_partial: bool,
}

impl Default for Batching {
    fn default() -> Self {
        Self {
            size: DEFAULT_BATCH_SIZE,
            drop_partial: false,
        }
    }
}

impl Batching {
    pub fn new(size: usize, drop_partial: bool) -> Result<Self> {
        if size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        Ok(Self { size, drop_partial })
    }

    fn batches<'a>(
        &self,
        decisions: &'a [ExitDecision],
    ) -> impl Iterator<Item = &'a [ExitDecision]> {
        batch_slices(decisions, self.size, self.drop_partial)
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// Share of samples classified on the device. The offloading probability is
/// one minus this.
pub fn device_classification_probability(decisions: &[ExitDecision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Empty("decisions"));
    }
    Ok(fraction(
        decisions.iter().filter(|d| d.on_device).count(),
        decisions.len(),
    ))
}

/// Accuracy among on-device decisions; `None` when nothing exits on the device.
pub fn device_accuracy(decisions: &[ExitDecision]) -> Option<f64> {
    let (n, hits) = decisions
        .iter()
        .filter(|d| d.on_device)
        .fold((0, 0), |(n, h), d| (n + 1, h + usize::from(d.correct)));
    (n > 0).then(|| fraction(hits, n))
}

pub fn total_accuracy(decisions: &[ExitDecision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Empty("decisions"));
    }
    Ok(fraction(
        decisions.iter().filter(|d| d.correct).count(),
        decisions.len(),
    ))
}

/// Mean confidence of the on-device decisions.
pub fn device_mean_confidence(decisions: &[ExitDecision]) -> Option<f64> {
    let (n, sum) = decisions
        .iter()
        .filter(|d| d.on_device)
        .fold((0usize, 0.0), |(n, s), d| (n + 1, s + d.confidence));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    /// `None` when no batch had an on-device sample.
    pub probability: Option<f64>,
    /// Batches with at least one on-device sample.
    pub counted_batches: usize,
    pub total_batches: usize,
}

/// Fraction of batches whose on-device accuracy falls below `p_tar`.
/// Batches without on-device samples are left out of the denominator.
pub fn outage_probability(
    decisions: &[ExitDecision],
    p_tar: f64,
    batching: Batching,
) -> Result<Outage> {
    if batching.size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let mut counted = 0;
    let mut outages = 0;
    let mut total = 0;
    for batch in batching.batches(decisions) {
        total += 1;
        if let Some(acc) = device_accuracy(batch) {
            counted += 1;
            outages += usize::from(acc < p_tar);
        }
    }
    Ok(Outage {
        probability: (counted > 0).then(|| fraction(outages, counted)),
        counted_batches: counted,
        total_batches: total,
    })
}

/// Fraction of batches that miss the deadline (aggregated time above
/// `t_tar`) or the accuracy target (accuracy over all the batch's samples
/// below `p_tar`).
pub fn missed_deadline_probability(
    decisions: &[ExitDecision],
    profile: &LatencyProfile,
    p_tar: f64,
    deadline: DeadlineSpec,
    batching: Batching,
    aggregation: Aggregation,
) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Empty("decisions"));
    }
    if batching.size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let mut total = 0;
    let mut missed = 0;
    for batch in batching.batches(decisions) {
        total += 1;
        let time = batch_time(batch, profile, aggregation)?;
        let acc = total_accuracy(batch)?;
        missed += usize::from(time > deadline.t_tar || acc < p_tar);
    }
    if total == 0 {
        return Err(Error::Empty("batches"));
    }
    Ok(fraction(missed, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch_index: usize,
    pub size: usize,
    pub device_count: usize,
    pub device_accuracy: Option<f64>,
    pub batch_accuracy: f64,
    pub batch_time_s: f64,
    /// `None` for batches without on-device samples.
    pub outage: Option<bool>,
    /// `None` when no deadline was given.
    pub missed: Option<bool>,
}

/// Every metric for one `(p_tar, t_tar, policy)` point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub p_tar: f64,
    pub t_tar: Option<f64>,
    pub calibrated: bool,
    pub device_classification_probability: f64,
    pub device_accuracy: Option<f64>,
    pub device_mean_confidence: Option<f64>,
    pub total_accuracy: f64,
    pub outage_probability: Option<f64>,
    pub outage_batches_counted: usize,
    pub missed_deadline_probability: Option<f64>,
    pub per_batch: Vec<BatchReport>,
}

impl ExperimentReport {
    pub fn offloading_probability(&self) -> f64 {
        1.0 - self.device_classification_probability
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSettings {
    pub batching: Batching,
    pub aggregation: Aggregation,
}

/// Computes an [`ExperimentReport`] from decisions already produced under a
/// policy with target `p_tar`.
pub fn evaluate(
    decisions: &[ExitDecision],
    p_tar: f64,
    calibrated: bool,
    profile: &LatencyProfile,
    deadline: Option<DeadlineSpec>,
    settings: EvalSettings,
) -> Result<ExperimentReport> {
    let device_prob = device_classification_probability(decisions)?;
    let total_acc = total_accuracy(decisions)?;

    let mut per_batch = Vec::new();
    for (batch_index, batch) in settings.batching.batches(decisions).enumerate() {
        let device_acc = device_accuracy(batch);
        let batch_acc = total_accuracy(batch)?;
        let time = batch_time(batch, profile, settings.aggregation)?;
        per_batch.push(BatchReport {
            batch_index,
            size: batch.len(),
            device_count: batch.iter().filter(|d| d.on_device).count(),
            device_accuracy: device_acc,
            batch_accuracy: batch_acc,
            batch_time_s: time,
            outage: device_acc.map(|a| a < p_tar),
            missed: deadline.map(|dl| time > dl.t_tar || batch_acc < p_tar),
        });
    }

    let counted = per_batch.iter().filter(|b| b.outage.is_some()).count();
    let outages = per_batch.iter().filter(|b| b.outage == Some(true)).count();
    let missed_prob = match deadline {
        Some(_) if per_batch.is_empty() => return Err(Error::Empty("batches")),
        Some(_) => Some(fraction(
            per_batch.iter().filter(|b| b.missed == Some(true)).count(),
            per_batch.len(),
        )),
        None => None,
    };

    Ok(ExperimentReport {
        p_tar,
        t_tar: deadline.map(|d| d.t_tar),
        calibrated,
        device_classification_probability: device_prob,
        device_accuracy: device_accuracy(decisions),
        device_mean_confidence: device_mean_confidence(decisions),
        total_accuracy: total_acc,
        outage_probability: (counted > 0).then(|| fraction(outages, counted)),
        outage_batches_counted: counted,
        missed_deadline_probability: missed_prob,
        per_batch,
    })
}

/// One report per `(p_tar, t_tar)` pair, `p_tar` varying slowest. The
/// cascade runs once per `p_tar`.
pub fn sweep(
    dataset: &TraceDataset,
    policy_template: &ExitPolicy,
    p_tar_grid: &[f64],
    t_tar_grid: &[f64],
    profile: &LatencyProfile,
    settings: EvalSettings,
) -> Result<Vec<ExperimentReport>> {
    if p_tar_grid.is_empty() || t_tar_grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let deadlines = t_tar_grid
        .iter()
        .map(|&t| DeadlineSpec::new(t))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(p_tar_grid.len() * deadlines.len());
    for &p_tar in p_tar_grid {
        let policy = policy_template.with_p_tar(p_tar);
        policy.validate()?;
        let decisions = run_cascade(dataset, &policy)?;
        for &deadline in &deadlines {
            reports.push(evaluate(
                &decisions,
                p_tar,
                policy.is_calibrated(),
                profile,
                Some(deadline),
                settings,
            )?);
        }
    }
    Ok(reports)
}

pub const REPORT_CSV_HEADER: &str =
    "p_tar,t_tar,calibrated,device_prob,device_acc,total_acc,outage_prob,outage_batches,missed_prob";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    /// The report as one CSV row; undefined values are left empty.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.p_tar,
            opt(self.t_tar),
            self.calibrated,
            self.device_classification_probability,
            opt(self.device_accuracy),
            self.total_accuracy,
            opt(self.outage_probability),
            self.outage_batches_counted,
            opt(self.missed_deadline_probability),
        )
    }
}

pub fn reports_to_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}
