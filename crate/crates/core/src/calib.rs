//! Softmax, temperature scaling and the temperature fit.
//!
//! Temperature scaling divides a logit vector by a single positive scalar
//! before the softmax. `T > 1` softens overconfident outputs without changing
//! the predicted class. The temperature is chosen to minimize the mean
//! negative log-likelihood of the true labels on a held-out set.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

/// Largest per-sample NLL term, `-ln(PROB_FLOOR)`.
pub fn nll_cap() -> f64 {
    -PROB_FLOOR.ln()
}

/// A softmax output: non-negative components summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Wraps `probs` after checking it is a distribution (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg("probability component outside [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index and value of the largest component; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        argmax(&self.0)
    }
}

/// First index of the maximum. Callers guarantee a non-empty, NaN-free slice.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::arg(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("non-finite logit"));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::arg(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn softmax_unchecked(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    check_logits(logits)?;
    Ok(ProbabilityVector(softmax_unchecked(logits.iter().copied())))
}

/// `softmax(logits / t)`. With `t == 1` this is exactly [`softmax`].
pub fn scaled_softmax(logits: &[f64], t: f64) -> Result<ProbabilityVector> {
    check_temperature(t)?;
    check_logits(logits)?;
    if t == 1.0 {
        return Ok(ProbabilityVector(softmax_unchecked(logits.iter().copied())));
    }
    Ok(ProbabilityVector(softmax_unchecked(
        logits.iter().map(|&z| z / t),
    )))
}

/// `-ln softmax(z / t)[label]` via log-sum-exp, capped at [`nll_cap`].
fn sample_nll(z: &[f64], label: usize, t: f64) -> f64 {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let sum: f64 = z.iter().map(|&v| (v / t - max).exp()).sum();
    let loss = max + sum.ln() - z[label] / t;
    loss.min(nll_cap())
}

fn check_samples<L: AsRef<[f64]>>(logits: &[L], labels: &[usize]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    if logits.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit vectors but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    for (z, &y) in logits.iter().zip(labels) {
        let z = z.as_ref();
        check_logits(z)?;
        if y >= z.len() {
            return Err(Error::arg(format!(
                "label {y} out of range for {} classes",
                z.len()
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(z / t)`.
pub fn nll<L: AsRef<[f64]>>(logits: &[L], labels: &[usize], t: f64) -> Result<f64> {
    check_temperature(t)?;
    check_samples(logits, labels)?;
    Ok(mean_nll(logits, labels, t))
}

// Summed in sample order so a given input always produces the same bits.
fn mean_nll<L: AsRef<[f64]>>(logits: &[L], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| sample_nll(z.as_ref(), y, t))
        .sum();
    total / logits.len() as f64
}

/// Search domain and tolerances for [`fit_temperature`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub t_min: f64,
    pub t_max: f64,
    /// Points in the log-spaced scan that seeds the golden-section search.
    pub coarse_points: usize,
    /// Absolute tolerance on `ln T`.
    pub log_tolerance: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            t_min: 0.05,
            t_max: 20.0,
            coarse_points: 40,
            log_tolerance: 1e-4,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_max > self.t_min && self.t_max.is_finite()) {
            return Err(Error::arg(format!(
                "bad temperature range [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.coarse_points < 3 {
            return Err(Error::arg("coarse scan needs at least 3 points"));
        }
        if self.log_tolerance.is_nan() || self.log_tolerance <= 0.0 {
            return Err(Error::arg("tolerance must be positive"));
        }
        Ok(())
    }
}

/// Outcome of a temperature fit for one exit branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(rename = "t")]
    pub temperature: f64,
    /// Mean NLL at `T = 1`.
    pub nll_before: f64,
    pub nll_after: f64,
    /// The optimum sits on a bound of the search range.
    pub clamped: bool,
    #[serde(rename = "n")]
    pub num_samples: usize,
}

/// Fits the temperature minimizing mean NLL over `[t_min, t_max]`.
///
/// The objective is scanned on a log-spaced grid, then refined by
/// golden-section search on `ln T` in the two grid cells around the best
/// scan point. If no temperature beats `T = 1` the result is `T = 1`.
pub fn fit_temperature<L: AsRef<[f64]>>(
    logits: &[L],
    labels: &[usize],
    search: &SearchConfig,
) -> Result<CalibrationResult> {
    search.validate()?;
    check_samples(logits, labels)?;
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        log::warn!(
            "fitting a temperature on {} samples that all share label {:?}",
            labels.len(),
            distinct.iter().next()
        );
    }

    let objective = |x: f64| mean_nll(logits, labels, x.exp());
    let lo = search.t_min.ln();
    let hi = search.t_max.ln();
    let n = search.coarse_points;

    let grid: Vec<f64> = (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&x| objective(x)).collect();
    let (best_idx, _) =
        values.iter().enumerate().fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) },
        );

    let mut best_x = grid[best_idx];
    let mut best_f = values[best_idx];
    let mut consider = |x: f64, f: f64| {
        if f < best_f {
            best_x = x;
            best_f = f;
        }
    };

    let mut a = grid[best_idx.saturating_sub(1)];
    let mut b = grid[(best_idx + 1).min(n - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    while b - a > search.log_tolerance {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    consider(c, fc);
    consider(d, fd);
    let mid = 0.5 * (a + b);
    consider(mid, objective(mid));

    let (mut temperature, mut clamped) = if best_x - lo <= search.log_tolerance {
        (search.t_min, true)
    } else if hi - best_x <= search.log_tolerance {
        (search.t_max, true)
    } else {
        (best_x.exp(), false)
    };
    let mut nll_after = mean_nll(logits, labels, temperature);
    let nll_before = mean_nll(logits, labels, 1.0);
    if nll_before < nll_after && (search.t_min..=search.t_max).contains(&1.0) {
        temperature = 1.0;
        clamped = false;
        nll_after = nll_before;
    }

    Ok(CalibrationResult {
        temperature,
        nll_before,
        nll_after,
        clamped,
        num_samples: logits.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Equal-width reliability diagram on `[0, 1]`, empty bins omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityCurve {
    /// Largest `|mean_confidence - accuracy|` over the non-empty bins.
    pub fn max_gap(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| (b.mean_confidence - b.accuracy).abs())
            .fold(0.0, f64::max)
    }

    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_mean_conf,accuracy,count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{}", b.mean_confidence, b.accuracy, b.count);
        }
        out
    }
}

pub fn reliability_curve(
    confidences: &[f64],
    correct: &[bool],
    num_bins: usize,
) -> Result<ReliabilityCurve> {
    if confidences.is_empty() {
        return Err(Error::Empty("reliability samples"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if num_bins == 0 {
        return Err(Error::arg("need at least one bin"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::arg(format!("confidence {c} outside [0, 1]")));
    }

    let mut sums = vec![(0.0f64, 0usize, 0usize); num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let idx = ((c * num_bins as f64) as usize).min(num_bins - 1);
        let slot = &mut sums[idx];
        slot.0 += c;
        slot.1 += usize::from(ok);
        slot.2 += 1;
    }
    let bins = sums
        .into_iter()
        .filter(|s| s.2 > 0)
        .map(|(conf, hits, count)| ReliabilityBin {
            mean_confidence: conf / count as f64,
            accuracy: hits as f64 / count as f64,
            count,
        })
        .collect();
    Ok(ReliabilityCurve { bins })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);

        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-15);
        assert!(p.as_slice()[1] < 1e-300);

        let p = softmax(&[700.0, -700.0, 3.0]).unwrap();
        ProbabilityVector::new(p.into_vec()).unwrap();
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax(&[1.0]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(scaled_softmax(&[1.0, 0.0], 0.0).is_err());
        assert!(scaled_softmax(&[1.0, 0.0], -2.0).is_err());
        assert!(scaled_softmax(&[1.0, 0.0], f64::NAN).is_err());
    }

    #[test]
    fn scaled_softmax_values() {
        let z = [2.0, 0.0];
        assert_eq!(scaled_softmax(&z, 1.0).unwrap(), softmax(&z).unwrap());
        let p = scaled_softmax(&z, 1.0).unwrap();
        assert!((p.as_slice()[0] - 0.8808).abs() < 1e-4);
        assert!((p.as_slice()[0] - logistic(2.0)).abs() < 1e-15);

        let p = scaled_softmax(&z, 1e6).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-6));

        let p = scaled_softmax(&z, 2.0).unwrap();
        assert!((p.as_slice()[0] - logistic(1.0)).abs() < 1e-15);
        assert!((p.as_slice()[0] - 0.7311).abs() < 1e-4);
        assert!((p.as_slice()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = softmax(&[1.0, 3.0, 3.0]).unwrap();
        assert_eq!(p.argmax().0, 1);
        assert_eq!(argmax(&[0.25; 4]).0, 0);
    }

    #[test]
    fn nll_fixtures() {
        let v = nll(&[[0.0, 0.0]], &[1], 1.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = nll(&[[2.0, 0.0]], &[0], 1.0).unwrap();
        assert!((v + logistic(2.0).ln()).abs() < 1e-15);
        assert!((v - 0.1269).abs() < 1e-4);

        // a probability that underflows is capped rather than infinite
        let v = nll(&[[0.0, 2000.0]], &[0], 1.0).unwrap();
        assert_eq!(v, nll_cap());

        let empty: [[f64; 2]; 0] = [];
        assert!(matches!(nll(&empty, &[], 1.0), Err(Error::Empty(_))));
        assert!(nll(&[[0.0, 0.0]], &[0, 1], 1.0).is_err());
        assert!(nll(&[[0.0, 0.0]], &[2], 1.0).is_err());
    }

    #[test]
    fn fit_closed_form_fixture() {
        let z = [[2.0, 0.0]; 3];
        let r = fit_temperature(&z, &[0, 0, 1], &SearchConfig::default()).unwrap();
        let want = 2.0 / 2f64.ln();
        assert!((r.temperature - want).abs() < 1e-3, "{r:?}");
        assert!(!r.clamped);
        assert!(r.nll_after <= r.nll_before);
        assert_eq!(r.num_samples, 3);
    }

    #[test]
    fn fit_clamps_at_both_bounds() {
        let cfg = SearchConfig::default();
        let r = fit_temperature(&[[2.0, 0.0]; 2], &[0, 1], &cfg).unwrap();
        assert!(r.clamped);
        assert_eq!(r.temperature, cfg.t_max);

        // every sample right: sharper is always better
        let r = fit_temperature(&[[2.0, 0.0], [0.0, 2.0]], &[0, 1], &cfg).unwrap();
        assert!(r.clamped);
        assert_eq!(r.temperature, cfg.t_min);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let empty: [[f64; 2]; 0] = [];
        assert!(fit_temperature(&empty, &[], &SearchConfig::default()).is_err());
        let bad = SearchConfig {
            t_min: 2.0,
            t_max: 1.0,
            ..SearchConfig::default()
        };
        assert!(fit_temperature(&[[1.0, 0.0]], &[0], &bad).is_err());
    }

    #[test]
    fn calibration_result_json_shape() {
        let r = CalibrationResult {
            temperature: 2.5,
            nll_before: 1.0,
            nll_after: 0.5,
            clamped: false,
            num_samples: 7,
        };
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"t": 2.5, "nll_before": 1.0, "nll_after": 0.5, "clamped": false, "n": 7})
        );
    }

    #[test]
    fn reliability_fixtures() {
        let c = reliability_curve(&[0.9; 5], &[true; 5], 10).unwrap();
        assert_eq!(c.bins.len(), 1);
        assert!((c.bins[0].mean_confidence - 0.9).abs() < 1e-15);
        assert_eq!(c.bins[0].accuracy, 1.0);
        assert_eq!(c.bins[0].count, 5);

        let c = reliability_curve(&[0.1, 0.9], &[false, true], 2).unwrap();
        assert_eq!(
            c.bins,
            vec![
                ReliabilityBin {
                    mean_confidence: 0.1,
                    accuracy: 0.0,
                    count: 1
                },
                ReliabilityBin {
                    mean_confidence: 0.9,
                    accuracy: 1.0,
                    count: 1
                },
            ]
        );
        assert_eq!(
            c.to_csv(),
            "bin_mean_conf,accuracy,count\n0.1,0,1\n0.9,1,1\n"
        );

        // confidence 1.0 lands in the top bin
        let c = reliability_curve(&[1.0], &[true], 4).unwrap();
        assert_eq!(c.bins.len(), 1);

        assert!(reliability_curve(&[], &[], 10).is_err());
        assert!(reliability_curve(&[0.5], &[true], 0).is_err());
        assert!(reliability_curve(&[1.5], &[true], 2).is_err());
    }
}
