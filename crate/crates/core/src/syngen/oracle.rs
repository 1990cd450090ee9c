//! Brute-force reference implementations used by the test suites.
//!
//! Nothing here calls into [`crate::calib`] or [`crate::cascade`]; the
//! softmax, NLL and exit scan are written out again from their definitions so
//! the optimized paths can be checked against them.

use crate::cascade::{ConfidenceRule, ExitDecision, ExitPolicy};
use crate::error::{Error, Result};
use crate::trace::LogitRecord;

/// `lo, lo + step, lo + 2*step, ...` up to and including `hi`.
pub fn dense_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0 && hi >= lo);
    let n = ((hi - lo) / step).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
    if hi - grid[n] > step * 1e-6 {
        grid.push(hi);
    } else {
        grid[n] = hi;
    }
    grid
}

fn probabilities(z: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
    let mut top = scaled[0];
    for &v in &scaled {
        if v > top {
            top = v;
        }
    }
    let exps: Vec<f64> = scaled.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn grid_nll<L: AsRef<[f64]>>(logits: &[L], labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let p = probabilities(z.as_ref(), t)[y];
        total -= p.max(1e-300).ln();
    }
    total / logits.len() as f64
}

/// Exhaustive argmin of mean NLL over `t_grid`; the first minimum wins.
pub fn brute_force_temperature<L: AsRef<[f64]>>(
    logits: &[L],
    labels: &[usize],
    t_grid: &[f64],
) -> Result<f64> {
    if t_grid.is_empty() {
        return Err(Error::Empty("temperature grid"));
    }
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::arg("need equally many logit vectors and labels"));
    }
    let mut best_t = t_grid[0];
    let mut best = f64::INFINITY;
    for &t in t_grid {
        let v = grid_nll(logits, labels, t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Two-stage exhaustive search: every point of a `coarse_step` grid over
/// `[lo, hi]`, then every point of a `fine_step` grid within one coarse step
/// of the coarse winner. Used where a full fine grid over the whole range
/// would take too long on large traces.
pub fn refined_grid_temperature<L: AsRef<[f64]>>(
    logits: &[L],
    labels: &[usize],
    lo: f64,
    hi: f64,
    coarse_step: f64,
    fine_step: f64,
) -> Result<f64> {
    let coarse = brute_force_temperature(logits, labels, &dense_grid(lo, hi, coarse_step))?;
    let window = dense_grid(
        (coarse - coarse_step).max(lo),
        (coarse + coarse_step).min(hi),
        fine_step,
    );
    brute_force_temperature(logits, labels, &window)
}

/// Straight re-implementation of the exit scan.
pub fn brute_force_cascade(record: &LogitRecord, policy: &ExitPolicy) -> ExitDecision {
    let last = record.logits.len();
    let mut exit = 1;
    loop {
        let p = probabilities(&record.logits[exit - 1], policy.temperatures[exit - 1]);
        let mut class = 0;
        for c in 1..p.len() {
            if p[c] > p[class] {
                class = c;
            }
        }
        let confidence = match policy.confidence_rule {
            ConfidenceRule::MaxProbability => p[class],
            ConfidenceRule::Entropy => {
                let mut h = 0.0;
                for &v in &p {
                    if v > 0.0 {
                        h -= v * v.ln();
                    }
                }
                (1.0 - h / (p.len() as f64).ln()).clamp(0.0, 1.0)
            }
        };
        if confidence >= policy.p_tar || exit == last {
            return ExitDecision {
                sample_id: record.sample_id,
                exit_index: exit,
                predicted_class: class,
                label: record.label,
                confidence,
                on_device: exit <= policy.device_exit_count,
                correct: class == record.label,
            };
        }
        exit += 1;
    }
}
