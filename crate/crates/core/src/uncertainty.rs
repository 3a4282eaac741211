//! Generation uncertainty and gate calibration.
//!
//! The gate statistic is the mean per-step entropy (in nats) of the student's
//! output distributions. Top-k distributions returned by remote services are
//! renormalized over the mass they carry; the resulting entropy underestimates
//! the full-vocabulary value and the distribution keeps `is_truncated = true`.

use serde::{Deserialize, Serialize};

use crate::domain::TokenDistribution;
use crate::error::{Error, Result};
use crate::metrics::{point_biserial, CorrelationResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyVariant {
    #[default]
    AllSequence,
    FirstToken,
    EosToken,
}

/// Entropy of one step, renormalized over the returned probability mass.
pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    let mass: f64 = dist.probs.values().sum();
    let h: f64 = dist
        .probs
        .values()
        .map(|&p| {
            let q = p / mass;
            if q > 0.0 {
                -q * q.ln()
            } else {
                0.0
            }
        })
        .sum();
    // Rounding can leave a deterministic distribution at -0.0 or a hair below.
    h.max(0.0)
}

pub fn sequence_entropy(dists: &[TokenDistribution], variant: EntropyVariant) -> Result<f64> {
    let (first, last) = match (dists.first(), dists.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::EmptySequence),
    };
    Ok(match variant {
        EntropyVariant::AllSequence => dists.iter().map(token_entropy).sum::<f64>() / dists.len() as f64,
        EntropyVariant::FirstToken => token_entropy(first),
        EntropyVariant::EosToken => token_entropy(last),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub uncertainty: f64,
    pub correct: bool,
}

impl CalibrationRecord {
    pub fn new(uncertainty: f64, correct: bool) -> Self {
        Self { uncertainty, correct }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "q")]
pub enum CalibrationTarget {
    /// Threshold whose "accept iff u < delta" rule best predicts correctness.
    #[default]
    MaxAccuracySplit,
    /// q-quantile of the observed uncertainties.
    Quantile(f64),
}

fn sorted_uncertainties(records: &[CalibrationRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut u: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
    if u.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::DegenerateInput("uncertainties must be finite and >= 0".into()));
    }
    u.sort_by(f64::total_cmp);
    Ok(u)
}

/// Quantile with midpoint interpolation between the two bracketing order
/// statistics.
pub fn quantile_midpoint(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    (sorted[lo] + sorted[hi]) / 2.0
}

pub fn calibrate_threshold(records: &[CalibrationRecord], target: CalibrationTarget) -> Result<f64> {
    let sorted = sorted_uncertainties(records)?;
    match target {
        CalibrationTarget::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidConfig(format!("quantile {q} outside [0, 1]")));
            }
            Ok(quantile_midpoint(&sorted, q))
        }
        CalibrationTarget::MaxAccuracySplit => {
            let n_correct = records.iter().filter(|r| r.correct).count();
            if n_correct == 0 || n_correct == records.len() {
                return Err(Error::DegenerateInput(
                    "max-accuracy split needs both correct and incorrect records".into(),
                ));
            }
            let mut uniq = sorted;
            uniq.dedup();
            if uniq.len() < 2 {
                return Err(Error::DegenerateInput("all uncertainties are equal".into()));
            }
            // Sweep candidates left to right: records with u < delta are
            // predicted correct, the rest incorrect.
            let mut by_u: Vec<&CalibrationRecord> = records.iter().collect();
            by_u.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty));
            let total_wrong = records.len() - n_correct;
            let (mut correct_below, mut wrong_below) = (0usize, 0usize);
            let mut cursor = 0;
            let mut best: Option<(usize, f64)> = None;
            for w in uniq.windows(2) {
                let delta = (w[0] + w[1]) / 2.0;
                while cursor < by_u.len() && by_u[cursor].uncertainty < delta {
                    if by_u[cursor].correct {
                        correct_below += 1;
                    } else {
                        wrong_below += 1;
                    }
                    cursor += 1;
                }
                let agree = correct_below + (total_wrong - wrong_below);
                if best.is_none_or(|(b, _)| agree > b) {
                    best = Some((agree, delta));
                }
            }
            Ok(best.expect("at least one candidate").1)
        }
    }
}

pub fn uncertainty_correlation(records: &[CalibrationRecord]) -> Result<CorrelationResult> {
    let u: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
    let c: Vec<u8> = records.iter().map(|r| u8::from(r.correct)).collect();
    point_biserial(&u, &c)
}

/// Emitted by `icd calibrate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub delta: f64,
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn calibration_report(records: &[CalibrationRecord], target: CalibrationTarget) -> Result<CalibrationReport> {
    let delta = calibrate_threshold(records, target)?;
    let corr = uncertainty_correlation(records)?;
    Ok(CalibrationReport {
        delta,
        r: corr.r,
        p_value: corr.p_value,
        n: corr.n,
    })
}
