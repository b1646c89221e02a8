//! Energy scoring and the in-distribution pass-through gates.
//!
//! E = -T * log sum_i exp(f_i / T) over a logit vector; lower energy marks a
//! sample as in-distribution. Two thresholds gate the pipeline: the first
//! (after the classifier) checks E_c alone, the final gate requires both
//! E_c < gamma_c and E_b < gamma_b, strictly.

use thiserror::Error;

use super::boxes::BoxPrediction;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("energy of an empty logit vector is undefined")]
    EmptyLogits,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("calibration rate must lie in (0, 1), got {0}")]
    BadRate(f64),
}

/// Temperature and the two gate thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub t: f64,
    pub gamma_c: f64,
    pub gamma_b: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            gamma_c: 0.0,
            gamma_b: 0.0,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.t <= 0.0 {
            return Err("energy temperature must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    In,
    Out,
}

/// Max-shifted stable form of -T * log sum exp(f/T).
pub fn energy_score(logits: &[f64], t: f64) -> Result<f64, EnergyError> {
    if logits.is_empty() {
        return Err(EnergyError::EmptyLogits);
    }
    if t <= 0.0 {
        return Err(EnergyError::BadTemperature(t));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&f| ((f - m) / t).exp()).sum();
    Ok(-m - t * sum.ln())
}

/// Logits backing the box-side energy: heading class logits then size class
/// logits, in that stable order.
pub fn box_energy_logits(p: &BoxPrediction) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.heading_logits.len() + p.size_logits.len());
    out.extend_from_slice(&p.heading_logits);
    out.extend_from_slice(&p.size_logits);
    out
}

/// Final gate: in-distribution iff both energies are strictly below their
/// thresholds.
pub fn id_passthrough(e_c: f64, e_b: f64, cfg: &EnergyConfig) -> GateDecision {
    if e_c < cfg.gamma_c && e_b < cfg.gamma_b {
        GateDecision::In
    } else {
        GateDecision::Out
    }
}

/// First gate (after the classifier): checks the classifier energy alone.
pub fn gate_classifier(e_c: f64, cfg: &EnergyConfig) -> GateDecision {
    if e_c < cfg.gamma_c {
        GateDecision::In
    } else {
        GateDecision::Out
    }
}

/// Smallest threshold passing at least `rate` of the given in-distribution
/// energies (strictly below). With k = ceil(rate * n), the threshold is the
/// smallest data value strictly above the k-th smallest energy, or max plus
/// a small epsilon when no such value exists.
pub fn calibrate_threshold(id_energies: &[f64], rate: f64) -> Result<f64, EnergyError> {
    if id_energies.is_empty() {
        return Err(EnergyError::EmptyLogits);
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(EnergyError::BadRate(rate));
    }
    let mut sorted = id_energies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let k = (rate * n as f64).ceil() as usize;
    let kth = sorted[k - 1];
    match sorted[k.min(n - 1)..].iter().find(|&&v| v > kth) {
        Some(&v) => Ok(v),
        None => {
            let max = sorted[n - 1];
            Ok(max + 1e-6 * max.abs().max(1.0))
        }
    }
}
