//! Good/bad classification of steps.
//!
//! Step `t` is good when `1 - sigma1 * bias_t >= 1/2`, equivalently when the
//! conditional mean ratio `E_t[|g|^2/(b_{t-1}^2 + |g|^2)]` is at most
//! `1/(64 sigma1^2)`. Since the ratio never exceeds 1, every step is good
//! when `sigma1 <= 1/8`, whether or not it was instrumented.

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `1 - sigma1 * bias_t >= 1/2`.
    BiasThreshold,
    /// `ratio_t <= 1/(64 sigma1^2)` with `ratio_t = (bias_t / 4)^2`.
    RatioThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodBadClassification {
    pub good: Vec<u64>,
    pub bad: Vec<u64>,
    /// Steps without a bias estimate; excluded from both sets.
    pub unknown: Vec<u64>,
    pub rule: ThresholdRule,
}

impl GoodBadClassification {
    pub fn horizon(&self) -> usize {
        self.good.len() + self.bad.len() + self.unknown.len()
    }

    /// Fraction of steps that were classified.
    pub fn coverage(&self) -> f64 {
        let total = self.horizon();
        if total == 0 {
            1.0
        } else {
            (self.good.len() + self.bad.len()) as f64 / total as f64
        }
    }
}

fn is_good(bias: f64, sigma1: f64, rule: ThresholdRule) -> bool {
    match rule {
        ThresholdRule::BiasThreshold => 1.0 - sigma1 * bias >= 0.5,
        ThresholdRule::RatioThreshold => {
            if sigma1 == 0.0 {
                return true;
            }
            let ratio = (bias / 4.0) * (bias / 4.0);
            ratio <= 1.0 / (64.0 * sigma1 * sigma1)
        }
    }
}

/// Splits the steps of `records` into good, bad and unknown times.
pub fn classify_times(
    records: &[StepRecord],
    sigma1: f64,
    rule: ThresholdRule,
) -> Result<GoodBadClassification> {
    if !(sigma1 >= 0.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "sigma1 must be nonnegative, got {sigma1}"
        )));
    }
    let mut out = GoodBadClassification {
        good: Vec::new(),
        bad: Vec::new(),
        unknown: Vec::new(),
        rule,
    };
    if sigma1 <= 0.125 {
        out.good = records.iter().map(|r| r.t).collect();
        return Ok(out);
    }
    if !records.is_empty() && records.iter().all(|r| r.bias_est.is_none()) {
        return Err(AnalysisError::MissingBiasEstimates);
    }
    for r in records {
        match r.bias_est {
            Some(bias) if is_good(bias, sigma1, rule) => out.good.push(r.t),
            Some(_) => out.bad.push(r.t),
            None => out.unknown.push(r.t),
        }
    }
    Ok(out)
}

/// Writes the classification into the `is_good` column.
pub fn apply_classification(records: &mut [StepRecord], classification: &GoodBadClassification) {
    let (mut good, mut bad) = (
        classification.good.iter().peekable(),
        classification.bad.iter().peekable(),
    );
    for r in records.iter_mut() {
        r.is_good = if good.peek() == Some(&&r.t) {
            good.next();
            Some(true)
        } else if bad.peek() == Some(&&r.t) {
            bad.next();
            Some(false)
        } else {
            None
        };
    }
}
