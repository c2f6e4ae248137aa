//! Analysis quantities and checkers for AdaGrad-Norm trajectories.
//!
//! A trajectory is a slice of [`StepRecord`]s, one per step `t = 1..=T`.
//! The checkers never look at the optimizer; they take the recorded numbers
//! plus the ground-truth problem constants in [`AnalysisParams`] and report
//! each inequality as a [`CheckRecord`].
//!
//! Deterministic inequalities are compared with a relative floating-point
//! allowance of [`REL_TOL`] plus [`ABS_FLOOR`]. Monte Carlo checks use [`MC_SLACK_SE`] standard
//! errors of slack.

mod bias;
mod bounds;
mod checks;
mod compensation;
mod good_times;

pub use bias::{estimate_bias, verify_descent_lemma, BiasEstimate, DescentReport};
pub use bounds::{
    f_poly, good_set_bounds, sum_grad_bound, theorem_bound_small_noise, theorem_bound_sqrt,
    theorem_constants, ProblemConstants, TheoremConstants,
};
pub use checks::{
    check_gradient_drift, check_log_sum_inequality, check_nice_event, check_record_invariants,
    check_step_decay, NiceEventReport,
};
pub use compensation::{
    build_compensation_sets, validate_assignment, verify_compensation_inequality,
    CompensationAssignment, CompensationCheck, CompensationSet,
};
pub use good_times::{apply_classification, classify_times, GoodBadClassification, ThresholdRule};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative allowance for deterministic floating-point comparisons.
pub const REL_TOL: f64 = 1e-9;

/// Absolute allowance added to every exact comparison: the smallest normal
/// `f64`. Subnormal values carry too few significant bits for [`REL_TOL`].
pub const ABS_FLOOR: f64 = f64::MIN_POSITIVE;

/// Standard errors of slack granted to Monte Carlo assertions.
pub const MC_SLACK_SE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("accumulator must be positive, got {0}")]
    NonPositiveAccumulator(f64),
    #[error("at least {needed} resamples are required, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no step carries a bias estimate; cannot classify good and bad times")]
    MissingBiasEstimates,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Problem(#[from] crate::problems::ProblemError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Everything measured at step `t` of an AdaGrad-Norm run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    /// `F(w_t)`.
    pub f: f64,
    /// `|grad F(w_t)|^2`.
    pub grad_norm_sq: f64,
    /// `|g_t|^2`.
    pub sgrad_norm_sq: f64,
    /// `b_{t-1}^2`.
    pub b_sq_before: f64,
    /// `b_t^2 = b_{t-1}^2 + |g_t|^2`.
    pub b_sq_after: f64,
    /// Realized step size `eta / b_t`.
    pub eta_t: f64,
    /// Decorrelated proxy, see [`proxy_step_size`].
    pub eta_tilde_t: f64,
    /// `|w_{t+1} - w_t|^2`.
    pub step_norm_sq: f64,
    pub bias_est: Option<f64>,
    pub bias_se: Option<f64>,
    pub is_good: Option<bool>,
}

/// Ground-truth constants the checkers need. None of these are visible to
/// the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    pub eta: f64,
    pub b0_sq: f64,
    pub smoothness: f64,
    pub sigma0: f64,
    pub sigma1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The inequality holds but says nothing (e.g. negative left side by
    /// construction, or probability level 1).
    Vacuous,
    /// Not evaluated; see `detail`.
    Skipped,
    /// Evaluated but with too little data to assert.
    LowPower,
}

impl CheckStatus {
    pub fn is_failure(self) -> bool {
        self == CheckStatus::Fail
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Vacuous => "vacuous",
            CheckStatus::Skipped => "skipped",
            CheckStatus::LowPower => "low_power",
        }
    }
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    /// Short tag naming the claim being checked.
    pub claim: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`.
    pub margin: f64,
    pub status: CheckStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl CheckRecord {
    pub fn new(name: &str, claim: &str, lhs: f64, rhs: f64, status: CheckStatus) -> Self {
        Self {
            name: name.to_string(),
            claim: claim.to_string(),
            lhs,
            rhs,
            margin: rhs - lhs,
            status,
            detail: String::new(),
        }
    }

    /// Deterministic comparison `lhs <= rhs` up to [`REL_TOL`].
    pub fn compare(name: &str, claim: &str, lhs: f64, rhs: f64) -> Self {
        let status = if leq_tol(lhs, rhs) {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        Self::new(name, claim, lhs, rhs, status)
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn passed(&self) -> bool {
        !self.status.is_failure()
    }
}

/// `lhs <= rhs` with relative allowance [`REL_TOL`] and absolute allowance
/// [`ABS_FLOOR`]. NaN never passes.
pub fn leq_tol(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + REL_TOL * lhs.abs().max(rhs.abs()) + ABS_FLOOR
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOL * a.abs().max(b.abs()) + ABS_FLOOR
}

/// Decorrelated step-size proxy
/// `eta / sqrt(b_{t-1}^2 + (1 + sigma1^2) |grad F(w_t)|^2 + sigma0^2)`.
pub fn proxy_step_size(
    b_sq_before: f64,
    grad_norm_sq: f64,
    eta: f64,
    sigma0: f64,
    sigma1: f64,
) -> Result<f64> {
    if !(b_sq_before > 0.0) {
        return Err(AnalysisError::NonPositiveAccumulator(b_sq_before));
    }
    let denom = b_sq_before + (1.0 + sigma1 * sigma1) * grad_norm_sq + sigma0 * sigma0;
    Ok(eta / denom.sqrt())
}

/// Number of compensating good times per bad time,
/// `max{8 ceil(4 sigma1 - 1), 0}`.
pub fn n_comp(sigma1: f64) -> usize {
    let k = (4.0 * sigma1 - 1.0).ceil();
    if k <= 0.0 {
        0
    } else {
        8 * k as usize
    }
}

/// Mean and standard error of the mean, accumulated in input order.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct MeanAccumulator {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Unbiased sample variance divided by `n`.
    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let mean = self.mean();
        let var = ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}
