//! Monte Carlo estimates of the step-size/gradient correlation bias and of
//! the one-step descent inequality, both conditioned on a fixed state.

use serde::{Deserialize, Serialize};

use super::{
    leq_tol, proxy_step_size, AnalysisError, CheckStatus, MeanAccumulator, Result, MC_SLACK_SE,
};
use crate::linalg::norm_sq;
use crate::problems::{for_each_draw, NoiseModel, Objective};
use crate::rng::Stream;

/// Resample counts below this are flagged as low power by
/// [`verify_descent_lemma`].
pub const DESCENT_LOW_POWER_SAMPLES: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate {
    /// `4 sqrt(mean ratio)`.
    pub bias: f64,
    /// Standard error of `bias` by the delta method.
    pub bias_se: f64,
    /// Mean of `|g|^2 / (b_{t-1}^2 + |g|^2)` over the draws.
    pub ratio_mean: f64,
    pub ratio_se: f64,
    pub samples: usize,
}

fn bias_from_ratio(ratio: &MeanAccumulator, samples: usize) -> BiasEstimate {
    let ratio_mean = ratio.mean();
    let ratio_se = ratio.std_error();
    let bias = 4.0 * ratio_mean.sqrt();
    let bias_se = if ratio_mean > 0.0 {
        2.0 * ratio_se / ratio_mean.sqrt()
    } else {
        0.0
    };
    BiasEstimate {
        bias,
        bias_se,
        ratio_mean,
        ratio_se,
        samples,
    }
}

/// Plug-in estimate of `4 sqrt(E_t[|g|^2 / (b_{t-1}^2 + |g|^2)])` from
/// `samples` fresh draws at `w`.
///
/// The square root of a sample mean is biased low; the estimate is reported
/// as is, together with its standard error.
pub fn estimate_bias(
    objective: &dyn Objective,
    noise: &NoiseModel,
    w: &[f64],
    b_sq_before: f64,
    samples: usize,
    rng: &mut Stream,
) -> Result<BiasEstimate> {
    if samples < 2 {
        return Err(AnalysisError::TooFewSamples {
            needed: 2,
            got: samples,
        });
    }
    if !(b_sq_before > 0.0) {
        return Err(AnalysisError::NonPositiveAccumulator(b_sq_before));
    }
    // Degenerate noise: every draw equals the true gradient.
    let draws = if noise.is_noiseless() { 1 } else { samples };
    let mut ratio = MeanAccumulator::default();
    for_each_draw(objective, noise, w, draws, rng, |g| {
        let g_sq = norm_sq(g);
        ratio.push(g_sq / (b_sq_before + g_sq));
    })?;
    Ok(bias_from_ratio(&ratio, samples))
}

/// Outcome of the one-step descent check at a fixed state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    /// `(eta_tilde / 2) (1 - sigma1 bias) |grad F|^2`.
    pub lhs: f64,
    /// `E_t[F(w_t) - F(w_{t+1})] + c0 E_t[ratio]`, estimated.
    pub rhs: f64,
    pub combined_se: f64,
    /// `rhs + slack - lhs`.
    pub margin: f64,
    /// `1 - sigma1 bias`; negative means the left side is trivially small.
    pub drift_coefficient: f64,
    pub bias: BiasEstimate,
    pub samples: usize,
    pub low_power: bool,
    pub status: CheckStatus,
}

/// Checks
/// `(eta_tilde/2)(1 - sigma1 bias_t)|grad F_t|^2 <= E_t[F_t - F_{t+1}] + c0 E_t[ratio]`
/// with `c0 = 2 eta sigma0 + L eta^2 / 2`, estimating the conditional
/// expectations from `samples` fresh draws at `w` with accumulator
/// `b_sq_before`.
///
/// The inequality is accepted when it holds within [`MC_SLACK_SE`] combined
/// standard errors (the right side's and, through the bias, the left
/// side's). Without noise everything is exact and the comparison is
/// deterministic.
#[allow(clippy::too_many_arguments)]
pub fn verify_descent_lemma(
    objective: &dyn Objective,
    noise: &NoiseModel,
    w: &[f64],
    b_sq_before: f64,
    eta: f64,
    smoothness: f64,
    samples: usize,
    rng: &mut Stream,
) -> Result<DescentReport> {
    if samples < 2 {
        return Err(AnalysisError::TooFewSamples {
            needed: 2,
            got: samples,
        });
    }
    if !(eta > 0.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "eta must be positive, got {eta}"
        )));
    }
    let (sigma0, sigma1) = (noise.sigma0(), noise.sigma1());
    let grad = objective.gradient(w);
    let grad_sq = norm_sq(&grad);
    let eta_tilde = proxy_step_size(b_sq_before, grad_sq, eta, sigma0, sigma1)?;
    let c0 = 2.0 * eta * sigma0 + 0.5 * smoothness * eta * eta;
    let f_now = objective.value(w);

    let draws = if noise.is_noiseless() { 1 } else { samples };
    let mut ratio = MeanAccumulator::default();
    let mut combined = MeanAccumulator::default();
    let mut next = vec![0.0; w.len()];
    for_each_draw(objective, noise, w, draws, rng, |g| {
        let g_sq = norm_sq(g);
        let b_sq = b_sq_before + g_sq;
        let scale = eta / b_sq.sqrt();
        for ((n, wi), gi) in next.iter_mut().zip(w).zip(g) {
            *n = wi - scale * gi;
        }
        let r = g_sq / b_sq;
        ratio.push(r);
        combined.push(f_now - objective.value(&next) + c0 * r);
    })?;

    let bias = bias_from_ratio(&ratio, samples);
    let drift_coefficient = 1.0 - sigma1 * bias.bias;
    let lhs = 0.5 * eta_tilde * drift_coefficient * grad_sq;
    let rhs = combined.mean();
    let lhs_se = 0.5 * eta_tilde * sigma1 * grad_sq * bias.bias_se;
    let combined_se = (combined.std_error().powi(2) + lhs_se * lhs_se).sqrt();
    let slack = MC_SLACK_SE * combined_se;
    let holds = leq_tol(lhs, rhs + slack);
    let status = match (holds, drift_coefficient < 0.0) {
        (false, _) => CheckStatus::Fail,
        (true, true) => CheckStatus::Vacuous,
        (true, false) => CheckStatus::Pass,
    };
    Ok(DescentReport {
        lhs,
        rhs,
        combined_se,
        margin: rhs + slack - lhs,
        drift_coefficient,
        bias,
        samples,
        low_power: samples < DESCENT_LOW_POWER_SAMPLES,
        status,
    })
}
