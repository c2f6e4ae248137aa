//! Explicit constants and high-probability bounds for AdaGrad-Norm.

use serde::{Deserialize, Serialize};

use super::{n_comp, AnalysisError, Result};

/// Inputs to the theorem constants: hyperparameters, problem constants and
/// the initial point's gradient norm and optimality gap `F(w_1) - F*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub eta: f64,
    pub b0: f64,
    pub smoothness: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub grad1_norm: f64,
    pub f1_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub n_comp: usize,
    pub c0: f64,
    pub c0_tilde: f64,
    pub c1_tilde: f64,
    pub c1: f64,
    pub c2: f64,
}

fn large_noise(sigma1: f64) -> bool {
    sigma1 > 0.125
}

fn validate(p: &ProblemConstants) -> Result<()> {
    if !(p.eta > 0.0 && p.eta.is_finite()) {
        return Err(AnalysisError::InvalidParameter(format!(
            "eta must be positive, got {}",
            p.eta
        )));
    }
    if !(p.b0 > 0.0 && p.b0.is_finite()) {
        return Err(AnalysisError::InvalidParameter(format!(
            "b0 must be positive, got {}",
            p.b0
        )));
    }
    let nonneg = [
        ("L", p.smoothness),
        ("sigma0", p.sigma0),
        ("sigma1", p.sigma1),
        ("|grad F(w_1)|", p.grad1_norm),
        ("F(w_1) - F*", p.f1_gap),
    ];
    for (name, v) in nonneg {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(AnalysisError::InvalidParameter(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    Ok(())
}

/// `c0 = 2 eta sigma0 + L eta^2 / 2`,
/// `c0~ = c0 + 128 eta sigma1^2 |grad F_1| 1{sigma1 > 1/8}`,
/// `c1~ = L eta^2 n (n/8 + 2)(64 sigma1^2 + 8192 sigma1^4 + 2)`,
/// `c1 = c0~ + c1~` and
/// `c2 = max{b0^2 + sigma0^2 + 32(1 + 8(1 + n) sigma1^2)(|grad F_1|^2 + eta^2 L^2),
///           512((F_1 - F* + c1)/eta)^2}`, with `n = n_comp(sigma1)`.
pub fn theorem_constants(p: &ProblemConstants) -> Result<TheoremConstants> {
    validate(p)?;
    let n = n_comp(p.sigma1);
    let nf = n as f64;
    let (eta, l, s0, s1) = (p.eta, p.smoothness, p.sigma0, p.sigma1);
    let s1_sq = s1 * s1;
    let c0 = 2.0 * eta * s0 + 0.5 * l * eta * eta;
    let c0_tilde = if large_noise(s1) {
        c0 + 128.0 * eta * s1_sq * p.grad1_norm
    } else {
        c0
    };
    let c1_tilde =
        l * eta * eta * nf * (nf / 8.0 + 2.0) * (64.0 * s1_sq + 8192.0 * s1_sq * s1_sq + 2.0);
    let c1 = c0_tilde + c1_tilde;
    let first = p.b0 * p.b0
        + s0 * s0
        + 32.0
            * (1.0 + 8.0 * (1.0 + nf) * s1_sq)
            * (p.grad1_norm * p.grad1_norm + eta * eta * l * l);
    let ratio = (p.f1_gap + c1) / eta;
    let c2 = first.max(512.0 * ratio * ratio);
    Ok(TheoremConstants {
        n_comp: n,
        c0,
        c0_tilde,
        c1_tilde,
        c1,
        c2,
    })
}

/// `f(T) = e + sigma0^2 T / b0^2 + (1 + sigma1^2) T (|grad F_1| + eta L T)^2 / b0^2`.
pub fn f_poly(
    horizon: u64,
    b0_sq: f64,
    sigma0: f64,
    sigma1: f64,
    grad1_norm: f64,
    eta: f64,
    smoothness: f64,
) -> f64 {
    let t = horizon as f64;
    let reach = grad1_norm + eta * smoothness * t;
    std::f64::consts::E
        + sigma0 * sigma0 * t / b0_sq
        + (1.0 + sigma1 * sigma1) * t * reach * reach / b0_sq
}

fn f_of(p: &ProblemConstants, horizon: u64) -> f64 {
    f_poly(
        horizon,
        p.b0 * p.b0,
        p.sigma0,
        p.sigma1,
        p.grad1_norm,
        p.eta,
        p.smoothness,
    )
}

/// `ln(T^2 f(T))`.
fn log_t2f(p: &ProblemConstants, horizon: u64) -> f64 {
    let t = horizon as f64;
    2.0 * t.ln() + f_of(p, horizon).ln()
}

fn validate_horizon_delta(horizon: u64, delta: f64) -> Result<()> {
    if horizon == 0 {
        return Err(AnalysisError::InvalidParameter(
            "horizon must be >= 1".into(),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(())
}

/// Bound on `min_{t<=T} |grad F(w_t)|^2` holding with probability at least
/// `1 - delta` for any `eta, b0 > 0`:
///
/// `sqrt(1 + s1^2) 16 (D + c1)/(eta sqrt(delta^3 T))
///   [b0 + 2 s0 + sqrt(32(1 + 8(n + 1) s1^2))(|grad F_1| + eta L) + 16 sqrt 2 (D + c1)/eta]
///   ln^{13/4}(T^2 f(T))
/// + sqrt 2 (128 s1^2 (n + 1) ln f(T))^{3/2} |grad F_1|^2 1{s1 > 1/8} / (delta T)^{3/2}`
///
/// with `D = F(w_1) - F*`.
pub fn theorem_bound_sqrt(p: &ProblemConstants, horizon: u64, delta: f64) -> Result<f64> {
    validate_horizon_delta(horizon, delta)?;
    let c = theorem_constants(p)?;
    let t = horizon as f64;
    let nf = c.n_comp as f64;
    let s1_sq = p.sigma1 * p.sigma1;
    let gap = p.f1_gap + c.c1;
    let bracket = p.b0
        + 2.0 * p.sigma0
        + (32.0 * (1.0 + 8.0 * (nf + 1.0) * s1_sq)).sqrt() * (p.grad1_norm + p.eta * p.smoothness)
        + 16.0 * std::f64::consts::SQRT_2 * gap / p.eta;
    let main = (1.0 + s1_sq).sqrt() * 16.0 * gap / (p.eta * (delta.powi(3) * t).sqrt())
        * bracket
        * log_t2f(p, horizon).powf(3.25);
    let tail = if large_noise(p.sigma1) {
        let inner = 128.0 * s1_sq * (nf + 1.0) * f_of(p, horizon).ln();
        std::f64::consts::SQRT_2 * inner.powf(1.5) * p.grad1_norm * p.grad1_norm
            / (delta * t).powf(1.5)
    } else {
        0.0
    };
    Ok(main + tail)
}

/// Bound on `min_{t<=T} |grad F(w_t)|^2` for `sigma1 <= 1/8`, holding with
/// probability at least `1 - delta`:
///
/// `8 sqrt 2 (D + c0)/(delta^2 eta sqrt T)
///   [s0 + s1 (b0 + s0 + sqrt(32(1 + 8(1 + n) s1^2))(|grad F_1| + eta L) + 16 sqrt 2 (D + c0)/eta)]
///   ln^{9/4}(T^2 f(T))
/// + 8 (D + c0 ln f(T))/(delta^2 eta T) (b0 + 4(2 + s1^2)(D + c0 ln f(T))/eta)`.
pub fn theorem_bound_small_noise(p: &ProblemConstants, horizon: u64, delta: f64) -> Result<f64> {
    validate_horizon_delta(horizon, delta)?;
    if large_noise(p.sigma1) {
        return Err(AnalysisError::InvalidParameter(format!(
            "small-noise bound requires sigma1 <= 1/8, got {}",
            p.sigma1
        )));
    }
    let c = theorem_constants(p)?;
    let t = horizon as f64;
    let nf = c.n_comp as f64;
    let s1_sq = p.sigma1 * p.sigma1;
    let gap = p.f1_gap + c.c0;
    let inner = p.b0
        + p.sigma0
        + (32.0 * (1.0 + 8.0 * (1.0 + nf) * s1_sq)).sqrt() * (p.grad1_norm + p.eta * p.smoothness)
        + 16.0 * std::f64::consts::SQRT_2 * gap / p.eta;
    let bracket = p.sigma0 + p.sigma1 * inner;
    let delta_sq = delta * delta;
    let slow = 8.0 * std::f64::consts::SQRT_2 * gap / (delta_sq * p.eta * t.sqrt())
        * bracket
        * log_t2f(p, horizon).powf(2.25);
    let a = p.f1_gap + c.c0 * f_of(p, horizon).ln();
    let fast = 8.0 * a / (delta_sq * p.eta * t) * (p.b0 + 4.0 * (2.0 + s1_sq) * a / p.eta);
    Ok(slow + fast)
}

/// `c2 T ln^{5/2}(T^2 f(T))`, a bound on `E[sum_{t<=T} |grad F(w_t)|^2]`.
pub fn sum_grad_bound(p: &ProblemConstants, horizon: u64) -> Result<f64> {
    if horizon == 0 {
        return Err(AnalysisError::InvalidParameter(
            "horizon must be >= 1".into(),
        ));
    }
    let c = theorem_constants(p)?;
    Ok(c.c2 * horizon as f64 * log_t2f(p, horizon).powf(2.5))
}

/// Bounds on `E|bad|` and `E|bad|^2`:
/// `64 s1^2 ln f(T)` and `(64 s1^2 (1 + 128 s1^2) + 2) ln^2(T^2 f(T))`.
/// Both are zero when `sigma1 <= 1/8`, since then no time is bad.
pub fn good_set_bounds(p: &ProblemConstants, horizon: u64) -> Result<(f64, f64)> {
    validate(p)?;
    if !large_noise(p.sigma1) {
        return Ok((0.0, 0.0));
    }
    if horizon == 0 {
        return Err(AnalysisError::InvalidParameter(
            "horizon must be >= 1".into(),
        ));
    }
    let s1_sq = p.sigma1 * p.sigma1;
    let mean = 64.0 * s1_sq * f_of(p, horizon).ln();
    let log = log_t2f(p, horizon);
    let mean_sq = (64.0 * s1_sq * (1.0 + 128.0 * s1_sq) + 2.0) * log * log;
    Ok((mean, mean_sq))
}
