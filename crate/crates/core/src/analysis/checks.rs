//! Deterministic trajectory checkers and the cross-seed nice-event check.
//!
//! Each checker returns one [`CheckRecord`] per claim, reporting the worst
//! instance (the first violation if any, otherwise the smallest relative
//! margin) and the violation count in `detail`.

use serde::{Deserialize, Serialize};

use super::{
    approx_eq, proxy_step_size, AnalysisError, AnalysisParams, CheckRecord, CheckStatus, Result,
    StepRecord, REL_TOL,
};

fn leq_scaled(lhs: f64, rhs: f64, scale: f64) -> bool {
    lhs <= rhs + REL_TOL * lhs.abs().max(rhs.abs()).max(scale.abs()) + super::ABS_FLOOR
}

/// Tracks the worst instance of one claim over many probes.
struct Worst {
    name: &'static str,
    claim: &'static str,
    probes: u64,
    failures: u64,
    worst: Option<(f64, f64, f64, String)>,
}

impl Worst {
    fn new(name: &'static str, claim: &'static str) -> Self {
        Self {
            name,
            claim,
            probes: 0,
            failures: 0,
            worst: None,
        }
    }

    fn relative_margin(lhs: f64, rhs: f64) -> f64 {
        let scale = lhs.abs().max(rhs.abs());
        if scale == 0.0 {
            0.0
        } else {
            (rhs - lhs) / scale
        }
    }

    fn probe(&mut self, lhs: f64, rhs: f64, ok: bool, at: impl FnOnce() -> String) {
        self.probes += 1;
        if !ok {
            self.failures += 1;
            if self.failures == 1 {
                self.worst = Some((lhs, rhs, f64::NEG_INFINITY, at()));
            }
            return;
        }
        if self.failures > 0 {
            return;
        }
        let rel = Self::relative_margin(lhs, rhs);
        if self.worst.as_ref().is_none_or(|w| rel < w.2) {
            self.worst = Some((lhs, rhs, rel, at()));
        }
    }

    fn finish(self) -> CheckRecord {
        let Some((lhs, rhs, _, at)) = self.worst else {
            return CheckRecord::new(self.name, self.claim, 0.0, 0.0, CheckStatus::Pass)
                .with_detail("no probes");
        };
        let status = if self.failures > 0 {
            CheckStatus::Fail
        } else {
            CheckStatus::Pass
        };
        CheckRecord::new(self.name, self.claim, lhs, rhs, status).with_detail(format!(
            "{} of {} probes violated; reported {}",
            self.failures, self.probes, at
        ))
    }
}

/// `ln(b_t^2 / b0^2)` for every step, accumulated as a sum of
/// `ln(1 + |g_s|^2 / b_{s-1}^2)` so that tiny increments keep full precision.
fn log_growth(records: &[StepRecord]) -> Vec<f64> {
    let mut acc = 0.0;
    records
        .iter()
        .map(|r| {
            acc += (r.sgrad_norm_sq / r.b_sq_before).ln_1p();
            acc
        })
        .collect()
}

/// Internal consistency of AdaGrad-Norm records: accumulator bookkeeping,
/// realized and proxy step sizes, step lengths and time indices.
pub fn check_record_invariants(
    records: &[StepRecord],
    params: &AnalysisParams,
) -> Vec<CheckRecord> {
    const NAME: &str = "record_invariants";
    let mut index = Worst::new(NAME, "time_index");
    let mut accumulator = Worst::new(NAME, "accumulator_update");
    let mut chain = Worst::new(NAME, "accumulator_chain");
    let mut monotone = Worst::new(NAME, "accumulator_monotone");
    let mut step_size = Worst::new(NAME, "step_size");
    let mut proxy = Worst::new(NAME, "proxy_step_size");
    let mut proxy_cap = Worst::new(NAME, "proxy_cap");
    let mut step_norm = Worst::new(NAME, "step_norm");

    let mut prev_after = params.b0_sq;
    for (i, r) in records.iter().enumerate() {
        let t = r.t;
        let at = || format!("at t = {t}");
        let expected_t = i as u64 + 1;
        index.probe(t as f64, expected_t as f64, t == expected_t, at);

        let sum = r.b_sq_before + r.sgrad_norm_sq;
        accumulator.probe(r.b_sq_after, sum, approx_eq(r.b_sq_after, sum), at);
        chain.probe(
            r.b_sq_before,
            prev_after,
            approx_eq(r.b_sq_before, prev_after),
            at,
        );
        monotone.probe(
            r.b_sq_before,
            r.b_sq_after,
            r.b_sq_before <= r.b_sq_after,
            at,
        );
        prev_after = r.b_sq_after;

        let eta_t = params.eta / r.b_sq_after.sqrt();
        step_size.probe(r.eta_t, eta_t, approx_eq(r.eta_t, eta_t), at);

        match proxy_step_size(
            r.b_sq_before,
            r.grad_norm_sq,
            params.eta,
            params.sigma0,
            params.sigma1,
        ) {
            Ok(expected) => proxy.probe(
                r.eta_tilde_t,
                expected,
                approx_eq(r.eta_tilde_t, expected),
                at,
            ),
            Err(_) => proxy.probe(r.eta_tilde_t, f64::NAN, false, at),
        }
        let cap = params.eta / r.b_sq_before.sqrt();
        proxy_cap.probe(r.eta_tilde_t, cap, super::leq_tol(r.eta_tilde_t, cap), at);

        let expected_step = r.eta_t * r.eta_t * r.sgrad_norm_sq;
        step_norm.probe(
            r.step_norm_sq,
            expected_step,
            approx_eq(r.step_norm_sq, expected_step),
            at,
        );
    }
    [
        index,
        accumulator,
        chain,
        monotone,
        step_size,
        proxy,
        proxy_cap,
        step_norm,
    ]
    .into_iter()
    .map(Worst::finish)
    .collect()
}

/// Bounded steps `|w_{t+1} - w_t| <= eta` at every step, and decay
/// `sum_{s<=t} |w_{s+1} - w_s|^2 <= eta^2 ln(b_t^2 / b0^2)` at every prefix.
pub fn check_step_decay(records: &[StepRecord], params: &AnalysisParams) -> Vec<CheckRecord> {
    const NAME: &str = "step_decay";
    let eta_sq = params.eta * params.eta;
    let mut bounded = Worst::new(NAME, "bounded_step");
    let mut decay = Worst::new(NAME, "decay");
    let logs = log_growth(records);
    let mut moved = 0.0;
    for (r, log) in records.iter().zip(&logs) {
        let t = r.t;
        bounded.probe(
            r.step_norm_sq,
            eta_sq,
            super::leq_tol(r.step_norm_sq, eta_sq),
            || format!("at t = {t}"),
        );
        moved += r.step_norm_sq;
        let rhs = eta_sq * log;
        decay.probe(moved, rhs, super::leq_tol(moved, rhs), || {
            format!("at prefix T = {t}")
        });
    }
    vec![bounded.finish(), decay.finish()]
}

/// Gradient drift along the trajectory:
/// `| |grad F_t2| - |grad F_t1| | <= eta L (t2 - t1)` on consecutive pairs,
/// pairs `(1, t)` and pairs at power-of-two gaps; and
/// `|grad F_t|^2 <= 2 |grad F_1|^2 + 2 eta^2 L^2 t ln(b_t^2 / b0^2)` at every
/// step.
pub fn check_gradient_drift(records: &[StepRecord], params: &AnalysisParams) -> Vec<CheckRecord> {
    const NAME: &str = "gradient_drift";
    let mut linear = Worst::new(NAME, "gradient_drift_linear");
    let mut log_bound = Worst::new(NAME, "gradient_drift_log");
    let norms: Vec<f64> = records.iter().map(|r| r.grad_norm_sq.sqrt()).collect();
    let rate = params.eta * params.smoothness;
    let n = norms.len();

    let mut pair = |i: usize, j: usize| {
        let lhs = (norms[j] - norms[i]).abs();
        let rhs = rate * (j - i) as f64;
        let ok = leq_scaled(lhs, rhs, norms[i].max(norms[j]));
        linear.probe(lhs, rhs, ok, || {
            format!("at (t1, t2) = ({}, {})", i + 1, j + 1)
        });
    };
    let mut gap = 1;
    while gap < n {
        for i in 0..n - gap {
            pair(i, i + gap);
        }
        gap *= 2;
    }
    for j in 1..n {
        if !j.is_power_of_two() {
            pair(0, j);
        }
    }

    if let Some(first) = records.first() {
        let logs = log_growth(records);
        let base = 2.0 * first.grad_norm_sq;
        let coeff = 2.0 * params.eta * params.eta * params.smoothness * params.smoothness;
        for (r, log) in records.iter().zip(&logs) {
            let rhs = base + coeff * r.t as f64 * log;
            log_bound.probe(
                r.grad_norm_sq,
                rhs,
                super::leq_tol(r.grad_norm_sq, rhs),
                || format!("at t = {}", r.t),
            );
        }
    }
    vec![linear.finish(), log_bound.finish()]
}

/// `sum_{t=0}^{T} a_t / sum_{s<=t} a_s <= 1 + ln(sum_t a_t) - ln(a_0)` for
/// `a_0 > 0` and `a_t >= 0`.
pub fn check_log_sum_inequality(a: &[f64]) -> Result<CheckRecord> {
    let Some(&a0) = a.first() else {
        return Err(AnalysisError::InvalidParameter(
            "sequence must contain a_0".into(),
        ));
    };
    if !(a0 > 0.0 && a0.is_finite()) {
        return Err(AnalysisError::InvalidParameter(format!(
            "a_0 must be positive, got {a0}"
        )));
    }
    if a.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(AnalysisError::InvalidParameter(
            "sequence entries must be finite and nonnegative".into(),
        ));
    }
    let mut partial = 0.0;
    let mut lhs = 0.0;
    let mut log_growth = 0.0;
    for &x in a {
        if partial > 0.0 {
            log_growth += (x / partial).ln_1p();
        }
        partial += x;
        lhs += x / partial;
    }
    let rhs = 1.0 + log_growth;
    Ok(CheckRecord::compare("log_sum", "log_sum", lhs, rhs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiceEventReport {
    pub s: u64,
    pub delta: f64,
    /// `b0^2 + (s sigma0^2 + (1 + sigma1^2) mean_sum_grad_sq) / delta`.
    pub threshold: f64,
    pub seeds: usize,
    /// Fraction of seeds with `b_s^2 <= threshold`.
    pub fraction: f64,
    /// Smallest acceptable fraction, `1 - delta - 3 sqrt(delta (1 - delta) / n)`.
    pub required: f64,
    pub status: CheckStatus,
}

/// Seeds below this count give a low-power nice-event report.
pub const NICE_EVENT_MIN_SEEDS: usize = 30;

/// Cross-seed frequency of the nice event at time `s`.
///
/// `b_sq_at_s[k]` is `b_s^2` on seed `k`. The expectation
/// `E[sum_{t<=s} |grad F_t|^2]` is replaced by its cross-seed mean
/// `mean_sum_grad_sq`. Markov's inequality makes the event fail on at most
/// a fraction `delta` of seeds; the check allows a binomial slack of three
/// standard deviations.
pub fn check_nice_event(
    b_sq_at_s: &[f64],
    s: u64,
    delta: f64,
    mean_sum_grad_sq: f64,
    params: &AnalysisParams,
) -> Result<NiceEventReport> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "delta must lie in (0, 1], got {delta}"
        )));
    }
    if b_sq_at_s.is_empty() {
        return Err(AnalysisError::InvalidParameter("no seeds".into()));
    }
    let s1_sq = params.sigma1 * params.sigma1;
    let threshold = params.b0_sq
        + (s as f64 * params.sigma0 * params.sigma0 + (1.0 + s1_sq) * mean_sum_grad_sq) / delta;
    let n = b_sq_at_s.len();
    let inside = b_sq_at_s.iter().filter(|&&b| b <= threshold).count();
    let fraction = inside as f64 / n as f64;
    let required = 1.0 - delta - 3.0 * (delta * (1.0 - delta) / n as f64).sqrt();
    let status = if delta >= 1.0 {
        CheckStatus::Vacuous
    } else if n < NICE_EVENT_MIN_SEEDS {
        CheckStatus::LowPower
    } else if fraction >= required {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(NiceEventReport {
        s,
        delta,
        threshold,
        seeds: n,
        fraction,
        required,
        status,
    })
}
