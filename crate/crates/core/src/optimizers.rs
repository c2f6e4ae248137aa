//! AdaGrad-Norm, coordinate-wise AdaGrad, tuned SGD and plain gradient
//! descent.
//!
//! Every optimizer is a plain value holding its iterate and hyperparameters.
//! A step consumes only the stochastic gradient `g`: none of the adaptive
//! methods can see the smoothness constant or the noise levels. The tuned SGD
//! baseline is the one exception, since it is defined by those constants.

use thiserror::Error;

use crate::linalg::{all_finite, norm_sq};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("gradient has dimension {got}, iterate has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gradient contains a non-finite entry")]
    NonFiniteGradient,
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

type Result<T> = std::result::Result<T, OptimizerError>;

fn validate_gradient(w: &[f64], g: &[f64]) -> Result<()> {
    if w.len() != g.len() {
        return Err(OptimizerError::DimensionMismatch {
            expected: w.len(),
            got: g.len(),
        });
    }
    if !all_finite(g) {
        return Err(OptimizerError::NonFiniteGradient);
    }
    Ok(())
}

fn positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(OptimizerError::InvalidConfig(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

/// Common interface used by the experiment runner.
pub trait Optimizer: Send {
    fn iterate(&self) -> &[f64];

    /// Applies one update with stochastic gradient `g`, writing the
    /// displacement `w_{t+1} - w_t` into `delta`.
    fn step_into(&mut self, g: &[f64], delta: &mut [f64]) -> Result<()>;
}

/// State of AdaGrad-Norm: `w_{t+1} = w_t - eta * g_t / b_t` with
/// `b_t^2 = b_{t-1}^2 + |g_t|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGradNormState {
    w: Vec<f64>,
    b_sq: f64,
    eta: f64,
    b0_sq: f64,
    t: u64,
}

impl AdaGradNormState {
    /// `b0` is the initial accumulator root; it must be strictly positive.
    pub fn new(w: Vec<f64>, eta: f64, b0: f64) -> Result<Self> {
        positive("eta", eta)?;
        positive("b0", b0)?;
        if !all_finite(&w) {
            return Err(OptimizerError::InvalidConfig(
                "initial iterate must be finite".into(),
            ));
        }
        let b0_sq = b0 * b0;
        Ok(Self {
            w,
            b_sq: b0_sq,
            eta,
            b0_sq,
            t: 0,
        })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    /// Current accumulator `b_t^2`.
    pub fn b_sq(&self) -> f64 {
        self.b_sq
    }

    pub fn b0_sq(&self) -> f64 {
        self.b0_sq
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Number of steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Step size `eta / b_t` that the last update used (or `eta / b_0`
    /// before the first update).
    pub fn step_size(&self) -> f64 {
        self.eta / self.b_sq.sqrt()
    }
}

impl Optimizer for AdaGradNormState {
    fn iterate(&self) -> &[f64] {
        &self.w
    }

    fn step_into(&mut self, g: &[f64], delta: &mut [f64]) -> Result<()> {
        validate_gradient(&self.w, g)?;
        self.b_sq += norm_sq(g);
        let scale = self.eta / self.b_sq.sqrt();
        for ((wi, di), gi) in self.w.iter_mut().zip(delta.iter_mut()).zip(g) {
            *di = -scale * gi;
            *wi += *di;
        }
        self.t += 1;
        Ok(())
    }
}

/// Pure AdaGrad-Norm update: returns the next state and the displacement.
pub fn adagrad_norm_step(
    state: &AdaGradNormState,
    g: &[f64],
) -> Result<(AdaGradNormState, Vec<f64>)> {
    let mut next = state.clone();
    let mut delta = vec![0.0; g.len()];
    next.step_into(g, &mut delta)?;
    Ok((next, delta))
}

/// Coordinate-wise AdaGrad with one accumulator per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateAdaGradState {
    w: Vec<f64>,
    b_sq: Vec<f64>,
    eta: f64,
    b0_sq: f64,
}

impl CoordinateAdaGradState {
    pub fn new(w: Vec<f64>, eta: f64, b0: f64) -> Result<Self> {
        positive("eta", eta)?;
        positive("b0", b0)?;
        if !all_finite(&w) {
            return Err(OptimizerError::InvalidConfig(
                "initial iterate must be finite".into(),
            ));
        }
        let b0_sq = b0 * b0;
        let b_sq = vec![b0_sq; w.len()];
        Ok(Self {
            w,
            b_sq,
            eta,
            b0_sq,
        })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn b_sq(&self) -> &[f64] {
        &self.b_sq
    }

    pub fn b0_sq(&self) -> f64 {
        self.b0_sq
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

impl Optimizer for CoordinateAdaGradState {
    fn iterate(&self) -> &[f64] {
        &self.w
    }

    fn step_into(&mut self, g: &[f64], delta: &mut [f64]) -> Result<()> {
        validate_gradient(&self.w, g)?;
        for i in 0..self.w.len() {
            self.b_sq[i] += g[i] * g[i];
            delta[i] = -self.eta * g[i] / self.b_sq[i].sqrt();
            self.w[i] += delta[i];
        }
        Ok(())
    }
}

pub fn coordinate_adagrad_step(
    state: &CoordinateAdaGradState,
    g: &[f64],
) -> Result<CoordinateAdaGradState> {
    let mut next = state.clone();
    let mut delta = vec![0.0; g.len()];
    next.step_into(g, &mut delta)?;
    Ok(next)
}

/// Inputs that determine the tuned SGD step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdTuning {
    pub smoothness: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub d_tilde: f64,
    pub horizon: u64,
}

impl SgdTuning {
    /// `min{1/((1+sigma1^2) L), d_tilde/(sigma0 sqrt(T))}`; the second arm is
    /// infinite when `sigma0 = 0`.
    pub fn step_size(&self) -> Result<f64> {
        positive("L", self.smoothness)?;
        positive("d_tilde", self.d_tilde)?;
        if !(self.sigma0 >= 0.0 && self.sigma1 >= 0.0) {
            return Err(OptimizerError::InvalidConfig(
                "noise levels must be nonnegative".into(),
            ));
        }
        let smooth_arm = 1.0 / ((1.0 + self.sigma1 * self.sigma1) * self.smoothness);
        if self.sigma0 == 0.0 || self.horizon == 0 {
            return Ok(smooth_arm);
        }
        let noise_arm = self.d_tilde / (self.sigma0 * (self.horizon as f64).sqrt());
        Ok(smooth_arm.min(noise_arm))
    }
}

/// SGD with the constant step size chosen from [`SgdTuning`].
#[derive(Debug, Clone, PartialEq)]
pub struct TunedSgdState {
    w: Vec<f64>,
    step_size: f64,
    tuning: SgdTuning,
}

impl TunedSgdState {
    pub fn new(w: Vec<f64>, tuning: SgdTuning) -> Result<Self> {
        let step_size = tuning.step_size()?;
        Ok(Self {
            w,
            step_size,
            tuning,
        })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn tuning(&self) -> &SgdTuning {
        &self.tuning
    }
}

impl Optimizer for TunedSgdState {
    fn iterate(&self) -> &[f64] {
        &self.w
    }

    fn step_into(&mut self, g: &[f64], delta: &mut [f64]) -> Result<()> {
        validate_gradient(&self.w, g)?;
        for ((wi, di), gi) in self.w.iter_mut().zip(delta.iter_mut()).zip(g) {
            *di = -self.step_size * gi;
            *wi += *di;
        }
        Ok(())
    }
}

pub fn tuned_sgd_step(state: &TunedSgdState, g: &[f64]) -> Result<TunedSgdState> {
    let mut next = state.clone();
    let mut delta = vec![0.0; g.len()];
    next.step_into(g, &mut delta)?;
    Ok(next)
}

/// Fixed-step (stochastic) gradient descent, `w <- w - eta * g`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDescentState {
    w: Vec<f64>,
    eta: f64,
}

impl GradientDescentState {
    pub fn new(w: Vec<f64>, eta: f64) -> Result<Self> {
        positive("eta", eta)?;
        Ok(Self { w, eta })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

impl Optimizer for GradientDescentState {
    fn iterate(&self) -> &[f64] {
        &self.w
    }

    fn step_into(&mut self, g: &[f64], delta: &mut [f64]) -> Result<()> {
        validate_gradient(&self.w, g)?;
        for ((wi, di), gi) in self.w.iter_mut().zip(delta.iter_mut()).zip(g) {
            *di = -self.eta * gi;
            *wi += *di;
        }
        Ok(())
    }
}

/// Test fixture: AdaGrad-Norm whose every displacement is doubled. It keeps
/// the accumulator bookkeeping of the real method, so any checker that relies
/// on the bounded-step property must reject its trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct OvershootingAdaGradNorm {
    inner: AdaGradNormState,
}

impl OvershootingAdaGradNorm {
    pub fn new(w: Vec<f64>, eta: f64, b0: f64) -> Result<Self> {
        Ok(Self {
            inner: AdaGradNormState::new(w, eta, b0)?,
        })
    }

    pub fn b_sq(&self) -> f64 {
        self.inner.b_sq()
    }
}

impl Optimizer for OvershootingAdaGradNorm {
    fn iterate(&self) -> &[f64] {
        self.inner.w()
    }

    fn step_into(&mut self, g: &[f64], delta: &mut [f64]) -> Result<()> {
        self.inner.step_into(g, delta)?;
        for (wi, di) in self.inner.w.iter_mut().zip(delta.iter_mut()) {
            *wi += *di;
            *di *= 2.0;
        }
        Ok(())
    }
}
