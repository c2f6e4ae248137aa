//! Smooth objectives with exact gradients and affine-variance gradient
//! oracles.
//!
//! Each objective documents its smoothness constant `L` and infimum `F*` in
//! closed form. The analysis code treats those as ground truth.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::all_finite;
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("point has dimension {got}, objective has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point contains a non-finite entry")]
    NonFinitePoint,
    #[error("resample count must be at least 1")]
    EmptyResample,
    #[error("invalid problem parameters: {0}")]
    InvalidParameters(String),
}

type Result<T> = std::result::Result<T, ProblemError>;

/// An `L`-smooth function on `R^d` that is bounded below.
pub trait Objective: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> f64;
    fn gradient_into(&self, w: &[f64], out: &mut [f64]);
    /// Global Lipschitz constant of the gradient.
    fn smoothness(&self) -> f64;
    /// `inf_w F(w)`.
    fn infimum(&self) -> f64;
    fn initial_point(&self) -> Vec<f64>;

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.gradient_into(w, &mut out);
        out
    }
}

fn check_point(objective: &dyn Objective, w: &[f64]) -> Result<()> {
    if w.len() != objective.dim() {
        return Err(ProblemError::DimensionMismatch {
            expected: objective.dim(),
            got: w.len(),
        });
    }
    if !all_finite(w) {
        return Err(ProblemError::NonFinitePoint);
    }
    Ok(())
}

fn check_init(dim: usize, init: &[f64]) -> Result<()> {
    if dim == 0 {
        return Err(ProblemError::InvalidParameters(
            "dimension must be >= 1".into(),
        ));
    }
    if init.len() != dim {
        return Err(ProblemError::InvalidParameters(format!(
            "initial point has {} entries, expected {dim}",
            init.len()
        )));
    }
    if !all_finite(init) {
        return Err(ProblemError::NonFinitePoint);
    }
    Ok(())
}

/// `F(w) = 1/2 w^T A w` with `A = diag(a)`, `a_i > 0`.
///
/// `L = max_i a_i`, `F* = 0`. Strongly convex, and the gradient is unbounded
/// on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    diag: Vec<f64>,
    init: Vec<f64>,
}

impl Quadratic {
    pub fn new(diag: Vec<f64>, init: Vec<f64>) -> Result<Self> {
        check_init(diag.len(), &init)?;
        if diag.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(ProblemError::InvalidParameters(
                "quadratic diagonal must be positive".into(),
            ));
        }
        Ok(Self { diag, init })
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn min_curvature(&self) -> f64 {
        self.diag.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl Objective for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        0.5 * w
            .iter()
            .zip(&self.diag)
            .fold(0.0, |acc, (x, a)| acc + a * x * x)
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        for ((o, x), a) in out.iter_mut().zip(w).zip(&self.diag) {
            *o = a * x;
        }
    }

    fn smoothness(&self) -> f64 {
        self.diag.iter().copied().fold(0.0, f64::max)
    }

    fn infimum(&self) -> f64 {
        0.0
    }

    fn initial_point(&self) -> Vec<f64> {
        self.init.clone()
    }
}

/// `F(w) = sum_i ln(1 + w_i^2)`. Non-convex for `|w_i| > 1`.
///
/// Per coordinate `F'' = 2(1 - w^2)/(1 + w^2)^2`, whose magnitude peaks at
/// `w = 0`, so `L = 2`. `F* = 0` at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LogHump {
    init: Vec<f64>,
}

impl LogHump {
    pub fn new(init: Vec<f64>) -> Result<Self> {
        check_init(init.len(), &init)?;
        Ok(Self { init })
    }
}

impl Objective for LogHump {
    fn name(&self) -> &str {
        "loghump"
    }

    fn dim(&self) -> usize {
        self.init.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        w.iter().fold(0.0, |acc, x| acc + (x * x).ln_1p())
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(w) {
            *o = 2.0 * x / (1.0 + x * x);
        }
    }

    fn smoothness(&self) -> f64 {
        2.0
    }

    fn infimum(&self) -> f64 {
        0.0
    }

    fn initial_point(&self) -> Vec<f64> {
        self.init.clone()
    }
}

/// `F(w) = sum_i w_i^2/(1 + w_i^2) + eps |w|^2 / 2` with `eps >= 0`.
///
/// Per coordinate `F'' = 2(1 - 3w^2)/(1 + w^2)^3 + eps`; the first part lies
/// in `[-1/2, 2]`, so `L = 2 + eps`. `F* = 0` at the origin. For `eps = 0` the
/// gradient vanishes as `|w| -> inf`, giving flat regions far from the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedQuarticSmoothed {
    eps: f64,
    init: Vec<f64>,
}

impl ShiftedQuarticSmoothed {
    pub fn new(eps: f64, init: Vec<f64>) -> Result<Self> {
        check_init(init.len(), &init)?;
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(ProblemError::InvalidParameters(
                "eps must be nonnegative".into(),
            ));
        }
        Ok(Self { eps, init })
    }
}

impl Objective for ShiftedQuarticSmoothed {
    fn name(&self) -> &str {
        "shifted_quartic_smoothed"
    }

    fn dim(&self) -> usize {
        self.init.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        w.iter().fold(0.0, |acc, x| {
            let x2 = x * x;
            acc + x2 / (1.0 + x2) + 0.5 * self.eps * x2
        })
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(w) {
            let s = 1.0 + x * x;
            *o = 2.0 * x / (s * s) + self.eps * x;
        }
    }

    fn smoothness(&self) -> f64 {
        2.0 + self.eps
    }

    fn infimum(&self) -> f64 {
        0.0
    }

    fn initial_point(&self) -> Vec<f64> {
        self.init.clone()
    }
}

/// `F(w) = sum_i (1 + w_i^2)^(-q)` with `q > 0`.
///
/// A hill at the origin with polynomially flat tails; the infimum `F* = 0` is
/// approached only as `|w| -> inf`. Per coordinate
/// `F'' = -2q (1 + w^2)^(-q-2) (1 - (2q + 1) w^2)`, and for `q <= 1` its
/// magnitude is largest at the origin, so `L = 2q`. Gradient descent started
/// off the origin rolls down the tail with `|F'|^2` decaying polynomially in
/// the step count, which makes the noiseless `1/T`-type rate observable
/// (strongly convex basins converge linearly instead).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTail {
    q: f64,
    init: Vec<f64>,
}

impl FlatTail {
    pub fn new(q: f64, init: Vec<f64>) -> Result<Self> {
        check_init(init.len(), &init)?;
        if !(q > 0.0 && q <= 1.0) {
            return Err(ProblemError::InvalidParameters(
                "flat_tail exponent q must lie in (0, 1]".into(),
            ));
        }
        Ok(Self { q, init })
    }
}

impl Objective for FlatTail {
    fn name(&self) -> &str {
        "flat_tail"
    }

    fn dim(&self) -> usize {
        self.init.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        w.iter()
            .fold(0.0, |acc, x| acc + (1.0 + x * x).powf(-self.q))
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(w) {
            *o = -2.0 * self.q * x * (1.0 + x * x).powf(-self.q - 1.0);
        }
    }

    fn smoothness(&self) -> f64 {
        2.0 * self.q
    }

    fn infimum(&self) -> f64 {
        0.0
    }

    fn initial_point(&self) -> Vec<f64> {
        self.init.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    /// `g = (1 + s1 xi) grad + s0 zeta / sqrt(d)` with standard normal `xi`,
    /// `zeta`.
    Gaussian,
    /// Same form with Rademacher `xi` and `zeta` uniform on
    /// `[-sqrt 3, sqrt 3]^d`.
    Bounded,
}

/// Affine-variance noise: `E[g] = grad F(w)` and
/// `E|g - grad F(w)|^2 = sigma0^2 + sigma1^2 |grad F(w)|^2` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma0: f64,
    sigma1: f64,
    family: NoiseFamily,
}

const SQRT_3: f64 = 1.732_050_807_568_877_2;

impl NoiseModel {
    pub fn new(sigma0: f64, sigma1: f64, family: NoiseFamily) -> Result<Self> {
        if !(sigma0.is_finite() && sigma0 >= 0.0 && sigma1.is_finite() && sigma1 >= 0.0) {
            return Err(ProblemError::InvalidParameters(
                "noise levels must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            sigma0,
            sigma1,
            family,
        })
    }

    pub fn noiseless() -> Self {
        Self {
            sigma0: 0.0,
            sigma1: 0.0,
            family: NoiseFamily::Gaussian,
        }
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    pub fn family(&self) -> NoiseFamily {
        self.family
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma0 == 0.0 && self.sigma1 == 0.0
    }

    /// Writes one stochastic gradient for true gradient `grad` into `out`.
    ///
    /// Draw order is fixed: the multiplicative variable first, then the `d`
    /// additive coordinates. Nothing is drawn in the noiseless case.
    pub fn perturb_into(&self, grad: &[f64], rng: &mut Stream, out: &mut [f64]) {
        if self.is_noiseless() {
            out.copy_from_slice(grad);
            return;
        }
        let d = grad.len() as f64;
        let additive = self.sigma0 / d.sqrt();
        match self.family {
            NoiseFamily::Gaussian => {
                let xi: f64 = StandardNormal.sample(rng);
                let mult = 1.0 + self.sigma1 * xi;
                for (o, g) in out.iter_mut().zip(grad) {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = mult * g + additive * z;
                }
            }
            NoiseFamily::Bounded => {
                let xi = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mult = 1.0 + self.sigma1 * xi;
                let cube = Uniform::new_inclusive(-SQRT_3, SQRT_3);
                for (o, g) in out.iter_mut().zip(grad) {
                    *o = mult * g + additive * cube.sample(rng);
                }
            }
        }
    }

    /// `E|g|^2 = sigma0^2 + (1 + sigma1^2) |grad|^2`.
    pub fn second_moment(&self, grad_norm_sq: f64) -> f64 {
        self.sigma0 * self.sigma0 + (1.0 + self.sigma1 * self.sigma1) * grad_norm_sq
    }

    /// `E|g - grad|^2 = sigma0^2 + sigma1^2 |grad|^2`.
    pub fn variance(&self, grad_norm_sq: f64) -> f64 {
        self.sigma0 * self.sigma0 + self.sigma1 * self.sigma1 * grad_norm_sq
    }
}

/// Draws one stochastic gradient at `w`.
pub fn sample_gradient(
    objective: &dyn Objective,
    noise: &NoiseModel,
    w: &[f64],
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    check_point(objective, w)?;
    let grad = objective.gradient(w);
    let mut out = vec![0.0; grad.len()];
    noise.perturb_into(&grad, rng, &mut out);
    Ok(out)
}

/// Draws `count` independent stochastic gradients at the fixed point `w`.
///
/// `rng` should come from a stream that is not used to drive a trajectory,
/// e.g. [`crate::rng::bias_key`].
pub fn resample_at(
    objective: &dyn Objective,
    noise: &NoiseModel,
    w: &[f64],
    count: usize,
    rng: &mut Stream,
) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(ProblemError::EmptyResample);
    }
    check_point(objective, w)?;
    let grad = objective.gradient(w);
    Ok((0..count)
        .map(|_| {
            let mut out = vec![0.0; grad.len()];
            noise.perturb_into(&grad, rng, &mut out);
            out
        })
        .collect())
}

/// Calls `visit` on `count` independent draws at `w` without allocating one
/// vector per draw.
pub fn for_each_draw(
    objective: &dyn Objective,
    noise: &NoiseModel,
    w: &[f64],
    count: usize,
    rng: &mut Stream,
    mut visit: impl FnMut(&[f64]),
) -> Result<()> {
    if count == 0 {
        return Err(ProblemError::EmptyResample);
    }
    check_point(objective, w)?;
    let grad = objective.gradient(w);
    let mut out = vec![0.0; grad.len()];
    for _ in 0..count {
        noise.perturb_into(&grad, rng, &mut out);
        visit(&out);
    }
    Ok(())
}
