//! Trajectory runs, seed sweeps, rate fits and bound comparisons.
//!
//! A sweep runs every `(T, seed)` cell of the configured grid. Each cell is
//! driven by its own random stream, so cells can run in any order and on any
//! number of workers; results are always reported in `(T, seed)` order.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, apply_classification, build_compensation_sets, check_gradient_drift, check_nice_event,
    check_record_invariants, check_step_decay, classify_times, estimate_bias, good_set_bounds,
    proxy_step_size, sum_grad_bound, theorem_bound_small_noise, theorem_bound_sqrt,
    validate_assignment, verify_compensation_inequality, AnalysisError, AnalysisParams,
    CheckRecord, CheckStatus, CompensationAssignment, GoodBadClassification, ProblemConstants,
    StepRecord, ThresholdRule, MC_SLACK_SE,
};
use crate::linalg::{all_finite, norm_sq};
use crate::optimizers::{
    AdaGradNormState, CoordinateAdaGradState, GradientDescentState, Optimizer, OptimizerError,
    OvershootingAdaGradNorm, SgdTuning, TunedSgdState,
};
use crate::problems::{
    FlatTail, LogHump, NoiseFamily, NoiseModel, Objective, ProblemError, Quadratic,
    ShiftedQuarticSmoothed,
};
use crate::rng::{bias_key, drive_key};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("rate fit: {0}")]
    Fit(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Probability levels at which the high-probability bounds are compared.
pub const DELTAS: [f64; 3] = [0.5, 0.25, 0.1];

/// Largest number of instrumented steps per trajectory under
/// [`BiasEvery::Auto`].
pub const AUTO_BIAS_STEPS: u64 = 1 << 13;

/// A scalar or a list of scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrList {
    Scalar(f64),
    List(Vec<f64>),
}

impl ScalarOrList {
    fn len(&self) -> Option<usize> {
        match self {
            ScalarOrList::Scalar(_) => None,
            ScalarOrList::List(v) => Some(v.len()),
        }
    }

    fn expand(&self, dim: usize) -> Vec<f64> {
        match self {
            ScalarOrList::Scalar(x) => vec![*x; dim],
            ScalarOrList::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    Quadratic,
    Loghump,
    ShiftedQuarticSmoothed,
    FlatTail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub name: ObjectiveName,
    pub dim: Option<usize>,
    /// Initial point; a scalar is repeated in every coordinate. Default 1.
    pub init: Option<ScalarOrList>,
    /// Quadratic curvatures. Default 1.
    pub diag: Option<ScalarOrList>,
    /// Quadratic regulariser of `shifted_quartic_smoothed`. Default 0.1.
    pub eps: Option<f64>,
    /// Exponent of `flat_tail`. Default 1/8.
    pub q: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default = "default_family")]
    pub family: NoiseFamily,
    #[serde(default)]
    pub sigma0: f64,
    #[serde(default)]
    pub sigma1: f64,
}

fn default_family() -> NoiseFamily {
    NoiseFamily::Gaussian
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            sigma0: 0.0,
            sigma1: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    AdagradNorm,
    CoordinateAdagrad,
    TunedSgd,
    Gd,
    /// Test fixture that doubles every AdaGrad-Norm step.
    OvershootingAdagradNorm,
}

impl OptimizerName {
    /// Whether trajectories carry AdaGrad-Norm bookkeeping that the
    /// analysis checkers apply to.
    pub fn is_adagrad_norm(self) -> bool {
        matches!(
            self,
            OptimizerName::AdagradNorm | OptimizerName::OvershootingAdagradNorm
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default = "default_optimizer")]
    pub name: OptimizerName,
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "one")]
    pub b0: f64,
    /// `D~` of the tuned SGD step size.
    #[serde(default = "one")]
    pub d_tilde: f64,
}

fn default_optimizer() -> OptimizerName {
    OptimizerName::AdagradNorm
}

fn one() -> f64 {
    1.0
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            name: OptimizerName::AdagradNorm,
            eta: 1.0,
            b0: 1.0,
            d_tilde: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "default_horizons")]
    pub horizons: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub base_seed: u64,
}

fn default_horizons() -> Vec<u64> {
    (10..=16).map(|k| 1u64 << k).collect()
}

fn default_seeds() -> u64 {
    50
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            horizons: default_horizons(),
            seeds: default_seeds(),
            base_seed: 0,
        }
    }
}

/// Which steps get a Monte Carlo bias estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BiasEvery {
    /// Every step up to [`AUTO_BIAS_STEPS`] steps, every
    /// `ceil(T / AUTO_BIAS_STEPS)`-th step beyond.
    Auto,
    /// Every `k`-th step starting at `t = 1`; `0` disables instrumentation.
    Every(u64),
}

impl BiasEvery {
    pub fn stride(self, horizon: u64) -> Option<u64> {
        match self {
            BiasEvery::Every(0) => None,
            BiasEvery::Every(k) => Some(k),
            BiasEvery::Auto => Some(horizon.div_ceil(AUTO_BIAS_STEPS).max(1)),
        }
    }
}

impl<'de> Deserialize<'de> for BiasEvery {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(k) => Ok(BiasEvery::Every(k)),
            Raw::Text(s) if s == "auto" => Ok(BiasEvery::Auto),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "bias_every must be a nonnegative integer or \"auto\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentSpec {
    #[serde(default = "default_bias_every")]
    pub bias_every: BiasEvery,
    #[serde(default = "default_bias_samples")]
    pub bias_samples: usize,
}

fn default_bias_every() -> BiasEvery {
    BiasEvery::Auto
}

fn default_bias_samples() -> usize {
    256
}

impl Default for InstrumentSpec {
    fn default() -> Self {
        Self {
            bias_every: BiasEvery::Auto,
            bias_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
}

/// A complete experiment description, read from TOML with dotted keys such
/// as `objective.name`, `noise.sigma1` or `run.horizons`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub instrument: InstrumentSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.run.horizons;
        if h.is_empty() {
            return Err(config_err("run.horizons must not be empty"));
        }
        if h.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("run.horizons must be strictly ascending"));
        }
        if self.run.seeds == 0 {
            return Err(config_err("run.seeds must be at least 1"));
        }
        let o = &self.optimizer;
        for (name, v) in [("optimizer.eta", o.eta), ("optimizer.b0", o.b0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        if o.name == OptimizerName::TunedSgd && !(o.d_tilde > 0.0 && o.d_tilde.is_finite()) {
            return Err(config_err("optimizer.d_tilde must be positive"));
        }
        if self.instrument.bias_every != BiasEvery::Every(0) && self.instrument.bias_samples < 2 {
            return Err(config_err("instrument.bias_samples must be at least 2"));
        }
        self.build_objective()
            .map_err(|e| config_err(e.to_string()))?;
        self.noise_model().map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    fn dim(&self) -> usize {
        let spec = &self.objective;
        spec.dim
            .or_else(|| spec.init.as_ref().and_then(ScalarOrList::len))
            .or_else(|| spec.diag.as_ref().and_then(ScalarOrList::len))
            .unwrap_or(1)
    }

    pub fn build_objective(&self) -> Result<Box<dyn Objective>> {
        let spec = &self.objective;
        let dim = self.dim();
        let init = spec
            .init
            .clone()
            .unwrap_or(ScalarOrList::Scalar(1.0))
            .expand(dim);
        if init.len() != dim {
            return Err(config_err(format!(
                "objective.init has {} entries, objective.dim is {dim}",
                init.len()
            )));
        }
        let unused = |field: &str, present: bool| -> Result<()> {
            if present {
                Err(config_err(format!(
                    "objective.{field} does not apply to {:?}",
                    spec.name
                )))
            } else {
                Ok(())
            }
        };
        let objective: Box<dyn Objective> = match spec.name {
            ObjectiveName::Quadratic => {
                unused("eps", spec.eps.is_some())?;
                unused("q", spec.q.is_some())?;
                let diag = spec
                    .diag
                    .clone()
                    .unwrap_or(ScalarOrList::Scalar(1.0))
                    .expand(dim);
                if diag.len() != dim {
                    return Err(config_err(format!(
                        "objective.diag has {} entries, objective.dim is {dim}",
                        diag.len()
                    )));
                }
                Box::new(Quadratic::new(diag, init)?)
            }
            ObjectiveName::Loghump => {
                unused("diag", spec.diag.is_some())?;
                unused("eps", spec.eps.is_some())?;
                unused("q", spec.q.is_some())?;
                Box::new(LogHump::new(init)?)
            }
            ObjectiveName::ShiftedQuarticSmoothed => {
                unused("diag", spec.diag.is_some())?;
                unused("q", spec.q.is_some())?;
                Box::new(ShiftedQuarticSmoothed::new(spec.eps.unwrap_or(0.1), init)?)
            }
            ObjectiveName::FlatTail => {
                unused("diag", spec.diag.is_some())?;
                unused("eps", spec.eps.is_some())?;
                Box::new(FlatTail::new(spec.q.unwrap_or(0.125), init)?)
            }
        };
        Ok(objective)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        Ok(NoiseModel::new(
            self.noise.sigma0,
            self.noise.sigma1,
            self.noise.family,
        )?)
    }

    /// Ground-truth constants used by the checkers.
    pub fn analysis_params(&self, objective: &dyn Objective) -> AnalysisParams {
        AnalysisParams {
            eta: self.optimizer.eta,
            b0_sq: self.optimizer.b0 * self.optimizer.b0,
            smoothness: objective.smoothness(),
            sigma0: self.noise.sigma0,
            sigma1: self.noise.sigma1,
        }
    }

    pub fn problem_constants(&self, objective: &dyn Objective) -> ProblemConstants {
        let w1 = objective.initial_point();
        ProblemConstants {
            eta: self.optimizer.eta,
            b0: self.optimizer.b0,
            smoothness: objective.smoothness(),
            sigma0: self.noise.sigma0,
            sigma1: self.noise.sigma1,
            grad1_norm: norm_sq(&objective.gradient(&w1)).sqrt(),
            f1_gap: objective.value(&w1) - objective.infimum(),
        }
    }
}

/// Per-trajectory statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub horizon: u64,
    pub seed: u64,
    /// `min_{t<=T} |grad F(w_t)|^2`; `|grad F(w_1)|^2` when `T = 0`.
    pub min_grad_sq: f64,
    /// `sum_{t<=T} |grad F(w_t)|^2`.
    pub sum_grad_sq: f64,
    pub b_t_sq: f64,
    /// `F(w_{T+1})`, the value at the final iterate.
    pub final_f: f64,
    /// Bad times among classified steps; `None` when no step could be
    /// classified.
    pub bad_count: Option<u64>,
    pub coverage: f64,
    pub diverged: bool,
    pub wall_ms: Option<f64>,
}

/// Iterate and accumulator just before step `t`, for replaying the one-step
/// descent check.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub t: u64,
    pub w: Vec<f64>,
    pub b_sq_before: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    /// Checks that need data not kept in the records (per-coordinate steps
    /// of coordinate-wise AdaGrad).
    pub runtime_checks: Vec<CheckRecord>,
    /// Why the run stopped early, if it did.
    pub abort: Option<String>,
    pub snapshots: Vec<StateSnapshot>,
}

enum Runner {
    AdaGradNorm(AdaGradNormState),
    Overshooting(OvershootingAdaGradNorm),
    Coordinate(CoordinateAdaGradState),
    Sgd(TunedSgdState),
    Gd(GradientDescentState),
}

impl Runner {
    fn new(config: &ExperimentConfig, objective: &dyn Objective, horizon: u64) -> Result<Self> {
        let o = &config.optimizer;
        let w = objective.initial_point();
        Ok(match o.name {
            OptimizerName::AdagradNorm => {
                Runner::AdaGradNorm(AdaGradNormState::new(w, o.eta, o.b0)?)
            }
            OptimizerName::OvershootingAdagradNorm => {
                Runner::Overshooting(OvershootingAdaGradNorm::new(w, o.eta, o.b0)?)
            }
            OptimizerName::CoordinateAdagrad => {
                Runner::Coordinate(CoordinateAdaGradState::new(w, o.eta, o.b0)?)
            }
            OptimizerName::TunedSgd => Runner::Sgd(TunedSgdState::new(
                w,
                SgdTuning {
                    smoothness: objective.smoothness(),
                    sigma0: config.noise.sigma0,
                    sigma1: config.noise.sigma1,
                    d_tilde: o.d_tilde,
                    horizon: horizon.max(1),
                },
            )?),
            OptimizerName::Gd => Runner::Gd(GradientDescentState::new(w, o.eta)?),
        })
    }

    fn optimizer(&mut self) -> &mut dyn Optimizer {
        match self {
            Runner::AdaGradNorm(s) => s,
            Runner::Overshooting(s) => s,
            Runner::Coordinate(s) => s,
            Runner::Sgd(s) => s,
            Runner::Gd(s) => s,
        }
    }

    /// Accumulator as seen by the optimizer, when it has one. For
    /// coordinate-wise AdaGrad this is the mean over coordinates.
    fn accumulator(&self) -> Option<f64> {
        match self {
            Runner::AdaGradNorm(s) => Some(s.b_sq()),
            Runner::Overshooting(s) => Some(s.b_sq()),
            Runner::Coordinate(s) => {
                let b = s.b_sq();
                Some(b.iter().sum::<f64>() / b.len() as f64)
            }
            Runner::Sgd(_) | Runner::Gd(_) => None,
        }
    }

    fn fixed_step(&self) -> Option<f64> {
        match self {
            Runner::Sgd(s) => Some(s.step_size()),
            Runner::Gd(s) => Some(s.eta()),
            _ => None,
        }
    }
}

/// Options for a single trajectory beyond the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Steps at which to keep a [`StateSnapshot`].
    pub snapshot_times: Vec<u64>,
    pub record_timing: bool,
}

/// Runs one trajectory of `horizon` steps on seed `seed`.
///
/// The result is a deterministic function of `(config, horizon, seed)`. A
/// non-finite iterate, value or gradient stops the run; the records up to
/// that point are kept and the summary is marked diverged.
pub fn run_trajectory(config: &ExperimentConfig, horizon: u64, seed: u64) -> Result<Trajectory> {
    run_trajectory_with(config, horizon, seed, &RunOptions::default())
}

pub fn run_trajectory_with(
    config: &ExperimentConfig,
    horizon: u64,
    seed: u64,
    options: &RunOptions,
) -> Result<Trajectory> {
    let start = Instant::now();
    let objective = config.build_objective()?;
    let noise = config.noise_model()?;
    let mut runner = Runner::new(config, objective.as_ref(), horizon)?;
    let params = config.analysis_params(objective.as_ref());
    let d = objective.dim();
    let base = config.run.base_seed;
    let mut drive = drive_key(base, horizon, seed).stream();
    let stride = config.instrument.bias_every.stride(horizon);
    let samples = config.instrument.bias_samples;
    let coordinate = matches!(runner, Runner::Coordinate(_));

    let mut records = Vec::with_capacity(horizon as usize);
    let mut snapshots = Vec::new();
    let mut grad = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut delta = vec![0.0; d];
    let mut shadow_b_sq = params.b0_sq;
    let mut abort = None;
    let mut coord_step = CoordinateSteps::new(params.eta);

    for t in 1..=horizon {
        let w = runner.optimizer().iterate().to_vec();
        let f = objective.value(&w);
        objective.gradient_into(&w, &mut grad);
        if !(f.is_finite() && all_finite(&grad)) {
            abort = Some(format!("non-finite value or gradient at t = {t}"));
            break;
        }
        let grad_norm_sq = norm_sq(&grad);
        let b_sq_before = runner.accumulator().unwrap_or(shadow_b_sq);
        if options.snapshot_times.binary_search(&t).is_ok() {
            snapshots.push(StateSnapshot {
                t,
                w: w.clone(),
                b_sq_before,
            });
        }
        let (bias_est, bias_se) = match stride {
            Some(k) if (t - 1) % k == 0 => {
                let mut rng = bias_key(base, horizon, seed, t).stream();
                let est = estimate_bias(
                    objective.as_ref(),
                    &noise,
                    &w,
                    b_sq_before,
                    samples,
                    &mut rng,
                )?;
                (Some(est.bias), Some(est.bias_se))
            }
            _ => (None, None),
        };

        noise.perturb_into(&grad, &mut drive, &mut g);
        let sgrad_norm_sq = norm_sq(&g);
        let prev_coords = coordinate.then(|| match &runner {
            Runner::Coordinate(s) => s.b_sq().to_vec(),
            _ => unreachable!(),
        });
        if let Err(e) = runner.optimizer().step_into(&g, &mut delta) {
            abort = Some(format!("step {t} rejected: {e}"));
            break;
        }
        if let (Some(prev), Runner::Coordinate(s)) = (prev_coords, &runner) {
            coord_step.observe(t, &delta, &prev, s.b_sq());
        }
        shadow_b_sq += sgrad_norm_sq;
        let b_sq_after = runner.accumulator().unwrap_or(shadow_b_sq);
        let eta_t = runner
            .fixed_step()
            .unwrap_or_else(|| params.eta / b_sq_after.sqrt());
        let eta_tilde_t = proxy_step_size(
            b_sq_before,
            grad_norm_sq,
            params.eta,
            params.sigma0,
            params.sigma1,
        )?;
        records.push(StepRecord {
            t,
            f,
            grad_norm_sq,
            sgrad_norm_sq,
            b_sq_before,
            b_sq_after,
            eta_t,
            eta_tilde_t,
            step_norm_sq: norm_sq(&delta),
            bias_est,
            bias_se,
            is_good: None,
        });
        if !all_finite(runner.optimizer().iterate()) {
            abort = Some(format!("non-finite iterate after step {t}"));
            break;
        }
    }

    let w_final = runner.optimizer().iterate().to_vec();
    let final_f = if abort.is_none() {
        objective.value(&w_final)
    } else {
        f64::NAN
    };
    let diverged = abort.is_some() || !final_f.is_finite();
    if abort.is_none() && !final_f.is_finite() {
        abort = Some("non-finite value at the final iterate".into());
    }

    let classification = classify(config, &records);
    if let Some(c) = &classification {
        apply_classification(&mut records, c);
    }
    let min_grad_sq = if horizon == 0 {
        norm_sq(&objective.gradient(&objective.initial_point()))
    } else {
        records
            .iter()
            .map(|r| r.grad_norm_sq)
            .fold(f64::INFINITY, f64::min)
    };
    let summary = RunSummary {
        horizon,
        seed,
        min_grad_sq,
        sum_grad_sq: records.iter().map(|r| r.grad_norm_sq).sum(),
        b_t_sq: records.last().map_or(params.b0_sq, |r| r.b_sq_after),
        final_f,
        bad_count: classification.as_ref().map(|c| c.bad.len() as u64),
        coverage: classification.as_ref().map_or(0.0, |c| c.coverage()),
        diverged,
        wall_ms: options
            .record_timing
            .then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    let runtime_checks = if coordinate {
        coord_step.finish()
    } else {
        Vec::new()
    };
    Ok(Trajectory {
        records,
        summary,
        runtime_checks,
        abort,
        snapshots,
    })
}

/// Per-coordinate checks for coordinate-wise AdaGrad: every `|dw_i| <= eta`
/// and every accumulator non-decreasing.
struct CoordinateSteps {
    eta: f64,
    worst_step: f64,
    step_at: u64,
    step_failures: u64,
    shrink_failures: u64,
    probes: u64,
}

impl CoordinateSteps {
    fn new(eta: f64) -> Self {
        Self {
            eta,
            worst_step: 0.0,
            step_at: 0,
            step_failures: 0,
            shrink_failures: 0,
            probes: 0,
        }
    }

    fn observe(&mut self, t: u64, delta: &[f64], before: &[f64], after: &[f64]) {
        self.probes += 1;
        let largest = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if largest > self.worst_step {
            self.worst_step = largest;
            self.step_at = t;
        }
        if !analysis::leq_tol(largest, self.eta) {
            self.step_failures += 1;
        }
        if before.iter().zip(after).any(|(b, a)| a < b) {
            self.shrink_failures += 1;
        }
    }

    fn finish(self) -> Vec<CheckRecord> {
        let status = |failures| {
            if failures > 0 {
                CheckStatus::Fail
            } else {
                CheckStatus::Pass
            }
        };
        vec![
            CheckRecord::new(
                "coordinate_steps",
                "coordinate_bounded_step",
                self.worst_step,
                self.eta,
                status(self.step_failures),
            )
            .with_detail(format!(
                "{} of {} steps violated; largest at t = {}",
                self.step_failures, self.probes, self.step_at
            )),
            CheckRecord::new(
                "coordinate_steps",
                "coordinate_accumulator_monotone",
                self.shrink_failures as f64,
                0.0,
                status(self.shrink_failures),
            ),
        ]
    }
}

fn classify(config: &ExperimentConfig, records: &[StepRecord]) -> Option<GoodBadClassification> {
    if !config.optimizer.name.is_adagrad_norm() {
        return None;
    }
    classify_times(records, config.noise.sigma1, ThresholdRule::BiasThreshold).ok()
}

/// Summary of the compensation machinery on one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompensationStats {
    pub full: u64,
    pub partial: u64,
    pub failures: u64,
}

/// All deterministic checks that apply to the configured optimizer, plus
/// the compensation statistics when bad times are known.
pub fn verify_records(
    config: &ExperimentConfig,
    records: &[StepRecord],
) -> Result<(Vec<CheckRecord>, CompensationStats)> {
    let objective = config.build_objective()?;
    let params = config.analysis_params(objective.as_ref());
    let mut checks = Vec::new();
    let mut stats = CompensationStats::default();
    match config.optimizer.name {
        OptimizerName::AdagradNorm | OptimizerName::OvershootingAdagradNorm => {
            checks.extend(check_record_invariants(records, &params));
            checks.extend(check_step_decay(records, &params));
            checks.extend(check_gradient_drift(records, &params));
            checks.push(check_classification_column(config, records));
            if let Ok(c) = classify_times(records, params.sigma1, ThresholdRule::BiasThreshold) {
                let assignment = build_compensation_sets(&c, params.sigma1);
                let (record, s) = compensation_check(&c, &assignment, records, &params);
                checks.extend(record);
                stats = s;
            }
        }
        OptimizerName::CoordinateAdagrad => {
            // Bounded steps of eta sqrt(d) and decay with eta^2 d, measured
            // against the mean accumulator.
            let d = objective.dim() as f64;
            let scaled = AnalysisParams {
                eta: params.eta * d.sqrt(),
                ..params
            };
            let mut normalized = records.to_vec();
            for r in &mut normalized {
                r.sgrad_norm_sq /= d;
            }
            checks.extend(check_step_decay(&normalized, &scaled));
            checks.extend(check_gradient_drift(&normalized, &scaled));
        }
        OptimizerName::TunedSgd | OptimizerName::Gd => {}
    }
    Ok((checks, stats))
}

/// Recomputes the good/bad labels from `bias_est` and compares them with the
/// stored `is_good` column.
fn check_classification_column(config: &ExperimentConfig, records: &[StepRecord]) -> CheckRecord {
    let expected = classify(config, records);
    let mismatches = records
        .iter()
        .filter(|r| {
            let want = expected.as_ref().and_then(|c| {
                if c.good.binary_search(&r.t).is_ok() {
                    Some(true)
                } else if c.bad.binary_search(&r.t).is_ok() {
                    Some(false)
                } else {
                    None
                }
            });
            r.is_good != want
        })
        .count();
    CheckRecord::compare("classification", "good_time_labels", mismatches as f64, 0.0)
}

fn compensation_check(
    classification: &GoodBadClassification,
    assignment: &CompensationAssignment,
    records: &[StepRecord],
    params: &AnalysisParams,
) -> (Vec<CheckRecord>, CompensationStats) {
    let problems = validate_assignment(classification, assignment);
    let structure = CheckRecord::compare(
        "compensation",
        "compensation_structure",
        problems.len() as f64,
        0.0,
    )
    .with_detail(problems.first().cloned().unwrap_or_default());

    let results = verify_compensation_inequality(
        records,
        assignment,
        params.sigma1,
        params.smoothness,
        params.eta,
    );
    let mut stats = CompensationStats::default();
    let mut worst: Option<&analysis::CompensationCheck> = None;
    for r in &results {
        match r.status {
            CheckStatus::Skipped => stats.partial += 1,
            CheckStatus::Fail => {
                stats.full += 1;
                stats.failures += 1;
                if worst.is_none_or(|w| w.status != CheckStatus::Fail) {
                    worst = Some(r);
                }
            }
            _ => {
                stats.full += 1;
                let better = worst
                    .is_none_or(|w| w.status != CheckStatus::Fail && r.rhs - r.lhs < w.rhs - w.lhs);
                if better {
                    worst = Some(r);
                }
            }
        }
    }
    let inequality = match worst {
        Some(w) => CheckRecord::new(
            "compensation",
            "compensation_inequality",
            w.lhs,
            w.rhs,
            if stats.failures > 0 {
                CheckStatus::Fail
            } else {
                CheckStatus::Pass
            },
        )
        .with_detail(format!(
            "{} full, {} partial (insufficient compensators), {} violated; reported bad time {}",
            stats.full, stats.partial, stats.failures, w.bad_time
        )),
        None => CheckRecord::new(
            "compensation",
            "compensation_inequality",
            0.0,
            0.0,
            if stats.partial > 0 {
                CheckStatus::Skipped
            } else {
                CheckStatus::Vacuous
            },
        )
        .with_detail(format!(
            "no fully compensated bad times ({} partial)",
            stats.partial
        )),
    };
    (vec![structure, inequality], stats)
}

/// Worker configuration for a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// A dedicated pool with this many threads. Without the `parallel`
    /// feature this runs sequentially.
    Parallel {
        workers: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOptions {
    pub execution: Execution,
    pub record_timing: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            execution: Execution::Sequential,
            record_timing: false,
        }
    }
}

/// Everything a sweep keeps about one `(T, seed)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub summary: RunSummary,
    pub checks: Vec<CheckRecord>,
    pub compensation: CompensationStats,
    pub abort: Option<String>,
    /// Set when the cell could not run at all.
    pub error: Option<String>,
}

impl CellResult {
    pub fn failed_checks(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| c.status.is_failure())
    }
}

fn run_cell(config: &ExperimentConfig, horizon: u64, seed: u64, timing: bool) -> CellResult {
    let options = RunOptions {
        snapshot_times: Vec::new(),
        record_timing: timing,
    };
    let outcome = run_trajectory_with(config, horizon, seed, &options).and_then(|traj| {
        let (mut checks, compensation) = verify_records(config, &traj.records)?;
        checks.extend(traj.runtime_checks);
        Ok(CellResult {
            summary: traj.summary,
            checks,
            compensation,
            abort: traj.abort,
            error: None,
        })
    });
    outcome.unwrap_or_else(|e| CellResult {
        summary: RunSummary {
            horizon,
            seed,
            min_grad_sq: f64::NAN,
            sum_grad_sq: f64::NAN,
            b_t_sq: f64::NAN,
            final_f: f64::NAN,
            bad_count: None,
            coverage: 0.0,
            diverged: true,
            wall_ms: None,
        },
        checks: Vec::new(),
        compensation: CompensationStats::default(),
        abort: None,
        error: Some(e.to_string()),
    })
}

/// Runs every `(T, seed)` cell. The result is ordered by `(T, seed)`.
pub fn run_sweep(config: &ExperimentConfig, options: &SweepOptions) -> Result<Vec<CellResult>> {
    config.validate()?;
    let cells: Vec<(u64, u64)> = config
        .run
        .horizons
        .iter()
        .flat_map(|&t| (0..config.run.seeds).map(move |s| (t, s)))
        .collect();
    let timing = options.record_timing;
    let work = |&(t, s): &(u64, u64)| run_cell(config, t, s, timing);
    match options.execution {
        Execution::Sequential => Ok(cells.iter().map(work).collect()),
        Execution::Parallel { workers } => parallel_map(&cells, workers, work),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync + Send,
) -> Result<Vec<R>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    _workers: usize,
    f: impl Fn(&T) -> R + Sync + Send,
) -> Result<Vec<R>> {
    Ok(items.iter().map(f).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    MinGradSq,
    SumGradSq,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::MinGradSq => "min_grad_sq",
            Statistic::SumGradSq => "sum_grad_sq",
        }
    }

    fn of(self, s: &RunSummary) -> f64 {
        match self {
            Statistic::MinGradSq => s.min_grad_sq,
            Statistic::SumGradSq => s.sum_grad_sq,
        }
    }
}

/// Least-squares fit of `ln(median statistic)` against `ln T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub statistic: Statistic,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(T, median over seeds)`.
    pub points: Vec<(u64, f64)>,
}

/// Minimum number of horizons for a rate fit.
pub const MIN_FIT_POINTS: usize = 4;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-horizon medians over non-diverged seeds, in ascending `T`.
pub fn medians_by_horizon(summaries: &[RunSummary], statistic: Statistic) -> Vec<(u64, f64)> {
    let mut horizons: Vec<u64> = summaries.iter().map(|s| s.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    horizons
        .into_iter()
        .filter_map(|t| {
            let mut v: Vec<f64> = summaries
                .iter()
                .filter(|s| s.horizon == t && !s.diverged)
                .map(|s| statistic.of(s))
                .collect();
            (!v.is_empty()).then(|| (t, median(&mut v)))
        })
        .collect()
}

pub fn fit_rate(summaries: &[RunSummary], statistic: Statistic) -> Result<RateFit> {
    let points = medians_by_horizon(summaries, statistic);
    if points.len() < MIN_FIT_POINTS {
        return Err(ExperimentError::Fit(format!(
            "need at least {MIN_FIT_POINTS} horizons, got {}",
            points.len()
        )));
    }
    if let Some(&(t, m)) = points.iter().find(|&&(t, m)| !(m > 0.0) || t == 0) {
        return Err(ExperimentError::Fit(format!(
            "median {m} at T = {t} has no logarithm"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|&(t, _)| (t as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, m)| m.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let sse: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let e = y - (intercept + slope * x);
                e * e
            })
            .sum();
        1.0 - sse / syy
    };
    Ok(RateFit {
        statistic,
        slope,
        intercept,
        r_squared,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Sqrt,
    SmallNoise,
    SumGrad,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Sqrt => "sqrt",
            BoundKind::SmallNoise => "small_noise",
            BoundKind::SumGrad => "sum_grad",
        }
    }
}

/// One row of a bound comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub horizon: u64,
    pub bound: String,
    /// Probability level; `None` for expectation bounds.
    pub delta: Option<f64>,
    pub observed: f64,
    pub bound_value: f64,
    /// `bound_value / observed`.
    pub slack: f64,
    pub status: CheckStatus,
}

/// The `ceil(q n)`-th smallest value (`q` in `(0, 1]`).
fn upper_quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    values[k - 1]
}

fn row(horizon: u64, bound: &str, delta: Option<f64>, observed: f64, value: f64) -> BoundRow {
    let status = if analysis::leq_tol(observed, value) {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    BoundRow {
        horizon,
        bound: bound.to_string(),
        delta,
        observed,
        bound_value: value,
        slack: value / observed,
        status,
    }
}

/// Compares sweep summaries with a theorem bound at every horizon.
///
/// For the two high-probability bounds, the observed value is the
/// `(1 - delta)`-quantile over seeds of `min_t |grad F_t|^2`; at
/// `delta = 1` the comparison is vacuous. For `sum_grad`, the observed value
/// is the cross-seed mean of `sum_t |grad F_t|^2` and `delta` is ignored.
pub fn compare_to_bound(
    config: &ExperimentConfig,
    summaries: &[RunSummary],
    bound: BoundKind,
    delta: f64,
) -> Result<Vec<BoundRow>> {
    let objective = config.build_objective()?;
    let constants = config.problem_constants(objective.as_ref());
    if bound == BoundKind::SmallNoise && constants.sigma1 > 0.125 {
        return Err(config_err(format!(
            "small-noise bound requires sigma1 <= 1/8, got {}",
            constants.sigma1
        )));
    }
    let mut horizons: Vec<u64> = summaries.iter().map(|s| s.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut rows = Vec::new();
    for t in horizons.into_iter().filter(|&t| t > 0) {
        let cells: Vec<&RunSummary> = summaries
            .iter()
            .filter(|s| s.horizon == t && !s.diverged)
            .collect();
        if cells.is_empty() {
            continue;
        }
        match bound {
            BoundKind::Sqrt | BoundKind::SmallNoise => {
                let mut mins: Vec<f64> = cells.iter().map(|s| s.min_grad_sq).collect();
                if delta >= 1.0 {
                    let observed = upper_quantile(&mut mins, 1.0);
                    rows.push(BoundRow {
                        horizon: t,
                        bound: bound.name().into(),
                        delta: Some(delta),
                        observed,
                        bound_value: f64::INFINITY,
                        slack: f64::INFINITY,
                        status: CheckStatus::Vacuous,
                    });
                    continue;
                }
                let observed = upper_quantile(&mut mins, 1.0 - delta);
                let value = match bound {
                    BoundKind::Sqrt => theorem_bound_sqrt(&constants, t, delta)?,
                    _ => theorem_bound_small_noise(&constants, t, delta)?,
                };
                rows.push(row(t, bound.name(), Some(delta), observed, value));
            }
            BoundKind::SumGrad => {
                let mean = cells.iter().map(|s| s.sum_grad_sq).sum::<f64>() / cells.len() as f64;
                rows.push(row(
                    t,
                    bound.name(),
                    None,
                    mean,
                    sum_grad_bound(&constants, t)?,
                ));
            }
        }
    }
    Ok(rows)
}

/// Cross-seed statistics of the number of bad times at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodSetReport {
    pub horizon: u64,
    pub seeds: usize,
    /// Mean of `bad_count / coverage`.
    pub mean: f64,
    pub mean_se: f64,
    pub mean_sq: f64,
    pub mean_sq_se: f64,
    pub mean_bound: f64,
    pub mean_sq_bound: f64,
    pub min_coverage: f64,
    pub status: CheckStatus,
}

/// Instrumentation coverage below this makes the good-set report
/// informational only.
pub const MIN_GOODSET_COVERAGE: f64 = 0.5;

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Compares the cross-seed mean and mean square of the (coverage-scaled)
/// bad-time count with their bounds, allowing [`MC_SLACK_SE`] standard
/// errors. When `sigma1 <= 1/8` every seed must have zero bad times.
pub fn good_set_statistics(
    config: &ExperimentConfig,
    summaries: &[RunSummary],
) -> Result<Vec<GoodSetReport>> {
    let objective = config.build_objective()?;
    let constants = config.problem_constants(objective.as_ref());
    let mut horizons: Vec<u64> = summaries.iter().map(|s| s.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut reports = Vec::new();
    for t in horizons.into_iter().filter(|&t| t > 0) {
        let cells: Vec<&RunSummary> = summaries
            .iter()
            .filter(|s| s.horizon == t && !s.diverged)
            .collect();
        if cells.is_empty() {
            continue;
        }
        let min_coverage = cells
            .iter()
            .map(|s| {
                if s.bad_count.is_some() {
                    s.coverage
                } else {
                    0.0
                }
            })
            .fold(1.0, f64::min);
        let scaled: Vec<f64> = cells
            .iter()
            .map(|s| match s.bad_count {
                Some(b) if s.coverage > 0.0 => b as f64 / s.coverage,
                _ => f64::NAN,
            })
            .collect();
        let squares: Vec<f64> = scaled.iter().map(|x| x * x).collect();
        let (mean, mean_se) = mean_and_se(&scaled);
        let (mean_sq, mean_sq_se) = mean_and_se(&squares);
        let (mean_bound, mean_sq_bound) = good_set_bounds(&constants, t)?;
        let status = if min_coverage < MIN_GOODSET_COVERAGE {
            CheckStatus::LowPower
        } else if constants.sigma1 <= 0.125 {
            if cells.iter().all(|s| s.bad_count == Some(0)) {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            }
        } else if mean <= mean_bound + MC_SLACK_SE * mean_se
            && mean_sq <= mean_sq_bound + MC_SLACK_SE * mean_sq_se
        {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        reports.push(GoodSetReport {
            horizon: t,
            seeds: cells.len(),
            mean,
            mean_se,
            mean_sq,
            mean_sq_se,
            mean_bound,
            mean_sq_bound,
            min_coverage,
            status,
        });
    }
    Ok(reports)
}

/// Nice-event frequency at `s = T` for every horizon and each of [`DELTAS`].
pub fn nice_event_rows(
    config: &ExperimentConfig,
    summaries: &[RunSummary],
) -> Result<Vec<BoundRow>> {
    let objective = config.build_objective()?;
    let params = config.analysis_params(objective.as_ref());
    let mut horizons: Vec<u64> = summaries.iter().map(|s| s.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut rows = Vec::new();
    for t in horizons {
        let cells: Vec<&RunSummary> = summaries
            .iter()
            .filter(|s| s.horizon == t && !s.diverged)
            .collect();
        if cells.is_empty() {
            continue;
        }
        let b: Vec<f64> = cells.iter().map(|s| s.b_t_sq).collect();
        let mean_sum = cells.iter().map(|s| s.sum_grad_sq).sum::<f64>() / cells.len() as f64;
        for delta in DELTAS {
            let r = check_nice_event(&b, t, delta, mean_sum, &params)?;
            rows.push(BoundRow {
                horizon: t,
                bound: "nice_event".into(),
                delta: Some(delta),
                observed: r.fraction,
                bound_value: r.required,
                slack: r.fraction - r.required,
                status: r.status,
            });
        }
    }
    Ok(rows)
}

/// All cross-seed comparisons of a sweep: the two high-probability bounds
/// (the small-noise one only when `sigma1 <= 1/8`) at each of [`DELTAS`],
/// the expected-sum bound, the good-set bounds and the nice event. Empty
/// for optimizers other than AdaGrad-Norm.
pub fn sweep_comparisons(
    config: &ExperimentConfig,
    summaries: &[RunSummary],
) -> Result<Vec<BoundRow>> {
    if config.optimizer.name != OptimizerName::AdagradNorm {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for delta in DELTAS {
        rows.extend(compare_to_bound(config, summaries, BoundKind::Sqrt, delta)?);
        if config.noise.sigma1 <= 0.125 {
            rows.extend(compare_to_bound(
                config,
                summaries,
                BoundKind::SmallNoise,
                delta,
            )?);
        }
    }
    rows.extend(compare_to_bound(
        config,
        summaries,
        BoundKind::SumGrad,
        1.0,
    )?);
    for g in good_set_statistics(config, summaries)? {
        for (name, observed, value) in [
            ("goodset_mean", g.mean, g.mean_bound),
            ("goodset_mean_sq", g.mean_sq, g.mean_sq_bound),
        ] {
            rows.push(BoundRow {
                horizon: g.horizon,
                bound: name.into(),
                delta: None,
                observed,
                bound_value: value,
                slack: value / observed,
                status: g.status,
            });
        }
    }
    rows.extend(nice_event_rows(config, summaries)?);
    rows.sort_by_key(|r| r.horizon);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(text).unwrap()
    }

    const QUAD_NOISELESS: &str = r#"
objective.name = "quadratic"
objective.init = [1.0, 0.0]
optimizer.eta = 1.0
optimizer.b0 = 1.0
run.horizons = [2]
run.seeds = 1
instrument.bias_every = 0
"#;

    #[test]
    fn config_parsing_and_defaults() {
        let c = base_config(QUAD_NOISELESS);
        assert_eq!(c.noise, NoiseSpec::default());
        assert_eq!(c.optimizer.name, OptimizerName::AdagradNorm);
        assert_eq!(c.instrument.bias_every, BiasEvery::Every(0));
        let c = base_config("objective.name = \"loghump\"\ninstrument.bias_every = \"auto\"");
        assert_eq!(c.instrument.bias_every, BiasEvery::Auto);
        assert_eq!(c.run.horizons, default_horizons());
        assert_eq!(c.run.seeds, 50);
    }

    #[test]
    fn config_rejections() {
        let bad = [
            "objective.name = \"loghump\"\nnoise.sigma_1 = 1.0",
            "objective.name = \"loghump\"\nrun.horizons = [8, 4]",
            "objective.name = \"loghump\"\nrun.horizons = []",
            "objective.name = \"loghump\"\nrun.seeds = 0",
            "objective.name = \"loghump\"\noptimizer.b0 = 0.0",
            "objective.name = \"loghump\"\noptimizer.eta = -1.0",
            "objective.name = \"loghump\"\ninstrument.bias_every = \"often\"",
            "objective.name = \"loghump\"\ninstrument.bias_samples = 1",
            "objective.name = \"loghump\"\nobjective.diag = 2.0",
            "objective.name = \"quadratic\"\nobjective.dim = 2\nobjective.init = [1.0]",
            "objective.name = \"quadratic\"\nobjective.diag = [1.0, -1.0]",
            "objective.name = \"banana\"",
            "noise.sigma0 = 1.0",
        ];
        for text in bad {
            assert!(
                matches!(
                    ExperimentConfig::from_toml(text),
                    Err(ExperimentError::Config(_))
                ),
                "accepted: {text}"
            );
        }
    }

    #[test]
    fn two_noiseless_steps_by_hand() {
        let c = base_config(QUAD_NOISELESS);
        let traj = run_trajectory(&c, 2, 0).unwrap();
        let r = &traj.records;
        assert_eq!(r.len(), 2);
        // Step 1: g = (1, 0), b^2 = 2, w_2 = (1 - 1/sqrt 2, 0).
        assert_eq!(r[0].sgrad_norm_sq, 1.0);
        assert_eq!(r[0].b_sq_after, 2.0);
        let w2 = 1.0 - 1.0 / 2f64.sqrt();
        assert!((r[1].grad_norm_sq - w2 * w2).abs() < 1e-15);
        assert!((r[1].f - 0.5 * w2 * w2).abs() < 1e-15);
        // Step 2: b^2 = 2 + w2^2, w_3 = w2 (1 - 1/b).
        let b = (2.0 + w2 * w2).sqrt();
        let w3 = w2 * (1.0 - 1.0 / b);
        assert!((traj.summary.final_f - 0.5 * w3 * w3).abs() < 1e-15);
        assert_eq!(traj.summary.bad_count, Some(0));
        assert_eq!(traj.summary.coverage, 1.0);
    }

    #[test]
    fn empty_horizon_reports_initial_point() {
        let c = base_config(QUAD_NOISELESS);
        let traj = run_trajectory(&c, 0, 0).unwrap();
        assert!(traj.records.is_empty());
        assert_eq!(traj.summary.min_grad_sq, 1.0);
        assert_eq!(traj.summary.sum_grad_sq, 0.0);
        assert_eq!(traj.summary.b_t_sq, 1.0);
        assert_eq!(traj.summary.final_f, 0.5);
    }

    const NOISY: &str = r#"
objective.name = "loghump"
objective.dim = 3
noise.sigma0 = 1.0
noise.sigma1 = 1.0
run.horizons = [64, 128]
run.seeds = 3
instrument.bias_every = 4
instrument.bias_samples = 32
"#;

    #[test]
    fn replay_is_bit_identical_and_runs_are_independent() {
        let c = base_config(NOISY);
        let a = run_trajectory(&c, 64, 1).unwrap();
        let b = run_trajectory(&c, 64, 1).unwrap();
        assert_eq!(a.records, b.records);
        let other = run_trajectory(&c, 64, 2).unwrap();
        assert_ne!(a.records, other.records);
    }

    #[test]
    fn bias_instrumentation_does_not_perturb_the_path() {
        let c = base_config(NOISY);
        let mut bare = c.clone();
        bare.instrument.bias_every = BiasEvery::Every(0);
        let a = run_trajectory(&c, 64, 0).unwrap();
        let b = run_trajectory(&bare, 64, 0).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.sgrad_norm_sq, y.sgrad_norm_sq);
            assert_eq!(x.b_sq_after, y.b_sq_after);
        }
        assert!(a.records.iter().step_by(4).all(|r| r.bias_est.is_some()));
        assert!(a
            .records
            .iter()
            .skip(1)
            .step_by(4)
            .all(|r| r.bias_est.is_none()));
        assert_eq!(a.summary.coverage, 0.25);
        // Large sigma1 without estimates cannot be classified.
        assert_eq!(b.summary.bad_count, None);
    }

    #[test]
    fn auto_instrumentation_stride() {
        assert_eq!(BiasEvery::Auto.stride(100), Some(1));
        assert_eq!(BiasEvery::Auto.stride(1 << 13), Some(1));
        assert_eq!(BiasEvery::Auto.stride((1 << 13) + 1), Some(2));
        assert_eq!(BiasEvery::Auto.stride(1 << 16), Some(8));
        assert_eq!(BiasEvery::Every(0).stride(10), None);
    }

    #[test]
    fn running_minimum_is_monotone() {
        let c = base_config(NOISY);
        let traj = run_trajectory(&c, 128, 0).unwrap();
        let mut best = f64::INFINITY;
        for r in &traj.records {
            let next = best.min(r.grad_norm_sq);
            assert!(next <= best);
            best = next;
        }
        assert_eq!(best, traj.summary.min_grad_sq);
        assert!(traj.summary.min_grad_sq <= traj.summary.sum_grad_sq / 128.0);
    }

    #[test]
    fn checks_pass_on_real_trajectories() {
        let c = base_config(NOISY);
        let traj = run_trajectory(&c, 128, 0).unwrap();
        let (checks, _) = verify_records(&c, &traj.records).unwrap();
        for check in &checks {
            assert!(check.passed(), "{check:?}");
        }
    }

    #[test]
    fn overshooting_fixture_fails_step_decay() {
        let mut c = base_config(NOISY);
        c.optimizer.name = OptimizerName::OvershootingAdagradNorm;
        let traj = run_trajectory(&c, 64, 0).unwrap();
        let (checks, _) = verify_records(&c, &traj.records).unwrap();
        assert!(checks
            .iter()
            .any(|ch| ch.name == "step_decay" && ch.status == CheckStatus::Fail));
    }

    #[test]
    fn divergent_gd_is_aborted() {
        let c = base_config(
            "objective.name = \"quadratic\"\noptimizer.name = \"gd\"\noptimizer.eta = 10.0\nrun.horizons = [2000]\nrun.seeds = 1",
        );
        let traj = run_trajectory(&c, 2000, 0).unwrap();
        assert!(traj.summary.diverged);
        assert!(traj.abort.is_some());
        assert!(traj.records.len() < 2000);
    }

    #[test]
    fn coordinate_adagrad_checks() {
        let mut c = base_config(NOISY);
        c.optimizer.name = OptimizerName::CoordinateAdagrad;
        let traj = run_trajectory(&c, 128, 0).unwrap();
        assert_eq!(traj.runtime_checks.len(), 2);
        assert!(traj.runtime_checks.iter().all(|ch| ch.passed()));
        let (checks, _) = verify_records(&c, &traj.records).unwrap();
        assert!(checks.iter().all(|ch| ch.passed()), "{checks:?}");
    }

    #[test]
    fn sweep_is_ordered_and_worker_independent() {
        let c = base_config(NOISY);
        let seq = run_sweep(&c, &SweepOptions::default()).unwrap();
        let par = run_sweep(
            &c,
            &SweepOptions {
                execution: Execution::Parallel { workers: 3 },
                record_timing: false,
            },
        )
        .unwrap();
        assert_eq!(seq, par);
        let keys: Vec<_> = seq
            .iter()
            .map(|r| (r.summary.horizon, r.summary.seed))
            .collect();
        assert_eq!(
            keys,
            vec![(64, 0), (64, 1), (64, 2), (128, 0), (128, 1), (128, 2)]
        );
        let single = run_trajectory(&c, 64, 0).unwrap();
        assert_eq!(seq[0].summary, single.summary);
    }

    fn synthetic(points: &[(u64, f64)]) -> Vec<RunSummary> {
        points
            .iter()
            .map(|&(t, v)| RunSummary {
                horizon: t,
                seed: 0,
                min_grad_sq: v,
                sum_grad_sq: v,
                b_t_sq: 1.0,
                final_f: 0.0,
                bad_count: Some(0),
                coverage: 1.0,
                diverged: false,
                wall_ms: None,
            })
            .collect()
    }

    #[test]
    fn rate_fit_on_exact_power_laws() {
        let ts = [16u64, 64, 256, 1024, 4096];
        let s = synthetic(&ts.map(|t| (t, (t as f64).powf(-0.5))));
        let fit = fit_rate(&s, Statistic::MinGradSq).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let s = synthetic(&ts.map(|t| (t, 3.0 * t as f64)));
        let fit = fit_rate(&s, Statistic::SumGradSq).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit_rate(&s[..3], Statistic::SumGradSq).is_err());
    }

    #[test]
    fn rate_fit_uses_medians() {
        let mut s = Vec::new();
        for t in [10u64, 100, 1000, 10000] {
            for (k, v) in [1.0, 1e9, 0.5].into_iter().enumerate() {
                let mut r = synthetic(&[(t, v / t as f64)]).remove(0);
                r.seed = k as u64;
                s.push(r);
            }
        }
        let fit = fit_rate(&s, Statistic::MinGradSq).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.points[0].1 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn quantile_and_bound_comparison_edges() {
        let mut v = vec![5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(upper_quantile(&mut v, 0.5), 3.0);
        assert_eq!(upper_quantile(&mut v, 0.9), 5.0);
        assert_eq!(upper_quantile(&mut v, 0.2), 1.0);

        let c = base_config(QUAD_NOISELESS);
        let s = synthetic(&[(100, 1e-3), (1000, 1e-4)]);
        let rows = compare_to_bound(&c, &s, BoundKind::Sqrt, 1.0).unwrap();
        assert!(rows.iter().all(|r| r.status == CheckStatus::Vacuous));
        let rows = compare_to_bound(&c, &s, BoundKind::Sqrt, 0.5).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.status == CheckStatus::Pass && r.slack > 1.0));
        let noisy = base_config(NOISY);
        assert!(compare_to_bound(&noisy, &s, BoundKind::SmallNoise, 0.5).is_err());
    }

    #[test]
    fn small_sigma1_has_no_bad_times() {
        let c = base_config(
            "objective.name = \"loghump\"\nnoise.sigma0 = 1.0\nnoise.sigma1 = 0.125\nrun.horizons = [64]\nrun.seeds = 4",
        );
        let cells = run_sweep(&c, &SweepOptions::default()).unwrap();
        let summaries: Vec<_> = cells.iter().map(|c| c.summary.clone()).collect();
        assert!(summaries.iter().all(|s| s.bad_count == Some(0)));
        let reports = good_set_statistics(&c, &summaries).unwrap();
        assert_eq!(reports[0].status, CheckStatus::Pass);
        assert_eq!(
            (reports[0].mean_bound, reports[0].mean_sq_bound),
            (0.0, 0.0)
        );
    }
}
