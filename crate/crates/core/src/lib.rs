//! AdaGrad-Norm laboratory.
//!
//! The crate is organised around five pieces:
//!
//! * [`optimizers`]: AdaGrad-Norm and the baselines it is compared against,
//!   written as step functions over explicit state.
//! * [`problems`]: smooth objectives with exact gradients, plus samplers that
//!   produce unbiased stochastic gradients with affine variance.
//! * [`analysis`]: the quantities used to reason about AdaGrad-Norm
//!   (step-size proxy, bias, good/bad times, compensation sets, theorem
//!   constants and bounds) and checkers for the deterministic inequalities.
//! * [`experiments`]: trajectory runs, seed sweeps, rate fits and bound
//!   comparisons.
//! * [`cli`]: the `adanorm` command-line front end.
//!
//! All randomness is derived from an explicit base seed through [`rng`], so
//! every trajectory can be replayed bit for bit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod experiments;
pub mod optimizers;
pub mod problems;
pub mod rng;

pub(crate) mod linalg;
