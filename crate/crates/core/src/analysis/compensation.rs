//! Compensating good times for bad times.
//!
//! Bad times are processed from the largest to the smallest. The bad time
//! `t_b(i)` may use good times strictly below both `t_b(i)` and the smallest
//! time already given to `t_b(i-1)`; it takes the largest `n_comp` of them.
//! Once some bad time receives nothing, every smaller bad time receives
//! nothing as well.
//!
//! The construction guarantees, for every bad time `t`, one of
//!
//! 1. `|S(t)| = n_comp` and, when `n_comp > 0`, `t - min S(t) <= n_comp * B`;
//! 2. `|S(t)| < n_comp` and `t <= n_comp * B`,
//!
//! where `B` is the number of bad times. The dichotomy needs every time to
//! be classified; with unknown times only the structural properties hold.

use serde::{Deserialize, Serialize};

use super::{leq_tol, n_comp, CheckStatus, GoodBadClassification, StepRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompensationSet {
    pub bad_time: u64,
    /// Ascending.
    pub good_times: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompensationAssignment {
    pub n_comp: usize,
    /// One entry per bad time, ascending by bad time.
    pub sets: Vec<CompensationSet>,
}

impl CompensationAssignment {
    pub fn get(&self, bad_time: u64) -> Option<&CompensationSet> {
        self.sets
            .binary_search_by_key(&bad_time, |s| s.bad_time)
            .ok()
            .map(|i| &self.sets[i])
    }

    pub fn full_count(&self) -> usize {
        self.sets
            .iter()
            .filter(|s| s.good_times.len() == self.n_comp)
            .count()
    }
}

/// Greedy construction described in the module docs.
pub fn build_compensation_sets(
    classification: &GoodBadClassification,
    sigma1: f64,
) -> CompensationAssignment {
    let n = n_comp(sigma1);
    let mut good = classification.good.clone();
    good.sort_unstable();
    let mut bad = classification.bad.clone();
    bad.sort_unstable();

    let mut sets = Vec::with_capacity(bad.len());
    // Upper limit (exclusive) on eligible good times; None once a bad time
    // has been left without compensators.
    let mut ceiling = Some(u64::MAX);
    for &t in bad.iter().rev() {
        let good_times = match ceiling {
            Some(limit) => {
                let end = good.partition_point(|&g| g < t.min(limit));
                let start = end.saturating_sub(n);
                good[start..end].to_vec()
            }
            None => Vec::new(),
        };
        ceiling = good_times.first().copied();
        sets.push(CompensationSet {
            bad_time: t,
            good_times,
        });
    }
    sets.reverse();
    CompensationAssignment { n_comp: n, sets }
}

/// Structural problems with an assignment: overlap, membership, size,
/// ordering, or (when no time is unknown) a violated dichotomy condition.
/// Empty when valid.
pub fn validate_assignment(
    classification: &GoodBadClassification,
    assignment: &CompensationAssignment,
) -> Vec<String> {
    let mut problems = Vec::new();
    let n = assignment.n_comp;
    let bad_count = classification.bad.len() as u64;
    let complete = classification.unknown.is_empty();
    let mut used = std::collections::BTreeSet::new();
    for set in &assignment.sets {
        let t = set.bad_time;
        if classification.bad.binary_search(&t).is_err() {
            problems.push(format!("{t} has a set but is not a bad time"));
        }
        if set.good_times.len() > n {
            problems.push(format!(
                "S({t}) has {} > n_comp = {n} times",
                set.good_times.len()
            ));
        }
        for &g in &set.good_times {
            if classification.good.binary_search(&g).is_err() {
                problems.push(format!("S({t}) contains {g}, which is not good"));
            }
            if g >= t {
                problems.push(format!("S({t}) contains {g} >= {t}"));
            }
            if !used.insert(g) {
                problems.push(format!("good time {g} is used twice"));
            }
        }
        let full = set.good_times.len() == n;
        let ok = if full {
            n == 0 || t - set.good_times[0] <= n as u64 * bad_count
        } else {
            t <= n as u64 * bad_count
        };
        if complete && !ok {
            problems.push(format!("S({t}) violates both dichotomy conditions"));
        }
    }
    if assignment.sets.len() != classification.bad.len() {
        problems.push("not every bad time has a set".into());
    }
    problems
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationCheck {
    pub bad_time: u64,
    /// `((4 sigma1 - 1)/2) eta~_t |grad_t|^2 - sum_{t'} (eta~_{t'}/4) |grad_{t'}|^2`.
    pub lhs: f64,
    /// `(eta^2 L n_comp / 8) (t - min S(t))`.
    pub rhs: f64,
    pub status: CheckStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Checks the deterministic compensation inequality at every fully
/// compensated bad time. `records[i]` must describe step `i + 1`.
pub fn verify_compensation_inequality(
    records: &[StepRecord],
    assignment: &CompensationAssignment,
    sigma1: f64,
    smoothness: f64,
    eta: f64,
) -> Vec<CompensationCheck> {
    let term = |t: u64| {
        let r = &records[(t - 1) as usize];
        r.eta_tilde_t * r.grad_norm_sq
    };
    let n = assignment.n_comp;
    assignment
        .sets
        .iter()
        .map(|set| {
            let t = set.bad_time;
            if set.good_times.len() < n {
                return CompensationCheck {
                    bad_time: t,
                    lhs: f64::NAN,
                    rhs: f64::NAN,
                    status: CheckStatus::Skipped,
                    detail: "insufficient compensators".into(),
                };
            }
            let offset: f64 = set.good_times.iter().map(|&g| 0.25 * term(g)).sum();
            let lhs = 0.5 * (4.0 * sigma1 - 1.0) * term(t) - offset;
            let span = set.good_times.first().map_or(0, |&m| t - m);
            let rhs = eta * eta * smoothness * n as f64 / 8.0 * span as f64;
            let status = if leq_tol(lhs, rhs) {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
            CompensationCheck {
                bad_time: t,
                lhs,
                rhs,
                status,
                detail: String::new(),
            }
        })
        .collect()
}
