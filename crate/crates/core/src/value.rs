//! Monte Carlo value estimation, derivative estimators with common random
//! numbers, representation identities, and coupling-convergence experiments.
//!
//! All estimators reduce per-path results in path-index order with compensated
//! summation, so reported means do not depend on the worker count.

use crate::coupled::{rep_value_first, run_coupled, CoupledError, GlueRun, PerturbMode};
use crate::linalg::Kahan;
use crate::problem::ProblemSpec;
use crate::rng::NoiseStream;
use crate::sde::{simulate_path, simulate_regularized, SimConfig, SimError};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValueError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Coupled(#[from] CoupledError),
    #[error("start point outside D (psi = {0})")]
    StartOutside(f64),
    #[error("policy list is empty")]
    NoPolicies,
    #[error("shifted start x + eps xi leaves D (psi = {0})")]
    ShiftOutside(f64),
    #[error("representation check requires a single-control problem")]
    MultiControl,
    #[error("n_paths = {0} too small (need >= 2)")]
    TooFewPaths(u64),
}

/// Universal statistical result: mean, standard error, path count, and a
/// deterministic bias budget (horizon truncation plus exit detection).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: u64,
    pub bias_bound: f64,
}

impl Estimate {
    /// Reduce per-path values in index order.
    pub fn from_values(values: &[f64], bias_bound: f64) -> Result<Self, ValueError> {
        let n = values.len() as u64;
        if n < 2 {
            return Err(ValueError::TooFewPaths(n));
        }
        let mut s = Kahan::new();
        for v in values {
            s.add(*v);
        }
        let mean = s.value() / n as f64;
        let mut s2 = Kahan::new();
        for v in values {
            s2.add((v - mean) * (v - mean));
        }
        let var = s2.value() / (n as f64 - 1.0);
        Ok(Estimate { mean, stderr: (var / n as f64).sqrt(), n_paths: n, bias_bound })
    }
}

/// Admissible policy classes: constant controls plus grid-feedback tables.
#[derive(Clone)]
pub enum PolicySpec {
    Constant(usize),
    Feedback(std::sync::Arc<crate::sde::FeedbackTable>),
}

impl PolicySpec {
    fn to_ref(&self) -> crate::sde::PolicyRef {
        match self {
            PolicySpec::Constant(i) => crate::sde::PolicyRef::Constant(*i),
            PolicySpec::Feedback(t) => crate::sde::PolicyRef::Feedback(t.clone()),
        }
    }

    pub fn all_constant(problem: &ProblemSpec) -> Vec<PolicySpec> {
        (0..problem.controls.len()).map(PolicySpec::Constant).collect()
    }
}

fn check_inside(problem: &ProblemSpec, x: &[f64]) -> Result<(), ValueError> {
    let psi = problem.domain.psi(x);
    if psi <= 0.0 {
        return Err(ValueError::StartOutside(psi));
    }
    Ok(())
}

/// Deterministic bias budget: the Lemma-6.4 horizon tail
/// (sup|f| + |g|) |psi|_0 E tau / T plus the residual exit-detection term.
fn bias_budget(problem: &ProblemSpec, config: &SimConfig, mean_tau: f64) -> f64 {
    let psi_sup = problem.domain.psi_sup(problem.d);
    let tail = (problem.f_sup() + problem.g_sup()) * psi_sup * mean_tau / config.t_max;
    let (lo, hi) = problem.domain.bbox(problem.d);
    let lip_g = problem.g.lipschitz_on_box(&lo, &hi);
    let (s2, _) = problem.coeff_sups();
    // residual O(dt) crossing-test bias proxy
    let exit = (lip_g + problem.f_sup()) * s2.sqrt() * config.dt;
    tail + exit
}

/// Seed layout: each (policy, path) pair owns an independent stream family.
fn path_seed(seed: u64, salt: u64) -> u64 {
    crate::linalg::splitmix64(seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15))
}

/// Monte Carlo estimate of the value function: max over policies of the mean
/// discounted payoff. Returns the best policy's estimate.
pub fn estimate_value(
    problem: &ProblemSpec,
    policies: &[PolicySpec],
    x: &[f64],
    n_paths: u64,
    config: &SimConfig,
    seed: u64,
) -> Result<Estimate, ValueError> {
    estimate_value_impl(problem, 0.0, policies, x, n_paths, config, seed)
}

/// As `estimate_value` over the eps-regularized diffusion (sigma | eps I).
pub fn estimate_value_regularized(
    problem: &ProblemSpec,
    eps: f64,
    policies: &[PolicySpec],
    x: &[f64],
    n_paths: u64,
    config: &SimConfig,
    seed: u64,
) -> Result<Estimate, ValueError> {
    estimate_value_impl(problem, eps, policies, x, n_paths, config, seed)
}

fn estimate_value_impl(
    problem: &ProblemSpec,
    eps: f64,
    policies: &[PolicySpec],
    x: &[f64],
    n_paths: u64,
    config: &SimConfig,
    seed: u64,
) -> Result<Estimate, ValueError> {
    check_inside(problem, x)?;
    if policies.is_empty() {
        return Err(ValueError::NoPolicies);
    }
    let mut best: Option<Estimate> = None;
    for pol in policies {
        let cfg = SimConfig { policy: pol.to_ref(), ..config.clone() };
        let results: Vec<(f64, f64)> = (0..n_paths)
            .into_par_iter()
            .map(|k| {
                let mut noise = NoiseStream::new(path_seed(seed, 0), k);
                let rec = simulate_regularized(problem, eps, &cfg, x, &mut noise)
                    .expect("start validated");
                (rec.payoff, rec.exit_time)
            })
            .collect();
        let payoffs: Vec<f64> = results.iter().map(|r| r.0).collect();
        let mut tau = Kahan::new();
        for r in &results {
            tau.add(r.1);
        }
        let mean_tau = tau.value() / n_paths as f64;
        let est = Estimate::from_values(&payoffs, bias_budget(problem, config, mean_tau))?;
        best = Some(match best {
            None => est,
            Some(b) if est.mean > b.mean => est,
            Some(b) => b,
        });
    }
    Ok(best.expect("nonempty policies"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffOrder {
    First,
    Second,
}

/// Common-random-number difference quotients of the value at shifted starts:
/// first (v(x+eps xi) - v(x))/eps, second (v(x+eps xi) - 2v(x) + v(x-eps xi))/eps^2.
/// The per-path difference is taken before averaging.
#[allow(clippy::too_many_arguments)]
pub fn fd_directional(
    problem: &ProblemSpec,
    policy: &PolicySpec,
    x: &[f64],
    xi: &[f64],
    eps_list: &[f64],
    n_paths: u64,
    config: &SimConfig,
    order: DiffOrder,
    seed: u64,
) -> Result<Vec<Estimate>, ValueError> {
    check_inside(problem, x)?;
    // endpoint-only exit detection: the crossing test's extra randomness breaks
    // the pathwise coherence of shifted starts, and the exit bias largely
    // cancels in the difference anyway
    let cfg =
        SimConfig { policy: policy.to_ref(), crossing_test: false, ..config.clone() };
    let mut out = Vec::new();
    for &eps in eps_list {
        let shift = |s: f64| -> Vec<f64> {
            x.iter().zip(xi).map(|(a, b)| a + s * eps * b).collect()
        };
        let xp = shift(1.0);
        let xm = shift(-1.0);
        for p in [&xp, &xm] {
            let psi = problem.domain.psi(p);
            if psi <= 0.0 && (order == DiffOrder::Second || std::ptr::eq(p, &xp)) {
                return Err(ValueError::ShiftOutside(psi));
            }
        }
        if eps == 0.0 {
            // difference is identically zero
            out.push(Estimate { mean: 0.0, stderr: 0.0, n_paths, bias_bound: 0.0 });
            continue;
        }
        let diffs: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|k| {
                let run = |start: &[f64]| {
                    let mut noise = NoiseStream::new(path_seed(seed, 1), k);
                    simulate_path(problem, &cfg, start, &mut noise).expect("validated").payoff
                };
                match order {
                    DiffOrder::First => (run(&xp) - run(x)) / eps,
                    DiffOrder::Second => (run(&xp) - 2.0 * run(x) + run(&xm)) / (eps * eps),
                }
            })
            .collect();
        out.push(Estimate::from_values(&diffs, 0.0)?);
    }
    Ok(out)
}

/// Report of a representation-identity check.
#[derive(Clone, Debug, Serialize)]
pub struct RepReport {
    pub lhs: f64,
    pub rhs: Estimate,
    pub abs_diff: f64,
}

/// First-order representation: v(x + eps xi) against
/// E[v(y_gamma(eps)) p_gamma e^{-phi_gamma(eps)} + q_gamma] over coupled glued
/// paths. Exact per fixed control, so the problem must be single-control.
#[allow(clippy::too_many_arguments)]
pub fn representation_first(
    problem: &ProblemSpec,
    x: &[f64],
    xi: &[f64],
    eps: f64,
    run: &GlueRun,
    n_paths: u64,
    v_oracle: &(dyn Fn(&[f64]) -> f64 + Sync),
    seed: u64,
) -> Result<RepReport, ValueError> {
    if problem.controls.len() != 1 {
        return Err(ValueError::MultiControl);
    }
    let mut shifted = x.to_vec();
    crate::linalg::axpy(eps, xi, &mut shifted);
    let psi = problem.domain.psi(&shifted);
    if psi <= run.stop_level {
        return Err(ValueError::ShiftOutside(psi));
    }
    let run = GlueRun { eps, mode: PerturbMode::First, ..run.clone() };
    let values: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut noise = NoiseStream::new(path_seed(seed, 2), k);
            let out = run_coupled(problem, &run, x, xi, &vec![0.0; problem.d], &mut noise)
                .expect("validated");
            rep_value_first(v_oracle, out.first.as_ref().expect("first-order mode"))
        })
        .collect();
    let rhs = Estimate::from_values(&values, 0.0)?;
    let lhs = v_oracle(&shifted);
    Ok(RepReport { lhs, rhs, abs_diff: (lhs - rhs.mean).abs() })
}

/// First-order coupling error sup_{t <= gamma ^ T} |(y(eps) - x)/eps - xi|
/// per eps, shared noise across the eps list.
#[allow(clippy::too_many_arguments)]
pub fn coupling_first(
    problem: &ProblemSpec,
    x: &[f64],
    xi: &[f64],
    eps_list: &[f64],
    run: &GlueRun,
    n_paths: u64,
    seed: u64,
) -> Result<Vec<Estimate>, ValueError> {
    let mut out = Vec::new();
    for &eps in eps_list {
        let run = GlueRun { eps, mode: PerturbMode::First, ..run.clone() };
        let sups: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|k| {
                let mut noise = NoiseStream::new(path_seed(seed, 3), k);
                run_coupled(problem, &run, x, xi, &vec![0.0; problem.d], &mut noise)
                    .expect("validated")
                    .sup_coupling_first
            })
            .collect();
        out.push(Estimate::from_values(&sups, 0.0)?);
    }
    Ok(out)
}

/// Second-order coupling error sup |(z(+eps) - 2x + z(-eps))/eps^2 - eta|.
#[allow(clippy::too_many_arguments)]
pub fn coupling_second(
    problem: &ProblemSpec,
    x: &[f64],
    xi: &[f64],
    eta0: &[f64],
    eps_list: &[f64],
    run: &GlueRun,
    n_paths: u64,
    seed: u64,
) -> Result<Vec<Estimate>, ValueError> {
    let mut out = Vec::new();
    for &eps in eps_list {
        let run = GlueRun { eps, mode: PerturbMode::SecondPair, ..run.clone() };
        let sups: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|k| {
                let mut noise = NoiseStream::new(path_seed(seed, 4), k);
                run_coupled(problem, &run, x, xi, eta0, &mut noise)
                    .expect("validated")
                    .sup_coupling_second
            })
            .collect();
        out.push(Estimate::from_values(&sups, 0.0)?);
    }
    Ok(out)
}

/// Exit-time moments with their bounds n! |psi|_0^{n-1} psi(x).
pub fn exit_moments(
    problem: &ProblemSpec,
    x: &[f64],
    n_list: &[u32],
    n_paths: u64,
    config: &SimConfig,
    seed: u64,
) -> Result<Vec<(Estimate, f64)>, ValueError> {
    check_inside(problem, x)?;
    let taus: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut noise = NoiseStream::new(path_seed(seed, 5), k);
            simulate_path(problem, config, x, &mut noise).expect("validated").exit_time
        })
        .collect();
    let psi_sup = problem.domain.psi_sup(problem.d);
    let psi_x = problem.domain.psi(x);
    let mut out = Vec::new();
    for &n in n_list {
        let powered: Vec<f64> = taus.iter().map(|t| t.powi(n as i32)).collect();
        let est = Estimate::from_values(&powered, 0.0)?;
        let bound = (1..=n).map(|k| k as f64).product::<f64>() * psi_sup.powi(n as i32 - 1) * psi_x;
        out.push((est, bound));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled::run_params_mild;
    use crate::problem::{tp1, tp2};

    fn quick_cfg() -> SimConfig {
        SimConfig::new(1e-3, 40.0)
    }

    #[test]
    fn tp1_value_at_origin() {
        // exact v(0) = 1/(2d) = 0.25 in d = 2
        let p = tp1(2);
        let est = estimate_value(
            &p,
            &PolicySpec::all_constant(&p),
            &[0.0, 0.0],
            20_000,
            &quick_cfg(),
            42,
        )
        .unwrap();
        assert!(
            (est.mean - 0.25).abs() < 3.0 * est.stderr + 0.01,
            "v(0) = {} +- {}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn policy_max_monotone() {
        let p = tp2(8);
        let x = [0.2, 0.1];
        let one = estimate_value(&p, &[PolicySpec::Constant(0)], &x, 2_000, &quick_cfg(), 7)
            .unwrap();
        let all = estimate_value(&p, &PolicySpec::all_constant(&p), &x, 2_000, &quick_cfg(), 7)
            .unwrap();
        assert!(all.mean >= one.mean);
    }

    #[test]
    fn start_outside_is_error() {
        let p = tp1(2);
        assert!(matches!(
            estimate_value(&p, &PolicySpec::all_constant(&p), &[2.0, 0.0], 10, &quick_cfg(), 1),
            Err(ValueError::StartOutside(_))
        ));
    }

    #[test]
    fn fd_zero_direction_is_zero() {
        let p = tp1(2);
        let est = fd_directional(
            &p,
            &PolicySpec::Constant(0),
            &[0.1, 0.0],
            &[0.0, 0.0],
            &[0.0],
            100,
            &quick_cfg(),
            DiffOrder::First,
            3,
        )
        .unwrap();
        assert_eq!(est[0].mean, 0.0);
    }

    #[test]
    fn crn_beats_independent_noise() {
        // shared-noise difference quotient must be at least 5x tighter; the
        // coupled noise scales like sqrt(eps) against 1/eps for independent
        // runs, so the margin is tested at a small offset
        let p = tp1(2);
        let x = [0.0, 0.0];
        let xi = [1.0, 0.0];
        let eps = 0.02;
        let n = 4_000u64;
        let crn = fd_directional(
            &p,
            &PolicySpec::Constant(0),
            &x,
            &xi,
            &[eps],
            n,
            &quick_cfg(),
            DiffOrder::First,
            11,
        )
        .unwrap()[0];
        // independent estimate: two separate runs
        let cfg = quick_cfg();
        let xp = [eps, 0.0];
        let a = estimate_value(&p, &[PolicySpec::Constant(0)], &xp, n, &cfg, 100).unwrap();
        let b = estimate_value(&p, &[PolicySpec::Constant(0)], &x, n, &cfg, 200).unwrap();
        let indep_se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt() / eps;
        assert!(
            indep_se > 5.0 * crn.stderr,
            "CRN se {} vs independent se {}",
            crn.stderr,
            indep_se
        );
    }

    #[test]
    fn exit_moment_bounds_tp1_d1() {
        let p = tp1(1);
        let cfg = SimConfig::new(2e-4, 60.0);
        let out = exit_moments(&p, &[0.0], &[1, 2], 20_000, &cfg, 5).unwrap();
        let (m1, b1) = out[0];
        let (m2, b2) = out[1];
        assert!((m1.mean - 0.5).abs() < 3.0 * m1.stderr + 0.01, "E tau = {}", m1.mean);
        assert!((m2.mean - 5.0 / 12.0).abs() < 3.0 * m2.stderr + 0.015, "E tau^2 = {}", m2.mean);
        assert!((b1 - 1.0).abs() < 1e-12);
        assert!((b2 - 2.0).abs() < 1e-12);
        assert!(m1.mean <= b1 + 3.0 * m1.stderr);
        assert!(m2.mean <= b2 + 3.0 * m2.stderr);
    }

    #[test]
    fn representation_requires_single_control() {
        let p = tp2(4);
        let run = GlueRun {
            params: run_params_mild(),
            eps: 0.1,
            dt: 1e-3,
            t_max: 2.0,
            xi_cap: 1e3,
            stop_level: 0.1,
            mode: PerturbMode::First,
            control: 0,
        };
        let oracle = |_: &[f64]| 0.0;
        assert!(matches!(
            representation_first(&p, &[0.0, 0.0], &[1.0, 0.0], 0.1, &run, 10, &oracle, 1),
            Err(ValueError::MultiControl)
        ));
    }
}
