//! Coupled simulation of the base path, the glued quasiderivative system, and
//! the perturbed processes under shared noise.
//!
//! These runs stop at grid times (first step whose endpoint leaves the run
//! region, or the horizon, or the |xi| cap). The representation identity holds
//! at every stopping time of the discrete filtration, so grid stopping
//! introduces no boundary bias there; the bisected exits of the plain value
//! simulator are deliberately not used here.

use crate::linalg::{norm, sub, Kahan};
use crate::problem::ProblemSpec;
use crate::quasi::{
    aux_for_regime, barrier_b1, barrier_b2, step_quasi, update_regime, AuxProcesses,
    BarrierParams, QuasiError, QuasiState, Regime, SwitchAutomaton,
};
use crate::rng::NoiseStream;
use crate::sde::{step_base, step_perturbed_first, step_perturbed_second, PerturbedState, SimError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoupledError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Quasi(#[from] QuasiError),
    #[error("start point outside the run region (psi = {0})")]
    StartOutside(f64),
}

/// What a coupled run simulates besides the base path and quasiderivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbMode {
    /// y_t(eps) with Girsanov density, time-changed discount and q.
    First,
    /// z_t(+eps) and z_t(-eps) with hatted accumulators.
    SecondPair,
    /// no perturbed process
    None,
}

#[derive(Clone)]
pub struct GlueRun {
    /// Gluing/aux parameters for this run (certificate parameters are
    /// calibrated separately; the identities hold for any admissible choice).
    pub params: BarrierParams,
    pub eps: f64,
    pub dt: f64,
    pub t_max: f64,
    /// stop when |xi| reaches this cap
    pub xi_cap: f64,
    /// stop when psi(x) (or psi of a perturbed state) falls to this level
    pub stop_level: f64,
    pub mode: PerturbMode,
    pub control: usize,
}

/// Reason the run stopped, with everything experiments consume.
pub struct CoupledPath {
    pub t: f64,
    pub x: Vec<f64>,
    pub quasi: QuasiState,
    pub phi: f64,
    pub first: Option<PerturbedState>,
    pub second_plus: Option<PerturbedState>,
    pub second_minus: Option<PerturbedState>,
    /// sup over grid times of |(y - x)/eps - xi|
    pub sup_coupling_first: f64,
    /// sup over grid times of |(z(+) - 2x + z(-))/eps^2 - eta|
    pub sup_coupling_second: f64,
    pub max_abs_eta_tilde: f64,
    /// p at tau ^ 1 for the first-order density
    pub p_at_tau_cap_one: f64,
    pub automaton: SwitchAutomaton,
    pub regime_at_stop: Regime,
    pub b_active_start: f64,
    pub b_active_stop: f64,
    pub envelope_start_upper: f64,
    pub envelope_stop_lower: f64,
}

/// Run one coupled path from (x0, xi0, eta0).
pub fn run_coupled(
    problem: &ProblemSpec,
    run: &GlueRun,
    x0: &[f64],
    xi0: &[f64],
    eta0: &[f64],
    noise: &mut NoiseStream,
) -> Result<CoupledPath, CoupledError> {
    let domain = &problem.domain;
    let cp = &problem.controls[run.control];
    let d1 = problem.d1;
    let dt = run.dt;
    let sqrt_dt = dt.sqrt();
    let psi0 = domain.psi(x0);
    if psi0 <= run.stop_level {
        return Err(CoupledError::StartOutside(psi0));
    }

    let mut x = x0.to_vec();
    let mut quasi = QuasiState::new(xi0.to_vec(), eta0.to_vec());
    let mut phi = 0.0;
    let mut t = 0.0;
    let mut automaton = SwitchAutomaton::start(psi0, &run.params);
    let start_regime = automaton.regime;

    let mut first = match run.mode {
        PerturbMode::First => {
            let mut y0 = x0.to_vec();
            crate::linalg::axpy(run.eps, xi0, &mut y0);
            Some(PerturbedState::new(y0))
        }
        _ => None,
    };
    let (mut second_plus, mut second_minus) = match run.mode {
        PerturbMode::SecondPair => {
            let mut zp = x0.to_vec();
            crate::linalg::axpy(run.eps, xi0, &mut zp);
            crate::linalg::axpy(0.5 * run.eps * run.eps, eta0, &mut zp);
            let mut zm = x0.to_vec();
            crate::linalg::axpy(-run.eps, xi0, &mut zm);
            crate::linalg::axpy(0.5 * run.eps * run.eps, eta0, &mut zm);
            (Some(PerturbedState::new(zp)), Some(PerturbedState::new(zm)))
        }
        _ => (None, None),
    };

    let b_active = |regime: Regime, x: &[f64], xi: &[f64]| -> f64 {
        match regime {
            Regime::Boundary => barrier_b1(domain, x, xi, &run.params),
            Regime::Interior => barrier_b2(domain, x, xi, &run.params),
        }
    };
    let b_active_start = b_active(start_regime, x0, xi0);
    let envelope_start_upper = {
        let psi = domain.psi(x0);
        let l2 = run.params.lambda * run.params.lambda;
        let mut u = 0.0;
        if psi < run.params.lambda {
            u += barrier_b1(domain, x0, xi0, &run.params);
        }
        if psi >= l2 {
            u += barrier_b2(domain, x0, xi0, &run.params);
        }
        u
    };

    let mut dw = vec![0.0; d1];
    let mut sup1: f64 = 0.0;
    let mut sup2: f64 = 0.0;
    let mut max_eta_tilde: f64 = 0.0;
    let mut p_at_cap = f64::NAN;
    let mut q_phi = Kahan::new(); // base discount via compensated sum

    loop {
        let stopped_by_time = t >= run.t_max - 1e-15;
        let stopped_by_xi = norm(&quasi.xi) >= run.xi_cap;
        let psi_x = domain.psi(&x);
        let mut stopped_by_exit = psi_x <= run.stop_level;
        if let Some(f) = &first {
            stopped_by_exit |= domain.psi(&f.y) <= run.stop_level;
        }
        if let Some(z) = &second_plus {
            stopped_by_exit |= domain.psi(&z.y) <= run.stop_level;
        }
        if let Some(z) = &second_minus {
            stopped_by_exit |= domain.psi(&z.y) <= run.stop_level;
        }
        if stopped_by_time || stopped_by_xi || stopped_by_exit {
            if p_at_cap.is_nan() {
                p_at_cap = first.as_ref().map(|f| f.p()).unwrap_or(1.0);
            }
            let regime_at_stop = automaton.regime;
            let b_active_stop = b_active(regime_at_stop, &x, &quasi.xi);
            let envelope_stop_lower = {
                let psi = domain.psi(&x);
                let l2 = run.params.lambda * run.params.lambda;
                if psi < l2 {
                    barrier_b1(domain, &x, &quasi.xi, &run.params)
                } else if psi <= run.params.lambda {
                    barrier_b1(domain, &x, &quasi.xi, &run.params)
                        .min(barrier_b2(domain, &x, &quasi.xi, &run.params))
                } else {
                    barrier_b2(domain, &x, &quasi.xi, &run.params)
                }
            };
            return Ok(CoupledPath {
                t,
                x,
                quasi,
                phi,
                first,
                second_plus,
                second_minus,
                sup_coupling_first: sup1,
                sup_coupling_second: sup2,
                max_abs_eta_tilde: max_eta_tilde,
                p_at_tau_cap_one: p_at_cap,
                automaton,
                regime_at_stop,
                b_active_start,
                b_active_stop,
                envelope_start_upper,
                envelope_stop_lower,
            });
        }

        update_regime(&mut automaton, psi_x, &run.params, t);
        let aux: AuxProcesses = aux_for_regime(
            automaton.regime,
            domain,
            &cp.sigma,
            &x,
            &quasi.xi,
            quasi.xi_tilde,
            &run.params,
        )?;
        noise.next_dw(sqrt_dt, &mut dw);

        // accumulators and perturbed processes use pre-step states
        if let Some(f) = first.as_mut() {
            step_perturbed_first(f, cp, &aux, run.eps, &dw, dt)?;
        }
        if let Some(z) = second_plus.as_mut() {
            step_perturbed_second(z, cp, &aux, run.eps, &dw, dt)?;
        }
        if let Some(z) = second_minus.as_mut() {
            step_perturbed_second(z, cp, &aux, -run.eps, &dw, dt)?;
        }
        quasi = step_quasi(&quasi, &aux, cp, &x, phi, &dw, dt);
        q_phi.add(cp.c * dt);
        phi = q_phi.value();
        x = step_base(&x, cp, &dw, dt)?;
        t += dt;

        if t >= 1.0 && p_at_cap.is_nan() {
            p_at_cap = first.as_ref().map(|f| f.p()).unwrap_or(1.0);
        }
        max_eta_tilde = max_eta_tilde.max(quasi.eta_tilde.abs());
        if run.eps > 0.0 {
            if let Some(f) = &first {
                let diff = sub(&f.y, &x);
                let err: Vec<f64> =
                    diff.iter().zip(&quasi.xi).map(|(d, xi)| d / run.eps - xi).collect();
                sup1 = sup1.max(norm(&err));
            }
            if let (Some(zp), Some(zm)) = (&second_plus, &second_minus) {
                let e2 = run.eps * run.eps;
                let err: Vec<f64> = (0..x.len())
                    .map(|i| (zp.y[i] - 2.0 * x[i] + zm.y[i]) / e2 - quasi.eta[i])
                    .collect();
                sup2 = sup2.max(norm(&err));
            }
        }
    }
}

/// Composite payoff V(x, phi, p, q) = v(x) e^{-phi} p + q used by the
/// representation checks.
pub fn composite_value(v_at: f64, phi: f64, p: f64, q: f64) -> f64 {
    v_at * (-phi).exp() * p + q
}

/// V along the first-order perturbed state.
pub fn rep_value_first(
    v_oracle: &dyn Fn(&[f64]) -> f64,
    st: &PerturbedState,
) -> f64 {
    composite_value(v_oracle(&st.y), st.phi_eps, st.p(), st.q)
}

/// Mild default gluing parameters for coupled runs on an unnormalized problem:
/// lambda = 1/2 of the psi scale with a wide hysteresis band and a stable
/// measure-change magnitude. Certificate parameters come from calibration
/// instead.
pub fn run_params_mild() -> BarrierParams {
    BarrierParams::new(0.5, 0.02, 1.0 / 6.0, 1.0).expect("static params valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::tp1;

    fn mk_run(eps: f64, mode: PerturbMode) -> GlueRun {
        GlueRun {
            params: run_params_mild(),
            eps,
            dt: 1e-3,
            t_max: 4.0,
            xi_cap: 1e3,
            stop_level: 0.125,
            mode,
            control: 0,
        }
    }

    #[test]
    fn eps_zero_first_order_matches_base_bitwise() {
        let p = tp1(2);
        let run = mk_run(0.0, PerturbMode::First);
        let mut noise = NoiseStream::new(5, 2);
        let out = run_coupled(&p, &run, &[0.3, 0.0], &[0.0, 1.0], &[0.0, 0.0], &mut noise)
            .unwrap();
        let f = out.first.unwrap();
        assert_eq!(f.y, out.x, "y == x bitwise at eps = 0");
        assert_eq!(f.log_p, 0.0);
        assert!((f.phi_eps - out.phi).abs() < 1e-15);
    }

    #[test]
    fn eps_zero_second_order_pair_matches_base() {
        let p = tp1(2);
        let run = mk_run(0.0, PerturbMode::SecondPair);
        let mut noise = NoiseStream::new(6, 4);
        let out = run_coupled(&p, &run, &[0.2, 0.1], &[1.0, 0.0], &[0.0, 0.0], &mut noise)
            .unwrap();
        let zp = out.second_plus.unwrap();
        let zm = out.second_minus.unwrap();
        assert_eq!(zp.y, out.x);
        assert_eq!(zm.y, out.x);
        assert_eq!(zp.log_p, 0.0);
    }

    #[test]
    fn coupling_error_zero_when_aux_trivial_and_xi_constant() {
        // xi0 = 0: y(eps) starts at x and (y-x)/eps - xi stays 0 to rounding
        let p = tp1(2);
        let run = mk_run(0.1, PerturbMode::First);
        let mut noise = NoiseStream::new(7, 9);
        let out = run_coupled(&p, &run, &[0.2, 0.1], &[0.0, 0.0], &[0.0, 0.0], &mut noise)
            .unwrap();
        assert!(out.sup_coupling_first < 1e-10, "sup err {}", out.sup_coupling_first);
    }

    #[test]
    fn eta_tilde_identically_zero_on_glued_paths() {
        let p = tp1(2);
        let run = mk_run(0.1, PerturbMode::First);
        for k in 0..64 {
            let mut noise = NoiseStream::new(100 + k, k);
            let out = run_coupled(&p, &run, &[0.4, -0.2], &[0.3, 0.8], &[0.0, 0.0], &mut noise)
                .unwrap();
            assert_eq!(out.max_abs_eta_tilde, 0.0);
        }
    }

    #[test]
    fn second_difference_initial_condition() {
        // at t = 0+, (z(+) - 2x + z(-))/eps^2 = eta0 by construction of the starts
        let p = tp1(2);
        let mut run = mk_run(0.2, PerturbMode::SecondPair);
        run.t_max = run.dt * 1.5; // one step
        let eta0 = vec![0.7, -0.4];
        let mut noise = NoiseStream::new(3, 3);
        let out = run_coupled(&p, &run, &[0.2, 0.1], &[1.0, 0.0], &eta0, &mut noise).unwrap();
        // after one step the deviation is O(dt)-small
        assert!(out.sup_coupling_second < 0.2, "sup2 = {}", out.sup_coupling_second);
    }
}
