//! Quasiderivative machinery: auxiliary processes for the boundary and
//! interior constructions, the hysteresis gluing between them, the
//! quasiderivative steps, the barriers B1/B2 with their envelopes, and the
//! generator-based drift certificates.
//!
//! Drift certificates evaluate the true Ito drift of B^kappa(x_t, xi_t) under
//! the joint (x, xi) dynamics by finite differences of B along the generator
//! directions; they never reuse the hand-expanded Gamma_1/Gamma_2 algebra, so
//! an algebra slip in those expansions cannot hide here. FD steps are scaled
//! to the local relative variation psi/|psi_x| (a fixed step cannot resolve
//! the boundary strip at calibrated lambda), which keeps the FD noise near
//! 1e-14 relative to the local drift scale uniformly in psi.

use crate::linalg::{dot, norm, outer, Mat};
use crate::problem::{DomainFn, ProblemSpec};
use crate::rng::NoiseStream;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuasiError {
    #[error("|psi_x| = 0 at {0:?}: rotation rate and r are undefined")]
    GradientSingular(Vec<f64>),
    #[error("point outside D_delta (psi = {0})")]
    OutsideDelta(f64),
    #[error("barrier parameters invalid: {0}")]
    BadParams(String),
    #[error("non-finite drift value at a sample")]
    NonFiniteDrift,
    #[error("regime {0:?} does not match barrier {1:?}")]
    RegimeMismatch(Regime, BarrierKind),
    #[error("level-set sampling failed after {0} attempts")]
    LevelSetSampling(usize),
    #[error("calibration failed; worst violator: {0}")]
    CalibrationFailed(String),
    #[error("calibration with zero samples is a vacuous pass; refusing")]
    NoSamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    Boundary,
    Interior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BarrierKind {
    B1,
    B2,
}

/// Tunables of the barrier construction.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BarrierParams {
    pub lambda: f64,
    pub delta: f64,
    pub theta_exp: f64,
    pub k1: f64,
    pub nu: f64,
    pub kappa_power: f64,
}

impl BarrierParams {
    pub fn new(lambda: f64, delta: f64, theta_exp: f64, k1: f64) -> Result<Self, QuasiError> {
        let p = BarrierParams {
            lambda,
            delta,
            theta_exp,
            k1,
            nu: nu_of(theta_exp),
            kappa_power: 1.0,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), QuasiError> {
        if !(0.0 < self.delta
            && self.delta < self.lambda * self.lambda
            && self.lambda < 1.0
            && self.theta_exp > 0.0
            && self.theta_exp < 1.0 / 3.0
            && self.k1 >= 1.0)
        {
            return Err(QuasiError::BadParams(format!("{self:?}")));
        }
        if (self.nu - nu_of(self.theta_exp)).abs() > 1e-12 * self.nu {
            return Err(QuasiError::BadParams("nu does not match its formula".into()));
        }
        Ok(())
    }
}

/// nu = theta (1-2 theta)^2 / (2 (1-3 theta))
pub fn nu_of(theta: f64) -> f64 {
    theta * (1.0 - 2.0 * theta).powi(2) / (2.0 * (1.0 - 3.0 * theta))
}

/// Instantaneous auxiliary processes (time change, measure change, rotation).
#[derive(Clone, Debug)]
pub struct AuxProcesses {
    pub r: f64,
    pub r_hat: f64,
    pub pi: Vec<f64>,
    pub pi_hat: Vec<f64>,
    pub p_mat: Mat,
    pub p_hat: Mat,
    pub regime: Regime,
}

impl AuxProcesses {
    pub fn zero(d: usize, d1: usize) -> Self {
        AuxProcesses {
            r: 0.0,
            r_hat: 0.0,
            pi: vec![0.0; d1],
            pi_hat: vec![0.0; d1],
            p_mat: Mat::zeros(d, d),
            p_hat: Mat::zeros(d, d),
            regime: Regime::Interior,
        }
    }
}

/// beta and gamma of the boundary barrier.
pub fn beta_gamma(psi: f64, lambda: f64) -> (f64, f64) {
    let beta = 1.0 + psi * (1.0 - psi / (4.0 * lambda)) / (8.0 * lambda);
    let gamma = lambda * lambda + psi * (1.0 - psi / (4.0 * lambda));
    (beta, gamma)
}

/// Boundary construction: r = rho + psi_(xi)/psi with
/// rho = -(psi_x . psi_xx xi)/|psi_x|^2, rotation rate
/// P = (u v^T - v u^T)/|psi_x|^2 for u = psi_xx xi, v = psi_x, and the
/// measure-change components built from beta, gamma.
pub fn aux_boundary(
    domain: &DomainFn,
    sigma: &Mat,
    x: &[f64],
    xi: &[f64],
    xi_tilde: f64,
    params: &BarrierParams,
) -> Result<AuxProcesses, QuasiError> {
    let ev = domain.eval(x);
    if ev.psi <= 0.0 {
        return Err(QuasiError::OutsideDelta(ev.psi));
    }
    let n2 = dot(&ev.grad, &ev.grad);
    if n2 <= 0.0 {
        return Err(QuasiError::GradientSingular(x.to_vec()));
    }
    let u = ev.hess.matvec(xi);
    let rho = -dot(&ev.grad, &u) / n2;
    let psi_xi = dot(&ev.grad, xi);
    let r = rho + psi_xi / ev.psi;
    let r_hat = (psi_xi / ev.psi).powi(2);
    let p_mat = outer(&u, &ev.grad).sub(&outer(&ev.grad, &u)).scaled(1.0 / n2);
    let (beta, gamma) = beta_gamma(ev.psi, params.lambda);
    let lead = (1.0 - ev.psi / (2.0 * params.lambda)) / (2.0 * gamma);
    let d1 = sigma.cols;
    let mut pi = vec![0.0; d1];
    for (k, pik) in pi.iter_mut().enumerate() {
        let sk = sigma.col(k);
        *pik = lead * ((psi_xi / ev.psi) * dot(&ev.grad, &sk) + beta * dot(xi, &sk));
    }
    let pi_hat = pi.iter().map(|v| -2.0 * v * xi_tilde).collect();
    Ok(AuxProcesses {
        r,
        r_hat,
        pi,
        pi_hat,
        p_mat,
        p_hat: Mat::zeros(x.len(), x.len()),
        regime: Regime::Boundary,
    })
}

/// Interior construction: r = theta psi_(xi)/psi, no rotation, measure change
/// pi^k = (nu/psi^2)[K1 psi (xi, sigma_k) + psi_(xi) psi_(sigma_k)].
pub fn aux_interior(
    domain: &DomainFn,
    sigma: &Mat,
    x: &[f64],
    xi: &[f64],
    xi_tilde: f64,
    params: &BarrierParams,
) -> Result<AuxProcesses, QuasiError> {
    let ev = domain.eval(x);
    if ev.psi <= 0.0 {
        return Err(QuasiError::OutsideDelta(ev.psi));
    }
    let psi_xi = dot(&ev.grad, xi);
    let r = params.theta_exp * psi_xi / ev.psi;
    let d1 = sigma.cols;
    let mut pi = vec![0.0; d1];
    for (k, pik) in pi.iter_mut().enumerate() {
        let sk = sigma.col(k);
        *pik = params.nu / (ev.psi * ev.psi)
            * (params.k1 * ev.psi * dot(xi, &sk) + psi_xi * dot(&ev.grad, &sk));
    }
    let pi_hat = pi.iter().map(|v| -2.0 * v * xi_tilde).collect();
    let d = x.len();
    Ok(AuxProcesses {
        r,
        r_hat: 0.0,
        pi,
        pi_hat,
        p_mat: Mat::zeros(d, d),
        p_hat: Mat::zeros(d, d),
        regime: Regime::Interior,
    })
}

pub fn aux_for_regime(
    regime: Regime,
    domain: &DomainFn,
    sigma: &Mat,
    x: &[f64],
    xi: &[f64],
    xi_tilde: f64,
    params: &BarrierParams,
) -> Result<AuxProcesses, QuasiError> {
    match regime {
        Regime::Boundary => aux_boundary(domain, sigma, x, xi, xi_tilde, params),
        Regime::Interior => aux_interior(domain, sigma, x, xi, xi_tilde, params),
    }
}

/// First/second quasiderivatives, their scalar adjoints, and the extended
/// components feeding the payoff representation.
#[derive(Clone, Debug)]
pub struct QuasiState {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub xi_tilde: f64,
    pub eta_tilde: f64,
    pub xi_d1: f64,
    pub xi_d2: f64,
    pub xi_d3: f64,
    pub eta_d1: f64,
    pub eta_d2: f64,
    pub eta_d3: f64,
}

impl QuasiState {
    pub fn new(xi0: Vec<f64>, eta0: Vec<f64>) -> Self {
        QuasiState {
            xi: xi0,
            eta: eta0,
            xi_tilde: 0.0,
            eta_tilde: 0.0,
            xi_d1: 0.0,
            xi_d2: 0.0,
            xi_d3: 0.0,
            eta_d1: 0.0,
            eta_d2: 0.0,
            eta_d3: 0.0,
        }
    }
}

/// One Euler step of the quasiderivative system. The adjoint eta-tilde uses
/// the reduced form d eta-tilde = (pi-hat + 2 xi-tilde pi) . dw, which is
/// algebraically identical to pi-hat dw + d(xi-tilde^2) - d<xi-tilde> and
/// vanishes exactly under pi-hat = -2 pi xi-tilde. All integrands are
/// left-endpoint (pre-update) values.
pub fn step_quasi(
    state: &QuasiState,
    aux: &AuxProcesses,
    control: &crate::problem::ControlPoint,
    x: &[f64],
    phi: f64,
    dw: &[f64],
    dt: f64,
) -> QuasiState {
    let sigma = &control.sigma;
    let sdw = sigma.matvec(dw);
    let spi = sigma.matvec(&aux.pi);
    let spi_hat = sigma.matvec(&aux.pi_hat);
    let mut st = state.clone();

    // d xi = (r sigma + P sigma) dw + (2 r b - sigma pi) dt
    let p_sdw = aux.p_mat.matvec(&sdw);
    for i in 0..st.xi.len() {
        st.xi[i] += aux.r * sdw[i] + p_sdw[i] + (2.0 * aux.r * control.b[i] - spi[i]) * dt;
    }

    // d eta = [(r_hat - r^2) sigma + (P_hat + 2 r P + P^2) sigma] dw
    //       + [2 r_hat b - sigma pi_hat - 2 (r sigma + P sigma) pi] dt
    let p2_sdw = aux.p_mat.matvec(&p_sdw);
    let ph_sdw = aux.p_hat.matvec(&sdw);
    let dot_pi_sdw_coeff = dot(&aux.pi, dw); // scalar (sigma pi, .) contraction handled per-index below
    let _ = dot_pi_sdw_coeff;
    let rspi = {
        // (r sigma + P sigma) pi
        let base = sigma.matvec(&aux.pi);
        let rot = aux.p_mat.matvec(&base);
        base.iter().zip(rot).map(|(b, r2)| aux.r * b + r2).collect::<Vec<f64>>()
    };
    for i in 0..st.eta.len() {
        st.eta[i] += (aux.r_hat - aux.r * aux.r) * sdw[i]
            + ph_sdw[i]
            + 2.0 * aux.r * p_sdw[i]
            + p2_sdw[i]
            + (2.0 * aux.r_hat * control.b[i] - spi_hat[i] - 2.0 * rspi[i]) * dt;
    }

    // adjoints; the eta-tilde integrand is combined componentwise so that
    // pi_hat = -2 xi_tilde pi cancels bitwise (IEEE products of equal factors
    // round identically), keeping eta_tilde exactly zero under the construction
    let pi_dw = dot(&aux.pi, dw);
    let mut adj = 0.0;
    for k in 0..dw.len() {
        adj += (aux.pi_hat[k] + 2.0 * state.xi_tilde * aux.pi[k]) * dw[k];
    }
    st.eta_tilde += adj;
    st.xi_tilde += pi_dw;

    // extended components (left-endpoint integrands at the base point x)
    let f = control.f.eval(x);
    let f_xi = control.f.dir1(x, &state.xi);
    let f_xixi = control.f.dir2(x, &state.xi);
    let f_eta = control.f.dir1(x, &state.eta);
    let disc = (-phi).exp();
    st.xi_d1 += 2.0 * aux.r * control.c * dt;
    st.xi_d2 = st.xi_tilde;
    st.xi_d3 += disc * (f_xi + (2.0 * aux.r - state.xi_d1 + state.xi_d2) * f) * dt;
    st.eta_d1 += 2.0 * aux.r_hat * control.c * dt;
    st.eta_d2 = st.eta_tilde;
    st.eta_d3 += disc
        * (f_xixi
            + f_eta
            + 2.0 * (2.0 * aux.r - state.xi_d1 + state.xi_d2) * f_xi
            + (2.0 * aux.r_hat - 4.0 * aux.r * (state.xi_d1 - state.xi_d2)
                + state.xi_d1 * state.xi_d1
                - state.eta_d1
                - 2.0 * state.xi_d1 * state.xi_d2
                + state.eta_d2)
                * f)
        * dt;
    st
}

/// Regime automaton with hysteresis: interior -> boundary at psi <= lambda^2,
/// boundary -> interior at psi >= lambda.
#[derive(Clone, Debug, Serialize)]
pub struct SwitchAutomaton {
    pub regime: Regime,
    pub switch_times: Vec<f64>,
}

impl SwitchAutomaton {
    /// Initial regime per the tau_0 convention: boundary iff psi <= lambda^2
    /// already at t = 0 (the switch is recorded at time 0).
    pub fn start(psi: f64, params: &BarrierParams) -> Self {
        let mut a = SwitchAutomaton { regime: Regime::Interior, switch_times: Vec::new() };
        update_regime(&mut a, psi, params, 0.0);
        a
    }
}

pub fn update_regime(automaton: &mut SwitchAutomaton, psi: f64, params: &BarrierParams, t: f64) {
    match automaton.regime {
        Regime::Interior => {
            if psi <= params.lambda * params.lambda {
                automaton.regime = Regime::Boundary;
                automaton.switch_times.push(t);
            }
        }
        Regime::Boundary => {
            if psi >= params.lambda {
                automaton.regime = Regime::Interior;
                automaton.switch_times.push(t);
            }
        }
    }
}

/// Boundary barrier B1 = gamma [beta |xi|^2 + psi_(xi)^2 / psi].
pub fn barrier_b1(domain: &DomainFn, x: &[f64], xi: &[f64], params: &BarrierParams) -> f64 {
    let ev = domain.eval(x);
    let (beta, gamma) = beta_gamma(ev.psi, params.lambda);
    let psi_xi = dot(&ev.grad, xi);
    gamma * (beta * dot(xi, xi) + psi_xi * psi_xi / ev.psi)
}

/// Interior barrier B2 = lambda^{3 theta} psi^{1-2 theta} [K1 |xi|^2 + psi_(xi)^2 / psi].
pub fn barrier_b2(domain: &DomainFn, x: &[f64], xi: &[f64], params: &BarrierParams) -> f64 {
    let ev = domain.eval(x);
    let psi_xi = dot(&ev.grad, xi);
    params.lambda.powf(3.0 * params.theta_exp)
        * ev.psi.powf(1.0 - 2.0 * params.theta_exp)
        * (params.k1 * dot(xi, xi) + psi_xi * psi_xi / ev.psi)
}

/// Upper and lower barrier envelopes on D_delta:
/// upper = 1_{delta<psi<lambda} B1 + 1_{psi>=lambda^2} B2,
/// lower = B1 below lambda^2, min(B1,B2) between, B2 above lambda.
pub fn barrier_envelopes(
    domain: &DomainFn,
    x: &[f64],
    xi: &[f64],
    params: &BarrierParams,
) -> Result<(f64, f64), QuasiError> {
    let psi = domain.psi(x);
    if psi <= params.delta {
        return Err(QuasiError::OutsideDelta(psi));
    }
    let l2 = params.lambda * params.lambda;
    let mut upper = 0.0;
    if psi < params.lambda {
        upper += barrier_b1(domain, x, xi, params);
    }
    if psi >= l2 {
        upper += barrier_b2(domain, x, xi, params);
    }
    let lower = if psi < l2 {
        barrier_b1(domain, x, xi, params)
    } else if psi <= params.lambda {
        barrier_b1(domain, x, xi, params).min(barrier_b2(domain, x, xi, params))
    } else {
        barrier_b2(domain, x, xi, params)
    };
    Ok((upper, lower))
}

// ---------------------------------------------------------------------------
// generator drift certificates
// ---------------------------------------------------------------------------

/// Raw Ito drift of B^kappa(x_t, xi_t) plus the local magnitude against which
/// it should be judged.
#[derive(Clone, Debug, Serialize)]
pub struct DriftValue {
    pub drift: f64,
    pub local_scale: f64,
    /// Residual of the trace identity tr(sigma sigma^T psi_xx P); the boundary
    /// construction's drift cancellation implicitly relies on it, so a
    /// violation at a sample is reported alongside.
    pub trace_identity_residual: f64,
}

/// Relative FD step fraction; noise is ~ machine-eps / ALPHA^2 of the local scale.
const FD_ALPHA: f64 = 0.02;

#[allow(clippy::too_many_arguments)]
pub fn generator_drift(
    problem: &ProblemSpec,
    control_idx: usize,
    x: &[f64],
    xi: &[f64],
    xi_tilde: f64,
    regime: Regime,
    params: &BarrierParams,
    barrier: BarrierKind,
    kappa: f64,
) -> Result<DriftValue, QuasiError> {
    match (regime, barrier) {
        (Regime::Boundary, BarrierKind::B1) | (Regime::Interior, BarrierKind::B2) => {}
        _ => return Err(QuasiError::RegimeMismatch(regime, barrier)),
    }
    let domain = &problem.domain;
    let cp = &problem.controls[control_idx];
    let aux = aux_for_regime(regime, domain, &cp.sigma, x, xi, xi_tilde, params)?;
    let d = problem.d;

    let bfun = |z: &[f64]| -> f64 {
        let (xx, xxi) = z.split_at(d);
        let v = match barrier {
            BarrierKind::B1 => barrier_b1(domain, xx, xxi, params),
            BarrierKind::B2 => barrier_b2(domain, xx, xxi, params),
        };
        v.powf(kappa)
    };

    let ev = domain.eval(x);
    let npx = norm(&ev.grad).max(1e-300);
    let mut z0 = x.to_vec();
    z0.extend_from_slice(xi);
    let f0 = bfun(&z0);

    // step limit so psi moves by at most FD_ALPHA relative along direction e
    let step_for = |e: &[f64]| -> f64 {
        let nx = norm(&e[..d]);
        let mut h = FD_ALPHA * (1.0 + norm(&z0));
        if nx > 0.0 {
            h = h.min(FD_ALPHA * ev.psi / (npx * nx));
        }
        h.max(1e-300)
    };
    let eval_at = |z0: &[f64], e: &[f64], h: f64| -> f64 {
        let z: Vec<f64> = z0.iter().zip(e).map(|(a, b)| a + h * b).collect();
        bfun(&z)
    };

    let mut drift = 0.0;

    // gradient part along the joint drift vector
    let mut mu = cp.b.clone();
    let spi = cp.sigma.matvec(&aux.pi);
    for i in 0..d {
        mu.push(2.0 * aux.r * cp.b[i] - spi[i]);
    }
    let nmu = norm(&mu);
    if nmu > 0.0 {
        let e: Vec<f64> = mu.iter().map(|v| v / nmu).collect();
        let h = step_for(&e);
        drift += nmu * (eval_at(&z0, &e, h) - eval_at(&z0, &e, -h)) / (2.0 * h);
    }

    // second-order part: one direction per noise column
    for k in 0..problem.d1 {
        let sk = cp.sigma.col(k);
        let mut v = sk.clone();
        let psk = aux.p_mat.matvec(&sk);
        for i in 0..d {
            v.push(aux.r * sk[i] + psk[i]);
        }
        let nv = norm(&v);
        if nv == 0.0 {
            continue;
        }
        let e: Vec<f64> = v.iter().map(|w| w / nv).collect();
        let h = step_for(&e);
        drift += 0.5 * nv * nv * (eval_at(&z0, &e, h) - 2.0 * f0 + eval_at(&z0, &e, -h)) / (h * h);
    }
    if !drift.is_finite() {
        return Err(QuasiError::NonFiniteDrift);
    }

    // local magnitude: barrier value times the squared generator directions,
    // inflated by the relative psi-variation
    let mut s2 = 0.0;
    for k in 0..problem.d1 {
        let sk = cp.sigma.col(k);
        let psk = aux.p_mat.matvec(&sk);
        s2 += dot(&sk, &sk) * (1.0 + aux.r * aux.r) + dot(&psk, &psk);
    }
    let local_scale = f0 * (1.0 + s2 * (1.0 + npx * npx / (ev.psi * ev.psi)));

    // trace identity residual tr(sigma sigma^T psi_xx P)
    let ss_t = cp.sigma.mul(&cp.sigma.transpose());
    let residual = ss_t.mul(&ev.hess).mul(&aux.p_mat).trace();

    Ok(DriftValue { drift, local_scale, trace_identity_residual: residual })
}

// ---------------------------------------------------------------------------
// sampling, switching, calibration
// ---------------------------------------------------------------------------

/// Point on {psi = level} found by bisecting along random rays from an
/// interior anchor; errors after too many failed rays.
pub fn level_set_sample(
    domain: &DomainFn,
    d: usize,
    level: f64,
    rng: &mut impl Rng,
    max_attempts: usize,
) -> Result<Vec<f64>, QuasiError> {
    for _ in 0..max_attempts {
        let dir: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let n = norm(&dir);
        if n < 1e-6 {
            continue;
        }
        let dir: Vec<f64> = dir.iter().map(|v| v / n).collect();
        // psi decreases along rays from the origin for the registered shapes
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut ok = false;
        for _ in 0..60 {
            if domain.psi(&crate::linalg::scaled(hi, &dir)) < level {
                ok = true;
                break;
            }
            hi *= 2.0;
        }
        if !ok {
            continue;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if domain.psi(&crate::linalg::scaled(mid, &dir)) > level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = crate::linalg::scaled(0.5 * (lo + hi), &dir);
        if (domain.psi(&x) - level).abs() <= 1e-6 * (level.abs() + 1e-12) {
            return Ok(x);
        }
    }
    Err(QuasiError::LevelSetSampling(max_attempts))
}

fn unit_vector(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// x with psi(x) log-uniform in (psi_lo, psi_hi), random direction.
fn sample_shell(
    domain: &DomainFn,
    d: usize,
    psi_lo: f64,
    psi_hi: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let target = (rng.gen::<f64>() * (psi_hi.ln() - psi_lo.ln()) + psi_lo.ln()).exp();
    let dir = unit_vector(d, rng);
    // bisect the ray for psi = target
    let mut lo = 0.0;
    let mut hi = 1.0;
    while domain.psi(&crate::linalg::scaled(hi, &dir)) > target {
        hi *= 2.0;
        if hi > 1e6 {
            break;
        }
    }
    for _ in 0..(100) {
        let mid = 0.5 * (lo + hi);
        if domain.psi(&crate::linalg::scaled(mid, &dir)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    crate::linalg::scaled(0.5 * (lo + hi), &dir)
}

#[derive(Clone, Debug, Serialize)]
pub struct SwitchingReport {
    /// min over samples of (B1 - 4 B2)/B1 on {psi = lambda}
    pub margin_on_lambda: f64,
    /// min over samples of (B2 - 4 B1)/B2 on {psi = lambda^2}
    pub margin_on_lambda_sq: f64,
    pub pass: bool,
    pub n_samples: usize,
}

/// Check B1 >= 4 B2 on {psi = lambda} and B2 >= 4 B1 on {psi = lambda^2}.
pub fn switching_check(
    domain: &DomainFn,
    d: usize,
    params: &BarrierParams,
    n_samples: usize,
    seed: u64,
) -> Result<SwitchingReport, QuasiError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut m1 = f64::INFINITY;
    let mut m2 = f64::INFINITY;
    for (level, on_lambda) in
        [(params.lambda, true), (params.lambda * params.lambda, false)]
    {
        for _ in 0..n_samples {
            let x = level_set_sample(domain, d, level, &mut rng, 100 * n_samples.max(1))?;
            let xi = unit_vector(d, &mut rng);
            let b1 = barrier_b1(domain, &x, &xi, params);
            let b2 = barrier_b2(domain, &x, &xi, params);
            if on_lambda {
                m1 = m1.min((b1 - 4.0 * b2) / b1);
            } else {
                m2 = m2.min((b2 - 4.0 * b1) / b2);
            }
        }
    }
    Ok(SwitchingReport {
        margin_on_lambda: m1,
        margin_on_lambda_sq: m2,
        pass: m1 >= 0.0 && m2 >= 0.0,
        n_samples,
    })
}

/// Drift sweep over sampled (x, xi) in the barrier's region; returns the worst
/// normalized drift and its sample.
#[allow(clippy::too_many_arguments)]
pub fn drift_sweep(
    problem: &ProblemSpec,
    params: &BarrierParams,
    barrier: BarrierKind,
    kappas: &[f64],
    n_samples: usize,
    seed: u64,
    early_exit_above: Option<f64>,
) -> Result<(f64, String), QuasiError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let domain = &problem.domain;
    let d = problem.d;
    let (psi_lo, psi_hi, regime) = match barrier {
        BarrierKind::B1 => (params.delta, params.lambda, Regime::Boundary),
        BarrierKind::B2 => {
            (params.lambda * params.lambda, domain.psi_sup(d) * 0.999, Regime::Interior)
        }
    };
    let mut worst = f64::NEG_INFINITY;
    let mut worst_at = String::new();
    for _ in 0..n_samples {
        let x = sample_shell(domain, d, psi_lo * 1.02, psi_hi * 0.98, &mut rng);
        let xi = unit_vector(d, &mut rng);
        for alpha in 0..problem.controls.len() {
            for &kappa in kappas {
                let v =
                    generator_drift(problem, alpha, &x, &xi, 0.0, regime, params, barrier, kappa)?;
                let rel = v.drift / v.local_scale;
                if rel > worst {
                    worst = rel;
                    worst_at = format!(
                        "psi={:.3e} alpha={} kappa={} drift={:.3e} scale={:.3e} trace_res={:.1e}",
                        domain.psi(&x),
                        alpha,
                        kappa,
                        v.drift,
                        v.local_scale,
                        v.trace_identity_residual
                    );
                }
                if let Some(cut) = early_exit_above {
                    if rel > cut {
                        return Ok((worst, worst_at));
                    }
                }
            }
        }
    }
    Ok((worst, worst_at))
}

/// Calibration certificate, emitted as JSON alongside runs.
#[derive(Clone, Debug, Serialize)]
pub struct CalibrationCertificate {
    pub lambda: f64,
    pub theta: f64,
    pub k1: f64,
    pub nu: f64,
    pub drift_max_strip: f64,
    pub drift_max_interior: f64,
    pub switching_margins: (f64, f64),
    pub n_samples: usize,
    pub seed: u64,
}

/// Threshold for the normalized drift certificates.
pub const DRIFT_TOL: f64 = 1e-8;
/// Required relative switching margin during calibration (the acceptance
/// check re-verifies >= 0 with fresh samples).
pub const SWITCH_MARGIN: f64 = 0.02;

/// Grid search for the largest lambda (with some theta, K1) whose drift and
/// switching certificates both pass. The lambda grid extends well below the
/// coarse end because the switching inequality forces 4 K1 lambda^theta below
/// (3/4 + lambda)(35/32) while the interior drift needs K1 of moderate size;
/// jointly that lands near lambda ~ 2^-14..2^-16 for isotropic problems.
pub fn calibrate_lambda(
    problem: &ProblemSpec,
    n_samples: usize,
    seed: u64,
) -> Result<(BarrierParams, CalibrationCertificate), QuasiError> {
    if n_samples == 0 {
        return Err(QuasiError::NoSamples);
    }
    let lambdas: Vec<f64> = (2..=9).map(|k| 2f64.powi(-2 * k)).collect(); // 2^-4 .. 2^-18
    let thetas = [0.25, 1.0 / 6.0, 1.0 / 12.0, 0.30, 0.33];
    let k1s = [1.0, 2.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 64.0];
    let kappas = [1.0, 0.5];
    let mut worst_report = String::from("no candidate evaluated");
    for &lambda in &lambdas {
        for &theta in &thetas {
            for &k1 in &k1s {
                let params = match BarrierParams::new(lambda, lambda * lambda / 4.0, theta, k1) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                let sw = switching_check(&problem.domain, problem.d, &params, 64, seed ^ 0x5157)?;
                if sw.margin_on_lambda < SWITCH_MARGIN || sw.margin_on_lambda_sq < SWITCH_MARGIN {
                    worst_report = format!(
                        "lambda={lambda:.3e} theta={theta} k1={k1}: switching margins ({:.3}, {:.3})",
                        sw.margin_on_lambda, sw.margin_on_lambda_sq
                    );
                    continue;
                }
                // cheap screen first, full sweep only for survivors
                let screen = drift_sweep(
                    problem,
                    &params,
                    BarrierKind::B2,
                    &kappas,
                    24,
                    seed ^ 0x1111,
                    Some(DRIFT_TOL),
                )?;
                if screen.0 > DRIFT_TOL {
                    worst_report = format!(
                        "lambda={lambda:.3e} theta={theta} k1={k1}: interior drift {} at {}",
                        screen.0, screen.1
                    );
                    continue;
                }
                let (w2, at2) = drift_sweep(
                    problem,
                    &params,
                    BarrierKind::B2,
                    &kappas,
                    n_samples,
                    seed ^ 0x2222,
                    Some(DRIFT_TOL),
                )?;
                if w2 > DRIFT_TOL {
                    worst_report = format!(
                        "lambda={lambda:.3e} theta={theta} k1={k1}: interior drift {w2} at {at2}"
                    );
                    continue;
                }
                let (w1, at1) = drift_sweep(
                    problem,
                    &params,
                    BarrierKind::B1,
                    &kappas,
                    n_samples,
                    seed ^ 0x3333,
                    Some(DRIFT_TOL),
                )?;
                if w1 > DRIFT_TOL {
                    worst_report = format!(
                        "lambda={lambda:.3e} theta={theta} k1={k1}: strip drift {w1} at {at1}"
                    );
                    continue;
                }
                let cert = CalibrationCertificate {
                    lambda,
                    theta,
                    k1,
                    nu: params.nu,
                    drift_max_strip: w1,
                    drift_max_interior: w2,
                    switching_margins: (sw.margin_on_lambda, sw.margin_on_lambda_sq),
                    n_samples,
                    seed,
                };
                return Ok((params, cert));
            }
        }
    }
    Err(QuasiError::CalibrationFailed(worst_report))
}

/// Residual of the closure identity psi_(xi)(sigma_k) + rho psi_(sigma_k)
/// + psi_(P sigma_k) = 0 for the boundary construction, maximized over columns.
pub fn pproperty_residual(
    domain: &DomainFn,
    sigma: &Mat,
    x: &[f64],
    xi: &[f64],
) -> Result<f64, QuasiError> {
    let ev = domain.eval(x);
    let n2 = dot(&ev.grad, &ev.grad);
    if n2 <= 0.0 {
        return Err(QuasiError::GradientSingular(x.to_vec()));
    }
    let u = ev.hess.matvec(xi);
    let rho = -dot(&ev.grad, &u) / n2;
    let p_mat = outer(&u, &ev.grad).sub(&outer(&ev.grad, &u)).scaled(1.0 / n2);
    let mut worst: f64 = 0.0;
    for k in 0..sigma.cols {
        let sk = sigma.col(k);
        let term = dot(&u, &sk) + rho * dot(&ev.grad, &sk) + dot(&ev.grad, &p_mat.matvec(&sk));
        worst = worst.max(term.abs());
    }
    Ok(worst)
}

/// Convenience for tests and the harness: draw a unit xi deterministically.
pub fn random_unit_xi(d: usize, noise: &mut NoiseStream) -> Vec<f64> {
    let mut buf = vec![0.0; d];
    loop {
        noise.next_dw(1.0, &mut buf);
        let n = norm(&buf);
        if n > 1e-9 {
            return buf.iter().map(|v| v / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::tp1;

    fn unit_ball() -> DomainFn {
        DomainFn::ball(1.0)
    }

    fn params_small() -> BarrierParams {
        BarrierParams::new(0.125, 0.001, 1.0 / 6.0, 1.0).unwrap()
    }

    #[test]
    fn aux_boundary_hand_values() {
        let dom = unit_ball();
        let p = tp1(2);
        let prm = params_small();
        // x = (0.5, 0), xi = (0, 1): tangential direction
        let a = aux_boundary(&dom, &p.controls[0].sigma, &[0.5, 0.0], &[0.0, 1.0], 0.0, &prm)
            .unwrap();
        assert!(a.r.abs() < 1e-14);
        assert!(a.r_hat.abs() < 1e-14);
        assert!((a.p_mat.get(0, 1) + 2.0).abs() < 1e-12);
        assert!((a.p_mat.get(1, 0) - 2.0).abs() < 1e-12);
        // x = (0.5, 0), xi = (1, 0): radial direction
        let a = aux_boundary(&dom, &p.controls[0].sigma, &[0.5, 0.0], &[1.0, 0.0], 0.0, &prm)
            .unwrap();
        assert!((a.r + 10.0 / 3.0).abs() < 1e-12, "r = {}", a.r);
        assert!(a.p_mat.frob() < 1e-12);
        // xi = 0: everything vanishes
        let a =
            aux_boundary(&dom, &p.controls[0].sigma, &[0.5, 0.0], &[0.0, 0.0], 0.0, &prm).unwrap();
        assert!(a.r == 0.0 && a.r_hat == 0.0 && a.p_mat.frob() == 0.0);
        assert!(a.pi.iter().all(|v| *v == 0.0));
        // singular gradient at the center
        assert!(
            aux_boundary(&dom, &p.controls[0].sigma, &[0.0, 0.0], &[1.0, 0.0], 0.0, &prm).is_err()
        );
    }

    #[test]
    fn aux_interior_hand_values() {
        let dom = unit_ball();
        let p = tp1(2);
        let prm = BarrierParams::new(0.125, 0.001, 1.0 / 6.0, 1.0).unwrap();
        assert!((prm.nu - 2.0 / 27.0).abs() < 1e-15);
        let a = aux_interior(&dom, &p.controls[0].sigma, &[0.5, 0.0], &[1.0, 0.0], 0.0, &prm)
            .unwrap();
        assert!((a.r + 2.0 / 9.0).abs() < 1e-14, "r = {}", a.r);
        let s2 = 2.0f64.sqrt();
        let expect_pi1 = (2.0 / 27.0) * 1.75 * s2 / 0.5625;
        assert!((a.pi[0] - expect_pi1).abs() < 1e-12, "pi1 = {}", a.pi[0]);
        assert!(a.r_hat == 0.0);
        assert!(a.p_mat.frob() == 0.0);
    }

    #[test]
    fn pproperty_identity_exact() {
        let dom = unit_ball();
        let p = tp1(2);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = loop {
                let c: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 1.6 - 0.8).collect();
                if dom.psi(&c) > 0.05 && norm(&c) > 1e-3 {
                    break c;
                }
            };
            let xi: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let res = pproperty_residual(&dom, &p.controls[0].sigma, &x, &xi).unwrap();
            let bound = 1e-10 * (1.0 + norm(&xi)) * p.controls[0].sigma_norm_sq().sqrt();
            assert!(res <= bound, "residual {res} at {x:?} {xi:?}");
        }
    }

    #[test]
    fn barrier_values_match_level_set_displays() {
        // On {psi = lambda}: B1 = lambda(3/4 + lambda) [(35/32)|xi|^2 + psi_(xi)^2/psi]
        let dom = unit_ball();
        let lam = 0.125;
        let prm = BarrierParams::new(lam, 1e-4, 1.0 / 6.0, 1.0).unwrap();
        let x = vec![(1.0f64 - lam).sqrt(), 0.0];
        let xi = vec![0.0, 1.0]; // tangential: psi_(xi) = 0
        let b1 = barrier_b1(&dom, &x, &xi, &prm);
        let expect = lam * (0.75 + lam) * 35.0 / 32.0;
        assert!((b1 - expect).abs() < 1e-12, "B1 = {b1}, expected {expect}");
        assert!((expect - 0.11963).abs() < 1e-4);
        let b2 = barrier_b2(&dom, &x, &xi, &prm);
        let expect2 = lam.powf(1.0 + prm.theta_exp);
        assert!((b2 - expect2).abs() < 1e-12);
        // On {psi = lambda^2}
        let x2 = vec![(1.0f64 - lam * lam).sqrt(), 0.0];
        let b1 = barrier_b1(&dom, &x2, &xi, &prm);
        let expect = lam * lam * (2.0 - lam / 4.0) * (1.0 + (lam - lam * lam / 4.0) / 8.0);
        assert!((b1 - expect).abs() < 1e-12);
        let b2 = barrier_b2(&dom, &x2, &xi, &prm);
        let expect2 = lam.powf(2.0 - prm.theta_exp);
        assert!((b2 - expect2).abs() < 1e-12);
        // xi = 0 gives 0
        assert_eq!(barrier_b1(&dom, &x, &[0.0, 0.0], &prm), 0.0);
        assert_eq!(barrier_b2(&dom, &x, &[0.0, 0.0], &prm), 0.0);
    }

    #[test]
    fn beta_gamma_ranges() {
        let lam = 0.125;
        for k in 1..100 {
            let psi = lam * k as f64 / 100.0;
            let (beta, gamma) = beta_gamma(psi, lam);
            assert!(beta > 1.0 && beta <= 35.0 / 32.0 + 1e-12);
            assert!(gamma > lam * lam && gamma <= lam * lam + 0.75 * lam + 1e-12);
        }
    }

    #[test]
    fn envelope_cases() {
        let dom = unit_ball();
        let prm = BarrierParams::new(0.25, 0.001, 1.0 / 6.0, 1.0).unwrap();
        let at_psi = |p: f64| vec![(1.0f64 - p).sqrt(), 0.0];
        let xi = vec![0.3, 0.7];
        // strictly in the strip: psi < lambda^2
        let x = at_psi(0.03);
        let (up, lo) = barrier_envelopes(&dom, &x, &xi, &prm).unwrap();
        let b1 = barrier_b1(&dom, &x, &xi, &prm);
        assert_eq!(up, b1);
        assert_eq!(lo, b1);
        // interior: psi > lambda
        let x = at_psi(0.5);
        let (up, lo) = barrier_envelopes(&dom, &x, &xi, &prm).unwrap();
        let b2 = barrier_b2(&dom, &x, &xi, &prm);
        assert_eq!(up, b2);
        assert_eq!(lo, b2);
        // overlap
        let x = at_psi(0.1);
        let (up, lo) = barrier_envelopes(&dom, &x, &xi, &prm).unwrap();
        let b1 = barrier_b1(&dom, &x, &xi, &prm);
        let b2 = barrier_b2(&dom, &x, &xi, &prm);
        assert_eq!(up, b1 + b2);
        assert_eq!(lo, b1.min(b2));
        // outside D_delta errors
        assert!(barrier_envelopes(&dom, &at_psi(0.0005), &xi, &prm).is_err());
    }

    #[test]
    fn regime_automaton_hysteresis() {
        let prm = BarrierParams::new(0.25, 0.001, 1.0 / 6.0, 1.0).unwrap();
        let mut a = SwitchAutomaton::start(0.5, &prm);
        assert_eq!(a.regime, Regime::Interior);
        // into the hysteresis band: no switch
        update_regime(&mut a, 0.1, &prm, 1.0);
        assert_eq!(a.regime, Regime::Interior);
        // below lambda^2: boundary
        update_regime(&mut a, 0.03, &prm, 2.0);
        assert_eq!(a.regime, Regime::Boundary);
        // band again: still boundary
        update_regime(&mut a, 0.15, &prm, 3.0);
        assert_eq!(a.regime, Regime::Boundary);
        // above lambda: interior
        update_regime(&mut a, 0.3, &prm, 4.0);
        assert_eq!(a.regime, Regime::Interior);
        assert_eq!(a.switch_times, vec![2.0, 4.0]);
        // start below lambda^2 switches at t = 0
        let a = SwitchAutomaton::start(0.01, &prm);
        assert_eq!(a.regime, Regime::Boundary);
        assert_eq!(a.switch_times, vec![0.0]);
    }

    #[test]
    fn step_quasi_drift_only() {
        let p = tp1(2);
        let mut aux = AuxProcesses::zero(2, 2);
        aux.r = 1.0;
        let st = QuasiState::new(vec![1.0, 0.0], vec![0.0, 0.0]);
        let mut cp = p.controls[0].clone();
        cp.b = vec![1.0, 0.0];
        let out = step_quasi(&st, &aux, &cp, &[0.0, 0.0], 0.0, &[0.0, 0.0], 0.1);
        assert!((out.xi[0] - 1.2).abs() < 1e-15);
        assert!((out.xi[1]).abs() < 1e-15);
        // aux all zero: xi unchanged, xi_d3 accumulates e^{-phi} f_(xi) dt only
        let aux = AuxProcesses::zero(2, 2);
        let out = step_quasi(&st, &aux, &p.controls[0], &[0.1, 0.0], 0.0, &[0.0, 0.0], 0.1);
        assert_eq!(out.xi, st.xi);
        assert_eq!(out.xi_tilde, 0.0);
        assert_eq!(out.xi_d3, 0.0); // f = 1 has zero gradient; (2r - ...) = 0
    }

    #[test]
    fn eta_tilde_vanishes_under_construction() {
        // pi_hat = -2 xi_tilde pi cancels the reduced eta-tilde increment exactly
        let p = tp1(2);
        let dom = unit_ball();
        let prm = params_small();
        let mut st = QuasiState::new(vec![1.0, 0.0], vec![0.0, 0.0]);
        let mut x = vec![0.3, 0.2];
        let mut noise = NoiseStream::new(8, 0);
        let dt = 1e-3_f64;
        let mut dw = vec![0.0; 2];
        for _ in 0..500 {
            let aux = aux_interior(&dom, &p.controls[0].sigma, &x, &st.xi, st.xi_tilde, &prm)
                .unwrap();
            noise.next_dw(dt.sqrt(), &mut dw);
            st = step_quasi(&st, &aux, &p.controls[0], &x, 0.0, &dw, dt);
            x = crate::sde::step_base(&x, &p.controls[0], &dw, dt).unwrap();
            if dom.psi(&x) < 0.05 {
                break;
            }
            assert_eq!(st.eta_tilde, 0.0);
            assert_eq!(st.eta_d2, 0.0);
            assert_eq!(st.xi_d2, st.xi_tilde);
        }
    }

    #[test]
    fn raw_and_reduced_adjoint_forms_agree() {
        // accumulate d(xi~^2) - d<xi~> + pi_hat dw literally and compare to the
        // reduced form: difference is the quadratic-variation residual O(dt)
        let p = tp1(2);
        let dom = unit_ball();
        let prm = params_small();
        let mut st = QuasiState::new(vec![1.0, 0.0], vec![0.0, 0.0]);
        let mut raw = 0.0;
        let mut x = vec![0.3, 0.2];
        let mut noise = NoiseStream::new(12, 1);
        let dt = 1e-4_f64;
        let mut dw = vec![0.0; 2];
        let mut quad_residual: f64 = 0.0;
        for _ in 0..2000 {
            let aux = aux_interior(&dom, &p.controls[0].sigma, &x, &st.xi, st.xi_tilde, &prm)
                .unwrap();
            noise.next_dw(dt.sqrt(), &mut dw);
            let pi_dw = dot(&aux.pi, &dw);
            let xi_t_new = st.xi_tilde + pi_dw;
            raw += dot(&aux.pi_hat, &dw) + (xi_t_new * xi_t_new - st.xi_tilde * st.xi_tilde)
                - dot(&aux.pi, &aux.pi) * dt;
            quad_residual += pi_dw * pi_dw - dot(&aux.pi, &aux.pi) * dt;
            st = step_quasi(&st, &aux, &p.controls[0], &x, 0.0, &dw, dt);
            x = crate::sde::step_base(&x, &p.controls[0], &dw, dt).unwrap();
            if dom.psi(&x) < 0.05 {
                break;
            }
        }
        assert_eq!(st.eta_tilde, 0.0);
        assert!((raw - quad_residual).abs() < 1e-12, "raw residual is exactly the qv noise");
    }

    #[test]
    fn aux_linearity_in_xi() {
        let dom = unit_ball();
        let p = tp1(2);
        let prm = params_small();
        let x = [0.4, -0.3];
        let xi1 = [0.7, 0.2];
        let xi2 = [-0.1, 0.5];
        let sum: Vec<f64> = xi1.iter().zip(&xi2).map(|(a, b)| a + b).collect();
        for ctor in [aux_boundary, aux_interior] {
            let a1 = ctor(&dom, &p.controls[0].sigma, &x, &xi1, 0.0, &prm).unwrap();
            let a2 = ctor(&dom, &p.controls[0].sigma, &x, &xi2, 0.0, &prm).unwrap();
            let asum = ctor(&dom, &p.controls[0].sigma, &x, &sum, 0.0, &prm).unwrap();
            assert!((asum.r - a1.r - a2.r).abs() < 1e-12);
            for k in 0..2 {
                assert!((asum.pi[k] - a1.pi[k] - a2.pi[k]).abs() < 1e-12);
            }
            assert!(asum.p_mat.sub(&a1.p_mat.add(&a2.p_mat)).frob() < 1e-12);
        }
    }

    #[test]
    fn drift_vanishes_at_zero_xi() {
        let p = crate::problem::normalize_domain_scale(&tp1(2)).unwrap();
        let prm = params_small();
        let v = generator_drift(
            &p,
            0,
            &[0.5, 0.1],
            &[0.0, 0.0],
            0.0,
            Regime::Interior,
            &prm,
            BarrierKind::B2,
            1.0,
        )
        .unwrap();
        assert!(v.drift.abs() < 1e-8, "drift {}", v.drift);
        // mismatched regime/barrier is an error
        assert!(generator_drift(
            &p,
            0,
            &[0.5, 0.1],
            &[1.0, 0.0],
            0.0,
            Regime::Interior,
            &prm,
            BarrierKind::B1,
            1.0
        )
        .is_err());
    }

    #[test]
    fn switching_small_lambda_passes_large_fails() {
        let dom = unit_ball();
        // the spec's worked example: lambda = 1/8, theta = 1/6, K1 = 1 fails on {psi = lambda}
        let prm = BarrierParams::new(0.125, 1e-4, 1.0 / 6.0, 1.0).unwrap();
        let rep = switching_check(&dom, 2, &prm, 64, 3).unwrap();
        assert!(!rep.pass, "margins {:?}", (rep.margin_on_lambda, rep.margin_on_lambda_sq));
        // calibrated-scale parameters pass
        let prm = BarrierParams::new(2f64.powi(-16), 2f64.powi(-34), 0.33, 6.0).unwrap();
        let rep = switching_check(&dom, 2, &prm, 64, 3).unwrap();
        assert!(rep.pass, "margins {:?}", (rep.margin_on_lambda, rep.margin_on_lambda_sq));
    }
}
