//! Monotone finite-difference solver for the Dirichlet Bellman problem by
//! Howard policy iteration.
//!
//! Each control's diffusion matrix (after regularization) is decomposed as a
//! nonnegative combination of second directional derivatives along a fixed
//! family of integer grid directions (axes, diagonals and knight-type moves up
//! to reach 4). Axis weights absorb the diagonal slack, so only the angular
//! mismatch between the control's principal direction and the nearest stencil
//! direction ever demands extra regularization; the builder adds that minimal
//! extra per control and records it. Boundary arms are cut at the exact
//! psi = 0 crossing with Shortley-Weller weights, keeping the scheme monotone
//! and the Dirichlet data attached at true boundary points.
//!
//! The regularized matrix is a + (eps^2/2) I under the `Generator` convention
//! (the diffusion gains an independent eps I column block) or a + eps I under
//! the `Remark` convention; both are exposed, the generator form is the
//! default everywhere in the harness.

use crate::linalg::{dot, Mat};
use crate::problem::{NondegeneracyReport, ProblemSpec};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("grids support d in {{1, 2}}, got d = {0}")]
    UnsupportedDim(usize),
    #[error("monotone decomposition of control {control} needs extra regularization {needed:.4e} > allowed {allowed:.4e}; increase eps_reg")]
    MonotonicityUnachievable { control: usize, needed: f64, allowed: f64 },
    #[error("policy iteration exceeded {0} Howard steps; residual history {1:?}")]
    MaxIters(usize, Vec<f64>),
    #[error("linear sweep failed to converge (residual {0:.3e})")]
    SweepDiverged(f64),
    #[error("eps continuation list must be strictly decreasing and positive")]
    BadEpsList,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RegConvention {
    /// a(eps) = a + (eps^2/2) I  — diffusion block (sigma | eps I)
    Generator,
    /// a(eps) = a + eps I
    Remark,
}

impl RegConvention {
    pub fn floor(&self, eps: f64) -> f64 {
        match self {
            RegConvention::Generator => 0.5 * eps * eps,
            RegConvention::Remark => eps,
        }
    }
}

/// Integer stencil directions (one representative per +- pair), d = 2.
const DIRS2: &[(i64, i64)] = &[
    (1, 0),
    (0, 1),
    (1, 1),
    (1, -1),
    (2, 1),
    (1, 2),
    (2, -1),
    (1, -2),
    (3, 1),
    (1, 3),
    (3, -1),
    (1, -3),
    (3, 2),
    (2, 3),
    (3, -2),
    (2, -3),
    (4, 1),
    (1, 4),
    (4, -1),
    (1, -4),
    (4, 3),
    (3, 4),
    (4, -3),
    (3, -4),
];

/// Nonnegative decomposition m ~ sum c_j d_j d_j^T over unit stencil directions,
/// allowing a minimal extra multiple of I. Returns (weights per direction
/// index, extra added to the diagonal).
fn decompose2(m: &Mat) -> (Vec<(usize, f64)>, f64) {
    let units: Vec<[f64; 2]> = DIRS2
        .iter()
        .map(|&(a, b)| {
            let n = ((a * a + b * b) as f64).sqrt();
            [a as f64 / n, b as f64 / n]
        })
        .collect();
    let prods: Vec<[f64; 3]> = units.iter().map(|u| [u[0] * u[0], u[0] * u[1], u[1] * u[1]]).collect();
    let m11 = m.get(0, 0);
    let m12 = m.get(0, 1);
    let m22 = m.get(1, 1);
    let ax0 = 0usize;
    let ax1 = 1usize;

    let mut best: Option<(f64, Vec<(usize, f64)>)> = None;
    let mut consider = |extra: f64, picks: Vec<(usize, f64)>| {
        if picks.iter().all(|&(_, c)| c >= -1e-14) && extra >= -1e-14 {
            let extra = extra.max(0.0);
            if best.as_ref().map_or(true, |b| extra < b.0 - 1e-15) {
                best = Some((extra, picks));
            }
        }
    };

    if m12.abs() < 1e-14 {
        consider(0.0, vec![(ax0, m11), (ax1, m22)]);
    }
    // one cross direction + axes
    for (j, p) in prods.iter().enumerate() {
        if j <= 1 || p[1] == 0.0 {
            continue;
        }
        let c = m12 / p[1];
        if c < 0.0 {
            continue;
        }
        let r11 = m11 - c * p[0];
        let r22 = m22 - c * p[2];
        let extra = (-r11.min(r22)).max(0.0);
        consider(extra, vec![(j, c), (ax0, r11 + extra), (ax1, r22 + extra)]);
    }
    // pairs of cross directions + axes, scanning the split of the off-diagonal
    for j in 2..DIRS2.len() {
        if prods[j][1] == 0.0 {
            continue;
        }
        for k in (j + 1)..DIRS2.len() {
            if prods[k][1] == 0.0 {
                continue;
            }
            for step in 0..=20 {
                let t = step as f64 / 20.0;
                let cj = t * m12 / prods[j][1];
                let ck = (1.0 - t) * m12 / prods[k][1];
                if cj < 0.0 || ck < 0.0 {
                    continue;
                }
                let r11 = m11 - cj * prods[j][0] - ck * prods[k][0];
                let r22 = m22 - cj * prods[j][2] - ck * prods[k][2];
                let extra = (-r11.min(r22)).max(0.0);
                consider(extra, vec![(j, cj), (k, ck), (ax0, r11 + extra), (ax1, r22 + extra)]);
            }
        }
    }
    let (extra, picks) = best.expect("axis fallback always considered");
    (picks.into_iter().filter(|&(_, c)| c > 1e-14).collect(), extra)
}

/// Grid over the domain's bounding box, nodes at integer multiples of h so the
/// origin is always a node.
pub struct Grid {
    pub d: usize,
    pub h: f64,
    /// nodes per axis counted as [-m..m] plus padding
    pub m: i64,
    pub pad: i64,
    /// interior flag per node (row-major over (i, j))
    pub interior: Vec<bool>,
    /// dense index of interior nodes, -1 otherwise
    pub index: Vec<i64>,
    /// interior node coordinates (grid integer coords)
    pub nodes: Vec<(i64, i64)>,
}

impl Grid {
    pub fn new(problem: &ProblemSpec, h: f64) -> Result<Self, HjbError> {
        let d = problem.d;
        if d == 0 || d > 2 {
            return Err(HjbError::UnsupportedDim(d));
        }
        let (lo, hi) = problem.domain.bbox(d);
        let r = lo.iter().chain(hi.iter()).fold(0.0f64, |acc, v| acc.max(v.abs()));
        let m = (r / h).ceil() as i64;
        let pad = 5i64;
        let side = (2 * (m + pad) + 1) as usize;
        let total = if d == 1 { side } else { side * side };
        let mut interior = vec![false; total];
        let mut index = vec![-1i64; total];
        let mut nodes = Vec::new();
        let mut g = Grid { d, h, m, pad, interior: Vec::new(), index: Vec::new(), nodes: Vec::new() };
        for flat in 0..total {
            let (i, j) = g.unflatten(flat, side);
            let x = g.coords_of(i, j);
            if problem.domain.psi(&x) > 0.0 {
                interior[flat] = true;
                index[flat] = nodes.len() as i64;
                nodes.push((i, j));
            }
        }
        g.interior = interior;
        g.index = index;
        g.nodes = nodes;
        Ok(g)
    }

    fn side(&self) -> usize {
        (2 * (self.m + self.pad) + 1) as usize
    }

    fn unflatten(&self, flat: usize, side: usize) -> (i64, i64) {
        let off = self.m + self.pad;
        if self.d == 1 {
            (flat as i64 - off, 0)
        } else {
            ((flat / side) as i64 - off, (flat % side) as i64 - off)
        }
    }

    pub fn flatten(&self, i: i64, j: i64) -> usize {
        let off = self.m + self.pad;
        let side = self.side();
        if self.d == 1 {
            (i + off) as usize
        } else {
            (i + off) as usize * side + (j + off) as usize
        }
    }

    pub fn coords_of(&self, i: i64, j: i64) -> Vec<f64> {
        if self.d == 1 {
            vec![i as f64 * self.h]
        } else {
            vec![i as f64 * self.h, j as f64 * self.h]
        }
    }

    pub fn n_interior(&self) -> usize {
        self.nodes.len()
    }

    /// Dense index of the node nearest to x, if interior.
    pub fn index_near(&self, x: &[f64]) -> Option<usize> {
        let i = (x[0] / self.h).round() as i64;
        let j = if self.d == 2 { (x[1] / self.h).round() as i64 } else { 0 };
        if i.abs() > self.m + self.pad || j.abs() > self.m + self.pad {
            return None;
        }
        let f = self.flatten(i, j);
        if self.interior[f] {
            Some(self.index[f] as usize)
        } else {
            None
        }
    }

    /// Chebyshev distance (in cells) to the nearest non-interior node, capped.
    pub fn boundary_distance(&self, q: usize, cap: i64) -> i64 {
        let (i, j) = self.nodes[q];
        for ring in 1..=cap {
            let mut hit = false;
            let mut probe = |ii: i64, jj: i64| {
                if !self.interior[self.flatten(ii, jj)] {
                    hit = true;
                }
            };
            if self.d == 1 {
                probe(i - ring, 0);
                probe(i + ring, 0);
            } else {
                for t in -ring..=ring {
                    probe(i - ring, j + t);
                    probe(i + ring, j + t);
                    probe(i + t, j - ring);
                    probe(i + t, j + ring);
                }
            }
            if hit {
                return ring;
            }
        }
        cap + 1
    }
}

/// Sparse row of the discretized operator for one control at one cell
/// (builder form; compiled to CSR for the solves).
#[derive(Clone, Debug, Default)]
pub(crate) struct Row {
    neighbors: Vec<(u32, f64)>,
    diag: f64,
    boundary_term: f64,
}

/// CSR operator for one control: apply(u)[q] = sum_w u[col] + boundary_term[q],
/// with the diagonal kept separate for relaxation sweeps.
pub(crate) struct Csr {
    offsets: Vec<u32>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    pub(crate) diag: Vec<f64>,
    pub(crate) boundary: Vec<f64>,
}

impl Csr {
    fn from_rows(rows: &[Row]) -> Csr {
        let n = rows.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut diag = Vec::with_capacity(n);
        let mut boundary = Vec::with_capacity(n);
        offsets.push(0u32);
        for row in rows {
            for &(c, w) in &row.neighbors {
                cols.push(c);
                weights.push(w);
            }
            offsets.push(cols.len() as u32);
            diag.push(row.diag);
            boundary.push(row.boundary_term);
        }
        Csr { offsets, cols, weights, diag, boundary }
    }

    /// off-diagonal application plus boundary term at cell q
    #[inline]
    fn apply_at(&self, q: usize, u: &[f64]) -> f64 {
        let lo = self.offsets[q] as usize;
        let hi = self.offsets[q + 1] as usize;
        let mut s = self.boundary[q];
        for k in lo..hi {
            s += self.weights[k] * u[self.cols[k] as usize];
        }
        s
    }
}

/// Per-control discretization: rows of L^alpha plus the recorded extra
/// regularization.
pub struct Stencils {
    pub(crate) ops: Vec<Csr>,
    pub f_values: Vec<Vec<f64>>,
    pub c_values: Vec<f64>,
    pub extras: Vec<f64>,
    pub eps_reg: f64,
    pub convention: RegConvention,
}

/// Build monotone stencils for every control. `allow_extra` permits the
/// per-control minimal extra regularization; when false, any control whose
/// angular deficit exceeds the floor is an error naming the required amount.
pub fn discretize(
    problem: &ProblemSpec,
    grid: &Grid,
    eps_reg: f64,
    convention: RegConvention,
    allow_extra: bool,
) -> Result<Stencils, HjbError> {
    let floor = convention.floor(eps_reg);
    let mut rows_all = Vec::new();
    let mut f_all = Vec::new();
    let mut c_all = Vec::new();
    let mut extras = Vec::new();
    for (ci, cp) in problem.controls.iter().enumerate() {
        let a = cp.a();
        let (weights, extra): (Vec<((i64, i64), f64)>, f64) = if problem.d == 1 {
            let w = a.get(0, 0) + floor;
            (vec![((1, 0), w)], 0.0)
        } else {
            let mut m = a.clone();
            m.set(0, 0, m.get(0, 0) + floor);
            m.set(1, 1, m.get(1, 1) + floor);
            let (picks, extra) = decompose2(&m);
            (picks.into_iter().map(|(j, c)| (DIRS2[j], c)).collect(), extra)
        };
        if extra > 1e-12 && !allow_extra {
            return Err(HjbError::MonotonicityUnachievable {
                control: ci,
                needed: extra + floor,
                allowed: floor,
            });
        }
        extras.push(extra);
        let mut rows = vec![Row::default(); grid.n_interior()];
        for (dvec, c) in &weights {
            add_second_difference_arms(problem, grid, &mut rows, *dvec, *c);
        }
        // upwind first differences for the drift
        if cp.b.iter().any(|v| *v != 0.0) {
            add_upwind_drift(problem, grid, &mut rows, &cp.b);
        }
        let f_vals: Vec<f64> =
            grid.nodes.iter().map(|&(i, j)| cp.f.eval(&grid.coords_of(i, j))).collect();
        rows_all.push(Csr::from_rows(&rows));
        f_all.push(f_vals);
        c_all.push(cp.c);
    }
    Ok(Stencils {
        ops: rows_all,
        f_values: f_all,
        c_values: c_all,
        extras,
        eps_reg,
        convention,
    })
}

fn arm_cut(problem: &ProblemSpec, x0: &[f64], step: &[f64]) -> (f64, f64) {
    // fraction of the arm inside D and the Dirichlet value at the crossing
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let p: Vec<f64> = x0.iter().zip(step).map(|(a, s)| a + mid * s).collect();
        if problem.domain.psi(&p) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (0.5 * (lo + hi)).max(1e-9);
    let p: Vec<f64> = x0.iter().zip(step).map(|(a, s)| a + t * s).collect();
    (t, problem.g.eval(&p))
}

fn add_second_difference_arms(
    problem: &ProblemSpec,
    grid: &Grid,
    rows: &mut [Row],
    dvec: (i64, i64),
    coeff: f64,
) {
    let len2 = ((dvec.0 * dvec.0 + dvec.1 * dvec.1) as f64) * grid.h * grid.h;
    for (q, &(i, j)) in grid.nodes.iter().enumerate() {
        let x0 = grid.coords_of(i, j);
        let arm = |sgn: i64| -> (f64, Option<u32>, f64) {
            let (ii, jj) = (i + sgn * dvec.0, j + sgn * dvec.1);
            let flat = grid.flatten(ii, jj);
            if grid.interior[flat] {
                (1.0, Some(grid.index[flat] as u32), 0.0)
            } else {
                let step: Vec<f64> = grid
                    .coords_of(ii, jj)
                    .iter()
                    .zip(&x0)
                    .map(|(a, b)| a - b)
                    .collect();
                let (t, g) = arm_cut(problem, &x0, &step);
                (t, None, g)
            }
        };
        let (tp, np, gp) = arm(1);
        let (tm, nm, gm) = arm(-1);
        let wp = 2.0 * coeff / (tp * (tp + tm) * len2);
        let wm = 2.0 * coeff / (tm * (tp + tm) * len2);
        let row = &mut rows[q];
        match np {
            Some(idx) => row.neighbors.push((idx, wp)),
            None => row.boundary_term += wp * gp,
        }
        match nm {
            Some(idx) => row.neighbors.push((idx, wm)),
            None => row.boundary_term += wm * gm,
        }
        row.diag -= wp + wm;
    }
}

fn add_upwind_drift(problem: &ProblemSpec, grid: &Grid, rows: &mut [Row], b: &[f64]) {
    let h = grid.h;
    for (q, &(i, j)) in grid.nodes.iter().enumerate() {
        let x0 = grid.coords_of(i, j);
        for (axis, &bi) in b.iter().enumerate() {
            if bi == 0.0 {
                continue;
            }
            let sgn = if bi > 0.0 { 1 } else { -1 };
            let (ii, jj) = if axis == 0 { (i + sgn, j) } else { (i, j + sgn) };
            let flat = grid.flatten(ii, jj);
            let w = bi.abs() / h;
            let row = &mut rows[q];
            if grid.interior[flat] {
                row.neighbors.push((grid.index[flat] as u32, w));
                row.diag -= w;
            } else {
                let step: Vec<f64> = grid
                    .coords_of(ii, jj)
                    .iter()
                    .zip(&x0)
                    .map(|(a, c)| a - c)
                    .collect();
                let (t, g) = arm_cut(problem, &x0, &step);
                // one-sided difference over the shortened arm
                let wt = bi.abs() / (t * h);
                row.boundary_term += wt * g;
                row.diag -= wt;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscreteSolution {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub howard_iters: usize,
    pub eps_reg: f64,
    pub extras: Vec<f64>,
}

fn bellman_residual(st: &Stencils, u: &[f64]) -> f64 {
    let n = u.len();
    let mut worst: f64 = 0.0;
    for q in 0..n {
        let mut best = f64::NEG_INFINITY;
        for (a, op) in st.ops.iter().enumerate() {
            let v = op.apply_at(q, u) + (op.diag[q] - st.c_values[a]) * u[q]
                + st.f_values[a][q];
            best = best.max(v);
        }
        worst = worst.max(best.abs());
    }
    worst
}

/// Solve (L_pol - c) u + f_pol = 0. BiCGStab on the M-matrix -(L - c) with
/// diagonal scaling, falling back to guarded SOR if it stalls; both paths are
/// deterministic (fixed iteration order, no pivoting).
fn solve_policy(
    st: &Stencils,
    policy: &[usize],
    u: &mut [f64],
    tol: f64,
    grid_h: f64,
) -> Result<(), HjbError> {
    let n = u.len();
    // A x = b with A = -(L - c) and b = f + boundary terms
    let matvec = |x: &[f64], y: &mut [f64]| {
        for q in 0..n {
            let a = policy[q];
            let op = &st.ops[a];
            let lo = op.offsets[q] as usize;
            let hi = op.offsets[q + 1] as usize;
            let mut s = (-op.diag[q] + st.c_values[a]) * x[q];
            for k in lo..hi {
                s -= op.weights[k] * x[op.cols[k] as usize];
            }
            y[q] = s;
        }
    };
    let b: Vec<f64> = (0..n)
        .map(|q| {
            let a = policy[q];
            st.f_values[a][q] + st.ops[a].boundary[q]
        })
        .collect();
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));

    // BiCGStab
    let mut r = vec![0.0; n];
    matvec(u, &mut r);
    for q in 0..n {
        r[q] = b[q] - r[q];
    }
    if sup(&r) <= tol {
        return Ok(());
    }
    let r0 = r.clone();
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut w = 1.0f64;
    let mut v = vec![0.0; n];
    let mut pvec = vec![0.0; n];
    let mut svec = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut ok = false;
    let max_it = 40_000usize.min(200 * (1.0 / grid_h) as usize + 2000);
    for _ in 0..max_it {
        let rho_new = crate::linalg::dot(&r0, &r);
        if rho_new.abs() < 1e-290 {
            break; // breakdown: leave to SOR
        }
        let beta = (rho_new / rho) * (alpha / w);
        rho = rho_new;
        for q in 0..n {
            pvec[q] = r[q] + beta * (pvec[q] - w * v[q]);
        }
        matvec(&pvec, &mut v);
        let denom = crate::linalg::dot(&r0, &v);
        if denom.abs() < 1e-290 {
            break;
        }
        alpha = rho / denom;
        for q in 0..n {
            svec[q] = r[q] - alpha * v[q];
        }
        if sup(&svec) <= 0.1 * tol {
            for q in 0..n {
                u[q] += alpha * pvec[q];
            }
            ok = true;
            break;
        }
        matvec(&svec, &mut t);
        let tt = crate::linalg::dot(&t, &t);
        if tt < 1e-290 {
            break;
        }
        w = crate::linalg::dot(&t, &svec) / tt;
        if w.abs() < 1e-290 {
            break;
        }
        for q in 0..n {
            u[q] += alpha * pvec[q] + w * svec[q];
            r[q] = svec[q] - w * t[q];
        }
        if sup(&r) <= 0.1 * tol {
            ok = true;
            break;
        }
    }
    // verify against the true residual; polish or fall back with SOR
    let residual = |u: &[f64]| -> f64 {
        let mut worst: f64 = 0.0;
        for q in 0..n {
            let a = policy[q];
            let op = &st.ops[a];
            let rr = op.apply_at(q, u) + (op.diag[q] - st.c_values[a]) * u[q]
                + st.f_values[a][q];
            worst = worst.max(rr.abs());
        }
        worst
    };
    if ok && residual(u) <= tol {
        return Ok(());
    }
    // SOR fallback / polish
    let mut omega = (2.0 / (1.0 + std::f64::consts::PI * grid_h)).clamp(1.0, 1.95);
    let max_sweeps = 400_000usize;
    let mut last = residual(u);
    if last <= tol {
        return Ok(());
    }
    let mut sweep = 0usize;
    while sweep < max_sweeps {
        for _ in 0..64 {
            for q in 0..n {
                let a = policy[q];
                let op = &st.ops[a];
                let denom = -op.diag[q] + st.c_values[a];
                let rhs = op.apply_at(q, u) + st.f_values[a][q];
                let gs = rhs / denom;
                u[q] += omega * (gs - u[q]);
            }
            sweep += 1;
        }
        let rr = residual(u);
        if rr <= tol {
            return Ok(());
        }
        if !(rr.is_finite()) || rr > last * 1.001 {
            if omega > 1.0 {
                omega = 1.0 + (omega - 1.0) * 0.5;
                if omega < 1.01 {
                    omega = 1.0;
                }
            } else {
                return Err(HjbError::SweepDiverged(rr));
            }
        }
        last = rr;
    }
    Err(HjbError::SweepDiverged(last))
}

/// Howard iteration: policy improvement alternating with linear solves.
/// Converges on the Bellman residual; ties prefer the incumbent control so
/// equivalent-control cycling cannot stall the count.
pub fn policy_iteration(
    st: &Stencils,
    grid: &Grid,
    tol: f64,
    max_iters: usize,
) -> Result<DiscreteSolution, HjbError> {
    let n = grid.n_interior();
    let n_controls = st.ops.len();
    let mut policy = vec![0usize; n];
    let mut u = vec![0.0f64; n];
    let mut history: Vec<f64> = Vec::new();
    for it in 1..=max_iters {
        solve_policy(st, &policy, &mut u, tol, grid.h)?;
        // improvement with incumbent preference
        let mut changed = 0usize;
        for q in 0..n {
            let cur = policy[q];
            let op = &st.ops[cur];
            let mut best_val = op.apply_at(q, &u) + (op.diag[q] - st.c_values[cur]) * u[q]
                + st.f_values[cur][q];
            let mut best = cur;
            for a in 0..n_controls {
                if a == cur {
                    continue;
                }
                let op = &st.ops[a];
                let v = op.apply_at(q, &u) + (op.diag[q] - st.c_values[a]) * u[q]
                    + st.f_values[a][q];
                if v > best_val + 1e-12 {
                    best_val = v;
                    best = a;
                }
            }
            if best != cur {
                policy[q] = best;
                changed += 1;
            }
        }
        let res = bellman_residual(st, &u);
        history.push(res);
        if res <= tol || changed == 0 {
            return Ok(DiscreteSolution {
                values: u,
                policy,
                residual: res,
                residual_history: history,
                howard_iters: it,
                eps_reg: st.eps_reg,
                extras: st.extras.clone(),
            });
        }
    }
    Err(HjbError::MaxIters(max_iters, history))
}

/// Convenience: discretize + solve.
pub fn solve(
    problem: &ProblemSpec,
    grid: &Grid,
    eps_reg: f64,
    convention: RegConvention,
    tol: f64,
) -> Result<DiscreteSolution, HjbError> {
    let st = discretize(problem, grid, eps_reg, convention, true)?;
    policy_iteration(&st, grid, tol, 50)
}

/// Warm-started continuation over a decreasing regularization ladder; returns
/// the solutions and the sup-norm deltas between consecutive ones.
pub fn continuation_in_eps(
    problem: &ProblemSpec,
    grid: &Grid,
    eps_list: &[f64],
    convention: RegConvention,
    tol: f64,
) -> Result<(Vec<DiscreteSolution>, Vec<f64>), HjbError> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| w[1] >= w[0]) || eps_list.iter().any(|&e| e <= 0.0)
    {
        return Err(HjbError::BadEpsList);
    }
    let mut sols: Vec<DiscreteSolution> = Vec::new();
    let mut deltas = Vec::new();
    for &eps in eps_list {
        let st = discretize(problem, grid, eps, convention, true)?;
        let mut sol = if let Some(prev) = sols.last() {
            // warm start from the previous solution
            let mut u = prev.values.clone();
            let mut policy = prev.policy.clone();
            let n = grid.n_interior();
            let mut history = Vec::new();
            let mut out = None;
            for it in 1..=50 {
                solve_policy(&st, &policy, &mut u, tol, grid.h)?;
                let mut changed = 0;
                for q in 0..n {
                    let cur = policy[q];
                    let mut best_val = {
                        let op = &st.ops[cur];
                        op.apply_at(q, &u) + (op.diag[q] - st.c_values[cur]) * u[q]
                            + st.f_values[cur][q]
                    };
                    let mut best = cur;
                    for a in 0..st.ops.len() {
                        if a == cur {
                            continue;
                        }
                        let op = &st.ops[a];
                        let v = op.apply_at(q, &u) + (op.diag[q] - st.c_values[a]) * u[q]
                            + st.f_values[a][q];
                        if v > best_val + 1e-12 {
                            best_val = v;
                            best = a;
                        }
                    }
                    if best != cur {
                        policy[q] = best;
                        changed += 1;
                    }
                }
                let res = bellman_residual(&st, &u);
                history.push(res);
                if res <= tol || changed == 0 {
                    out = Some(DiscreteSolution {
                        values: u.clone(),
                        policy: policy.clone(),
                        residual: res,
                        residual_history: history.clone(),
                        howard_iters: it,
                        eps_reg: eps,
                        extras: st.extras.clone(),
                    });
                    break;
                }
            }
            out.ok_or(HjbError::MaxIters(50, Vec::new()))?
        } else {
            policy_iteration(&st, grid, tol, 50)?
        };
        sol.eps_reg = eps;
        if let Some(prev) = sols.last() {
            let delta = prev
                .values
                .iter()
                .zip(&sol.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            deltas.push(delta);
        }
        sols.push(sol);
    }
    Ok((sols, deltas))
}

/// Gradient and Hessian fields by central differences on interior cells;
/// cells keep their distance-to-boundary flag so consumers can trim.
pub struct DerivFields {
    pub grad: Vec<Vec<f64>>,
    pub hess: Vec<Mat>,
    pub boundary_dist: Vec<i64>,
}

pub fn derivative_fields(sol: &DiscreteSolution, grid: &Grid) -> DerivFields {
    let n = grid.n_interior();
    let d = grid.d;
    let h = grid.h;
    let mut grad = vec![vec![0.0; d]; n];
    let mut hess = vec![Mat::zeros(d, d); n];
    let mut dist = vec![0i64; n];
    let val = |i: i64, j: i64, fallback: f64| -> f64 {
        let flat = grid.flatten(i, j);
        if grid.interior[flat] {
            sol.values[grid.index[flat] as usize]
        } else {
            fallback
        }
    };
    for (q, &(i, j)) in grid.nodes.iter().enumerate() {
        dist[q] = grid.boundary_distance(q, 4);
        let u0 = sol.values[q];
        let axes: &[(i64, i64)] = if d == 1 { &[(1, 0)] } else { &[(1, 0), (0, 1)] };
        for (axis, &(di, dj)) in axes.iter().enumerate() {
            let up = val(i + di, j + dj, u0);
            let um = val(i - di, j - dj, u0);
            let fwd_ok = grid.interior[grid.flatten(i + di, j + dj)];
            let bwd_ok = grid.interior[grid.flatten(i - di, j - dj)];
            grad[q][axis] = match (fwd_ok, bwd_ok) {
                (true, true) => (up - um) / (2.0 * h),
                (true, false) => (up - u0) / h,
                (false, true) => (u0 - um) / h,
                (false, false) => 0.0,
            };
            if fwd_ok && bwd_ok {
                hess[q].set(axis, axis, (up - 2.0 * u0 + um) / (h * h));
            }
        }
        if d == 2 {
            let ok = |ii: i64, jj: i64| grid.interior[grid.flatten(ii, jj)];
            if ok(i + 1, j + 1) && ok(i - 1, j - 1) && ok(i + 1, j - 1) && ok(i - 1, j + 1) {
                let v = (val(i + 1, j + 1, u0) - val(i + 1, j - 1, u0) - val(i - 1, j + 1, u0)
                    + val(i - 1, j - 1, u0))
                    / (4.0 * h * h);
                hess[q].set(0, 1, v);
                hess[q].set(1, 0, v);
            }
        }
    }
    DerivFields { grad, hess, boundary_dist: dist }
}

/// Fitted constants for the derivative estimates and the convexity correction.
#[derive(Clone, Debug, Serialize)]
pub struct EstimateFitReport {
    /// smallest N with |u_(xi)| <= N (|xi| + |psi_(xi)|/sqrt(psi))
    pub n_e1: f64,
    /// smallest N with u_(xi)(xi) >= -N (|xi|^2 + psi_(xi)^2/psi)
    pub n_e3_lower: f64,
    /// smallest N with u_(xi)(xi) <= mu(xi)^{-1} N |xi|^2/psi; None when mu = 0
    pub n_e3_upper: Option<f64>,
    /// min eigenvalue over {psi <= kappa} of the corrected Hessian
    /// u_xx + N [2 I + psi_xx log(psi/kappa) + psi_x psi_x^T / psi]
    pub e2_min_eigenvalue: f64,
    pub kappa: f64,
    pub cells_used: usize,
}

pub fn estimate_checks(
    sol: &DiscreteSolution,
    grid: &Grid,
    problem: &ProblemSpec,
    nd: &NondegeneracyReport,
    kappa: f64,
) -> EstimateFitReport {
    let fields = derivative_fields(sol, grid);
    let d = grid.d;
    let dirs: Vec<Vec<f64>> = if d == 1 {
        vec![vec![1.0]]
    } else {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s], vec![s, -s]]
    };
    // mu per tested direction (unit xi)
    let mu_dirs: Vec<f64> = dirs
        .iter()
        .map(|xi| {
            crate::problem::nondegeneracy(problem, 256, &[xi.clone()])
                .map(|r| r.mu_of_xi[0].1)
                .unwrap_or(0.0)
        })
        .collect();
    let mu_min = nd.mu;

    let mut n_e1: f64 = 0.0;
    let mut n_e3_lower: f64 = 0.0;
    let mut n_e3_upper: f64 = 0.0;
    let mut used = 0usize;
    for (q, &(i, j)) in grid.nodes.iter().enumerate() {
        if fields.boundary_dist[q] < 3 {
            continue;
        }
        used += 1;
        let x = grid.coords_of(i, j);
        let ev = problem.domain.eval(&x);
        for (k, xi) in dirs.iter().enumerate() {
            let u_xi = dot(&fields.grad[q], xi);
            let psi_xi = dot(&ev.grad, xi);
            let denom1 = 1.0 + psi_xi.abs() / ev.psi.sqrt();
            n_e1 = n_e1.max(u_xi.abs() / denom1);
            let u_xixi = dot(&fields.hess[q].matvec(xi), xi);
            let denom3 = 1.0 + psi_xi * psi_xi / ev.psi;
            n_e3_lower = n_e3_lower.max((-u_xixi).max(0.0) / denom3);
            if mu_dirs[k] > 0.0 {
                n_e3_upper = n_e3_upper.max(u_xixi.max(0.0) * ev.psi * mu_dirs[k]);
            }
        }
    }

    // convexity of the corrected function on {psi <= kappa} for N = n_e3_lower
    let n_fit = n_e3_lower;
    let mut min_eig = f64::INFINITY;
    for (q, &(i, j)) in grid.nodes.iter().enumerate() {
        if fields.boundary_dist[q] < 3 {
            continue;
        }
        let x = grid.coords_of(i, j);
        let ev = problem.domain.eval(&x);
        if ev.psi > kappa {
            continue;
        }
        let mut corr = fields.hess[q].clone();
        let lg = (ev.psi / kappa).ln();
        for a in 0..d {
            for b in 0..d {
                let mut v = corr.get(a, b);
                v += n_fit
                    * ((if a == b { 2.0 } else { 0.0 })
                        + ev.hess.get(a, b) * lg
                        + ev.grad[a] * ev.grad[b] / ev.psi);
                corr.set(a, b, v);
            }
        }
        min_eig = min_eig.min(corr.sym_eigen_min());
    }
    EstimateFitReport {
        n_e1,
        n_e3_lower,
        n_e3_upper: if mu_min > 0.0 { Some(n_e3_upper) } else { None },
        e2_min_eigenvalue: min_eig,
        kappa,
        cells_used: used,
    }
}

/// Extract the grid feedback policy for the Monte Carlo estimators.
pub fn feedback_policy(sol: &DiscreteSolution, grid: &Grid, problem: &ProblemSpec) -> crate::sde::FeedbackTable {
    let (lo, hi) = problem.domain.bbox(problem.d);
    let per_axis = 64usize;
    let d = problem.d;
    let total = per_axis.pow(d as u32);
    let mut indices = vec![0usize; total];
    for (cell, idx) in indices.iter_mut().enumerate() {
        let mut rem = cell;
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let k = rem % per_axis;
            rem /= per_axis;
            x[i] = lo[i] + (hi[i] - lo[i]) * (k as f64 + 0.5) / per_axis as f64;
        }
        // nearest interior node's control
        if let Some(q) = grid.index_near(&x) {
            *idx = sol.policy[q];
        }
    }
    crate::sde::FeedbackTable { lo, hi, per_axis, indices }
}

/// Solution dump: CSV `i,j,x1,x2,u,control_index,residual` (j and x2 zero for d=1).
pub fn solution_csv(sol: &DiscreteSolution, grid: &Grid, st: &Stencils) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("i,j,x1,x2,u,control_index,residual\n");
    for (q, &(i, j)) in grid.nodes.iter().enumerate() {
        let x = grid.coords_of(i, j);
        let x2 = if grid.d == 2 { x[1] } else { 0.0 };
        let mut best = f64::NEG_INFINITY;
        for (a, op) in st.ops.iter().enumerate() {
            let v = op.apply_at(q, &sol.values)
                + (op.diag[q] - st.c_values[a]) * sol.values[q]
                + st.f_values[a][q];
            best = best.max(v);
        }
        let _ = writeln!(s, "{},{},{},{},{},{},{}", i, j, x[0], x2, sol.values[q], sol.policy[q], best);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{tp1, tp2};

    #[test]
    fn stencil_identity_control_is_five_point() {
        let p = tp1(2);
        let grid = Grid::new(&p, 0.05).unwrap();
        let st = discretize(&p, &grid, 0.0, RegConvention::Generator, true).unwrap();
        assert!(st.extras[0] < 1e-14);
        // an interior cell far from the boundary has 4 neighbors (axes only)
        let q = grid.index_near(&[0.0, 0.0]).unwrap();
        let op = &st.ops[0];
        let lo = op.offsets[q] as usize;
        let hi = op.offsets[q + 1] as usize;
        assert_eq!(hi - lo, 4);
        let w = 1.0 / (0.05 * 0.05);
        for k in lo..hi {
            assert!((op.weights[k] - w).abs() < 1e-9 * w);
        }
    }

    #[test]
    fn monotonicity_invariant() {
        let p = tp2(32);
        let grid = Grid::new(&p, 1.0 / 32.0).unwrap();
        let st = discretize(&p, &grid, 0.05, RegConvention::Generator, true).unwrap();
        for op in &st.ops {
            for &d in &op.diag {
                assert!(d <= 0.0);
            }
            for &w in &op.weights {
                assert!(w >= 0.0, "negative off-diagonal weight {w}");
            }
        }
        // strict mode rejects the rank-one controls at this floor
        let err = discretize(&p, &grid, 0.05, RegConvention::Generator, false);
        assert!(matches!(err, Err(HjbError::MonotonicityUnachievable { .. })));
    }

    #[test]
    fn upwind_drift_direction() {
        // b = (1, 0): the forward x-neighbor carries the drift weight
        let mut p = tp1(2);
        p.controls[0].b = vec![1.0, 0.0];
        let grid = Grid::new(&p, 0.1).unwrap();
        let st = discretize(&p, &grid, 0.0, RegConvention::Generator, true).unwrap();
        let q = grid.index_near(&[0.0, 0.0]).unwrap();
        let fwd = grid.index[grid.flatten(1, 0)] as u32;
        let op = &st.ops[0];
        let lo = op.offsets[q] as usize;
        let hi = op.offsets[q + 1] as usize;
        let w_fwd: f64 = (lo..hi).filter(|&k| op.cols[k] == fwd).map(|k| op.weights[k]).sum();
        // 1/h from drift + 1/h^2 from diffusion
        assert!((w_fwd - (10.0 + 100.0)).abs() < 1e-9, "w_fwd = {w_fwd}");
    }

    #[test]
    fn tp1_solution_at_origin() {
        let p = tp1(2);
        let grid = Grid::new(&p, 1.0 / 64.0).unwrap();
        let sol = solve(&p, &grid, 0.05, RegConvention::Generator, 1e-10).unwrap();
        let q = grid.index_near(&[0.0, 0.0]).unwrap();
        assert!(
            (sol.values[q] - 0.25).abs() < 0.005,
            "u(0) = {} (exact 0.25)",
            sol.values[q]
        );
        assert!(sol.howard_iters <= 50);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mut p = tp1(2);
        p.controls[0].f = crate::fields::ScalarField::Zero;
        let grid = Grid::new(&p, 1.0 / 32.0).unwrap();
        let sol = solve(&p, &grid, 0.05, RegConvention::Generator, 1e-12).unwrap();
        let worst = sol.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst <= 1e-12, "max |u| = {worst}");
    }

    #[test]
    fn constant_fixed_point_across_eps() {
        // f = c g0, g = g0 constant: u = g0 for every eps
        let g0 = 0.7;
        let mut p = tp1(2);
        p.controls[0].c = 1.0;
        p.controls[0].f = crate::fields::ScalarField::Quadratic {
            c0: g0,
            linear: vec![0.0, 0.0],
            quad: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        p.g = crate::fields::ScalarField::Quadratic {
            c0: g0,
            linear: vec![0.0, 0.0],
            quad: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        let grid = Grid::new(&p, 1.0 / 32.0).unwrap();
        let (sols, _) = continuation_in_eps(
            &p,
            &grid,
            &[0.2, 0.1, 0.05],
            RegConvention::Generator,
            1e-10,
        )
        .unwrap();
        for sol in &sols {
            let worst = sol.values.iter().fold(0.0f64, |a, v| a.max((v - g0).abs()));
            assert!(worst < 1e-9, "|u - g0| = {worst} at eps {}", sol.eps_reg);
        }
    }

    #[test]
    fn discrete_maximum_principle_randomized() {
        // f <= 0, c >= 0, g <= 0 force u <= 0
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for trial in 0..3 {
            let mut p = tp2(8);
            for cp in p.controls.iter_mut() {
                cp.c = rng.gen::<f64>();
                cp.f = crate::fields::ScalarField::Quadratic {
                    c0: -0.5 - rng.gen::<f64>(),
                    linear: vec![0.1 * rng.gen::<f64>(), 0.0],
                    quad: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
                };
            }
            p.g = crate::fields::ScalarField::Quadratic {
                c0: -0.2,
                linear: vec![0.0, 0.0],
                quad: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            };
            let grid = Grid::new(&p, 1.0 / 24.0).unwrap();
            let sol = solve(&p, &grid, 0.1, RegConvention::Generator, 1e-10).unwrap();
            let max = sol.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max <= 1e-9, "trial {trial}: max u = {max}");
        }
    }

    #[test]
    fn hessian_of_linear_solution_vanishes() {
        // g linear harmonic extension with f = 0: u is linear, Hessian ~ 0
        let mut p = tp1(2);
        p.controls[0].f = crate::fields::ScalarField::Zero;
        p.g = crate::fields::ScalarField::Quadratic {
            c0: 0.0,
            linear: vec![0.3, -0.2],
            quad: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        let grid = Grid::new(&p, 1.0 / 32.0).unwrap();
        let sol = solve(&p, &grid, 0.05, RegConvention::Generator, 1e-11).unwrap();
        let fields = derivative_fields(&sol, &grid);
        let q = grid.index_near(&[0.1, 0.1]).unwrap();
        assert!(fields.hess[q].frob() < 1e-5, "hess {:?}", fields.hess[q]);
        assert!((fields.grad[q][0] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn tp1_hessian_matches_exact() {
        // v = (1-|x|^2)/4: Hessian = -I/2
        let p = tp1(2);
        let grid = Grid::new(&p, 1.0 / 64.0).unwrap();
        let sol = solve(&p, &grid, 0.02, RegConvention::Generator, 1e-11).unwrap();
        let fields = derivative_fields(&sol, &grid);
        let q = grid.index_near(&[0.25, 0.0]).unwrap();
        let h2 = 5.0 * (1.0f64 / 64.0).powi(2);
        assert!((fields.hess[q].get(0, 0) + 0.5).abs() < h2 + 1e-3);
        assert!((fields.hess[q].get(1, 1) + 0.5).abs() < h2 + 1e-3);
    }
}
