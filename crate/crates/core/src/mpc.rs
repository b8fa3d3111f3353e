//! Finite-horizon optimal control as a condensed quadratic program: states
//! are eliminated through the dynamics, an operator-splitting solver finds
//! the inputs, and a deadbeat least-squares estimator reconstructs the state
//! from an output window.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::ControlObjective;
use crate::sysmodel::LiftedSystem;

/// Solver settings for the operator-splitting QP solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub method: Method,
    /// Run an exact KKT solve on the detected active set after convergence.
    pub polish: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    OperatorSplitting,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-8,
            rel_tol: 1e-8,
            max_iters: 20_000,
            method: Method::OperatorSplitting,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Solved,
    MaxIters,
    PrimalInfeasible,
}

/// First-order optimality residuals of a returned iterate.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub u: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
    /// Dual variables for the inequality rows.
    pub dual: DVector<f64>,
}

/// Quadratic program over the stacked input sequence with the states
/// eliminated: minimize `U^T H U + 2 f^T U + c0` subject to
/// `A_ineq U <= b_ineq`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub x0: DVector<f64>,
    pub obj_const: f64,
    pub m_in: usize,
    pub horizon: usize,
}

impl CondensedQp {
    /// Objective value at a stacked input vector, matching the trajectory
    /// cost by construction.
    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.h * u)[(0, 0)] + 2.0 * self.f.dot(u) + self.obj_const
    }

    /// Input block for one step of the horizon.
    pub fn input_block(&self, u: &DVector<f64>, i: usize) -> DVector<f64> {
        u.rows(i * self.m_in, self.m_in).into_owned()
    }
}

/// Precomputed condensation of a system/objective pair: everything that does
/// not depend on the initial state, so receding-horizon reuse is cheap.
#[derive(Debug, Clone)]
pub struct Condenser {
    sys: LiftedSystem,
    obj: ControlObjective,
    /// `gamma[i]`: maps stacked inputs to the state at step i.
    gammas: Vec<DMatrix<f64>>,
    /// powers of A up to the horizon
    a_pows: Vec<DMatrix<f64>>,
    h: DMatrix<f64>,
    a_ineq: DMatrix<f64>,
}

impl Condenser {
    pub fn new(sys: &LiftedSystem, obj: &ControlObjective) -> Result<Self> {
        let n1 = sys.n() + 1;
        let m = sys.m();
        if obj.n() != sys.n() || obj.input_dim() != m {
            return Err(Error::Dimension(format!(
                "objective over dims ({},{}) does not match system ({},{})",
                obj.n(),
                obj.input_dim(),
                sys.n(),
                m
            )));
        }
        let horizon = obj.horizon();
        let nu = m * (horizon + 1);
        let mut a_pows = Vec::with_capacity(horizon + 1);
        a_pows.push(DMatrix::identity(n1, n1));
        for i in 1..=horizon {
            let next = &a_pows[i - 1] * sys.a();
            a_pows.push(next);
        }
        // state-from-inputs maps: x_i = A^i x0 + sum_{j<i} A^(i-1-j) B u_j
        let mut gammas = Vec::with_capacity(horizon + 1);
        for i in 0..=horizon {
            let mut gamma = DMatrix::zeros(n1, nu);
            for j in 0..i {
                let block = &a_pows[i - 1 - j] * sys.b();
                gamma.view_mut((0, j * m), (n1, m)).copy_from(&block);
            }
            gammas.push(gamma);
        }
        // stacked (x_i, u_i) from inputs: eta_i = ebar_i + Ghat_i U
        let eta_dim = n1 + m;
        let mm = obj.cost_matrix();
        let dd = obj.constraints();
        let hrows = dd.nrows();
        let mut h = DMatrix::zeros(nu, nu);
        let mut a_ineq = DMatrix::zeros(hrows * (horizon + 1), nu);
        for i in 0..=horizon {
            let ghat = Self::stack_map(&gammas[i], i, m, eta_dim, nu);
            h += ghat.transpose() * mm * &ghat;
            a_ineq
                .rows_mut(i * hrows, hrows)
                .copy_from(&(dd * &ghat));
        }
        h = (&h + h.transpose()) * 0.5;
        Ok(Self {
            sys: sys.clone(),
            obj: obj.clone(),
            gammas,
            a_pows,
            h,
            a_ineq,
        })
    }

    fn stack_map(
        gamma: &DMatrix<f64>,
        i: usize,
        m: usize,
        eta_dim: usize,
        nu: usize,
    ) -> DMatrix<f64> {
        let n1 = gamma.nrows();
        let mut ghat = DMatrix::zeros(eta_dim, nu);
        ghat.view_mut((0, 0), (n1, nu)).copy_from(gamma);
        for k in 0..m {
            ghat[(n1 + k, i * m + k)] = 1.0;
        }
        ghat
    }

    /// Builds the full QP for a given lifted initial state.
    pub fn qp(&self, x0: &DVector<f64>) -> Result<CondensedQp> {
        let n1 = self.sys.n() + 1;
        if x0.len() != n1 {
            return Err(Error::Dimension(format!(
                "initial state has length {}, expected {n1}",
                x0.len()
            )));
        }
        let m = self.sys.m();
        let horizon = self.obj.horizon();
        let nu = m * (horizon + 1);
        let eta_dim = n1 + m;
        let mm = self.obj.cost_matrix();
        let dd = self.obj.constraints();
        let hrows = dd.nrows();
        let mut f = DVector::zeros(nu);
        let mut c0 = 0.0;
        let mut b_ineq = DVector::zeros(hrows * (self.obj.horizon() + 1));
        for i in 0..=horizon {
            let xi_free = &self.a_pows[i] * x0;
            // deviation offset: ebar_i - eta_ref_i
            let mut offset = DVector::zeros(eta_dim);
            offset
                .rows_mut(0, n1)
                .copy_from(&(&xi_free - &self.obj.x_ref()[i]));
            offset
                .rows_mut(n1, m)
                .copy_from(&(-&self.obj.u_ref()[i]));
            let ghat = Self::stack_map(&self.gammas[i], i, m, eta_dim, nu);
            f += ghat.transpose() * (mm * &offset);
            c0 += (offset.transpose() * mm * &offset)[(0, 0)];
            // constraint offset uses the raw eta, not the deviation
            let mut eta_free = DVector::zeros(eta_dim);
            eta_free.rows_mut(0, n1).copy_from(&xi_free);
            b_ineq
                .rows_mut(i * hrows, hrows)
                .copy_from(&(-(dd * &eta_free)));
        }
        Ok(CondensedQp {
            h: self.h.clone(),
            f,
            a_ineq: self.a_ineq.clone(),
            b_ineq,
            x0: x0.clone(),
            obj_const: c0,
            m_in: m,
            horizon,
        })
    }
}

/// One-shot condensation.
pub fn condense(
    sys: &LiftedSystem,
    obj: &ControlObjective,
    x0: &DVector<f64>,
) -> Result<CondensedQp> {
    Condenser::new(sys, obj)?.qp(x0)
}

struct AdmmWorkspace {
    rho: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

fn factorize(q: &DMatrix<f64>, a: &DMatrix<f64>, rho: f64) -> Result<AdmmWorkspace> {
    let kkt = q + a.transpose() * a * rho;
    let nu = kkt.nrows();
    let chol = Cholesky::new(kkt.clone())
        .or_else(|| Cholesky::new(kkt + DMatrix::identity(nu, nu) * 1e-9))
        .ok_or(Error::Solver(
            "cost matrix is not positive definite".into(),
        ))?;
    Ok(AdmmWorkspace { rho, chol })
}

/// Minimizes the condensed QP with scaled ADMM plus an optional exact
/// active-set polish. Returns the iterate together with its KKT residuals.
///
/// Condensation over unstable dynamics makes the raw cost matrix span many
/// orders of magnitude, so the problem is solved after a Jacobi/row
/// equilibration and the solution is mapped back.
pub fn solve(qp: &CondensedQp, cfg: &SolverConfig) -> Result<Solution> {
    let Method::OperatorSplitting = cfg.method;
    let nu = qp.h.nrows();
    if qp.h.diagonal().iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Solver("cost matrix is not positive definite".into()));
    }
    // variable scaling from the cost diagonal, constraint row scaling to
    // unit infinity norm
    let e = DVector::from_fn(nu, |j, _| 1.0 / qp.h[(j, j)].sqrt());
    let scale_cols = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for j in 0..nu {
            out.column_mut(j).scale_mut(e[j]);
        }
        out
    };
    let mut q = scale_cols(&(&qp.h * 2.0));
    for i in 0..nu {
        q.row_mut(i).scale_mut(e[i]);
    }
    q = (&q + q.transpose()) * 0.5;
    let lin = DVector::from_fn(nu, |j, _| 2.0 * qp.f[j] * e[j]);
    let rows = qp.a_ineq.nrows();

    // maps a scaled iterate and its duals back to the original variables
    let unscale = |v: &DVector<f64>| DVector::from_fn(nu, |j, _| v[j] * e[j]);

    if rows == 0 {
        // unconstrained: direct solve q v = -lin in the scaled space
        let chol = Cholesky::new(q.clone())
            .ok_or(Error::Solver("cost matrix is not positive definite".into()))?;
        let u = unscale(&chol.solve(&(-&lin)));
        let kkt = kkt_residuals(
            &(&qp.h * 2.0),
            &(&qp.f * 2.0),
            &qp.a_ineq,
            &qp.b_ineq,
            &u,
            &DVector::zeros(0),
        );
        return Ok(Solution {
            u,
            status: SolveStatus::Solved,
            iterations: 0,
            kkt,
            dual: DVector::zeros(0),
        });
    }

    let a_cols = scale_cols(&qp.a_ineq);
    let mut row_scale = DVector::from_element(rows, 1.0);
    let mut a = a_cols.clone();
    let mut b = qp.b_ineq.clone();
    for i in 0..rows {
        let norm = a_cols.row(i).abs().max();
        if norm > 0.0 {
            row_scale[i] = 1.0 / norm;
            a.row_mut(i).scale_mut(row_scale[i]);
            b[i] *= row_scale[i];
        }
    }
    let a = &a;
    let b = &b;
    let mut ws = factorize(&q, a, 0.1)?;
    let mut u = DVector::zeros(nu);
    let mut z = DVector::zeros(rows);
    let mut y = DVector::zeros(rows);
    let mut status = SolveStatus::MaxIters;
    let mut iterations = cfg.max_iters;
    let mut stall_count = 0usize;
    let mut last_prim = f64::INFINITY;

    for iter in 0..cfg.max_iters {
        // u-step: (q + rho A^T A) u = -lin + A^T (rho z - y)
        let rhs = -&lin + a.transpose() * (&z * ws.rho - &y);
        u = ws.chol.solve(&rhs);
        let v = a * &u;
        // z-step: project v + y/rho onto { z <= b }
        let z_prev = z.clone();
        let w = &v + &y / ws.rho;
        z = w.zip_map(b, |wi, bi| wi.min(bi));
        // dual update keeps y >= 0
        y += (&v - &z) * ws.rho;

        let r_prim = (&v - &z).abs().max();
        let r_dual = (a.transpose() * (&z - &z_prev)).abs().max() * ws.rho;
        let prim_scale = v.abs().max().max(z.abs().max()).max(1.0);
        let dual_scale = (&q * &u)
            .abs()
            .max()
            .max((a.transpose() * &y).abs().max())
            .max(lin.abs().max())
            .max(1.0);
        let eps_prim = cfg.abs_tol + cfg.rel_tol * prim_scale;
        let eps_dual = cfg.abs_tol + cfg.rel_tol * dual_scale;
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = SolveStatus::Solved;
            iterations = iter + 1;
            break;
        }
        // primal stagnation well above tolerance suggests infeasibility
        if iter % 200 == 199 {
            if r_prim > 1e3 * eps_prim && (last_prim - r_prim).abs() <= 1e-12 * last_prim {
                stall_count += 1;
                if stall_count >= 5 {
                    status = SolveStatus::PrimalInfeasible;
                    iterations = iter + 1;
                    break;
                }
            } else {
                stall_count = 0;
            }
            last_prim = r_prim;
            // adaptive penalty keeps the residuals balanced
            let ratio = ((r_prim * dual_scale) / (r_dual * prim_scale).max(1e-300)).sqrt();
            let new_rho = (ws.rho * ratio).clamp(1e-6, 1e6);
            if new_rho > ws.rho * 5.0 || new_rho < ws.rho / 5.0 {
                ws = factorize(&q, a, new_rho)?;
            }
        }
    }

    if cfg.polish && status == SolveStatus::Solved {
        if let Some((pu, pdual)) = polish(&q, &lin, a, b, &u, &y) {
            let cand = kkt_residuals(&q, &lin, a, b, &pu, &pdual);
            let cur = kkt_residuals(&q, &lin, a, b, &u, &y);
            if cand.stationarity.max(cand.primal) <= cur.stationarity.max(cur.primal) {
                u = pu;
                y = pdual;
            }
        }
    }

    // map back to the original variables: U = E u, lambda_i = r_i y_i
    let u_orig = unscale(&u);
    let dual_orig = DVector::from_fn(rows, |i, _| y[i] * row_scale[i]);
    let kkt = kkt_residuals(
        &(&qp.h * 2.0),
        &(&qp.f * 2.0),
        &qp.a_ineq,
        &qp.b_ineq,
        &u_orig,
        &dual_orig,
    );
    Ok(Solution {
        u: u_orig,
        status,
        iterations,
        kkt,
        dual: dual_orig,
    })
}

fn kkt_residuals(
    q: &DMatrix<f64>,
    lin: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    u: &DVector<f64>,
    dual: &DVector<f64>,
) -> KktResiduals {
    let stationarity = (q * u + lin + a.transpose() * dual).abs().max();
    let slack = a * u - b;
    let primal = slack.iter().fold(0.0f64, |acc, &s| acc.max(s.max(0.0)));
    let complementarity = slack
        .iter()
        .zip(dual.iter())
        .fold(0.0f64, |acc, (&s, &l)| acc.max((l * s).abs()));
    KktResiduals {
        stationarity,
        primal,
        complementarity,
    }
}

/// Exact equality-constrained solve on the detected active set.
fn polish(
    q: &DMatrix<f64>,
    lin: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let act_tol = 1e-6;
    let slack = a * u - b;
    let active: Vec<usize> = (0..a.nrows())
        .filter(|&i| y[i] > act_tol || slack[i] > -act_tol)
        .collect();
    let nu = q.nrows();
    let na = active.len();
    if na == 0 {
        let chol = Cholesky::new(q.clone())?;
        let pu = chol.solve(&(-lin));
        let feasible = (a * &pu - b).iter().all(|&s| s <= 1e-9);
        return feasible.then_some((pu, DVector::zeros(a.nrows())));
    }
    let a_act = a.select_rows(&active);
    let b_act = DVector::from_iterator(na, active.iter().map(|&i| b[i]));
    let mut kkt = DMatrix::zeros(nu + na, nu + na);
    kkt.view_mut((0, 0), (nu, nu)).copy_from(q);
    kkt.view_mut((0, nu), (nu, na)).copy_from(&a_act.transpose());
    kkt.view_mut((nu, 0), (na, nu)).copy_from(&a_act);
    let mut rhs = DVector::zeros(nu + na);
    rhs.rows_mut(0, nu).copy_from(&(-lin));
    rhs.rows_mut(nu, na).copy_from(&b_act);
    // active rows may be linearly dependent; fall back to a minimum-norm solve
    let sol = match kkt.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => linalg::lstsq(&kkt, &rhs),
    };
    let pu = sol.rows(0, nu).into_owned();
    let lam_act = sol.rows(nu, na).into_owned();
    if !pu.iter().all(|v| v.is_finite()) {
        return None;
    }
    // negative multipliers mean the active-set guess was wrong
    if lam_act.iter().any(|&l| l < -1e-7) {
        return None;
    }
    let feasible = (a * &pu - b).iter().all(|&s| s <= 1e-8);
    if !feasible {
        return None;
    }
    let mut dual = DVector::zeros(a.nrows());
    for (k, &i) in active.iter().enumerate() {
        dual[i] = lam_act[k].max(0.0);
    }
    Some((pu, dual))
}

/// Result of a deadbeat state reconstruction.
#[derive(Debug, Clone)]
pub struct StateEstimate {
    pub x: DVector<f64>,
    /// True while the window is too short for exact reconstruction and the
    /// value is only a minimum-norm least-squares guess.
    pub flagged: bool,
}

/// Reconstructs the current lifted state from the last `w` outputs and the
/// `w - 1` inputs applied between them. Exact (in the noiseless setting) once
/// `w = n + 1`; shorter windows yield a flagged minimum-norm estimate.
pub fn deadbeat_estimate(
    sys: &LiftedSystem,
    y_window: &[DVector<f64>],
    u_window: &[DVector<f64>],
) -> Result<StateEstimate> {
    let w = y_window.len();
    if w == 0 {
        return Err(Error::Dimension("need at least one output".into()));
    }
    if u_window.len() + 1 != w {
        return Err(Error::LengthMismatch {
            expected: w - 1,
            got: u_window.len(),
        });
    }
    let n1 = sys.n() + 1;
    let p1 = sys.p() + 1;
    for y in y_window {
        if y.len() != p1 {
            return Err(Error::Dimension("output length".into()));
        }
    }
    // y_{j} = C A^j x_start + C * sum_{l<j} A^(j-1-l) B u_l
    let mut obs = DMatrix::zeros(p1 * w, n1);
    let mut rhs = DVector::zeros(p1 * w);
    let mut a_pows = Vec::with_capacity(w);
    a_pows.push(DMatrix::identity(n1, n1));
    for j in 1..w {
        let next = &a_pows[j - 1] * sys.a();
        a_pows.push(next);
    }
    for j in 0..w {
        obs.rows_mut(j * p1, p1).copy_from(&(sys.c() * &a_pows[j]));
        let mut contrib = DVector::zeros(n1);
        for (l, u) in u_window.iter().take(j).enumerate() {
            contrib += &a_pows[j - 1 - l] * (sys.b() * u);
        }
        rhs.rows_mut(j * p1, p1)
            .copy_from(&(&y_window[j] - sys.c() * &contrib));
    }
    let flagged = w < sys.n() + 1 && linalg::rank(&obs) < n1;
    let x_start = linalg::lstsq(&obs, &rhs);
    // roll the window-start estimate forward to the current step
    let mut x = x_start;
    for u in u_window.iter() {
        x = sys.step(&x, u);
    }
    Ok(StateEstimate { x, flagged })
}
