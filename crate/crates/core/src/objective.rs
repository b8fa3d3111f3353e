//! Quadratic tracking costs, reference trajectories and affine constraints,
//! plus their images under an isomorphism.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::group::Isomorphism;
use crate::linalg;

/// Relative eigenvalue floor for accepting a cost matrix as positive
/// definite.
pub const PD_RATIO: f64 = 1e-10;

/// Finite-horizon quadratic control objective over stacked `(x, u)` pairs.
///
/// The cost is `sum_i d_i^T M d_i` with `d_i = (x_i - x_ref_i, u_i - u_ref_i)`
/// and the constraints are `D (x_i, u_i) <= 0` for every step of the horizon.
/// States are in lifted coordinates, so rows of `D` encode affine
/// constraints and `M` may carry linear terms through the lift column.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlObjective {
    m: DMatrix<f64>,
    x_ref: Vec<DVector<f64>>,
    u_ref: Vec<DVector<f64>>,
    d: DMatrix<f64>,
    horizon: usize,
    n: usize,
    m_in: usize,
}

impl ControlObjective {
    pub fn new(
        m: DMatrix<f64>,
        x_ref: Vec<DVector<f64>>,
        u_ref: Vec<DVector<f64>>,
        d: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Dimension("horizon must be positive".into()));
        }
        if x_ref.len() != horizon + 1 {
            return Err(Error::LengthMismatch {
                expected: horizon + 1,
                got: x_ref.len(),
            });
        }
        if u_ref.len() != horizon + 1 {
            return Err(Error::LengthMismatch {
                expected: horizon + 1,
                got: u_ref.len(),
            });
        }
        let n1 = x_ref[0].len();
        if n1 < 2 {
            return Err(Error::Dimension("lifted states need at least 2 coordinates".into()));
        }
        let n = n1 - 1;
        let m_in = u_ref[0].len();
        let eta = n1 + m_in;
        if m.nrows() != eta || m.ncols() != eta {
            return Err(Error::Dimension(format!(
                "cost matrix must be {eta}x{eta}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if d.ncols() != eta {
            return Err(Error::Dimension(format!(
                "constraint matrix must have {eta} columns, got {}",
                d.ncols()
            )));
        }
        for x in &x_ref {
            if x.len() != n1 {
                return Err(Error::Dimension("inconsistent reference state length".into()));
            }
            if (x[n1 - 1] - 1.0).abs() > 1e-12 {
                return Err(Error::Dimension(
                    "reference states must have last component 1".into(),
                ));
            }
        }
        for u in &u_ref {
            if u.len() != m_in {
                return Err(Error::Dimension("inconsistent reference input length".into()));
            }
        }
        if !linalg::all_finite(&m) || !linalg::all_finite(&d) {
            return Err(Error::NonFinite("objective data"));
        }
        check_positive_definite(&m)?;
        Ok(Self {
            m,
            x_ref,
            u_ref,
            d,
            horizon,
            n,
            m_in,
        })
    }

    pub fn cost_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn x_ref(&self) -> &[DVector<f64>] {
        &self.x_ref
    }

    pub fn u_ref(&self) -> &[DVector<f64>] {
        &self.u_ref
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Bare state dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m_in
    }

    /// Rank of the constraint matrix. Box-style constraint sets are
    /// structurally rank deficient (zero input block and paired rows), so
    /// this is reported rather than enforced.
    pub fn constraint_rank(&self) -> usize {
        linalg::rank(&self.d)
    }

    /// Stacks a state/input pair into the `eta` vector the cost and
    /// constraints act on.
    pub fn stack(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n1 = self.n + 1;
        let mut eta = DVector::zeros(n1 + self.m_in);
        eta.rows_mut(0, n1).copy_from(x);
        eta.rows_mut(n1, self.m_in).copy_from(u);
        eta
    }

    /// Deviation term at step `i` against the references.
    fn deviation(&self, i: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n1 = self.n + 1;
        let mut d = DVector::zeros(n1 + self.m_in);
        d.rows_mut(0, n1).copy_from(&(x - &self.x_ref[i]));
        d.rows_mut(n1, self.m_in).copy_from(&(u - &self.u_ref[i]));
        d
    }

    /// Total tracking cost of a horizon-length trajectory.
    pub fn eval_cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Result<f64> {
        if xs.len() != self.horizon + 1 {
            return Err(Error::LengthMismatch {
                expected: self.horizon + 1,
                got: xs.len(),
            });
        }
        if us.len() != self.horizon + 1 {
            return Err(Error::LengthMismatch {
                expected: self.horizon + 1,
                got: us.len(),
            });
        }
        let mut total = 0.0;
        for i in 0..=self.horizon {
            let d = self.deviation(i, &xs[i], &us[i]);
            total += (d.transpose() * &self.m * &d)[(0, 0)];
        }
        Ok(total)
    }

    /// Image of the objective under an isomorphism: `M -> L^-T M L^-1`,
    /// `D -> D L^-1`, references mapped pointwise, so that costs and
    /// feasibility are preserved on transformed trajectories.
    pub fn transform(&self, iso: &Isomorphism) -> Result<ControlObjective> {
        let (n, m_in, _) = iso.dims();
        if n != self.n || m_in != self.m_in {
            return Err(Error::Dimension(format!(
                "isomorphism dims ({n},{m_in}) do not match objective ({},{})",
                self.n, self.m_in
            )));
        }
        let l = iso.stacked_map();
        let l_inv = linalg::invert(&l, "L")?;
        let mut m_new = l_inv.transpose() * &self.m * &l_inv;
        // congruence keeps symmetry in exact arithmetic; remove fp drift
        m_new = (&m_new + m_new.transpose()) * 0.5;
        check_positive_definite(&m_new)?;
        let d_new = &self.d * &l_inv;
        let n1 = self.n + 1;
        let x_ref_new: Vec<DVector<f64>> = self
            .x_ref
            .iter()
            .map(|x| {
                let mut t = iso.p() * x;
                t[n1 - 1] = 1.0;
                t
            })
            .collect();
        let u_ref_new: Vec<DVector<f64>> = self
            .x_ref
            .iter()
            .zip(self.u_ref.iter())
            .map(|(x, u)| iso.f() * x + iso.g() * u)
            .collect();
        ControlObjective::new(m_new, x_ref_new, u_ref_new, d_new, self.horizon)
    }
}

fn check_positive_definite(m: &DMatrix<f64>) -> Result<()> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 || min <= PD_RATIO * max {
        return Err(Error::NotPositiveDefinite {
            ratio: if max > 0.0 { min / max } else { min },
        });
    }
    Ok(())
}

/// Builds box constraints `lo_i <= x_i <= hi_i` on every bare state
/// coordinate in lifted affine form. The state block of the result has full
/// rank `n + 1` (the lift column is hit by the bound offsets), which pins the
/// stabilizer of a constrained instance to the identity.
pub fn make_box_state_constraints(
    bounds: &[(f64, f64)],
    input_dim: usize,
) -> Result<DMatrix<f64>> {
    let n = bounds.len();
    if n == 0 {
        return Err(Error::Dimension("need at least one bounded coordinate".into()));
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::BadBounds {
                coord: i,
                lo,
                hi,
            });
        }
    }
    let eta = n + 1 + input_dim;
    let mut d = DMatrix::zeros(2 * n, eta);
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        // -x_i + lo <= 0
        d[(2 * i, i)] = -1.0;
        d[(2 * i, n)] = lo;
        // x_i - hi <= 0
        d[(2 * i + 1, i)] = 1.0;
        d[(2 * i + 1, n)] = -hi;
    }
    Ok(d)
}

/// Appends symmetric input bounds `|u_j| <= limit_j` to a constraint matrix.
pub fn append_input_bounds(
    d: &DMatrix<f64>,
    n: usize,
    limits: &[f64],
) -> Result<DMatrix<f64>> {
    let eta = d.ncols();
    let m_in = eta - (n + 1);
    if limits.len() != m_in {
        return Err(Error::Dimension(format!(
            "expected {m_in} input limits, got {}",
            limits.len()
        )));
    }
    for (j, &lim) in limits.iter().enumerate() {
        if !(lim > 0.0) || !lim.is_finite() {
            return Err(Error::BadBounds {
                coord: j,
                lo: -lim,
                hi: lim,
            });
        }
    }
    let mut out = DMatrix::zeros(d.nrows() + 2 * m_in, eta);
    out.rows_mut(0, d.nrows()).copy_from(d);
    for (j, &lim) in limits.iter().enumerate() {
        let r = d.nrows() + 2 * j;
        // u_j - lim <= 0
        out[(r, n + 1 + j)] = 1.0;
        out[(r, n)] = -lim;
        // -u_j - lim <= 0
        out[(r + 1, n + 1 + j)] = -1.0;
        out[(r + 1, n)] = -lim;
    }
    Ok(out)
}
