//! Affine plant models, their lifted linear form and structural invariants
//! (controllability, observability, controllability indices, canonical chain
//! form).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Discrete-time affine plant
/// `x' = A x + B u + c`, `y = C x + d`
/// with the bare (unlifted) matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BarePlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_const: DVector<f64>,
    pub d_const: DVector<f64>,
}

impl BarePlant {
    /// Validates dimensions, controllability, observability and full rank of
    /// the input/output maps.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        c_const: DVector<f64>,
        d_const: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "state matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "input matrix has {} rows, expected {}",
                b.nrows(),
                n
            )));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!(
                "output matrix has {} columns, expected {}",
                c.ncols(),
                n
            )));
        }
        if c_const.len() != n {
            return Err(Error::Dimension(format!(
                "state offset has length {}, expected {}",
                c_const.len(),
                n
            )));
        }
        if d_const.len() != c.nrows() {
            return Err(Error::Dimension(format!(
                "output offset has length {}, expected {}",
                d_const.len(),
                c.nrows()
            )));
        }
        for (mat, name) in [(&a, "A"), (&b, "B"), (&c, "C")] {
            if !linalg::all_finite(mat) {
                return Err(Error::NonFinite(match name {
                    "A" => "A",
                    "B" => "B",
                    _ => "C",
                }));
            }
        }
        let plant = Self {
            a,
            b,
            c,
            c_const,
            d_const,
        };
        plant.check_invariants()?;
        Ok(plant)
    }

    fn check_invariants(&self) -> Result<()> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        let b_rank = linalg::rank(&self.b);
        if b_rank < m {
            return Err(Error::InputRankDeficient { rank: b_rank, m });
        }
        let c_rank = linalg::rank(&self.c);
        if c_rank < p {
            return Err(Error::OutputRankDeficient { rank: c_rank, p });
        }
        let reach = linalg::reachability_matrix(&self.a, &self.b, n.saturating_sub(1));
        let r = linalg::rank(&reach);
        if r < n {
            return Err(Error::NotControllable { rank: r, n });
        }
        let obs = linalg::observability_matrix(&self.a, &self.c, n.saturating_sub(1));
        let o = linalg::rank(&obs);
        if o < n {
            return Err(Error::NotObservable { rank: o, n });
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// One step of the affine recursion.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c_const
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d_const
    }
}

/// Lifted linear form of an affine plant: the state gains a constant-1
/// coordinate so that every affine map becomes linear.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    n: usize,
    m: usize,
    p: usize,
}

impl LiftedSystem {
    /// Wraps already-lifted matrices, enforcing the exact last-row structure.
    pub fn from_parts(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n1 = a.nrows();
        if n1 < 2 || a.ncols() != n1 {
            return Err(Error::Dimension(format!(
                "lifted state matrix must be square with size >= 2, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = n1 - 1;
        let m = b.ncols();
        if b.nrows() != n1 {
            return Err(Error::Dimension("lifted input matrix row count".into()));
        }
        let p1 = c.nrows();
        if p1 < 2 || c.ncols() != n1 {
            return Err(Error::Dimension("lifted output matrix shape".into()));
        }
        let p = p1 - 1;
        for j in 0..n1 {
            let want = if j == n { 1.0 } else { 0.0 };
            if a[(n, j)] != want {
                return Err(Error::Dimension("lifted A last row must be (0,...,0,1)".into()));
            }
            let want_c = if j == n { 1.0 } else { 0.0 };
            if c[(p, j)] != want_c {
                return Err(Error::Dimension("lifted C last row must be (0,...,0,1)".into()));
            }
        }
        for j in 0..m {
            if b[(n, j)] != 0.0 {
                return Err(Error::Dimension("lifted B last row must be zero".into()));
            }
        }
        Ok(Self { a, b, c, n, m, p })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Bare state dimension (lifted state has one more coordinate).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Bare output dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Lifts a bare state by appending the constant coordinate.
    pub fn lift_state(&self, x_bare: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.n + 1);
        x.rows_mut(0, self.n).copy_from(x_bare);
        x[self.n] = 1.0;
        x
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    /// Recovers the bare plant from the lifted blocks.
    pub fn to_bare(&self) -> BarePlant {
        let (n, m, p) = (self.n, self.m, self.p);
        BarePlant {
            a: self.a.view((0, 0), (n, n)).into_owned(),
            b: self.b.view((0, 0), (n, m)).into_owned(),
            c: self.c.view((0, 0), (p, n)).into_owned(),
            c_const: self.a.view((0, n), (n, 1)).column(0).into_owned(),
            d_const: self.c.view((0, n), (p, 1)).column(0).into_owned(),
        }
    }
}

/// Structural invariants of a controllable plant: rank increments of the
/// stacked reachability matrices and their conjugate partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    /// `r[i-1] = rank S_{i-1} - rank S_{i-2}`, nonincreasing, sums to n.
    pub rank_increments: Vec<usize>,
    /// Controllability indices, the conjugate partition of `rank_increments`,
    /// sorted descending.
    pub controllability_indices: Vec<usize>,
    /// True when the plant literally matches the canonical shift-chain form
    /// with unit output taps and zero offsets.
    pub is_brunovsky_form: bool,
}

/// Embeds the affine map `x -> W x + v` as a linear map on `(x, 1)`:
/// returns `[[W, v], [0, 1]]`.
pub fn lift_affine(w: &DMatrix<f64>, v: &DVector<f64>) -> Result<DMatrix<f64>> {
    if w.nrows() != v.len() {
        return Err(Error::Dimension(format!(
            "affine constant has length {}, expected {}",
            v.len(),
            w.nrows()
        )));
    }
    let (rows, cols) = (w.nrows(), w.ncols());
    let mut out = DMatrix::zeros(rows + 1, cols + 1);
    out.view_mut((0, 0), (rows, cols)).copy_from(w);
    out.view_mut((0, cols), (rows, 1)).copy_from(v);
    out[(rows, cols)] = 1.0;
    Ok(out)
}

/// Lifts a validated plant into linear form: `A = [[A, c],[0,1]]`,
/// `B = [B; 0]`, `C = [[C, d],[0,1]]`.
pub fn lift_system(plant: &BarePlant) -> Result<LiftedSystem> {
    plant.check_invariants()?;
    let a = lift_affine(&plant.a, &plant.c_const)?;
    let mut b = DMatrix::zeros(plant.n() + 1, plant.m());
    b.view_mut((0, 0), (plant.n(), plant.m())).copy_from(&plant.b);
    let c = lift_affine(&plant.c, &plant.d_const)?;
    LiftedSystem::from_parts(a, b, c)
}

/// Computes rank increments and controllability indices on the bare matrices.
pub fn structure_report(plant: &BarePlant) -> Result<StructureReport> {
    let (n, m) = (plant.n(), plant.m());
    let reach = linalg::reachability_matrix(&plant.a, &plant.b, n.saturating_sub(1));
    if linalg::rank(&reach) < n {
        return Err(Error::NotControllable {
            rank: linalg::rank(&reach),
            n,
        });
    }
    let mut increments = Vec::new();
    let mut prev = 0usize;
    for j in 0..n {
        let s_j = linalg::reachability_matrix(&plant.a, &plant.b, j);
        let r = linalg::rank(&s_j);
        let inc = r - prev;
        if inc == 0 {
            break;
        }
        increments.push(inc);
        prev = r;
        if r == n {
            break;
        }
    }
    // conjugate partition: kappa_i = #{ j : r_j >= i }
    let mut kappa = Vec::with_capacity(m);
    for i in 1..=m {
        let k = increments.iter().filter(|&&r| r >= i).count();
        if k > 0 {
            kappa.push(k);
        }
    }
    kappa.sort_unstable_by(|a, b| b.cmp(a));
    let is_chain = is_literal_chain_form(plant);
    Ok(StructureReport {
        rank_increments: increments,
        controllability_indices: kappa,
        is_brunovsky_form: is_chain,
    })
}

fn is_literal_chain_form(plant: &BarePlant) -> bool {
    let m = plant.m();
    if plant.p() != m {
        return false;
    }
    if plant.c_const.iter().any(|&v| v != 0.0) || plant.d_const.iter().any(|&v| v != 0.0) {
        return false;
    }
    // Each input column must be a unit vector marking a chain tail; chains
    // occupy contiguous index blocks in order.
    let n = plant.n();
    let mut tails = Vec::with_capacity(m);
    for j in 0..m {
        let col = plant.b.column(j);
        let mut tail = None;
        for i in 0..n {
            let v = col[i];
            if v == 1.0 {
                if tail.is_some() {
                    return false;
                }
                tail = Some(i);
            } else if v != 0.0 {
                return false;
            }
        }
        match tail {
            Some(t) => tails.push(t),
            None => return false,
        }
    }
    let mut kappa = Vec::with_capacity(m);
    let mut start = 0usize;
    for &t in &tails {
        if t < start {
            return false;
        }
        kappa.push(t - start + 1);
        start = t + 1;
    }
    if start != n {
        return false;
    }
    match make_prime(&kappa) {
        Ok(reference) => {
            plant.a == reference.a
                && plant.b == reference.b
                && plant.c == reference.c
        }
        Err(_) => false,
    }
}

/// Builds the canonical parallel shift-chain system for the given chain
/// lengths, with one output per chain tapping the chain head (`p = m`).
pub fn make_prime(kappa: &[usize]) -> Result<BarePlant> {
    if kappa.is_empty() || kappa.iter().any(|&k| k == 0) {
        return Err(Error::BadChainIndices);
    }
    let m = kappa.len();
    let n: usize = kappa.iter().sum();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut c = DMatrix::zeros(m, n);
    let mut offset = 0usize;
    for (i, &k) in kappa.iter().enumerate() {
        for l in 0..k - 1 {
            a[(offset + l, offset + l + 1)] = 1.0;
        }
        b[(offset + k - 1, i)] = 1.0;
        c[(i, offset)] = 1.0;
        offset += k;
    }
    BarePlant::new(a, b, c, DVector::zeros(n), DVector::zeros(m))
}

/// Samples a random controllable and observable plant with entries uniform on
/// `[-1, 1]`, rejecting numerically marginal draws so that downstream rank
/// decisions have a clean singular-value gap.
pub fn random_plant<R: Rng>(n: usize, m: usize, p: usize, rng: &mut R) -> BarePlant {
    loop {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let c_const = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let d_const = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let reach = linalg::reachability_matrix(&a, &b, n.saturating_sub(1));
        let obs = linalg::observability_matrix(&a, &c, n.saturating_sub(1));
        if !has_clean_rank(&reach, n) || !has_clean_rank(&obs, n) {
            continue;
        }
        if let Ok(plant) = BarePlant::new(a, b, c, c_const, d_const) {
            return plant;
        }
    }
}

fn has_clean_rank(mat: &DMatrix<f64>, want: usize) -> bool {
    let sv = mat.clone().svd(false, false).singular_values;
    if sv.len() < want {
        return false;
    }
    let smax = sv.max();
    if smax == 0.0 {
        return false;
    }
    // require the decisive singular value to sit well above the cutoff band
    sv.iter().take(want).all(|&s| s > 1e-6 * smax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn double_integrator() -> BarePlant {
        BarePlant::new(
            dmatrix![1.0, 1.0; 0.0, 1.0],
            dmatrix![0.0; 1.0],
            dmatrix![1.0, 0.0],
            dvector![0.0, 0.0],
            dvector![0.0],
        )
        .unwrap()
    }

    #[test]
    fn lift_affine_block_layout() {
        let w = dmatrix![2.0];
        let v = dvector![3.0];
        let l = lift_affine(&w, &v).unwrap();
        assert_eq!(l, dmatrix![2.0, 3.0; 0.0, 1.0]);

        let id = DMatrix::<f64>::identity(2, 2);
        let l = lift_affine(&id, &DVector::zeros(2)).unwrap();
        assert_eq!(l, DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn lift_affine_applies_affine_map() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let l = lift_affine(&w, &v).unwrap();
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
            let mut xl = DVector::zeros(3);
            xl.rows_mut(0, 2).copy_from(&x);
            xl[2] = 1.0;
            let got = &l * &xl;
            let want = &w * &x + &v;
            for i in 0..3 {
                assert!((got[i] - want[i]).abs() < 1e-12);
            }
            assert!((got[3] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lift_affine_dimension_mismatch() {
        let w = dmatrix![1.0, 0.0];
        let v = dvector![1.0, 2.0];
        assert!(lift_affine(&w, &v).is_err());
    }

    #[test]
    fn lift_system_double_integrator_layout() {
        let sys = lift_system(&double_integrator()).unwrap();
        assert_eq!(
            sys.a(),
            &dmatrix![1.0, 1.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 1.0]
        );
        assert_eq!(sys.b(), &dmatrix![0.0; 1.0; 0.0]);
        assert_eq!(sys.c(), &dmatrix![1.0, 0.0, 0.0; 0.0, 0.0, 1.0]);
    }

    #[test]
    fn lifted_matches_affine_recursion() {
        // plant with nonzero offsets: lifted trajectory must reproduce the
        // bare affine recursion
        let plant = BarePlant::new(
            dmatrix![0.4, 0.8; -0.3, 0.5],
            dmatrix![0.0; 1.0],
            dmatrix![1.0, 0.3],
            dvector![0.2, -0.1],
            dvector![0.4],
        )
        .unwrap();
        let sys = lift_system(&plant).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut x_bare = dvector![0.7, -0.2];
        let mut x_lift = sys.lift_state(&x_bare);
        for _ in 0..10 {
            let u = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
            let y_bare = plant.output(&x_bare);
            let y_lift = sys.output(&x_lift);
            for i in 0..1 {
                assert!((y_bare[i] - y_lift[i]).abs() < 1e-12);
            }
            assert!((y_lift[1] - 1.0).abs() < 1e-15);
            x_bare = plant.step(&x_bare, &u);
            x_lift = sys.step(&x_lift, &u);
            for i in 0..2 {
                assert!((x_bare[i] - x_lift[i]).abs() < 1e-12);
            }
            assert!((x_lift[2] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_input_column_rejected() {
        let err = BarePlant::new(
            dmatrix![1.0, 1.0; 0.0, 1.0],
            dmatrix![1.0, 1.0; 1.0, 1.0],
            dmatrix![1.0, 0.0],
            dvector![0.0, 0.0],
            dvector![0.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InputRankDeficient { .. }));
    }

    #[test]
    fn structure_of_single_chain() {
        let prime = make_prime(&[2]).unwrap();
        let rep = structure_report(&prime).unwrap();
        assert_eq!(rep.rank_increments, vec![1, 1]);
        assert_eq!(rep.controllability_indices, vec![2]);
        assert!(rep.is_brunovsky_form);
        assert_eq!(prime.c, dmatrix![1.0, 0.0]);
    }

    #[test]
    fn double_integrator_not_chain_form() {
        let rep = structure_report(&double_integrator()).unwrap();
        assert_eq!(rep.rank_increments, vec![1, 1]);
        assert_eq!(rep.controllability_indices, vec![2]);
        assert!(!rep.is_brunovsky_form);
    }

    #[test]
    fn structure_of_two_chains() {
        let prime = make_prime(&[2, 1]).unwrap();
        let rep = structure_report(&prime).unwrap();
        assert_eq!(rep.rank_increments, vec![2, 1]);
        assert_eq!(rep.controllability_indices, vec![2, 1]);
        assert!(rep.is_brunovsky_form);
    }

    #[test]
    fn make_prime_smallest_chain() {
        let sys = make_prime(&[1]).unwrap();
        assert_eq!(sys.a, DMatrix::zeros(1, 1));
        assert_eq!(sys.b, dmatrix![1.0]);
        assert_eq!(sys.c, dmatrix![1.0]);
    }

    #[test]
    fn make_prime_mixed_chains_valid() {
        let sys = make_prime(&[2, 2, 1]).unwrap();
        assert_eq!(sys.n(), 5);
        assert_eq!(sys.m(), 3);
        assert_eq!(sys.p(), 3);
        // validity (controllable + observable) is enforced by the constructor
        let rep = structure_report(&sys).unwrap();
        assert!(rep.is_brunovsky_form);
        assert_eq!(rep.rank_increments, vec![3, 2]);
    }

    #[test]
    fn make_prime_rejects_empty() {
        assert!(make_prime(&[]).is_err());
        assert!(make_prime(&[2, 0]).is_err());
    }

    #[test]
    fn lift_then_extract_roundtrip() {
        let plant = BarePlant::new(
            dmatrix![0.4, 0.8; -0.3, 0.5],
            dmatrix![0.2; 1.0],
            dmatrix![1.0, 0.3],
            dvector![0.2, -0.1],
            dvector![0.4],
        )
        .unwrap();
        let sys = lift_system(&plant).unwrap();
        let back = sys.to_bare();
        assert_eq!(back, plant);
        let again = lift_system(&back).unwrap();
        assert_eq!(again, sys);
    }

    #[test]
    fn partition_duality_over_random_plants() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = rng.random_range(1..=8usize);
            let m = rng.random_range(1..=3usize.min(n));
            let p = rng.random_range(1..=3usize.min(n));
            let plant = random_plant(n, m, p, &mut rng);
            let rep = structure_report(&plant).unwrap();
            let total: usize = rep.controllability_indices.iter().sum();
            assert_eq!(total, n, "trial {trial}: indices must sum to n");
            assert_eq!(rep.rank_increments[0], m, "r1 = rank B = m");
            for w in rep.rank_increments.windows(2) {
                assert!(w[0] >= w[1], "rank increments must be nonincreasing");
            }
            // conjugate partition duality: conjugating kappa recovers r
            let kmax = rep.controllability_indices[0];
            let r_back: Vec<usize> = (1..=kmax)
                .map(|i| {
                    rep.controllability_indices
                        .iter()
                        .filter(|&&k| k >= i)
                        .count()
                })
                .collect();
            assert_eq!(r_back, rep.rank_increments);
        }
    }

    #[test]
    fn structure_report_needs_controllability() {
        // two identical decoupled modes driven through one input channel
        let a = dmatrix![0.5, 0.0; 0.0, 0.5];
        let b = dmatrix![1.0; 1.0];
        let plant = BarePlant {
            a,
            b,
            c: dmatrix![1.0, 0.0],
            c_const: dvector![0.0, 0.0],
            d_const: dvector![0.0],
        };
        assert!(matches!(
            structure_report(&plant),
            Err(Error::NotControllable { .. })
        ));
    }

    #[test]
    fn rank_decisions_invariant_under_scaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let plant = random_plant(4, 2, 2, &mut rng);
        let base = structure_report(&plant).unwrap();
        for s in [0.5, 0.9, 1.7, 2.0] {
            let scaled = BarePlant::new(
                plant.a.clone() * s,
                plant.b.clone() * s,
                plant.c.clone() * s,
                plant.c_const.clone() * s,
                plant.d_const.clone() * s,
            )
            .unwrap();
            let rep = structure_report(&scaled).unwrap();
            assert_eq!(rep.rank_increments, base.rank_increments);
            assert_eq!(
                rep.controllability_indices,
                base.controllability_indices
            );
        }
    }
}
