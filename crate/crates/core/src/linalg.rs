//! Dense small-matrix linear algebra: orthonormal frames, a cyclic Jacobi
//! eigensolver, central-difference Jacobians and Morse-index counting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaddleError};
use crate::force::ForceOracle;

/// A point in the search space.
pub type StateVector = DVector<f64>;

/// Residual threshold below which Gram-Schmidt treats a vector as dependent.
pub const GS_DEGENERACY_TOL: f64 = 1e-12;

/// Largest matrix order accepted by [`sym_eigen`] by default.
pub const DEFAULT_DENSE_LIMIT: usize = 512;

const JACOBI_MAX_SWEEPS: usize = 100;

/// An ordered set of `k` orthonormal vectors in `R^N` spanning the current
/// approximation of the unstable subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionFrame {
    dim: usize,
    vectors: Vec<DVector<f64>>,
}

impl DirectionFrame {
    /// A frame with no vectors; used by index-0 (minimum) searches.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
        }
    }

    /// Wraps vectors that are already orthonormal, checking the claim to 1e-10.
    pub fn from_orthonormal(dim: usize, vectors: Vec<DVector<f64>>) -> Result<Self> {
        let frame = Self { dim, vectors };
        frame.check_dims()?;
        if frame.count() > dim {
            return Err(SaddleError::InvalidArgument(format!(
                "frame of {} vectors in dimension {dim}",
                frame.count()
            )));
        }
        let err = frame.orthonormality_error();
        if err > 1e-10 {
            return Err(SaddleError::DegenerateInput(format!(
                "vectors are not orthonormal (max |V^T V - I| = {err:e})"
            )));
        }
        Ok(frame)
    }

    fn check_dims(&self) -> Result<()> {
        for v in &self.vectors {
            if v.len() != self.dim {
                return Err(SaddleError::DimensionMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[DVector<f64>] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<DVector<f64>> {
        self.vectors
    }

    /// The first `m` vectors as a frame of their own.
    pub fn truncated(&self, m: usize) -> Self {
        Self {
            dim: self.dim,
            vectors: self.vectors.iter().take(m).cloned().collect(),
        }
    }

    /// Frame vectors as the columns of an `N x k` matrix.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.count(), |i, j| self.vectors[j][i])
    }

    /// `max |V^T V - I|` over all entries.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.count();
        let mut worst = 0.0_f64;
        for i in 0..k {
            for j in i..k {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((self.vectors[i].dot(&self.vectors[j]) - target).abs());
            }
        }
        worst
    }

    /// Applies `I - 2 V V^T` to `f`: flips the components along the frame.
    pub fn reflect(&self, f: &DVector<f64>) -> DVector<f64> {
        let mut out = f.clone();
        for v in &self.vectors {
            let c = v.dot(f);
            out.axpy(-2.0 * c, v, 1.0);
        }
        out
    }
}

/// Orthonormalizes `vectors` in order.
///
/// The i-th output is the normalized residual of the i-th input after
/// removing its projections onto the earlier outputs, so it always has a
/// positive inner product with that residual. Two projection passes are
/// made per vector to keep `|Q^T Q - I|` at round-off level.
pub fn gram_schmidt(vectors: &[DVector<f64>]) -> Result<DirectionFrame> {
    let Some(first) = vectors.first() else {
        return Err(SaddleError::InvalidArgument(
            "gram_schmidt needs at least one vector".into(),
        ));
    };
    let dim = first.len();
    if vectors.len() > dim {
        return Err(SaddleError::DegenerateInput(format!(
            "{} vectors cannot be independent in dimension {dim}",
            vectors.len()
        )));
    }
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(SaddleError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        let norm = v.norm();
        if !norm.is_finite() || norm < GS_DEGENERACY_TOL {
            return Err(SaddleError::DegenerateInput(format!(
                "vector {i} has norm {norm:e}"
            )));
        }
        let mut w = v / norm;
        for _ in 0..2 {
            for q in &out {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let residual = w.norm();
        if residual < GS_DEGENERACY_TOL {
            return Err(SaddleError::DegenerateInput(format!(
                "vector {i} is linearly dependent on its predecessors (residual {residual:e})"
            )));
        }
        out.push(w / residual);
    }
    Ok(DirectionFrame { dim, vectors: out })
}

/// A square matrix with exactly symmetric storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Symmetrizes `m` as `(M + M^T) / 2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(SaddleError::InvalidArgument(format!(
                "matrix is {}x{}, not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        let mut s = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        Ok(Self(s))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn eigenvector(&self, i: usize) -> DVector<f64> {
        self.eigenvectors.column(i).into_owned()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()))
    }
}

/// Cyclic Jacobi eigensolver with the default dense limit.
pub fn sym_eigen(a: &SymmetricMatrix) -> Result<EigenDecomposition> {
    sym_eigen_with_limit(a, DEFAULT_DENSE_LIMIT)
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
///
/// Eigenvectors are sign-fixed so their first non-negligible entry is
/// positive.
pub fn sym_eigen_with_limit(a: &SymmetricMatrix, dense_limit: usize) -> Result<EigenDecomposition> {
    let n = a.dim();
    if n > dense_limit {
        return Err(SaddleError::InvalidArgument(format!(
            "matrix order {n} exceeds dense limit {dense_limit}"
        )));
    }
    let mut m = a.matrix().clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let total = m.norm();
    if n == 0 || total == 0.0 {
        return Ok(finish_eigen(m.diagonal().iter().copied().collect(), v));
    }

    let off_norm = |m: &DMatrix<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[(i, j)] * m[(i, j)];
            }
        }
        (2.0 * s).sqrt()
    };

    let target = 1e-14 * total;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&m) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                // skip rotations that cannot change the diagonal at working precision
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off = off_norm(&m);
        if off > target {
            return Err(SaddleError::ConvergenceFailure {
                sweeps: JACOBI_MAX_SWEEPS,
                off_norm: off,
            });
        }
    }
    Ok(finish_eigen(m.diagonal().iter().copied().collect(), v))
}

fn finish_eigen(values: Vec<f64>, vectors: DMatrix<f64>) -> EigenDecomposition {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let eigenvalues = order.iter().map(|&i| values[i]).collect();
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = vectors.column(src).into_owned();
        fix_sign(&mut col);
        eigenvectors.set_column(dst, &col);
    }
    EigenDecomposition {
        eigenvalues,
        eigenvectors,
    }
}

/// Flips `v` so its first entry with magnitude above 1e-12 is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let scale = v.amax().max(f64::MIN_POSITIVE);
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-12 * scale.max(1.0)) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Central-difference Jacobian of `force` at `x`, symmetrized.
///
/// Costs exactly `2N` force queries.
pub fn fd_jacobian_sym(force: &ForceOracle, x: &StateVector, step: f64) -> Result<SymmetricMatrix> {
    if !(step > 0.0) {
        return Err(SaddleError::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let n = force.dim();
    if x.len() != n {
        return Err(SaddleError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let mut jac = DMatrix::zeros(n, n);
    let mut probe = x.clone();
    for i in 0..n {
        probe[i] = x[i] + step;
        let fp = force.evaluate(&probe)?;
        probe[i] = x[i] - step;
        let fm = force.evaluate(&probe)?;
        probe[i] = x[i];
        jac.set_column(i, &((fp - fm) / (2.0 * step)));
    }
    SymmetricMatrix::new(jac)
}

/// Counts of unstable and near-zero eigenvalues of `H = dF/dx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorseIndex {
    pub index: usize,
    pub degenerate: usize,
}

/// Unstable directions of the energy are positive eigenvalues of `H = -Hess E`.
pub fn morse_index(eig: &EigenDecomposition, zero_tol: f64) -> MorseIndex {
    let index = eig.eigenvalues.iter().filter(|&&l| l > zero_tol).count();
    let degenerate = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l.abs() <= zero_tol)
        .count();
    MorseIndex { index, degenerate }
}

/// `1e-6 * max(1, spectral radius)`.
pub fn default_zero_tol(eig: &EigenDecomposition) -> f64 {
    1e-6 * eig.spectral_radius().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::force::{FnForce, ForceOracle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn random_sym(n: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymmetricMatrix::new(&m + m.transpose()).unwrap()
    }

    #[test]
    fn gram_schmidt_keeps_orthonormal_input() {
        let f = gram_schmidt(&[dv(&[1.0, 0.0]), dv(&[0.0, 1.0])]).unwrap();
        assert_eq!(f.vectors()[0], dv(&[1.0, 0.0]));
        assert_eq!(f.vectors()[1], dv(&[0.0, 1.0]));
    }

    #[test]
    fn gram_schmidt_one_projection() {
        let f = gram_schmidt(&[dv(&[2.0, 0.0]), dv(&[1.0, 1.0])]).unwrap();
        assert!((&f.vectors()[0] - dv(&[1.0, 0.0])).amax() < 1e-15);
        assert!((&f.vectors()[1] - dv(&[0.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn gram_schmidt_random_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<_> = (0..3)
            .map(|_| DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let f = gram_schmidt(&vs).unwrap();
        let q = f.as_matrix();
        let err = (q.transpose() * &q - DMatrix::identity(3, 3)).amax();
        assert!(err <= 1e-12, "{err}");
        // same orientation as the input residuals
        for (out, inp) in f.vectors().iter().zip(&vs) {
            assert!(out.dot(inp) > 0.0);
        }
    }

    #[test]
    fn gram_schmidt_rejects_dependent() {
        let err = gram_schmidt(&[dv(&[1.0, 1.0]), dv(&[2.0, 2.0])]).unwrap_err();
        assert!(matches!(err, SaddleError::DegenerateInput(_)));
        let err = gram_schmidt(&[dv(&[0.0, 0.0])]).unwrap_err();
        assert!(matches!(err, SaddleError::DegenerateInput(_)));
    }

    #[test]
    fn eigen_diagonal() {
        let e = sym_eigen(&SymmetricMatrix::from_diagonal(&[3.0, -1.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![-1.0, 3.0]);
    }

    #[test]
    fn eigen_two_by_two_swap() {
        let a = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let e = sym_eigen(&a).unwrap();
        assert!((e.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let s = 1.0 / 2f64.sqrt();
        assert!((e.eigenvector(0) - dv(&[s, -s])).amax() < 1e-14);
        assert!((e.eigenvector(1) - dv(&[s, s])).amax() < 1e-14);
    }

    #[test]
    fn eigen_random_reconstruction() {
        for seed in 0..5 {
            let a = random_sym(5, seed);
            let e = sym_eigen(&a).unwrap();
            let lam = DMatrix::from_diagonal(&DVector::from_vec(e.eigenvalues.clone()));
            let resid = (a.matrix() * &e.eigenvectors - &e.eigenvectors * lam).amax();
            assert!(resid <= 1e-10, "{resid}");
            for w in e.eigenvalues.windows(2) {
                assert!(w[0] <= w[1]);
            }
            let trace_err = (e.eigenvalues.iter().sum::<f64>() - a.trace()).abs();
            assert!(trace_err <= 1e-9 * a.frobenius_norm());
        }
    }

    #[test]
    fn eigen_rejects_over_limit() {
        let a = SymmetricMatrix::from_diagonal(&[1.0; 4]);
        assert!(sym_eigen_with_limit(&a, 3).is_err());
    }

    #[test]
    fn symmetric_matrix_symmetrizes() {
        let a = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0])).unwrap();
        assert_eq!(a.matrix()[(0, 1)], 3.0);
        assert_eq!(a.matrix()[(1, 0)], 3.0);
        assert!(SymmetricMatrix::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn fd_jacobian_exact_on_linear_force() {
        let a = random_sym(4, 11);
        let am = a.matrix().clone();
        let oracle = ForceOracle::new(FnForce::new(4, move |x| am.clone() * x));
        let x = dv(&[0.3, -1.0, 2.0, 0.5]);
        let j = fd_jacobian_sym(&oracle, &x, 1e-3).unwrap();
        assert!((j.matrix() - a.matrix()).amax() < 1e-10);
        assert_eq!(oracle.queries(), 8);
    }

    #[test]
    fn fd_jacobian_second_order() {
        // F(x) = -4x^3, exact derivative -12 at x = 1
        let oracle = ForceOracle::new(FnForce::new(1, |x| x.map(|v| -4.0 * v * v * v)));
        let x = dv(&[1.0]);
        let e1 = (fd_jacobian_sym(&oracle, &x, 1e-2).unwrap().matrix()[(0, 0)] + 12.0).abs();
        let e2 = (fd_jacobian_sym(&oracle, &x, 5e-3).unwrap().matrix()[(0, 0)] + 12.0).abs();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn morse_index_counts() {
        let e = sym_eigen(&SymmetricMatrix::from_diagonal(&[2.0, -1.0])).unwrap();
        assert_eq!(morse_index(&e, 1e-6), MorseIndex { index: 1, degenerate: 0 });
        let e = sym_eigen(&SymmetricMatrix::from_diagonal(&[-2.0, -1.0, -0.5])).unwrap();
        assert_eq!(morse_index(&e, 1e-6), MorseIndex { index: 0, degenerate: 0 });
        let e = sym_eigen(&SymmetricMatrix::from_diagonal(&[0.0, 1e-9, 1.0])).unwrap();
        assert_eq!(morse_index(&e, 1e-6), MorseIndex { index: 1, degenerate: 2 });
    }

    #[test]
    fn frame_reflect_flips_components() {
        let f = DirectionFrame::from_orthonormal(2, vec![dv(&[1.0, 0.0])]).unwrap();
        assert_eq!(f.reflect(&dv(&[1.0, 1.0])), dv(&[-1.0, 1.0]));
        assert!(DirectionFrame::from_orthonormal(2, vec![dv(&[1.0, 1.0])]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs(k: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
            proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, n), k)
        }

        proptest! {
            #[test]
            fn gram_schmidt_idempotent(raw in vecs(3, 5)) {
                let vs: Vec<_> = raw.iter().map(|v| DVector::from_vec(v.clone())).collect();
                if let Ok(f) = gram_schmidt(&vs) {
                    prop_assume!(f.vectors().iter().zip(&vs).all(|(q, v)| q.dot(v).abs() > 1e-6 * v.norm()));
                    let g = gram_schmidt(f.vectors()).unwrap();
                    for (a, b) in f.vectors().iter().zip(g.vectors()) {
                        prop_assert!((a - b).amax() <= 1e-12);
                    }
                }
            }

            #[test]
            fn index_counts_partition_dimension(raw in proptest::collection::vec(-1.0f64..1.0, 16)) {
                let m = DMatrix::from_vec(4, 4, raw);
                let a = SymmetricMatrix::new(&m + m.transpose()).unwrap();
                let neg = SymmetricMatrix::new(-a.matrix()).unwrap();
                let ea = sym_eigen(&a).unwrap();
                let en = sym_eigen(&neg).unwrap();
                let ia = morse_index(&ea, 1e-9);
                let ineg = morse_index(&en, 1e-9);
                prop_assert_eq!(ia.index + ineg.index + ia.degenerate, 4);
                prop_assert_eq!(ia.degenerate, ineg.degenerate);
            }

            #[test]
            fn fd_jacobian_of_quadratic_is_step_independent(raw in proptest::collection::vec(-1.0f64..1.0, 9), step in 1e-4f64..1e-1) {
                let m = DMatrix::from_vec(3, 3, raw);
                let h = &m + m.transpose();
                let hc = h.clone();
                let oracle = ForceOracle::new(FnForce::new(3, move |x| &hc * x + DVector::from_element(3, 0.5)));
                let x = DVector::from_vec(vec![0.2, -0.7, 1.3]);
                let j = fd_jacobian_sym(&oracle, &x, step).unwrap();
                prop_assert!((j.matrix() - &h).amax() <= 1e-8);
            }
        }
    }
}
