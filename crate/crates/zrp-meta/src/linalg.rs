//! Thin wrappers over faer: sparse LU for harmonic systems, dense solves and
//! the exponential of a symmetric generator.

use faer::prelude::*;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};

use crate::error::{Error, Result};

/// Relative residual accepted after one refinement step.
const RESIDUAL_TOL: f64 = 1e-11;

/// Factorized sparse square matrix.
pub struct SparseLu {
    n: usize,
    mat: SparseColMat<usize, f64>,
    lu: Lu<usize, f64>,
}

impl SparseLu {
    /// Duplicate `(row, col)` entries are summed.
    pub fn new(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let trip: Vec<Triplet<usize, usize, f64>> = entries
            .iter()
            .map(|&(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::SolverFailure(format!("assembly: {e:?}")))?;
        let lu = mat
            .sp_lu()
            .map_err(|e| Error::SolverFailure(format!("factorization: {e:?}")))?;
        Ok(Self { n, mat, lu })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &Col<f64>) -> Col<f64> {
        &self.mat * x
    }

    /// Solves `A x = b` with one step of iterative refinement and a residual check.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(b.len(), self.n);
        if self.n == 0 {
            return Ok(Vec::new());
        }
        let rhs = Col::from_fn(self.n, |i| b[i]);
        let mut x = self.lu.solve(&rhs);
        let r = &rhs - self.apply(&x);
        let dx = self.lu.solve(&r);
        x += dx;
        let res = &rhs - self.apply(&x);
        let bnorm = rhs.norm_max();
        let xnorm = x.norm_max();
        let scale = bnorm.max(xnorm * self.row_scale()).max(f64::MIN_POSITIVE);
        let rel = res.norm_max() / scale;
        if !rel.is_finite() || rel > RESIDUAL_TOL {
            return Err(Error::SolverFailure(format!("relative residual {rel:.3e}")));
        }
        Ok((0..self.n).map(|i| x[i]).collect())
    }

    fn row_scale(&self) -> f64 {
        self.mat.val().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Dense solve with partial pivoting; used for the walk on `S`.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let m = Mat::from_fn(n, n, |i, j| a[i][j]);
    let rhs = Col::from_fn(n, |i| b[i]);
    let x = m.partial_piv_lu().solve(&rhs);
    (0..n).map(|i| x[i]).collect()
}

/// `exp(t Q)` for a generator `Q` that is symmetric (reversible with uniform
/// stationary law), via the symmetric eigendecomposition.
pub fn symmetric_expm(q: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
    let n = q.len();
    let m = Mat::from_fn(n, n, |i, j| q[i][j]);
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::SolverFailure(format!("eigendecomposition: {e:?}")))?;
    let u = evd.U();
    let s = evd.S().column_vector();
    let mut out = vec![vec![0.0; n]; n];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..n {
                acc += u[(i, k)] * (t * s[k]).exp() * u[(j, k)];
            }
            *v = acc;
        }
    }
    Ok(out)
}

/// Eigenvalues and orthonormal eigenvectors (as columns, `vecs[i][k]`) of a symmetric matrix.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    let m = Mat::from_fn(n, n, |i, j| a[i][j]);
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::SolverFailure(format!("eigendecomposition: {e:?}")))?;
    let u = evd.U();
    let s = evd.S().column_vector();
    Ok(((0..n).map(|k| s[k]).collect(), (0..n).map(|i| (0..n).map(|k| u[(i, k)]).collect()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_solve() {
        let n = 50;
        let mut e = Vec::new();
        for i in 0..n {
            e.push((i, i, 2.0));
            if i > 0 {
                e.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                e.push((i, i + 1, -1.0));
            }
        }
        let lu = SparseLu::new(n, &e).unwrap();
        let mut b = vec![0.0; n];
        b[0] = 1.0;
        let x = lu.solve(&b).unwrap();
        // discrete harmonic with x_{-1} = 1, x_n = 0 boundary
        for (i, xi) in x.iter().enumerate() {
            let exact = (n - i) as f64 / (n + 1) as f64;
            assert!((xi - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn two_state_exponential() {
        let a = 3.0;
        let q = vec![vec![-a, a], vec![a, -a]];
        let p = symmetric_expm(&q, 0.1).unwrap();
        let stay = 0.5 * (1.0 + (-2.0 * a * 0.1f64).exp());
        assert!((p[0][0] - stay).abs() < 1e-14);
        assert!((p[0][1] - (1.0 - stay)).abs() < 1e-14);
    }
}
