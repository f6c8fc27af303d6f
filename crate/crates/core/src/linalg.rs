//! Small dense kernels used by the per-node solver: a Cholesky factorization
//! for the cached local system and a cyclic Jacobi eigensolver for the
//! descent-condition check. Matrices here are at most a few hundred rows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric positive definite matrix. Only the lower
    /// triangle of `a` is read. On failure returns the index of the first
    /// non-positive pivot.
    pub fn factor(a: ArrayView2<f64>) -> Result<Self, usize> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = a[[j, j]];
            for k in 0..j {
                diag -= l[[j, k]] * l[[j, k]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(j);
            }
            let ljj = diag.sqrt();
            l[[j, j]] = ljj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / ljj;
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> ArrayView2<'_, f64> {
        self.lower.view()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let l = &self.lower;
        let mut y = b.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        y
    }

    /// Dense `A⁻¹`, column by column. Only for diagnostics and tests.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut inv = Array2::<f64>::zeros((n, n));
        let mut e = Array1::<f64>::zeros(n);
        for c in 0..n {
            e.fill(0.0);
            e[c] = 1.0;
            let col = self.solve(e.view());
            inv.column_mut(c).assign(&col);
        }
        inv
    }
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn symmetric_eigenvalues(a: ArrayView2<f64>) -> Array1<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigenvalues need a square matrix");
    let mut m = a.to_owned();
    // symmetrize against round-off in the caller's products
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    let scale = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = m.diag().to_vec();
    eig.sort_by(|a, b| a.total_cmp(b));
    Array1::from(eig)
}

/// `A Aᵀ` for a column-sample matrix `A` (rows are features).
pub fn gram(a: ArrayView2<f64>) -> Array2<f64> {
    a.dot(&a.t())
}

pub fn is_symmetric(a: ArrayView2<f64>, tol: f64) -> bool {
    a.nrows() == a.ncols()
        && a.indexed_iter()
            .all(|((i, j), v)| (v - a[[j, i]]).abs() <= tol * (1.0 + v.abs()))
}

pub fn squared_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v)
}

/// Euclidean norm of each row.
pub fn row_norms(a: ArrayView2<f64>) -> Array1<f64> {
    a.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_small_system() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let ch = Cholesky::factor(a.view()).unwrap();
        let b = array![1.0, -2.0, 0.5];
        let x = ch.solve(b.view());
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        let id = a.dot(&ch.inverse());
        for ((i, j), v) in id.indexed_iter() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert_eq!(Cholesky::factor(a.view()).unwrap_err(), 1);
        let z = Array2::<f64>::zeros((2, 2));
        assert_eq!(Cholesky::factor(z.view()).unwrap_err(), 0);
    }

    #[test]
    fn jacobi_eigenvalues_diagonal_and_2x2() {
        let d = array![[3.0, 0.0], [0.0, -1.0]];
        assert_eq!(symmetric_eigenvalues(d.view()).to_vec(), vec![-1.0, 3.0]);
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let e = symmetric_eigenvalues(a.view());
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_gram_has_zero_eigenvalue() {
        let z = array![[1.0, 2.0], [0.5, -1.0], [1.5, 1.0]];
        let e = symmetric_eigenvalues(gram(z.view()).view());
        assert!(e[0].abs() < 1e-12);
        assert!(e[2] > 0.0);
    }
}
