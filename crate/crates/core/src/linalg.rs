//! Dense symmetric linear algebra: Cholesky solves, Jacobi eigendecomposition,
//! and the matrix-exponential action needed by the closed-form dynamics.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// A dense symmetric matrix of 64-bit floats.
///
/// Symmetry is validated at construction (tolerance 1e-12 scaled by the
/// largest entry) and the stored matrix is exactly symmetrized afterwards.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c || r == 0 {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: c,
                context: "SymMatrix must be square and nonempty",
            });
        }
        let scale = 1.0 + data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..r {
            for j in (i + 1)..r {
                if (data[[i, j]] - data[[j, i]]).abs() > 1e-12 * scale {
                    return Err(Error::LayoutMismatch {
                        context: "matrix is not symmetric within 1e-12",
                    });
                }
            }
        }
        Ok(Self::symmetrize(data))
    }

    /// Averages the matrix with its transpose; for inputs that are symmetric
    /// up to rounding this removes the rounding skew.
    pub fn symmetrize(mut data: Array2<f64>) -> Self {
        let n = data.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (data[[i, j]] + data[[j, i]]);
                data[[i, j]] = v;
                data[[j, i]] = v;
            }
        }
        SymMatrix { data }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending,
/// eigenvectors as orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigDecomp {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

impl EigDecomp {
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Applies `Q f(Lambda) Q^T` to `v`.
    pub fn apply_spectral(&self, f: impl Fn(f64) -> f64, v: &Array1<f64>) -> Array1<f64> {
        let coeffs = self.eigenvectors.t().dot(v);
        let scaled = Array1::from_iter(
            coeffs
                .iter()
                .zip(self.eigenvalues.iter())
                .map(|(&c, &l)| c * f(l)),
        );
        self.eigenvectors.dot(&scaled)
    }
}

/// Lower-triangular Cholesky factor of `A`, or `None` if a pivot is not positive.
fn cholesky_factor(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(l)
}

fn solve_with_factor(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let k = b.ncols();
    let mut x = b.clone();
    // forward: L z = b
    for col in 0..k {
        for i in 0..n {
            let mut s = x[[i, col]];
            for j in 0..i {
                s -= l[[i, j]] * x[[j, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
        // backward: L^T x = z
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for j in (i + 1)..n {
                s -= l[[j, i]] * x[[j, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    x
}

/// Solves `(A + jitter I) X = B` for symmetric positive-definite `A`.
///
/// If the first factorization fails, one retry with an extra jitter of
/// `1e-10 * trace(A) / dim` is made before reporting `NotPositiveDefinite`.
pub fn cholesky_solve(a: &SymMatrix, b: &Array2<f64>, jitter: f64) -> Result<Array2<f64>> {
    let n = a.dim();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.nrows(),
            context: "cholesky_solve rhs rows",
        });
    }
    let shifted = |j: f64| {
        let mut m = a.as_array().clone();
        for i in 0..n {
            m[[i, i]] += j;
        }
        m
    };
    if let Some(l) = cholesky_factor(&shifted(jitter)) {
        return Ok(solve_with_factor(&l, b));
    }
    let fallback = jitter + 1e-10 * a.trace() / n as f64;
    match cholesky_factor(&shifted(fallback)) {
        Some(l) => Ok(solve_with_factor(&l, b)),
        None => Err(Error::NotPositiveDefinite),
    }
}

/// Convenience wrapper for a single right-hand side.
pub fn cholesky_solve_vec(a: &SymMatrix, b: &Array1<f64>, jitter: f64) -> Result<Array1<f64>> {
    let col = b
        .view()
        .into_shape_with_order((b.len(), 1))
        .expect("column reshape");
    Ok(cholesky_solve(a, &col.to_owned(), jitter)?.column(0).to_owned())
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Deterministic and accurate for the Gram matrices in scope (N up to a few
/// thousand). Fails with `NoConvergence` if the off-diagonal mass has not
/// vanished after 100 sweeps.
pub fn sym_eig(a: &SymMatrix) -> Result<EigDecomp> {
    let n = a.dim();
    let mut m = a.as_array().clone();
    let mut q = Array2::<f64>::eye(n);
    if n == 1 {
        return Ok(EigDecomp {
            eigenvalues: Array1::from_elem(1, m[[0, 0]]),
            eigenvectors: q,
        });
    }
    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        let scale = m.diag().iter().map(|v| v * v).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = m[[p, r]];
                if apr == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let arr = m[[r, r]];
                // Rotation angle from Numerical Recipes 11.1.
                let theta = (arr - app) / (2.0 * apr);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkr = m[[k, r]];
                    m[[k, p]] = c * mkp - s * mkr;
                    m[[k, r]] = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mrk = m[[r, k]];
                    m[[p, k]] = c * mpk - s * mrk;
                    m[[r, k]] = s * mpk + c * mrk;
                }
                m[[p, r]] = 0.0;
                m[[r, p]] = 0.0;
                for k in 0..n {
                    let qkp = q[[k, p]];
                    let qkr = q[[k, r]];
                    q[[k, p]] = c * qkp - s * qkr;
                    q[[k, r]] = s * qkp + c * qkr;
                }
            }
        }
    }
    if !converged {
        // Final check after the last sweep.
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        let scale = m.diag().iter().map(|v| v * v).sum::<f64>().max(1e-300);
        if off > 1e-24 * scale {
            return Err(Error::NoConvergence {
                sweeps: JACOBI_MAX_SWEEPS,
            });
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let eigenvalues = Array1::from_iter(idx.iter().map(|&i| m[[i, i]]));
    let mut eigenvectors = Array2::<f64>::zeros((n, n));
    for (new, &old) in idx.iter().enumerate() {
        eigenvectors.column_mut(new).assign(&q.column(old));
    }
    Ok(EigDecomp {
        eigenvalues,
        eigenvectors,
    })
}

/// Computes `exp(-t A) V = Q exp(-t Lambda) Q^T V` for symmetric `A`, `t >= 0`.
pub fn exp_action(a: &SymMatrix, t: f64, v: &Array2<f64>) -> Result<Array2<f64>> {
    assert!(t >= 0.0, "exp_action requires t >= 0");
    if v.nrows() != a.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: v.nrows(),
            context: "exp_action operand rows",
        });
    }
    if t == 0.0 {
        return Ok(v.clone());
    }
    let eig = sym_eig(a)?;
    let coeffs = eig.eigenvectors.t().dot(v);
    let mut scaled = coeffs;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let factor = (-t * l).exp();
        scaled.row_mut(i).mapv_inplace(|x| x * factor);
    }
    Ok(eig.eigenvectors.dot(&scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array2};

    fn random_matrix(n: usize, k: usize, seed: u64) -> Array2<f64> {
        Array2::from_shape_fn((n, k), |(i, j)| {
            crate::rng::standard_normal(seed, 0xfeed, (i * k + j) as u64)
        })
    }

    /// Gauss-Jordan inverse, the independent oracle for the Cholesky solver.
    fn gauss_jordan_inverse(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut inv = Array2::<f64>::eye(n);
        for col in 0..n {
            let mut pivot = col;
            for r in (col + 1)..n {
                if m[[r, col]].abs() > m[[pivot, col]].abs() {
                    pivot = r;
                }
            }
            for j in 0..n {
                m.swap([col, j], [pivot, j]);
                inv.swap([col, j], [pivot, j]);
            }
            let d = m[[col, col]];
            for j in 0..n {
                m[[col, j]] /= d;
                inv[[col, j]] /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = m[[r, col]];
                    for j in 0..n {
                        m[[r, j]] -= f * m[[col, j]];
                        inv[[r, j]] -= f * inv[[col, j]];
                    }
                }
            }
        }
        inv
    }

    /// Counts eigenvalues of `A - x I` below zero via LDL^T inertia; used by
    /// the bisection oracle for eigenvalues.
    fn eigenvalues_below(a: &Array2<f64>, x: f64) -> usize {
        let n = a.nrows();
        let mut m = a.clone();
        for i in 0..n {
            m[[i, i]] -= x;
        }
        // LDL^T without pivoting; shift x slightly if a pivot vanishes.
        let mut d = vec![0.0f64; n];
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut dj = m[[j, j]];
            for k in 0..j {
                dj -= l[[j, k]] * l[[j, k]] * d[k];
            }
            if dj == 0.0 {
                dj = 1e-300;
            }
            d[j] = dj;
            for i in (j + 1)..n {
                let mut s = m[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]] * d[k];
                }
                l[[i, j]] = s / dj;
            }
        }
        d.iter().filter(|&&v| v < 0.0).count()
    }

    /// Bisection oracle: the k-th smallest eigenvalue of symmetric `A`.
    fn eigenvalue_oracle(a: &Array2<f64>, k: usize) -> f64 {
        let n = a.nrows();
        let bound = a
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
            * n as f64
            + 1.0;
        let (mut lo, mut hi) = (-bound, bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if eigenvalues_below(a, mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cholesky_identity() {
        let a = SymMatrix::new(Array2::eye(3)).unwrap();
        let b = random_matrix(3, 2, 1);
        let x = cholesky_solve(&a, &b, 0.0).unwrap();
        assert!((&x - &b).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn cholesky_diagonal() {
        let a = SymMatrix::new(arr2(&[[2.0, 0.0], [0.0, 2.0]])).unwrap();
        let b = arr1(&[2.0, 4.0]);
        let x = cholesky_solve_vec(&a, &b, 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
        assert!((x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cholesky_matches_gauss_jordan_oracle() {
        let m = random_matrix(5, 5, 7);
        let a_raw = m.t().dot(&m) + Array2::<f64>::eye(5);
        let b = random_matrix(5, 3, 8);
        let a = SymMatrix::new(a_raw.clone()).unwrap();
        let x = cholesky_solve(&a, &b, 0.0).unwrap();
        let expected = gauss_jordan_inverse(&a_raw).dot(&b);
        let err = (&x - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "max err {err}");
    }

    #[test]
    fn cholesky_not_positive_definite() {
        let a = SymMatrix::new(arr2(&[[1.0, 2.0], [2.0, 1.0]])).unwrap();
        let b = arr1(&[1.0, 1.0]);
        assert!(matches!(
            cholesky_solve_vec(&a, &b, 0.0),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn eig_diagonal() {
        let a = SymMatrix::new(arr2(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]])).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 2.0).abs() < 1e-14);
        assert!((e.eigenvalues[2] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn eig_two_by_two_analytic() {
        let a = SymMatrix::new(arr2(&[[0.0, 1.0], [1.0, 0.0]])).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!((e.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig_matches_bisection_oracle() {
        let m = random_matrix(6, 6, 21);
        let a_raw = SymMatrix::symmetrize(m.t().dot(&m) - m.clone() - m.t().to_owned());
        let e = sym_eig(&a_raw).unwrap();
        for k in 0..6 {
            let oracle = eigenvalue_oracle(a_raw.as_array(), k);
            assert!(
                (e.eigenvalues[k] - oracle).abs() < 1e-8,
                "k={k}: {} vs oracle {oracle}",
                e.eigenvalues[k]
            );
        }
    }

    #[test]
    fn eig_reconstruction_and_orthonormality() {
        let m = random_matrix(8, 8, 33);
        let a = SymMatrix::symmetrize(m.clone() + m.t().to_owned());
        let e = sym_eig(&a).unwrap();
        let qtq = e.eigenvectors.t().dot(&e.eigenvectors);
        let eye: Array2<f64> = Array2::eye(8);
        let ortho_err = (&qtq - &eye).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(ortho_err < 1e-10, "orthonormality {ortho_err}");
        let lam = Array2::from_diag(&e.eigenvalues);
        let rec = e.eigenvectors.dot(&lam).dot(&e.eigenvectors.t());
        let num = (&rec - a.as_array()).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = a.as_array().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-9, "reconstruction {}", num / den);
    }

    #[test]
    fn eig_trace_and_determinant() {
        let m = random_matrix(6, 6, 55);
        let a = SymMatrix::symmetrize(m.clone() + m.t().to_owned());
        let e = sym_eig(&a).unwrap();
        let tr = a.trace();
        let sum: f64 = e.eigenvalues.sum();
        assert!((sum - tr).abs() <= 1e-9 * tr.abs().max(1.0));
        // determinant oracle: product of LDL^T pivots
        let n = 6;
        let mut det_pivots = 1.0;
        {
            let mut mm = a.as_array().clone();
            for col in 0..n {
                let mut pivot = col;
                for r in (col + 1)..n {
                    if mm[[r, col]].abs() > mm[[pivot, col]].abs() {
                        pivot = r;
                    }
                }
                if pivot != col {
                    for j in 0..n {
                        mm.swap([col, j], [pivot, j]);
                    }
                    det_pivots = -det_pivots;
                }
                det_pivots *= mm[[col, col]];
                for r in (col + 1)..n {
                    let f = mm[[r, col]] / mm[[col, col]];
                    for j in col..n {
                        mm[[r, j]] -= f * mm[[col, j]];
                    }
                }
            }
        }
        let prod: f64 = e.eigenvalues.iter().product();
        assert!(
            (prod - det_pivots).abs() <= 1e-8 * det_pivots.abs().max(1.0),
            "{prod} vs {det_pivots}"
        );
    }

    #[test]
    fn exp_action_t_zero_is_identity() {
        let m = random_matrix(4, 4, 3);
        let a = SymMatrix::symmetrize(m.clone() + m.t().to_owned());
        let v = random_matrix(4, 2, 4);
        let out = exp_action(&a, 0.0, &v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn exp_action_identity_matrix() {
        let a = SymMatrix::new(Array2::eye(3)).unwrap();
        let v = random_matrix(3, 2, 5);
        let out = exp_action(&a, std::f64::consts::LN_2, &v).unwrap();
        let err = (&out - &(&v / 2.0)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-14, "err {err}");
    }

    #[test]
    fn exp_action_matches_taylor_series_oracle() {
        let m = random_matrix(4, 4, 9);
        let a = SymMatrix::symmetrize(0.5 * (&m + &m.t().to_owned()));
        let v = random_matrix(4, 3, 10);
        let t = 0.7;
        // 50-term Taylor series of exp(-tA)V
        let mut term = v.clone();
        let mut sum = v.clone();
        for k in 1..=50 {
            term = a.as_array().dot(&term) * (-t / k as f64);
            sum = sum + &term;
        }
        let out = exp_action(&a, t, &v).unwrap();
        let err = (&out - &sum).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-9, "err {err}");
    }
}
