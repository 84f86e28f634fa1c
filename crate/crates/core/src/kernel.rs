//! Empirical NTK / NNGP Gram assembly, the noisy NTK-GP posterior mean, and
//! finite-time linearized predictions in function space for gradient flow and
//! gradient descent.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve_vec, sym_eig, SymMatrix};
use crate::net::{JacobianFactors, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramKind {
    Ntk,
    Nngp,
}

/// Kernel matrix with provenance. Rectangular in general (`rows` test points
/// by `cols` training points); symmetric PSD when the point sets coincide.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    entries: Array2<f64>,
    pub kind: GramKind,
    pub width_used: usize,
    pub seed_used: u64,
}

impl GramMatrix {
    pub fn new(entries: Array2<f64>, kind: GramKind, width_used: usize, seed_used: u64) -> Self {
        GramMatrix {
            entries,
            kind,
            width_used,
            seed_used,
        }
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Symmetrized `K + beta I` ready for solving; requires a square matrix.
    pub fn shifted_sym(&self, beta: f64) -> Result<SymMatrix> {
        if self.rows() != self.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.rows(),
                got: self.cols(),
                context: "square Gram matrix required",
            });
        }
        let mut m = self.entries.clone();
        for i in 0..m.nrows() {
            m[[i, i]] += beta;
        }
        Ok(SymMatrix::symmetrize(m))
    }
}

/// Empirical NTK from explicit Jacobian matrices: `J_test J_train^T`.
///
/// The caller is responsible for masking frozen blocks (see
/// `net::mask_jacobian`); `empirical_ntk_factored` does this automatically.
pub fn empirical_ntk(j_test: &Array2<f64>, j_train: &Array2<f64>) -> Result<GramMatrix> {
    if j_test.ncols() != j_train.ncols() {
        return Err(Error::DimensionMismatch {
            expected: j_train.ncols(),
            got: j_test.ncols(),
            context: "Jacobian parameter dimensions",
        });
    }
    Ok(GramMatrix::new(
        j_test.dot(&j_train.t()),
        GramKind::Ntk,
        0,
        0,
    ))
}

/// Empirical NTK assembled layerwise from Jacobian factors, restricted to
/// trainable blocks, without materializing the `N x p` Jacobian.
pub fn empirical_ntk_factored(
    f_test: &JacobianFactors,
    f_train: &JacobianFactors,
    layout: &ParamLayout,
    width_used: usize,
    seed_used: u64,
) -> GramMatrix {
    GramMatrix::new(
        f_test.gram(f_train, layout),
        GramKind::Ntk,
        width_used,
        seed_used,
    )
}

/// Conditional-on-features NNGP estimator:
/// `sigma_w^2 (x^L . x'^L) / n + sigma_b^2`.
pub fn empirical_nngp(
    features_a: &Array2<f64>,
    features_b: &Array2<f64>,
    sigma_w_last: f64,
    sigma_b_last: f64,
) -> Result<GramMatrix> {
    if features_a.ncols() != features_b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: features_b.ncols(),
            got: features_a.ncols(),
            context: "penultimate feature widths",
        });
    }
    let n = features_a.ncols() as f64;
    let mut k = features_a.dot(&features_b.t());
    let sw2 = sigma_w_last * sigma_w_last;
    let sb2 = sigma_b_last * sigma_b_last;
    k.mapv_inplace(|v| sw2 * v / n + sb2);
    Ok(GramMatrix::new(k, GramKind::Nngp, features_a.ncols(), 0))
}

/// NTK-GP posterior mean with observation noise:
/// `m(x') + K_tx (K_xx + beta I)^{-1} (y - m(x))`.
pub fn posterior_mean(
    k_xx: &GramMatrix,
    k_tx: &GramMatrix,
    y: &Array1<f64>,
    m_train: &Array1<f64>,
    m_test: &Array1<f64>,
    beta: f64,
) -> Result<Array1<f64>> {
    let n = k_xx.rows();
    if y.len() != n || m_train.len() != n || k_tx.cols() != n || m_test.len() != k_tx.rows() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
            context: "posterior_mean operand sizes",
        });
    }
    let a = k_xx.shifted_sym(beta)?;
    let residual = y - m_train;
    let alpha = cholesky_solve_vec(&a, &residual, 0.0)?;
    Ok(m_test + &k_tx.entries().dot(&alpha))
}

/// Spectral weight `(1 - exp(-eta0 lambda t)) / lambda`, stable near zero.
pub(crate) fn flow_weight(lambda: f64, eta0: f64, t: f64) -> f64 {
    let x = eta0 * lambda * t;
    if x.abs() < 1e-12 {
        eta0 * t
    } else {
        -(-x).exp_m1() / lambda
    }
}

/// Geometric weight `(1 - (1 - eta0 lambda)^steps) / lambda`, stable near zero.
pub(crate) fn gd_weight(lambda: f64, eta0: f64, steps: usize) -> f64 {
    if (eta0 * lambda).abs() < 1e-14 {
        return eta0 * steps as f64;
    }
    let pow = (1.0 - eta0 * lambda).powi(steps as i32);
    (1.0 - pow) / lambda
}

/// Linearized gradient-flow prediction at training time `t`:
/// `f0_test + K_tx (I - exp(-eta0 (K + beta I) t)) (K + beta I)^{-1} (y - f0_train)`.
///
/// `t = f64::INFINITY` gives the posterior mean with `m` replaced by `f0`.
#[allow(clippy::too_many_arguments)]
pub fn lin_prediction_flow(
    k_tx: &GramMatrix,
    k_xx: &GramMatrix,
    f0_test: &Array1<f64>,
    f0_train: &Array1<f64>,
    y: &Array1<f64>,
    beta: f64,
    eta0: f64,
    t: f64,
) -> Result<Array1<f64>> {
    assert!(t >= 0.0, "training time must be nonnegative");
    if t == 0.0 {
        return Ok(f0_test.clone());
    }
    if t.is_infinite() {
        return posterior_mean(k_xx, k_tx, y, f0_train, f0_test, beta);
    }
    let a = k_xx.shifted_sym(beta)?;
    let eig = sym_eig(&a)?;
    let residual = y - f0_train;
    let alpha = eig.apply_spectral(|l| flow_weight(l, eta0, t), &residual);
    Ok(f0_test + &k_tx.entries().dot(&alpha))
}

/// Steps after which an out-of-window learning rate is reported as divergent
/// rather than evaluated exactly.
const DIVERGENCE_STEP_THRESHOLD: usize = 10;

/// Linearized gradient-descent prediction after `steps` full-batch updates:
/// `f0_test + K_tx (I - (I - eta0 (K + beta I))^steps) (K + beta I)^{-1} (y - f0_train)`.
///
/// Rejects learning rates outside `(0, 2 / (lambda_max + beta))` once `steps`
/// exceeds a small threshold, since the geometric sum then grows without bound.
#[allow(clippy::too_many_arguments)]
pub fn lin_prediction_gd(
    k_tx: &GramMatrix,
    k_xx: &GramMatrix,
    f0_test: &Array1<f64>,
    f0_train: &Array1<f64>,
    y: &Array1<f64>,
    beta: f64,
    eta0: f64,
    steps: usize,
) -> Result<Array1<f64>> {
    if steps == 0 {
        return Ok(f0_test.clone());
    }
    let a = k_xx.shifted_sym(beta)?;
    let eig = sym_eig(&a)?;
    let lambda_max = eig.max_eigenvalue();
    let ceiling = 2.0 / lambda_max;
    if (eta0 <= 0.0 || eta0 >= ceiling) && steps > DIVERGENCE_STEP_THRESHOLD {
        return Err(Error::DivergentLearningRate { eta0, ceiling });
    }
    let residual = y - f0_train;
    let alpha = eig.apply_spectral(|l| gd_weight(l, eta0, steps), &residual);
    Ok(f0_test + &k_tx.entries().dot(&alpha))
}

/// Gaussian output moments over random initialization (trained linearized
/// networks at `t -> infinity`): mean `Theta_tx A^{-1} y` and the four-term
/// covariance mixing the NTK and NNGP kernels, with `A = Theta_xx + beta I`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_moments(
    theta_tx: &GramMatrix,
    theta_xx: &GramMatrix,
    k_tt: &GramMatrix,
    k_tx: &GramMatrix,
    k_xx: &GramMatrix,
    y: &Array1<f64>,
    beta: f64,
) -> Result<(Array1<f64>, SymMatrix)> {
    let n = theta_xx.rows();
    let nt = theta_tx.rows();
    if theta_tx.cols() != n
        || k_tt.rows() != nt
        || k_tt.cols() != nt
        || k_tx.rows() != nt
        || k_tx.cols() != n
        || k_xx.rows() != n
        || y.len() != n
    {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
            context: "ensemble_moments operand sizes",
        });
    }
    let a = theta_xx.shifted_sym(beta)?;
    let mu = theta_tx
        .entries()
        .dot(&cholesky_solve_vec(&a, y, 0.0)?);
    // M = A^{-1} Theta_xt
    let theta_xt = theta_tx.entries().t().to_owned();
    let m = crate::linalg::cholesky_solve(&a, &theta_xt, 0.0)?;
    let quad = m.t().dot(k_xx.entries()).dot(&m);
    let cross = k_tx.entries().dot(&m);
    let sigma = k_tt.entries() + &quad - &cross - &cross.t();
    Ok((mu, SymMatrix::symmetrize(sigma)))
}
