//! Linearized-model engine in parameter space: closed-form and iterative
//! dynamics of the linearized network's parameters, and the convergence
//! metrics between a trained network and its linearization.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::kernel::{flow_weight, gd_weight};
use crate::linalg::{cholesky_solve_vec, sym_eig, SymMatrix};
use crate::net::{self, MlpArchitecture, ParamVector};

/// Frozen first-order expansion of the network around `theta0`:
/// `f_lin(x, theta) = f(x, theta0) + J(x, theta0)(theta - theta0)`.
///
/// Jacobians are masked to trainable blocks. Intended for desk-scale `p`;
/// large-width sweeps use the factored kernel-space route instead.
#[derive(Debug, Clone)]
pub struct LinearizedState {
    /// `N x p` Jacobian at the training points.
    pub j0: Array2<f64>,
    /// `N' x p` Jacobian at the test points.
    pub j0_test: Array2<f64>,
    pub f0_train: Array1<f64>,
    pub f0_test: Array1<f64>,
    pub theta0: ParamVector,
}

impl LinearizedState {
    pub fn new(
        arch: &MlpArchitecture,
        theta0: &ParamVector,
        train_x: &Array2<f64>,
        test_x: &Array2<f64>,
    ) -> Result<Self> {
        let ft = net::jacobian_factors(arch, theta0, train_x)?;
        let fv = net::jacobian_factors(arch, theta0, test_x)?;
        let mut j0 = ft.dense(theta0.layout());
        let mut j0_test = fv.dense(theta0.layout());
        net::mask_jacobian(&mut j0, theta0.layout());
        net::mask_jacobian(&mut j0_test, theta0.layout());
        Ok(LinearizedState {
            j0,
            j0_test,
            f0_train: ft.outputs,
            f0_test: fv.outputs,
            theta0: theta0.clone(),
        })
    }

    pub fn n_train(&self) -> usize {
        self.f0_train.len()
    }

    fn delta(&self, params: &ParamVector) -> Result<Array1<f64>> {
        if !params.same_layout(&self.theta0) {
            return Err(Error::LayoutMismatch {
                context: "linearized state parameter layout",
            });
        }
        Ok(Array1::from_iter(
            params
                .values()
                .iter()
                .zip(self.theta0.values())
                .map(|(a, b)| a - b),
        ))
    }

    /// `f_lin` at the training points.
    pub fn predict_train(&self, params: &ParamVector) -> Result<Array1<f64>> {
        Ok(&self.f0_train + &self.j0.dot(&self.delta(params)?))
    }

    /// `f_lin` at the test points.
    pub fn predict_test(&self, params: &ParamVector) -> Result<Array1<f64>> {
        Ok(&self.f0_test + &self.j0_test.dot(&self.delta(params)?))
    }

    /// `Theta_hat + beta I` with its eigendecomposition, shared by the closed
    /// forms below.
    fn shifted_gram(&self, beta: f64) -> Result<SymMatrix> {
        let mut gram = self.j0.dot(&self.j0.t());
        for i in 0..gram.nrows() {
            gram[[i, i]] += beta;
        }
        Ok(SymMatrix::symmetrize(gram))
    }

    fn params_from_alpha(&self, alpha: &Array1<f64>) -> ParamVector {
        let update = self.j0.t().dot(alpha);
        let mut out = self.theta0.clone();
        for (v, u) in out.values_mut().iter_mut().zip(update.iter()) {
            *v += u;
        }
        out
    }
}

/// Closed-form gradient-flow parameters at time `t`:
/// `theta0 + J^T (I - exp(-eta0 (Theta + beta I) t)) (Theta + beta I)^{-1} (y - f0)`.
///
/// `t = f64::INFINITY` gives the ridge optimum in parameter space.
pub fn lin_params_closed_form(
    state: &LinearizedState,
    y: &Array1<f64>,
    beta: f64,
    eta0: f64,
    t: f64,
) -> Result<ParamVector> {
    assert!(beta >= 0.0 && t >= 0.0);
    if t == 0.0 {
        return Ok(state.theta0.clone());
    }
    let residual = y - &state.f0_train;
    let a = state.shifted_gram(beta)?;
    let alpha = if t.is_infinite() {
        cholesky_solve_vec(&a, &residual, 0.0)?
    } else {
        sym_eig(&a)?.apply_spectral(|l| flow_weight(l, eta0, t), &residual)
    };
    Ok(state.params_from_alpha(&alpha))
}

/// Geometric closed form of the discrete recursion after `steps` updates:
/// `theta0 + J^T (I - (I - eta0 (Theta + beta I))^steps) (Theta + beta I)^{-1} (y - f0)`.
pub fn lin_params_gd_closed_form(
    state: &LinearizedState,
    y: &Array1<f64>,
    beta: f64,
    eta0: f64,
    steps: usize,
) -> Result<ParamVector> {
    if steps == 0 {
        return Ok(state.theta0.clone());
    }
    let residual = y - &state.f0_train;
    let a = state.shifted_gram(beta)?;
    let alpha = sym_eig(&a)?.apply_spectral(|l| gd_weight(l, eta0, steps), &residual);
    Ok(state.params_from_alpha(&alpha))
}

/// Steps after which an out-of-window learning rate is reported rather than
/// iterated; matches the kernel-space gate.
const DIVERGENCE_STEP_THRESHOLD: usize = 10;

/// Literal parameter-space iteration of regularized descent on the
/// linearized model:
/// `theta -= eta0 (J^T (J (theta - theta0) + f0 - y) + beta (theta - theta0))`.
pub fn lin_params_gd_iterate(
    state: &LinearizedState,
    y: &Array1<f64>,
    beta: f64,
    eta0: f64,
    steps: usize,
) -> Result<ParamVector> {
    if y.len() != state.n_train() {
        return Err(Error::DimensionMismatch {
            expected: state.n_train(),
            got: y.len(),
            context: "label vector length",
        });
    }
    if steps > DIVERGENCE_STEP_THRESHOLD {
        let lam_max = sym_eig(&state.shifted_gram(beta)?)?.max_eigenvalue();
        let ceiling = 2.0 / lam_max;
        if eta0 <= 0.0 || eta0 >= ceiling {
            return Err(Error::DivergentLearningRate { eta0, ceiling });
        }
    }
    let p = state.theta0.len();
    let mut delta = Array1::<f64>::zeros(p);
    for _ in 0..steps {
        let g = state.j0.dot(&delta) + &state.f0_train - y;
        let grad = state.j0.t().dot(&g) + &(&delta * beta);
        delta -= &(&grad * eta0);
    }
    let mut out = state.theta0.clone();
    for (v, d) in out.values_mut().iter_mut().zip(delta.iter()) {
        *v += d;
    }
    Ok(out)
}

/// Euclidean distance between two parameter vectors over trainable blocks.
pub fn param_frobenius_diff(theta_net: &ParamVector, theta_lin: &ParamVector) -> Result<f64> {
    if !theta_net.same_layout(theta_lin) {
        return Err(Error::LayoutMismatch {
            context: "param_frobenius_diff layouts",
        });
    }
    let mut s = 0.0;
    for blk in &theta_net.layout().blocks {
        if blk.trainable {
            let r = blk.range();
            for (a, b) in theta_net.values()[r.clone()]
                .iter()
                .zip(&theta_lin.values()[r])
            {
                s += (a - b) * (a - b);
            }
        }
    }
    Ok(s.sqrt())
}

/// Max-abs difference between two prediction vectors on the same point set.
pub fn function_sup_diff(net_preds: &Array1<f64>, lin_preds: &Array1<f64>) -> Result<f64> {
    if net_preds.len() != lin_preds.len() {
        return Err(Error::DimensionMismatch {
            expected: net_preds.len(),
            got: lin_preds.len(),
            context: "prediction vector lengths",
        });
    }
    Ok(net_preds
        .iter()
        .zip(lin_preds.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}
