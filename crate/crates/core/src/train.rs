//! Regularized training of the finite network: loss, exact gradient,
//! full-batch gradient descent, fixed-step gradient-flow integration, the
//! standard-parametrization trainer with layer-dependent learning rates, and
//! the shifted-network trainer.

use ndarray::{Array1, Array2};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{sym_eig, SymMatrix};
use crate::net::{
    self, BlockKind, JacobianFactors, MlpArchitecture, ParamVector, Parametrization, PriorMean,
};

/// Learning rate selection; `Auto` uses `1 / (lambda_max(Theta) + beta)`,
/// half the discrete stability ceiling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Observation-noise / weight-penalty strength.
    pub beta: f64,
    pub eta0: LearningRate,
    /// Multiplier on the auto rate; `1.0` is half the stability ceiling.
    /// Values up to 1.9 stay stable and converge proportionally faster.
    pub auto_scale: f64,
    pub max_steps: usize,
    /// Stop when the trainable gradient norm falls below this.
    pub grad_tol: f64,
    /// Fixed step size of the flow integrator.
    pub flow_step: f64,
    /// Optional fixed integration horizon; when unset the flow runs to
    /// `grad_tol` or `max_steps` steps.
    pub flow_time: Option<f64>,
    pub record_every: usize,
    /// Inputs whose raw network outputs are recorded alongside each record.
    pub probe_points: Option<Array2<f64>>,
    /// Jacobian drift costs three Gram products per record; off by default.
    pub record_jacobian_drift: bool,
}

impl TrainConfig {
    pub fn new(beta: f64) -> Self {
        TrainConfig {
            beta,
            eta0: LearningRate::Auto,
            auto_scale: 1.0,
            max_steps: 200_000,
            grad_tol: 1e-8,
            flow_step: 0.1,
            flow_time: None,
            record_every: 10,
            probe_points: None,
            record_jacobian_drift: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::InvalidConfig("beta must be nonnegative".into()));
        }
        if self.grad_tol <= 0.0 {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        if self.flow_step <= 0.0 {
            return Err(Error::InvalidConfig("flow_step must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be positive".into()));
        }
        if self.auto_scale <= 0.0 || self.auto_scale >= 2.0 {
            return Err(Error::InvalidConfig(
                "auto_scale must lie in (0, 2)".into(),
            ));
        }
        if let LearningRate::Fixed(e) = self.eta0 {
            if e <= 0.0 {
                return Err(Error::InvalidConfig("eta0 must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One recorded diagnostic point; `step` is an integer step index for descent
/// and a continuous time for the flow.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub step: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub dist_from_init: f64,
    pub jacobian_drift: Option<f64>,
    pub probe_predictions: Option<Array1<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn final_record(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

fn trainable_distance_sq(a: &ParamVector, b: &ParamVector) -> f64 {
    let mut s = 0.0;
    for blk in &a.layout().blocks {
        if blk.trainable {
            let r = blk.range();
            for (x, y) in a.values()[r.clone()].iter().zip(&b.values()[r]) {
                s += (x - y) * (x - y);
            }
        }
    }
    s
}

/// Regularized loss `1/2 ||f(x, theta) - y||^2 + beta/2 ||theta - theta0||^2`,
/// the penalty restricted to trainable blocks.
pub fn reg_loss(
    arch: &MlpArchitecture,
    params: &ParamVector,
    params0: &ParamVector,
    data: &Dataset,
    beta: f64,
) -> Result<f64> {
    if !params.same_layout(params0) {
        return Err(Error::LayoutMismatch {
            context: "reg_loss parameter layouts",
        });
    }
    let preds = net::forward_batch(arch, params, &data.train_x)?;
    let g = &preds - &data.train_y;
    Ok(0.5 * g.dot(&g) + 0.5 * beta * trainable_distance_sq(params, params0))
}

/// Exact gradient `J(theta)^T g(theta) + beta (theta - theta0)`, frozen
/// blocks masked to zero.
pub fn reg_grad(
    arch: &MlpArchitecture,
    params: &ParamVector,
    params0: &ParamVector,
    data: &Dataset,
    beta: f64,
) -> Result<ParamVector> {
    if !params.same_layout(params0) {
        return Err(Error::LayoutMismatch {
            context: "reg_grad parameter layouts",
        });
    }
    let factors = net::jacobian_factors(arch, params, &data.train_x)?;
    let g = &factors.outputs - &data.train_y;
    let mut grad = factors.apply_transpose(&g, params.layout());
    add_penalty(&mut grad, beta, params, params0);
    Ok(grad)
}

/// `grad += beta (params - params0)` on trainable blocks.
fn add_penalty(grad: &mut ParamVector, beta: f64, params: &ParamVector, params0: &ParamVector) {
    if beta == 0.0 {
        return;
    }
    let layout = grad.layout().clone();
    for blk in &layout.blocks {
        if blk.trainable {
            let r = blk.range();
            for ((d, a), b) in grad.values_mut()[r.clone()]
                .iter_mut()
                .zip(&params.values()[r.clone()])
                .zip(&params0.values()[r])
            {
                *d += beta * (a - b);
            }
        }
    }
}

/// Empirical NTK at `params` restricted to trainable blocks, with its top
/// eigenvalue. Used for auto learning rates and stability checks.
fn gram_lambda_max(
    arch: &MlpArchitecture,
    params: &ParamVector,
    x: &Array2<f64>,
) -> Result<f64> {
    let factors = net::jacobian_factors(arch, params, x)?;
    let gram = factors.gram(&factors, params.layout());
    let eig = sym_eig(&SymMatrix::symmetrize(gram))?;
    Ok(eig.max_eigenvalue())
}

fn resolve_eta0(
    config: &TrainConfig,
    arch: &MlpArchitecture,
    params0: &ParamVector,
    data: &Dataset,
) -> Result<f64> {
    match config.eta0 {
        LearningRate::Fixed(e) => Ok(e),
        LearningRate::Auto => {
            let lam = gram_lambda_max(arch, params0, &data.train_x)?;
            Ok(config.auto_scale / (lam + config.beta))
        }
    }
}

const DIVERGENCE_FACTOR: f64 = 1e6;

struct Recorder<'a> {
    arch: &'a MlpArchitecture,
    config: &'a TrainConfig,
    params0: &'a ParamVector,
    init_factors: Option<JacobianFactors>,
    trace: TrainTrace,
}

impl<'a> Recorder<'a> {
    fn new(
        arch: &'a MlpArchitecture,
        config: &'a TrainConfig,
        params0: &'a ParamVector,
        data: &Dataset,
    ) -> Result<Self> {
        let init_factors = if config.record_jacobian_drift {
            Some(net::jacobian_factors(arch, params0, &data.train_x)?)
        } else {
            None
        };
        Ok(Recorder {
            arch,
            config,
            params0,
            init_factors,
            trace: TrainTrace::default(),
        })
    }

    fn record(
        &mut self,
        step: f64,
        loss: f64,
        grad_norm: f64,
        params: &ParamVector,
        factors: &JacobianFactors,
    ) -> Result<()> {
        let jacobian_drift = match &self.init_factors {
            Some(init) => Some(
                factors
                    .frobenius_distance_sq(init, params.layout())
                    .sqrt(),
            ),
            None => None,
        };
        let probe_predictions = match &self.config.probe_points {
            Some(px) => Some(net::forward_batch(self.arch, params, px)?),
            None => None,
        };
        self.trace.records.push(TraceRecord {
            step,
            loss,
            grad_norm,
            dist_from_init: trainable_distance_sq(params, self.params0).sqrt(),
            jacobian_drift,
            probe_predictions,
        });
        Ok(())
    }
}

/// Full-batch regularized gradient descent from `params0`.
///
/// Stops when the trainable gradient norm falls below `grad_tol` or after
/// `max_steps` updates; fails with `Diverged` once the loss exceeds 1e6 times
/// its initial value.
pub fn gd_train(
    arch: &MlpArchitecture,
    params0: &ParamVector,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ParamVector, TrainTrace)> {
    config.validate()?;
    let eta0 = resolve_eta0(config, arch, params0, data)?;
    let beta = config.beta;
    let mut params = params0.clone();
    let mut recorder = Recorder::new(arch, config, params0, data)?;
    let mut loss_ceiling = f64::INFINITY;

    for step in 0..=config.max_steps {
        let factors = net::jacobian_factors(arch, &params, &data.train_x)?;
        let g = &factors.outputs - &data.train_y;
        let loss = 0.5 * g.dot(&g) + 0.5 * beta * trainable_distance_sq(&params, params0);
        if step == 0 {
            loss_ceiling = DIVERGENCE_FACTOR * loss.max(1e-12);
        } else if loss > loss_ceiling || !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let mut grad = factors.apply_transpose(&g, params.layout());
        add_penalty(&mut grad, beta, &params, params0);
        let grad_norm = grad.trainable_norm();

        let done = grad_norm <= config.grad_tol || step == config.max_steps;
        if step % config.record_every == 0 || done {
            recorder.record(step as f64, loss, grad_norm, &params, &factors)?;
        }
        if done {
            break;
        }
        params.axpy_trainable(-eta0, &grad);
    }
    Ok((params, recorder.trace))
}

/// Classical 4th-order fixed-step integration of the regularized gradient
/// flow `dtheta/dt = -eta0 grad L(theta)`.
///
/// The trace `step` field carries continuous time. Requires
/// `flow_step * eta0 * (lambda_max + beta) <= 0.5` for stability.
pub fn flow_integrate(
    arch: &MlpArchitecture,
    params0: &ParamVector,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ParamVector, TrainTrace)> {
    config.validate()?;
    let beta = config.beta;
    let lam = gram_lambda_max(arch, params0, &data.train_x)?;
    let eta0 = match config.eta0 {
        LearningRate::Fixed(e) => e,
        LearningRate::Auto => config.auto_scale / (lam + beta),
    };
    if config.flow_step * eta0 * (lam + beta) > 0.5 {
        return Err(Error::InvalidConfig(format!(
            "flow_step {} violates flow_step * eta0 * (lambda_max + beta) <= 0.5",
            config.flow_step
        )));
    }
    let h = config.flow_step;
    let max_steps = match config.flow_time {
        Some(t) => (t / h).round() as usize,
        None => config.max_steps,
    };

    let grad_at = |p: &ParamVector| -> Result<ParamVector> {
        let factors = net::jacobian_factors(arch, p, &data.train_x)?;
        let g = &factors.outputs - &data.train_y;
        let mut grad = factors.apply_transpose(&g, p.layout());
        add_penalty(&mut grad, beta, p, params0);
        Ok(grad)
    };

    let mut params = params0.clone();
    let mut recorder = Recorder::new(arch, config, params0, data)?;
    let mut loss_ceiling = f64::INFINITY;

    for step in 0..=max_steps {
        let factors = net::jacobian_factors(arch, &params, &data.train_x)?;
        let g = &factors.outputs - &data.train_y;
        let loss = 0.5 * g.dot(&g) + 0.5 * beta * trainable_distance_sq(&params, params0);
        if step == 0 {
            loss_ceiling = DIVERGENCE_FACTOR * loss.max(1e-12);
        } else if loss > loss_ceiling || !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let mut grad = factors.apply_transpose(&g, params.layout());
        add_penalty(&mut grad, beta, &params, params0);
        let grad_norm = grad.trainable_norm();

        let done = (config.flow_time.is_none() && grad_norm <= config.grad_tol)
            || step == max_steps;
        if step % config.record_every == 0 || done {
            recorder.record(step as f64 * h, loss, grad_norm, &params, &factors)?;
        }
        if done {
            break;
        }

        // One RK4 step of dtheta/dt = -eta0 grad.
        let k1 = grad;
        let mut p2 = params.clone();
        p2.axpy_trainable(-0.5 * h * eta0, &k1);
        let k2 = grad_at(&p2)?;
        let mut p3 = params.clone();
        p3.axpy_trainable(-0.5 * h * eta0, &k2);
        let k3 = grad_at(&p3)?;
        let mut p4 = params.clone();
        p4.axpy_trainable(-h * eta0, &k3);
        let k4 = grad_at(&p4)?;
        let w = h * eta0 / 6.0;
        params.axpy_trainable(-w, &k1);
        params.axpy_trainable(-2.0 * w, &k2);
        params.axpy_trainable(-2.0 * w, &k3);
        params.axpy_trainable(-w, &k4);
    }
    Ok((params, recorder.trace))
}

/// Per-block diagonal of H applied during standard-parametrization training:
/// `1/fan_in` for weight blocks, 1 for biases.
fn h_of_block(blk: &net::BlockInfo) -> f64 {
    match blk.kind {
        BlockKind::Weight => 1.0 / blk.cols as f64,
        BlockKind::Bias => 1.0,
    }
}

/// Standard-parametrization trainer with layer-dependent learning rates:
/// update `theta -= eta0 (H J^T g + beta (theta - theta0))`, which is the
/// `H^{1/2}` image of the NTK-parametrization trajectory.
///
/// With `uniform_lr` the layer scaling is dropped (`H = I`), the regime where
/// first-layer and bias contributions vanish at large width.
pub fn std_train(
    arch: &MlpArchitecture,
    params0: &ParamVector,
    data: &Dataset,
    config: &TrainConfig,
    uniform_lr: bool,
) -> Result<(ParamVector, TrainTrace)> {
    config.validate()?;
    if arch.parametrization != Parametrization::Standard {
        return Err(Error::InvalidConfig(
            "std_train requires the standard parametrization".into(),
        ));
    }
    let beta = config.beta;
    let eta0 = match config.eta0 {
        LearningRate::Fixed(e) => e,
        LearningRate::Auto => {
            // Stability is governed by the H-weighted kernel J H J^T, which
            // equals the NTK-parametrization Gram of the mapped problem.
            let factors = net::jacobian_factors(arch, params0, &data.train_x)?;
            let gram = h_weighted_gram(&factors, params0.layout(), uniform_lr);
            let lam = sym_eig(&SymMatrix::symmetrize(gram))?.max_eigenvalue();
            config.auto_scale / (lam + beta)
        }
    };

    let mut params = params0.clone();
    let mut recorder = Recorder::new(arch, config, params0, data)?;
    let mut loss_ceiling = f64::INFINITY;

    for step in 0..=config.max_steps {
        let factors = net::jacobian_factors(arch, &params, &data.train_x)?;
        let g = &factors.outputs - &data.train_y;
        // Penalty metric is H^{-1}: beta/2 (theta-theta0)^T H^{-1} (theta-theta0).
        let mut penalty = 0.0;
        for blk in &params.layout().blocks {
            if blk.trainable {
                let hinv = 1.0 / h_of_block(blk);
                let r = blk.range();
                for (a, b) in params.values()[r.clone()].iter().zip(&params0.values()[r]) {
                    penalty += hinv * (a - b) * (a - b);
                }
            }
        }
        let loss = 0.5 * g.dot(&g) + 0.5 * beta * penalty;
        if step == 0 {
            loss_ceiling = DIVERGENCE_FACTOR * loss.max(1e-12);
        } else if loss > loss_ceiling || !loss.is_finite() {
            return Err(Error::Diverged { step });
        }

        // Direction H J^T g + beta (theta - theta0): the loss gradient
        // (J^T g + beta H^{-1} (theta - theta0)) premultiplied by eta0 H.
        let mut dir = factors.apply_transpose(&g, params.layout());
        {
            let layout = dir.layout().clone();
            for blk in &layout.blocks {
                if blk.trainable {
                    let hb = if uniform_lr { 1.0 } else { h_of_block(blk) };
                    let r = blk.range();
                    for ((d, a), b) in dir.values_mut()[r.clone()]
                        .iter_mut()
                        .zip(&params.values()[r.clone()])
                        .zip(&params0.values()[r])
                    {
                        *d = *d * hb + beta * (a - b);
                    }
                }
            }
        }
        let grad_norm = dir.trainable_norm();

        let done = grad_norm <= config.grad_tol || step == config.max_steps;
        if step % config.record_every == 0 || done {
            recorder.record(step as f64, loss, grad_norm, &params, &factors)?;
        }
        if done {
            break;
        }
        params.axpy_trainable(-eta0, &dir);
    }
    Ok((params, recorder.trace))
}

/// `J H J^T` on trainable blocks for a standard-parametrization factor set.
fn h_weighted_gram(
    factors: &JacobianFactors,
    layout: &net::ParamLayout,
    uniform: bool,
) -> Array2<f64> {
    let n = factors.n_examples();
    let mut total = Array2::<f64>::zeros((n, n));
    for blk in &layout.blocks {
        if !blk.trainable {
            continue;
        }
        let l = blk.layer - 1;
        let h = if uniform { 1.0 } else { h_of_block(blk) };
        match blk.kind {
            BlockKind::Weight => {
                let dd = factors.deltas[l].dot(&factors.deltas[l].t());
                let xx = factors.activations[l].dot(&factors.activations[l].t());
                let s2 = factors.scales[l] * factors.scales[l] * h;
                total = total + dd * xx * s2;
            }
            BlockKind::Bias => {
                total = total + factors.deltas[l].dot(&factors.deltas[l].t()) * h;
            }
        }
    }
    total
}

/// First-layer share of the uniform-rate kernel trace:
/// `(d/n) tr(J_1 J_1^T) / tr(J J^T)` over all blocks, no layer scaling.
///
/// Under the standard parametrization with a uniform learning rate this
/// measures how much the first layer contributes to training; it vanishes as
/// the width grows.
pub fn first_layer_share(
    arch: &MlpArchitecture,
    params: &ParamVector,
    x: &Array2<f64>,
) -> Result<f64> {
    let factors = net::jacobian_factors(arch, params, x)?;
    let layout = params.layout();
    let n = factors.n_examples();
    let mut first = 0.0;
    let mut total = 0.0;
    for blk in &layout.blocks {
        let l = blk.layer - 1;
        let mut tr = 0.0;
        for i in 0..n {
            let contrib = match blk.kind {
                BlockKind::Weight => {
                    let d2: f64 = factors.deltas[l].row(i).dot(&factors.deltas[l].row(i));
                    let x2: f64 = factors.activations[l]
                        .row(i)
                        .dot(&factors.activations[l].row(i));
                    factors.scales[l] * factors.scales[l] * d2 * x2
                }
                BlockKind::Bias => factors.deltas[l].row(i).dot(&factors.deltas[l].row(i)),
            };
            tr += contrib;
        }
        total += tr;
        if blk.layer == 1 && blk.kind == BlockKind::Weight {
            first += tr;
        }
    }
    let width = *arch.hidden_widths.first().unwrap_or(&arch.input_dim) as f64;
    Ok((arch.input_dim as f64 / width) * first / total)
}

/// Trained shifted predictor `f(x, theta) - f(x, theta0) + m(x)`.
#[derive(Debug, Clone)]
pub struct ShiftedPredictor {
    pub arch: MlpArchitecture,
    pub params: ParamVector,
    pub params0: ParamVector,
    pub prior: PriorMean,
}

impl ShiftedPredictor {
    pub fn predict_batch(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        net::shifted_forward_batch(&self.arch, &self.params, &self.params0, &self.prior, x)
    }
}

/// Trains the shifted network `f(x, theta) - f(x, theta0) + m(x)` by running
/// ordinary regularized descent against the shifted labels
/// `y + f(x, theta0) - m(x)`.
pub fn shifted_train(
    arch: &MlpArchitecture,
    params0: &ParamVector,
    data: &Dataset,
    prior: &PriorMean,
    config: &TrainConfig,
) -> Result<(ShiftedPredictor, TrainTrace)> {
    let f0 = net::forward_batch(arch, params0, &data.train_x)?;
    let m = prior.eval_batch(&data.train_x)?;
    let shifted = Dataset {
        train_y: &data.train_y + &f0 - &m,
        ..data.clone()
    };
    let (params, trace) = gd_train(arch, params0, &shifted, config)?;
    Ok((
        ShiftedPredictor {
            arch: arch.clone(),
            params,
            params0: params0.clone(),
            prior: prior.clone(),
        },
        trace,
    ))
}
