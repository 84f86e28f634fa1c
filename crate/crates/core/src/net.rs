//! Finite-width MLPs: architectures, initialization in both parametrizations,
//! forward evaluation, exact per-example Jacobians, the shifted-network
//! wrapper, and the diagonal standard<->NTK parameter mapping.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng;

/// Scalar activation applied between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Smooth, bounded, with Lipschitz derivative. The default.
    Erf,
    Tanh,
    Softplus,
    /// Provided for completeness; its derivative is not Lipschitz.
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Erf => libm::erf(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp(),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Erf => "erf",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "erf" => Ok(Activation::Erf),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidConfig(format!("unknown activation {other:?}"))),
        }
    }
}

/// Layer rule: NTK uses `h = W x / sqrt(fan_in) + b` with O(1)-variance
/// weights; standard uses `h = W x + b` with `1/fan_in` weight variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parametrization {
    Ntk,
    Standard,
}

impl Parametrization {
    pub fn name(self) -> &'static str {
        match self {
            Parametrization::Ntk => "ntk",
            Parametrization::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ntk" => Ok(Parametrization::Ntk),
            "standard" => Ok(Parametrization::Standard),
            other => Err(Error::InvalidConfig(format!(
                "unknown parametrization {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
}

/// One contiguous block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    /// 1-based layer index; layer `L+1` is the output layer.
    pub layer: usize,
    pub kind: BlockKind,
    pub offset: usize,
    /// Output dimension of the layer.
    pub rows: usize,
    /// Input dimension (1 for bias blocks).
    pub cols: usize,
    /// Whether the trainer is allowed to move this block.
    pub trainable: bool,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Contiguous, exhaustive layout of all weight and bias blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub blocks: Vec<BlockInfo>,
    pub total: usize,
}

/// MLP shape and initialization scheme. Output dimension is fixed to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    /// Per-layer weight scales, length `L + 1`.
    pub sigma_w: Vec<f64>,
    /// Per-layer bias scales, length `L + 1`.
    pub sigma_b: Vec<f64>,
    pub parametrization: Parametrization,
    /// When false (the default), the first layer and all biases are frozen.
    pub train_first_layer_and_biases: bool,
}

pub const DEFAULT_SIGMA_W: f64 = 1.0;
pub const DEFAULT_SIGMA_B: f64 = 0.1;

impl MlpArchitecture {
    /// Architecture with uniform width `n` and `depth` hidden layers.
    pub fn new(
        input_dim: usize,
        depth: usize,
        width: usize,
        activation: Activation,
        parametrization: Parametrization,
    ) -> Self {
        let layers = depth + 1;
        MlpArchitecture {
            input_dim,
            hidden_widths: vec![width; depth],
            activation,
            sigma_w: vec![DEFAULT_SIGMA_W; layers],
            sigma_b: vec![DEFAULT_SIGMA_B; layers],
            parametrization,
            train_first_layer_and_biases: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if let Some(&first) = self.hidden_widths.first() {
            if self.hidden_widths.iter().any(|&w| w != first) || first == 0 {
                return Err(Error::InvalidConfig(
                    "hidden widths must be equal and positive".into(),
                ));
            }
        }
        let layers = self.depth() + 1;
        if self.sigma_w.len() != layers || self.sigma_b.len() != layers {
            return Err(Error::InvalidConfig(format!(
                "sigma_w/sigma_b must have one entry per layer ({layers})"
            )));
        }
        if self.sigma_w.iter().chain(&self.sigma_b).any(|&s| s < 0.0) {
            return Err(Error::InvalidConfig("sigmas must be nonnegative".into()));
        }
        Ok(())
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    /// `(fan_in, fan_out)` for layers `1..=L+1`.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, 1));
        dims
    }

    /// Total parameter count `p = sum_l (n_{l-1} + 1) n_l`.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Forward scale of layer `l` (1-based): `1/sqrt(fan_in)` under NTK, 1 otherwise.
    pub fn layer_scale(&self, layer: usize) -> f64 {
        match self.parametrization {
            Parametrization::Ntk => 1.0 / (self.layer_dims()[layer - 1].0 as f64).sqrt(),
            Parametrization::Standard => 1.0,
        }
    }

    pub fn layout(&self) -> Arc<ParamLayout> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (idx, &(fan_in, fan_out)) in self.layer_dims().iter().enumerate() {
            let layer = idx + 1;
            let weight_trainable = self.train_first_layer_and_biases || layer > 1;
            blocks.push(BlockInfo {
                layer,
                kind: BlockKind::Weight,
                offset,
                rows: fan_out,
                cols: fan_in,
                trainable: weight_trainable,
            });
            offset += fan_in * fan_out;
            blocks.push(BlockInfo {
                layer,
                kind: BlockKind::Bias,
                offset,
                rows: fan_out,
                cols: 1,
                trainable: self.train_first_layer_and_biases,
            });
            offset += fan_out;
        }
        Arc::new(ParamLayout {
            blocks,
            total: offset,
        })
    }
}

/// Flat vector of all weights and biases with its layout map.
#[derive(Debug, Clone)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.total],
            layout,
        }
    }

    pub fn from_values(values: Vec<f64>, layout: Arc<ParamLayout>) -> Result<Self> {
        if values.len() != layout.total {
            return Err(Error::LayoutMismatch {
                context: "value length does not match layout",
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn block(&self, idx: usize) -> &BlockInfo {
        &self.layout.blocks[idx]
    }

    pub fn weight_view(&self, layer: usize) -> ArrayView2<'_, f64> {
        let b = self
            .layout
            .blocks
            .iter()
            .find(|b| b.layer == layer && b.kind == BlockKind::Weight)
            .expect("weight block");
        ArrayView2::from_shape((b.rows, b.cols), &self.values[b.range()]).expect("block shape")
    }

    pub fn bias_view(&self, layer: usize) -> ArrayView1<'_, f64> {
        let b = self
            .layout
            .blocks
            .iter()
            .find(|b| b.layer == layer && b.kind == BlockKind::Bias)
            .expect("bias block");
        ArrayView1::from_shape(b.rows, &self.values[b.range()]).expect("block shape")
    }

    /// Euclidean distance to `other`, all blocks.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean norm restricted to trainable blocks.
    pub fn trainable_norm(&self) -> f64 {
        let mut s = 0.0;
        for b in &self.layout.blocks {
            if b.trainable {
                s += self.values[b.range()].iter().map(|v| v * v).sum::<f64>();
            }
        }
        s.sqrt()
    }

    /// `self += alpha * other` restricted to trainable blocks.
    pub fn axpy_trainable(&mut self, alpha: f64, other: &ParamVector) {
        for b in &self.layout.blocks {
            if b.trainable {
                let r = b.range();
                for (dst, src) in self.values[r.clone()].iter_mut().zip(&other.values[r]) {
                    *dst += alpha * src;
                }
            }
        }
    }

    /// Zeroes every frozen block.
    pub fn mask_frozen(&mut self) {
        for b in &self.layout.blocks {
            if !b.trainable {
                self.values[b.range()].fill(0.0);
            }
        }
    }
}

/// Diagonal scaling matrix relating the parametrizations: `H_{w,l} = 1/n_{l-1}`
/// for weight blocks, `H_{b,l} = 1` for biases.
#[derive(Debug, Clone)]
pub struct ScalingMatrixH {
    diagonal: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ScalingMatrixH {
    pub fn from_arch(arch: &MlpArchitecture) -> Self {
        let layout = arch.layout();
        let mut diagonal = vec![1.0; layout.total];
        for b in &layout.blocks {
            if b.kind == BlockKind::Weight {
                let h = 1.0 / b.cols as f64;
                diagonal[b.range()].fill(h);
            }
        }
        ScalingMatrixH { diagonal, layout }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapDirection {
    StdToNtk,
    NtkToStd,
}

/// Maps a parameter vector between parametrizations: `theta_ntk = H^{-1/2} theta_std`.
pub fn map_parametrization(
    params: &ParamVector,
    h: &ScalingMatrixH,
    direction: MapDirection,
) -> Result<ParamVector> {
    if params.len() != h.diagonal.len() || *params.layout() != h.layout {
        return Err(Error::LayoutMismatch {
            context: "map_parametrization layout",
        });
    }
    let values = params
        .values()
        .iter()
        .zip(&h.diagonal)
        .map(|(&v, &d)| match direction {
            MapDirection::StdToNtk => v / d.sqrt(),
            MapDirection::NtkToStd => v * d.sqrt(),
        })
        .collect();
    ParamVector::from_values(values, params.layout().clone())
}

/// Draws initial parameters; deterministic in `(arch, seed)` and stable under
/// widening (low-index entries keep their values).
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> ParamVector {
    let layout = arch.layout();
    let mut values = vec![0.0; layout.total];
    for b in &layout.blocks {
        match b.kind {
            BlockKind::Weight => {
                let stream = rng::stream::weight(b.layer);
                let sigma = arch.sigma_w[b.layer - 1];
                let scale = match arch.parametrization {
                    Parametrization::Ntk => sigma,
                    Parametrization::Standard => sigma / (b.cols as f64).sqrt(),
                };
                let slice = &mut values[b.range()];
                for r in 0..b.rows {
                    for c in 0..b.cols {
                        slice[r * b.cols + c] =
                            scale * rng::standard_normal(seed, stream, rng::weight_index(r, c));
                    }
                }
            }
            BlockKind::Bias => {
                let stream = rng::stream::bias(b.layer);
                let sigma = arch.sigma_b[b.layer - 1];
                let slice = &mut values[b.range()];
                for (r, v) in slice.iter_mut().enumerate() {
                    *v = sigma * rng::standard_normal(seed, stream, r as u64);
                }
            }
        }
    }
    ParamVector { values, layout }
}

fn check_input_dim(arch: &MlpArchitecture, got: usize) -> Result<()> {
    if got != arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim,
            got,
            context: "network input dimension",
        });
    }
    Ok(())
}

/// Layer activations and pre-activations for a batch of inputs.
pub struct ForwardCache {
    /// `x^0 .. x^L`, each `N x n_l`.
    pub activations: Vec<Array2<f64>>,
    /// `h^1 .. h^{L+1}`.
    pub preactivations: Vec<Array2<f64>>,
    /// `f(x_i, theta)` per row.
    pub outputs: Array1<f64>,
}

/// Batched forward pass keeping every intermediate for backprop.
pub fn forward_cache(
    arch: &MlpArchitecture,
    params: &ParamVector,
    x: &Array2<f64>,
) -> Result<ForwardCache> {
    check_input_dim(arch, x.ncols())?;
    let depth = arch.depth();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut preactivations = Vec::with_capacity(depth + 1);
    activations.push(x.clone());
    for layer in 1..=depth + 1 {
        let scale = arch.layer_scale(layer);
        let w = params.weight_view(layer);
        let b = params.bias_view(layer);
        let mut h = activations[layer - 1].dot(&w.t());
        h.mapv_inplace(|v| v * scale);
        h += &b.insert_axis(Axis(0));
        if layer <= depth {
            let act = h.mapv(|v| arch.activation.apply(v));
            preactivations.push(h);
            activations.push(act);
        } else {
            preactivations.push(h);
        }
    }
    let outputs = preactivations[depth].column(0).to_owned();
    Ok(ForwardCache {
        activations,
        preactivations,
        outputs,
    })
}

/// Batched evaluation `f(x_i, theta)`.
pub fn forward_batch(
    arch: &MlpArchitecture,
    params: &ParamVector,
    x: &Array2<f64>,
) -> Result<Array1<f64>> {
    check_input_dim(arch, x.ncols())?;
    let depth = arch.depth();
    let mut cur = x.clone();
    for layer in 1..=depth + 1 {
        let scale = arch.layer_scale(layer);
        let w = params.weight_view(layer);
        let b = params.bias_view(layer);
        let mut h = cur.dot(&w.t());
        h.mapv_inplace(|v| v * scale);
        h += &b.insert_axis(Axis(0));
        if layer <= depth {
            h.mapv_inplace(|v| arch.activation.apply(v));
        }
        cur = h;
    }
    Ok(cur.column(0).to_owned())
}

/// Single-point evaluation `f(x, theta)`.
pub fn forward(arch: &MlpArchitecture, params: &ParamVector, x: ArrayView1<f64>) -> Result<f64> {
    let row = x
        .to_owned()
        .into_shape_with_order((1, x.len()))
        .expect("row reshape");
    Ok(forward_batch(arch, params, &row)?[0])
}

/// Per-layer factors of the Jacobian at a parameter point.
///
/// For example `i` and layer `l`, the gradient of `f(x_i)` with respect to
/// `W^l` is the outer product `scale_l * delta^l_i (x^{l-1}_i)^T` and with
/// respect to `b^l` is `delta^l_i`. Storing the activation and delta matrices
/// lets Gram matrices and `J^T v` products be formed without materializing
/// the `N x p` Jacobian.
pub struct JacobianFactors {
    /// `x^0 .. x^L`.
    pub activations: Vec<Array2<f64>>,
    /// `delta^1 .. delta^{L+1}`, each `N x n_l`.
    pub deltas: Vec<Array2<f64>>,
    /// Forward scale per layer.
    pub scales: Vec<f64>,
    /// `f(x_i, theta)` per row.
    pub outputs: Array1<f64>,
}

/// Reverse-mode factors of the Jacobian for a batch of inputs.
pub fn jacobian_factors(
    arch: &MlpArchitecture,
    params: &ParamVector,
    x: &Array2<f64>,
) -> Result<JacobianFactors> {
    let cache = forward_cache(arch, params, x)?;
    let depth = arch.depth();
    let n = x.nrows();
    let scales: Vec<f64> = (1..=depth + 1).map(|l| arch.layer_scale(l)).collect();
    let mut deltas = vec![Array2::<f64>::zeros((0, 0)); depth + 1];
    deltas[depth] = Array2::ones((n, 1));
    for layer in (1..=depth).rev() {
        // delta^l = phi'(h^l) . (scale_{l+1} delta^{l+1} W^{l+1})
        let w_next = params.weight_view(layer + 1);
        let mut back = deltas[layer].dot(&w_next);
        back.mapv_inplace(|v| v * scales[layer]);
        let phi_prime = cache.preactivations[layer - 1].mapv(|v| arch.activation.derivative(v));
        deltas[layer - 1] = back * phi_prime;
    }
    Ok(JacobianFactors {
        activations: cache.activations,
        deltas,
        scales,
        outputs: cache.outputs,
    })
}

impl JacobianFactors {
    pub fn n_examples(&self) -> usize {
        self.outputs.len()
    }

    /// Materializes the dense `N x p` Jacobian. All blocks are filled; frozen
    /// blocks are the trainer's job to mask.
    pub fn dense(&self, layout: &ParamLayout) -> Array2<f64> {
        let n = self.n_examples();
        let mut j = Array2::<f64>::zeros((n, layout.total));
        for b in &layout.blocks {
            let l = b.layer - 1;
            match b.kind {
                BlockKind::Weight => {
                    let scale = self.scales[l];
                    let delta = &self.deltas[l];
                    let act = &self.activations[l];
                    for i in 0..n {
                        let row = &mut j.row_mut(i);
                        for r in 0..b.rows {
                            let dv = scale * delta[[i, r]];
                            for c in 0..b.cols {
                                row[b.offset + r * b.cols + c] = dv * act[[i, c]];
                            }
                        }
                    }
                }
                BlockKind::Bias => {
                    let delta = &self.deltas[l];
                    for i in 0..n {
                        for r in 0..b.rows {
                            j[[i, b.offset + r]] = delta[[i, r]];
                        }
                    }
                }
            }
        }
        j
    }

    /// `J_masked^T v` as a parameter-shaped vector; frozen blocks are zero.
    pub fn apply_transpose(&self, v: &Array1<f64>, layout: &Arc<ParamLayout>) -> ParamVector {
        let mut out = ParamVector::zeros(layout.clone());
        for b in &layout.blocks {
            if !b.trainable {
                continue;
            }
            let l = b.layer - 1;
            match b.kind {
                BlockKind::Weight => {
                    let weighted = &self.deltas[l] * &v.view().insert_axis(Axis(1));
                    // The transposed operand can make `dot` return an f-order
                    // array, so copy through an iterator in logical order.
                    let grad = weighted.t().dot(&self.activations[l]);
                    let scale = self.scales[l];
                    for (dst, g) in out.values_mut()[b.range()].iter_mut().zip(grad.iter()) {
                        *dst = scale * g;
                    }
                }
                BlockKind::Bias => {
                    let grad = self.deltas[l].t().dot(v);
                    for (dst, g) in out.values_mut()[b.range()].iter_mut().zip(grad.iter()) {
                        *dst = *g;
                    }
                }
            }
        }
        out
    }

    /// Empirical NTK Gram between this factor set and `other`, restricted to
    /// trainable blocks:
    /// `sum_l scale_l^2 (D_a D_b^T) . (X_a X_b^T) [+ D_a D_b^T for biases]`.
    pub fn gram(&self, other: &JacobianFactors, layout: &ParamLayout) -> Array2<f64> {
        let (na, nb) = (self.n_examples(), other.n_examples());
        let mut total = Array2::<f64>::zeros((na, nb));
        for b in &layout.blocks {
            if !b.trainable {
                continue;
            }
            let l = b.layer - 1;
            match b.kind {
                BlockKind::Weight => {
                    let dd = self.deltas[l].dot(&other.deltas[l].t());
                    let xx = self.activations[l].dot(&other.activations[l].t());
                    let s2 = self.scales[l] * self.scales[l];
                    total = total + dd * xx * s2;
                }
                BlockKind::Bias => {
                    total = total + self.deltas[l].dot(&other.deltas[l].t());
                }
            }
        }
        total
    }

    /// Squared Frobenius distance between two factor sets' Jacobians on
    /// trainable blocks, computed blockwise without materializing either.
    pub fn frobenius_distance_sq(&self, other: &JacobianFactors, layout: &ParamLayout) -> f64 {
        // ||J_a - J_b||_F^2 = tr(G_aa) - 2 tr(G_ab) + tr(G_bb) per example.
        let gaa = self.gram(self, layout);
        let gab = self.gram(other, layout);
        let gbb = other.gram(other, layout);
        let mut s = 0.0;
        for i in 0..self.n_examples() {
            s += gaa[[i, i]] - 2.0 * gab[[i, i]] + gbb[[i, i]];
        }
        s.max(0.0)
    }
}

/// Dense `N x p` Jacobian, row `i` the exact gradient of `f(x_i, theta)`.
pub fn jacobian(
    arch: &MlpArchitecture,
    params: &ParamVector,
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    let factors = jacobian_factors(arch, params, x)?;
    Ok(factors.dense(params.layout()))
}

/// Zeroes Jacobian columns belonging to frozen blocks.
pub fn mask_jacobian(j: &mut Array2<f64>, layout: &ParamLayout) {
    for b in &layout.blocks {
        if !b.trainable {
            for mut row in j.rows_mut() {
                row.slice_mut(ndarray::s![b.range()]).fill(0.0);
            }
        }
    }
}

/// Prior mean function `m(.)` for the shifted network.
#[derive(Clone)]
pub enum PriorMean {
    Zero,
    Constant(f64),
    /// Arbitrary deterministic function of the input.
    Tabulated(Arc<dyn Fn(ArrayView1<f64>) -> f64 + Send + Sync>),
    /// Shifted evaluation of a frozen trained network: `f(x, trained) - f(x, init)`.
    PretrainedNetwork {
        arch: MlpArchitecture,
        trained: ParamVector,
        init: ParamVector,
    },
}

impl std::fmt::Debug for PriorMean {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PriorMean::Zero => write!(f, "PriorMean::Zero"),
            PriorMean::Constant(c) => write!(f, "PriorMean::Constant({c})"),
            PriorMean::Tabulated(_) => write!(f, "PriorMean::Tabulated(..)"),
            PriorMean::PretrainedNetwork { .. } => write!(f, "PriorMean::PretrainedNetwork(..)"),
        }
    }
}

impl PriorMean {
    pub fn eval(&self, x: ArrayView1<f64>) -> Result<f64> {
        match self {
            PriorMean::Zero => Ok(0.0),
            PriorMean::Constant(c) => Ok(*c),
            PriorMean::Tabulated(f) => Ok(f(x)),
            PriorMean::PretrainedNetwork {
                arch,
                trained,
                init,
            } => Ok(forward(arch, trained, x)? - forward(arch, init, x)?),
        }
    }

    pub fn eval_batch(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        match self {
            PriorMean::Zero => Ok(Array1::zeros(x.nrows())),
            PriorMean::Constant(c) => Ok(Array1::from_elem(x.nrows(), *c)),
            PriorMean::Tabulated(f) => Ok(Array1::from_iter(x.rows().into_iter().map(|r| f(r)))),
            PriorMean::PretrainedNetwork {
                arch,
                trained,
                init,
            } => Ok(forward_batch(arch, trained, x)? - forward_batch(arch, init, x)?),
        }
    }
}

/// Shifted prediction `f(x, theta) - f(x, theta_0) + m(x)`.
pub fn shifted_forward(
    arch: &MlpArchitecture,
    params: &ParamVector,
    params0: &ParamVector,
    m: &PriorMean,
    x: ArrayView1<f64>,
) -> Result<f64> {
    if !params.same_layout(params0) {
        return Err(Error::LayoutMismatch {
            context: "shifted_forward parameter layouts",
        });
    }
    Ok(forward(arch, params, x)? - forward(arch, params0, x)? + m.eval(x)?)
}

/// Batched shifted predictions.
pub fn shifted_forward_batch(
    arch: &MlpArchitecture,
    params: &ParamVector,
    params0: &ParamVector,
    m: &PriorMean,
    x: &Array2<f64>,
) -> Result<Array1<f64>> {
    if !params.same_layout(params0) {
        return Err(Error::LayoutMismatch {
            context: "shifted_forward parameter layouts",
        });
    }
    Ok(forward_batch(arch, params, x)? - forward_batch(arch, params0, x)? + m.eval_batch(x)?)
}

/// Returns a copy with the last layer's weight and bias blocks set to zero,
/// so the network output is identically zero.
pub fn zero_last_layer(params: &ParamVector) -> ParamVector {
    let last = params
        .layout()
        .blocks
        .iter()
        .map(|b| b.layer)
        .max()
        .expect("nonempty layout");
    let mut out = params.clone();
    let layout = out.layout().clone();
    for b in &layout.blocks {
        if b.layer == last {
            out.values_mut()[b.range()].fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn param_count_small_net() {
        // d = 3, one hidden layer of 5: (3+1)*5 + (5+1)*1 = 26.
        let arch = MlpArchitecture::new(3, 1, 5, Activation::Erf, Parametrization::Ntk);
        assert_eq!(arch.param_count(), 26);
        assert_eq!(arch.layout().total, 26);
    }

    #[test]
    fn init_is_deterministic_and_width_stable() {
        let arch = MlpArchitecture::new(3, 1, 8, Activation::Erf, Parametrization::Ntk);
        let a = init_params(&arch, 42);
        let b = init_params(&arch, 42);
        assert_eq!(a.values(), b.values());
        let c = init_params(&arch, 43);
        assert_ne!(a.values(), c.values());

        // Widening the hidden layer keeps low-index entries of every block.
        let wide = MlpArchitecture::new(3, 1, 32, Activation::Erf, Parametrization::Ntk);
        let w = init_params(&wide, 42);
        for r in 0..8 {
            for cidx in 0..3 {
                assert_eq!(a.weight_view(1)[[r, cidx]], w.weight_view(1)[[r, cidx]]);
            }
            assert_eq!(a.bias_view(1)[r], w.bias_view(1)[r]);
            assert_eq!(a.weight_view(2)[[0, r]], w.weight_view(2)[[0, r]]);
        }
    }

    #[test]
    fn ntk_init_weight_variance_is_order_one() {
        let arch = MlpArchitecture::new(4, 1, 512, Activation::Erf, Parametrization::Ntk);
        let p = init_params(&arch, 7);
        let w = p.weight_view(2);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn zero_params_give_zero_output() {
        let arch = MlpArchitecture::new(2, 2, 4, Activation::Erf, Parametrization::Ntk);
        let p = ParamVector::zeros(arch.layout());
        let x = arr2(&[[1.0, -2.0], [0.3, 0.7]]);
        let out = forward_batch(&arch, &p, &x).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_forward_hand_case() {
        // L = 0, d = 2, NTK scale 1/sqrt(2): f = (x1 + x2)/sqrt(2) + 0.5.
        let arch = MlpArchitecture::new(2, 0, 0, Activation::Erf, Parametrization::Ntk);
        let p = ParamVector::from_values(vec![1.0, 1.0, 0.5], arch.layout()).unwrap();
        let f = forward(&arch, &p, arr1(&[1.0, 2.0]).view()).unwrap();
        let expected = 3.0 / 2.0f64.sqrt() + 0.5;
        assert!((f - expected).abs() < 1e-15);
    }

    #[test]
    fn parametrizations_agree_under_h_mapping() {
        let arch_std = MlpArchitecture::new(2, 2, 16, Activation::Tanh, Parametrization::Standard);
        let mut arch_ntk = arch_std.clone();
        arch_ntk.parametrization = Parametrization::Ntk;
        let h = ScalingMatrixH::from_arch(&arch_std);
        let p_std = init_params(&arch_std, 5);
        let p_ntk = map_parametrization(&p_std, &h, MapDirection::StdToNtk).unwrap();
        let x = arr2(&[[0.4, -1.2], [2.0, 0.1], [-0.7, 0.9]]);
        let a = forward_batch(&arch_std, &p_std, &x).unwrap();
        let b = forward_batch(&arch_ntk, &p_ntk, &x).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn map_round_trip_and_hand_values() {
        let arch = MlpArchitecture::new(3, 1, 4, Activation::Erf, Parametrization::Standard);
        let h = ScalingMatrixH::from_arch(&arch);
        let p = init_params(&arch, 3);
        let back = map_parametrization(
            &map_parametrization(&p, &h, MapDirection::StdToNtk).unwrap(),
            &h,
            MapDirection::NtkToStd,
        )
        .unwrap();
        for (a, b) in p.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-15);
        }

        // First-layer weight 0.9 with fan-in 3 maps to 0.9 sqrt(3); biases fixed.
        let mut q = ParamVector::zeros(arch.layout());
        let wblk = *q
            .layout()
            .blocks
            .iter()
            .find(|b| b.layer == 1 && b.kind == BlockKind::Weight)
            .unwrap();
        let bblk = *q
            .layout()
            .blocks
            .iter()
            .find(|b| b.layer == 1 && b.kind == BlockKind::Bias)
            .unwrap();
        q.values_mut()[wblk.offset] = 0.9;
        q.values_mut()[bblk.offset] = 0.3;
        let mapped = map_parametrization(&q, &h, MapDirection::StdToNtk).unwrap();
        assert!((mapped.values()[wblk.offset] - 0.9 * 3.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(mapped.values()[bblk.offset], 0.3);
    }

    #[test]
    fn jacobian_rows_for_single_layer() {
        // L = 0: gradient wrt W is x/sqrt(d), wrt b is 1.
        let arch = MlpArchitecture::new(3, 0, 0, Activation::Erf, Parametrization::Ntk);
        let p = init_params(&arch, 1);
        let x = arr2(&[[1.0, 2.0, 3.0]]);
        let j = jacobian(&arch, &p, &x).unwrap();
        let s = 1.0 / 3.0f64.sqrt();
        for c in 0..3 {
            assert!((j[[0, c]] - s * x[[0, c]]).abs() < 1e-15);
        }
        assert!((j[[0, 3]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arch = MlpArchitecture::new(2, 2, 8, Activation::Erf, Parametrization::Ntk);
        let p = init_params(&arch, 9);
        let x = arr2(&[[0.5, -1.0], [1.5, 0.2]]);
        let j = jacobian(&arch, &p, &x).unwrap();
        let h = 1e-6;
        for i in 0..x.nrows() {
            for k in (0..p.len()).step_by(3) {
                let mut plus = p.clone();
                plus.values_mut()[k] += h;
                let mut minus = p.clone();
                minus.values_mut()[k] -= h;
                let fd = (forward_batch(&arch, &plus, &x).unwrap()[i]
                    - forward_batch(&arch, &minus, &x).unwrap()[i])
                    / (2.0 * h);
                let g = j[[i, k]];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "entry ({i},{k}): {g} vs {fd}");
            }
        }
    }

    #[test]
    fn last_layer_jacobian_block_is_scaled_activation() {
        let width = 16;
        let arch = MlpArchitecture::new(2, 1, width, Activation::Erf, Parametrization::Ntk);
        let p = init_params(&arch, 11);
        let x = arr2(&[[0.3, -0.4]]);
        let j = jacobian(&arch, &p, &x).unwrap();
        let cache = forward_cache(&arch, &p, &x).unwrap();
        let blk = *p
            .layout()
            .blocks
            .iter()
            .find(|b| b.layer == 2 && b.kind == BlockKind::Weight)
            .unwrap();
        let s = 1.0 / (width as f64).sqrt();
        for c in 0..width {
            let expected = s * cache.activations[1][[0, c]];
            assert!((j[[0, blk.offset + c]] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shifted_forward_cases() {
        let arch = MlpArchitecture::new(1, 1, 8, Activation::Erf, Parametrization::Ntk);
        let p0 = init_params(&arch, 21);
        let x = arr1(&[0.7]);
        // At theta = theta0 the shifted output is exactly the prior mean.
        let m = PriorMean::Constant(2.5);
        let v = shifted_forward(&arch, &p0, &p0, &m, x.view()).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
        // Zero prior: plain difference of forwards.
        let p1 = init_params(&arch, 22);
        let v = shifted_forward(&arch, &p1, &p0, &PriorMean::Zero, x.view()).unwrap();
        let expected = forward(&arch, &p1, x.view()).unwrap() - forward(&arch, &p0, x.view()).unwrap();
        assert!((v - expected).abs() < 1e-15);
        // Tabulated prior evaluates the supplied function.
        let m = PriorMean::Tabulated(Arc::new(|r: ArrayView1<f64>| r[0] * 2.0));
        let v = shifted_forward(&arch, &p0, &p0, &m, x.view()).unwrap();
        assert!((v - 1.4).abs() < 1e-15);
    }

    #[test]
    fn zero_last_layer_silences_output() {
        let arch = MlpArchitecture::new(2, 2, 8, Activation::Erf, Parametrization::Ntk);
        let p = init_params(&arch, 31);
        let z = zero_last_layer(&p);
        let x = arr2(&[[0.1, 0.2], [-1.0, 0.5]]);
        let out = forward_batch(&arch, &z, &x).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // Earlier blocks are untouched.
        assert_eq!(p.weight_view(1), z.weight_view(1));
        assert_eq!(p.weight_view(2), z.weight_view(2));
        assert_ne!(p.weight_view(3), z.weight_view(3));
    }

    #[test]
    fn default_layout_freezes_first_layer_and_biases() {
        let arch = MlpArchitecture::new(2, 2, 4, Activation::Erf, Parametrization::Ntk);
        for b in &arch.layout().blocks {
            let expect = b.kind == BlockKind::Weight && b.layer > 1;
            assert_eq!(b.trainable, expect, "block {b:?}");
        }
        let mut all = arch.clone();
        all.train_first_layer_and_biases = true;
        assert!(all.layout().blocks.iter().all(|b| b.trainable));
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [
            Activation::Erf,
            Activation::Tanh,
            Activation::Softplus,
        ] {
            for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let d = act.derivative(x);
                assert!((d - fd).abs() < 1e-9, "{act:?} at {x}: {d} vs {fd}");
            }
        }
    }
}
