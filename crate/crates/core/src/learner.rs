//! The learning triplet `(g, h, w)`: a small feed-forward transformation, a
//! linear-softmax hypothesis and per-class importance weights, trained by the
//! alternating loop — forward both domains, pseudo-label the target, refresh
//! the weight estimate, take one gradient step on the configured objective.
//!
//! All gradients are computed by hand (reverse accumulation through the layer
//! stack plus the kernel-term gradients from [`crate::kernels`]); plain
//! fixed-step gradient descent keeps training bitwise deterministic for a
//! given seed.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::divergences::{tv_distance, DiscreteDistribution};
use crate::kernels::{
    conditional_discrepancy_with_grad, median_bandwidth, mmd2_biased_with_grad, KernelKind,
    KernelSpec,
};
use crate::rng::{sample_indices, stream, Purpose};
use crate::shiftgen::SampleSet;
use crate::weights::{bbse_solve, confusion_plugin, pred_marginal, ImportanceWeights, WeightMethod};
use crate::{fmt_g9, Error, Result};

pub const LEAKY_RELU_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    LeakyRelu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_ALPHA * x
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative in terms of the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_ALPHA
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One layer of the transformation `g`: `out = act(in * weight + bias)`,
/// samples as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

impl TryFrom<LayerRepr> for Layer {
    type Error = Error;
    fn try_from(r: LayerRepr) -> Result<Self> {
        let rows = r.weight.len();
        if rows == 0 {
            return Err(Error::Empty("layer weight"));
        }
        let cols = r.weight[0].len();
        if r.weight.iter().any(|row| row.len() != cols) || r.bias.len() != cols {
            return Err(Error::DimensionMismatch(r.bias.len(), cols));
        }
        let mut weight = DMatrix::zeros(rows, cols);
        for (i, row) in r.weight.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                weight[(i, j)] = v;
            }
        }
        Ok(Layer {
            weight,
            bias: DVector::from_vec(r.bias),
            activation: r.activation,
        })
    }
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        Self {
            weight: (0..l.weight.nrows())
                .map(|i| l.weight.row(i).iter().copied().collect())
                .collect(),
            bias: l.bias.iter().copied().collect(),
            activation: l.activation,
        }
    }
}

/// Parameters of the transformation `g` (layer stack) and the hypothesis `h`
/// (linear map into class logits, softmax on top).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParamsRepr", into = "ModelParamsRepr")]
pub struct ModelParams {
    pub g_layers: Vec<Layer>,
    pub h_weight: DMatrix<f64>,
    pub h_bias: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelParamsRepr {
    g_layers: Vec<Layer>,
    h_weight: Vec<Vec<f64>>,
    h_bias: Vec<f64>,
}

impl TryFrom<ModelParamsRepr> for ModelParams {
    type Error = Error;
    fn try_from(r: ModelParamsRepr) -> Result<Self> {
        let rows = r.h_weight.len();
        if rows == 0 {
            return Err(Error::Empty("hypothesis weight"));
        }
        let cols = r.h_weight[0].len();
        if r.h_weight.iter().any(|row| row.len() != cols) || r.h_bias.len() != cols {
            return Err(Error::DimensionMismatch(r.h_bias.len(), cols));
        }
        let mut h_weight = DMatrix::zeros(rows, cols);
        for (i, row) in r.h_weight.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                h_weight[(i, j)] = v;
            }
        }
        let m = ModelParams {
            g_layers: r.g_layers,
            h_weight,
            h_bias: DVector::from_vec(r.h_bias),
        };
        m.validate()?;
        Ok(m)
    }
}

impl From<ModelParams> for ModelParamsRepr {
    fn from(m: ModelParams) -> Self {
        Self {
            g_layers: m.g_layers,
            h_weight: (0..m.h_weight.nrows())
                .map(|i| m.h_weight.row(i).iter().copied().collect())
                .collect(),
            h_bias: m.h_bias.iter().copied().collect(),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let mut dim = self.input_dim();
        for (i, l) in self.g_layers.iter().enumerate() {
            if l.weight.nrows() != dim {
                return Err(Error::DimensionMismatch(l.weight.nrows(), dim));
            }
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::DimensionMismatch(l.bias.len(), l.weight.ncols()));
            }
            if l.weight.iter().any(|v| !v.is_finite()) || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("g layer {i}")));
            }
            dim = l.weight.ncols();
        }
        if self.h_weight.nrows() != dim {
            return Err(Error::DimensionMismatch(self.h_weight.nrows(), dim));
        }
        if self.h_bias.len() != self.h_weight.ncols() {
            return Err(Error::DimensionMismatch(
                self.h_bias.len(),
                self.h_weight.ncols(),
            ));
        }
        if self.h_weight.iter().any(|v| !v.is_finite())
            || self.h_bias.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("hypothesis".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.g_layers
            .first()
            .map_or(self.h_weight.nrows(), |l| l.weight.nrows())
    }

    pub fn representation_dim(&self) -> usize {
        self.g_layers
            .last()
            .map_or(self.h_weight.nrows(), |l| l.weight.ncols())
    }

    pub fn num_classes(&self) -> usize {
        self.h_bias.len()
    }

    /// Scaled-normal initialization of the default desk-scale architecture:
    /// one hidden tanh layer of width 16, linear output of width 8. A bounded
    /// output layer would saturate under cross-entropy and freeze the
    /// alignment gradients, so the representation layer stays linear.
    pub fn default_architecture(input_dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::init(
            input_dim,
            &[(16, Activation::Tanh), (8, Activation::Identity)],
            k,
            rng,
        )
    }

    /// As [`ModelParams::default_architecture`] with a leading
    /// identity-activation layer initialized to standardize the given feature
    /// statistics. Keeps the tanh stack out of saturation on raw features;
    /// the layer trains like any other afterwards.
    pub fn default_architecture_standardized(
        means: &[f64],
        stds: &[f64],
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = means.len();
        let mut weight = DMatrix::zeros(d, d);
        let mut bias = DVector::zeros(d);
        for j in 0..d {
            let s = stds[j].max(1e-6);
            weight[(j, j)] = 1.0 / s;
            bias[j] = -means[j] / s;
        }
        let mut m = Self::default_architecture(d, k, rng);
        let mut layers = vec![Layer {
            weight,
            bias,
            activation: Activation::Identity,
        }];
        layers.append(&mut m.g_layers);
        m.g_layers = layers;
        m
    }

    /// Scaled-normal initialization with the given hidden layout.
    pub fn init(
        input_dim: usize,
        layers: &[(usize, Activation)],
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut g_layers = Vec::with_capacity(layers.len());
        let mut d = input_dim;
        for &(width, activation) in layers {
            g_layers.push(Layer {
                weight: gaussian_matrix(d, width, (1.0 / d as f64).sqrt(), rng),
                bias: DVector::zeros(width),
                activation,
            });
            d = width;
        }
        ModelParams {
            g_layers,
            h_weight: gaussian_matrix(d, k, (1.0 / d as f64).sqrt(), rng),
            h_bias: DVector::zeros(k),
        }
    }

    /// When every activation is the identity, composes the layer stack into a
    /// single affine map `z = linear x + offset` (column convention).
    pub fn as_affine(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        if self
            .g_layers
            .iter()
            .any(|l| l.activation != Activation::Identity)
        {
            return None;
        }
        let d = self.input_dim();
        let mut linear = DMatrix::identity(d, d);
        let mut offset = DVector::zeros(d);
        for l in &self.g_layers {
            let wt = l.weight.transpose();
            offset = &wt * offset + &l.bias;
            linear = &wt * linear;
        }
        Some((linear, offset))
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // row-major fill so layer shape changes do not ripple through the stream
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

struct ForwardCache {
    /// Activations per stage: `h[0]` is the input, `h[last]` is `z`.
    h: Vec<DMatrix<f64>>,
    /// Pre-activations per layer.
    a: Vec<DMatrix<f64>>,
    z: DMatrix<f64>,
    probs: DMatrix<f64>,
}

fn forward_cached(m: &ModelParams, x: &DMatrix<f64>) -> Result<ForwardCache> {
    if x.ncols() != m.input_dim() {
        return Err(Error::DimensionMismatch(x.ncols(), m.input_dim()));
    }
    let n = x.nrows();
    let mut h = vec![x.clone()];
    let mut a = Vec::with_capacity(m.g_layers.len());
    for (li, l) in m.g_layers.iter().enumerate() {
        let mut pre = h.last().unwrap() * &l.weight;
        for i in 0..n {
            for j in 0..pre.ncols() {
                pre[(i, j)] += l.bias[j];
            }
        }
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("g layer {li}")));
        }
        let post = pre.map(|v| l.activation.apply(v));
        a.push(pre);
        h.push(post);
    }
    let z = h.last().unwrap().clone();
    let mut logits = &z * &m.h_weight;
    for i in 0..n {
        for j in 0..logits.ncols() {
            logits[(i, j)] += m.h_bias[j];
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hypothesis logits".into()));
    }
    // row-stable softmax
    let k = logits.ncols();
    let mut probs = logits;
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..k {
            mx = mx.max(probs[(i, j)]);
        }
        let mut sum = 0.0;
        for j in 0..k {
            let e = (probs[(i, j)] - mx).exp();
            probs[(i, j)] = e;
            sum += e;
        }
        for j in 0..k {
            probs[(i, j)] /= sum;
        }
    }
    Ok(ForwardCache { h, a, z, probs })
}

/// Forward pass: representation `z = g(x)` and row-stochastic class
/// probabilities `softmax(z h_weight + h_bias)`.
pub fn forward(m: &ModelParams, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let c = forward_cached(m, x)?;
    Ok((c.z, c.probs))
}

const PROB_FLOOR: f64 = 1e-12;

/// Weighted cross-entropy risk `(1/n) sum_i w[y_i] (-ln probs[i][y_i])`.
/// With `w = 1` this is plain cross-entropy.
pub fn weighted_risk(probs: &DMatrix<f64>, labels: &[usize], w: &ImportanceWeights) -> Result<f64> {
    weighted_risk_slice(probs, labels, w.as_slice())
}

fn weighted_risk_slice(probs: &DMatrix<f64>, labels: &[usize], w: &[f64]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(probs.nrows(), labels.len()));
    }
    if probs.nrows() == 0 {
        return Err(Error::Empty("risk batch"));
    }
    let k = probs.ncols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange(y, k));
        }
        total += w[y] * -(probs[(i, y)].max(PROB_FLOOR)).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Argmax per row, ties broken toward the smaller index.
pub fn pseudo_label(probs: &DMatrix<f64>) -> Vec<usize> {
    (0..probs.nrows())
        .map(|i| {
            let mut best = 0;
            let mut best_v = probs[(i, 0)];
            for j in 1..probs.ncols() {
                if probs[(i, j)] > best_v {
                    best_v = probs[(i, j)];
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let preds = pseudo_label(probs);
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// The four shift-correction objectives.
///
/// - `covariate`:        unweighted risk + lambda_g * MMD2(Z_s, Z_t)
/// - `labelOnly`:        w-weighted risk, no alignment term
/// - `conditionalOnly`:  unweighted risk + lambda_g * class-wise discrepancy
/// - `gls`:              w-weighted risk + lambda_g * class-wise discrepancy
///   with class weights from the reweighted source labels
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Framework {
    #[serde(rename = "covariate")]
    Covariate,
    #[serde(rename = "labelOnly")]
    LabelOnly,
    #[serde(rename = "conditionalOnly")]
    ConditionalOnly,
    #[serde(rename = "gls")]
    Gls,
}

impl Framework {
    pub const ALL: [Framework; 4] = [
        Framework::Covariate,
        Framework::LabelOnly,
        Framework::ConditionalOnly,
        Framework::Gls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Framework::Covariate => "covariate",
            Framework::LabelOnly => "labelOnly",
            Framework::ConditionalOnly => "conditionalOnly",
            Framework::Gls => "gls",
        }
    }

    fn uses_weights(self) -> bool {
        matches!(self, Framework::LabelOnly | Framework::Gls)
    }

    fn alignment(self) -> Alignment {
        match self {
            Framework::Covariate => Alignment::Marginal,
            Framework::LabelOnly => Alignment::None,
            Framework::ConditionalOnly | Framework::Gls => Alignment::Conditional,
        }
    }
}

#[derive(PartialEq)]
enum Alignment {
    None,
    Marginal,
    Conditional,
}

/// Training configuration. `warmup_epochs = None` applies the default of 40,
/// scaled down proportionally when `max_iters < 200`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub framework: Framework,
    pub lambda_g: f64,
    pub learning_rate: f64,
    pub warmup_epochs: Option<usize>,
    pub max_iters: usize,
    /// `None`: full batch up to 2000 rows per domain, minibatches of 256 beyond.
    pub batch_size: Option<usize>,
    pub kernel: KernelSpec,
    pub weight_method: WeightMethod,
    /// Exponential smoothing of the weight estimate:
    /// `w_t = s * w_{t-1} + (1 - s) * w_hat`.
    pub weight_smoothing: f64,
    pub seed: u64,
    /// Loss bound `M` carried into bound reports.
    pub loss_bound: f64,
    /// Refresh the kernel bandwidth by the median heuristic at warm-up end.
    pub median_heuristic: bool,
    /// Cap applied to estimated weights before use.
    pub weight_clip: f64,
    /// Optional pseudo-label confidence threshold for the alignment term.
    pub pseudo_label_threshold: Option<f64>,
}

impl TrainConfig {
    pub fn new(framework: Framework, seed: u64) -> Self {
        Self {
            framework,
            lambda_g: 0.1,
            learning_rate: 0.1,
            warmup_epochs: None,
            max_iters: 200,
            batch_size: None,
            kernel: KernelSpec {
                kind: KernelKind::Gaussian,
                bandwidth: 1.0,
            },
            weight_method: WeightMethod::Qp,
            weight_smoothing: 0.5,
            seed,
            loss_bound: 1.0,
            median_heuristic: true,
            weight_clip: 50.0,
            pseudo_label_threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0) {
            return Err(Error::InvalidParameter("lambda_g must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.weight_smoothing) {
            return Err(Error::InvalidParameter(
                "weight smoothing must lie in [0, 1]".into(),
            ));
        }
        if !(self.loss_bound > 0.0) {
            return Err(Error::InvalidParameter("loss bound must be > 0".into()));
        }
        if !(self.weight_clip > 0.0) {
            return Err(Error::InvalidParameter("weight clip must be > 0".into()));
        }
        if let Some(t) = self.pseudo_label_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidParameter(
                    "pseudo-label threshold must lie in [0, 1]".into(),
                ));
            }
        }
        KernelSpec::new(self.kernel.kind, self.kernel.bandwidth)?;
        Ok(())
    }

    /// 40 warm-up epochs by default, scaled down proportionally when the
    /// iteration budget is below 200.
    pub fn effective_warmup(&self) -> usize {
        match self.warmup_epochs {
            Some(w) => w,
            None => {
                if self.max_iters < 200 {
                    (40 * self.max_iters).div_ceil(200)
                } else {
                    40
                }
            }
        }
    }
}

/// Parameter-shaped gradient container.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub g_layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub h_weight: DMatrix<f64>,
    pub h_bias: DVector<f64>,
}

/// One objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub risk_term: f64,
    /// Value of the alignment term (before the lambda_g factor).
    pub discrepancy_term: f64,
    pub grads: GradientSet,
    /// Classes dropped from the conditional term because one side was empty.
    pub dropped_classes: usize,
}

pub struct Batch<'a> {
    pub features: &'a DMatrix<f64>,
    pub labels: &'a [usize],
}

/// Evaluates the configured objective and its exact gradients on one
/// source/target batch pair. `target.labels` are the pseudo-labels (held
/// fixed for the step). `w` is consumed only by the weighted frameworks;
/// class weights for the conditional term follow the reweighted source label
/// distribution of the batch (or the raw one when the framework is
/// unweighted). Missing classes are dropped from the conditional sum with the
/// remaining class weights renormalized.
pub fn objective(
    framework: Framework,
    m: &ModelParams,
    source: Batch<'_>,
    target: Batch<'_>,
    w: &ImportanceWeights,
    cfg: &TrainConfig,
) -> Result<ObjectiveEval> {
    let ns = source.features.nrows();
    let nt = target.features.nrows();
    if ns == 0 || nt == 0 {
        return Err(Error::Empty("objective batch"));
    }
    let k = m.num_classes();
    if w.k() != k {
        return Err(Error::DimensionMismatch(w.k(), k));
    }

    // single forward over the stacked rows; source rows first
    let mut stacked = DMatrix::zeros(ns + nt, source.features.ncols());
    stacked
        .view_mut((0, 0), (ns, source.features.ncols()))
        .copy_from(source.features);
    stacked
        .view_mut((ns, 0), (nt, target.features.ncols()))
        .copy_from(target.features);
    let cache = forward_cached(m, &stacked)?;

    let ones = vec![1.0; k];
    let risk_w: &[f64] = if framework.uses_weights() {
        w.as_slice()
    } else {
        &ones
    };

    let probs_s = cache.probs.rows(0, ns).into_owned();
    let risk_term = weighted_risk_slice(&probs_s, source.labels, risk_w)?;

    // d(risk)/d(logits) on source rows
    let mut d_logits = DMatrix::zeros(ns + nt, k);
    for (i, &y) in source.labels.iter().enumerate() {
        let wy = risk_w[y] / ns as f64;
        for j in 0..k {
            let indicator = if j == y { 1.0 } else { 0.0 };
            d_logits[(i, j)] = wy * (cache.probs[(i, j)] - indicator);
        }
    }

    let z_s = cache.z.rows(0, ns).into_owned();
    let z_t = cache.z.rows(ns, nt).into_owned();
    let mut d_z = &d_logits * m.h_weight.transpose();

    let mut discrepancy_term = 0.0;
    let mut dropped_classes = 0;
    match framework.alignment() {
        Alignment::None => {}
        Alignment::Marginal => {
            let (v, ds, dt) = mmd2_biased_with_grad(&cfg.kernel, &z_s, &z_t)?;
            discrepancy_term = v;
            for i in 0..ns {
                for j in 0..d_z.ncols() {
                    d_z[(i, j)] += cfg.lambda_g * ds[(i, j)];
                }
            }
            for i in 0..nt {
                for j in 0..d_z.ncols() {
                    d_z[(ns + i, j)] += cfg.lambda_g * dt[(i, j)];
                }
            }
        }
        Alignment::Conditional => {
            // class weights: reweighted source label distribution of the batch
            let mut cw_raw = vec![0.0; k];
            for &y in source.labels {
                cw_raw[y] += risk_w[y];
            }
            let mut present_t = vec![false; k];
            for &y in target.labels {
                if y < k {
                    present_t[y] = true;
                }
            }
            let mut kept = vec![0.0; k];
            for y in 0..k {
                if cw_raw[y] > 0.0 {
                    if present_t[y] {
                        kept[y] = cw_raw[y];
                    } else {
                        dropped_classes += 1;
                    }
                }
            }
            if kept.iter().any(|&v| v > 0.0) {
                let cw = DiscreteDistribution::normalized(kept)?;
                let (v, ds, dt) = conditional_discrepancy_with_grad(
                    &cfg.kernel,
                    (&z_s, source.labels),
                    (&z_t, target.labels),
                    &cw,
                )?;
                discrepancy_term = v;
                for i in 0..ns {
                    for j in 0..d_z.ncols() {
                        d_z[(i, j)] += cfg.lambda_g * ds[(i, j)];
                    }
                }
                for i in 0..nt {
                    for j in 0..d_z.ncols() {
                        d_z[(ns + i, j)] += cfg.lambda_g * dt[(i, j)];
                    }
                }
            } else {
                dropped_classes = k;
            }
        }
    }

    // hypothesis gradients
    let h_weight_grad = cache.z.transpose() * &d_logits;
    let h_bias_grad = DVector::from_fn(k, |j, _| d_logits.column(j).sum());

    // backprop through g
    let mut g_grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(m.g_layers.len());
    let mut d_h = d_z;
    for (li, l) in m.g_layers.iter().enumerate().rev() {
        let pre = &cache.a[li];
        let mut d_a = d_h;
        for i in 0..d_a.nrows() {
            for j in 0..d_a.ncols() {
                d_a[(i, j)] *= l.activation.derivative(pre[(i, j)]);
            }
        }
        let w_grad = cache.h[li].transpose() * &d_a;
        let b_grad = DVector::from_fn(l.bias.len(), |j, _| d_a.column(j).sum());
        d_h = &d_a * l.weight.transpose();
        g_grads.push((w_grad, b_grad));
    }
    g_grads.reverse();

    let loss = risk_term + cfg.lambda_g * discrepancy_term;
    Ok(ObjectiveEval {
        loss,
        risk_term,
        discrepancy_term,
        grads: GradientSet {
            g_layers: g_grads,
            h_weight: h_weight_grad,
            h_bias: h_bias_grad,
        },
        dropped_classes,
    })
}

fn apply_step(m: &mut ModelParams, grads: &GradientSet, lr: f64) {
    for (l, (gw, gb)) in m.g_layers.iter_mut().zip(&grads.g_layers) {
        l.weight -= gw * lr;
        l.bias -= gb * lr;
    }
    m.h_weight -= &grads.h_weight * lr;
    m.h_bias -= &grads.h_bias * lr;
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub src_acc: f64,
    pub tgt_acc: f64,
    /// `d_TV(w * p_Y, q_Y)` against the held-back empirical target labels;
    /// an evaluation-side diagnostic, never visible to the algorithm.
    pub tv_label: f64,
    /// Value of the alignment term measured on the step batch.
    pub cond_disc: f64,
}

/// Per-epoch diagnostics of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub warmup_epochs: usize,
    /// Kernel bandwidth in effect after warm-up.
    pub bandwidth: f64,
    /// Number of class-drop events in the conditional term.
    pub dropped_class_events: usize,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss,src_acc,tgt_acc,tv_label,cond_disc")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch,
                fmt_g9(r.loss),
                fmt_g9(r.src_acc),
                fmt_g9(r.tgt_acc),
                fmt_g9(r.tv_label),
                fmt_g9(r.cond_disc)
            )?;
        }
        Ok(())
    }
}

/// Training output: the fitted triplet and the trace.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelParams,
    pub weights: ImportanceWeights,
    pub trace: TrainTrace,
    /// KKT residual of the last weight estimate (0 when never estimated).
    pub final_kkt_residual: f64,
}

fn minibatch_rows(
    x: &DMatrix<f64>,
    labels: &[usize],
    idx: &[usize],
) -> (DMatrix<f64>, Vec<usize>) {
    let mut out = DMatrix::zeros(idx.len(), x.ncols());
    let mut lab = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from(&x.row(i));
        lab.push(labels[i]);
    }
    (out, lab)
}

/// Runs the alternating training loop.
///
/// Warm-up epochs minimize source-only risk (`w = 1`, `lambda_g = 0`). Each
/// later epoch forwards both domains, pseudo-labels the target, refreshes the
/// weight estimate from the live predictor (confusion joint on the source,
/// prediction marginal on the target, exponential smoothing) and takes one
/// gradient step on the configured objective.
///
/// `target.labels` are hidden from the algorithm; they feed only the
/// evaluation columns of the trace.
pub fn train(source: &SampleSet, target: &SampleSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let k = 1 + source.labels.iter().copied().max().unwrap();
    let dim = source.dim();
    if target.dim() != dim {
        return Err(Error::DimensionMismatch(target.dim(), dim));
    }

    // pooled feature statistics for the standardizing first layer
    let n_all = (source.len() + target.len()) as f64;
    let mut means = vec![0.0; dim];
    let mut stds = vec![0.0; dim];
    for j in 0..dim {
        let sum: f64 = source.features.column(j).sum() + target.features.column(j).sum();
        means[j] = sum / n_all;
        let ss: f64 = source
            .features
            .column(j)
            .iter()
            .chain(target.features.column(j).iter())
            .map(|&v| (v - means[j]) * (v - means[j]))
            .sum();
        stds[j] = (ss / n_all).sqrt();
    }

    let mut init_rng = stream(cfg.seed, Purpose::ModelInit);
    let mut model =
        ModelParams::default_architecture_standardized(&means, &stds, k, &mut init_rng);

    let p_hat = source.empirical_label_dist(k)?;
    let q_hat_true = target.empirical_label_dist(k)?; // evaluation only
    let mut weights = ImportanceWeights::identity(p_hat.clone());
    let ones = ImportanceWeights::identity(p_hat.clone());

    let warmup = cfg.effective_warmup().min(cfg.max_iters);
    let mut kernel = cfg.kernel;
    let mut batch_rng = stream(cfg.seed, Purpose::Minibatch);
    let batch_size = cfg.batch_size.unwrap_or_else(|| {
        if source.len().max(target.len()) <= 2000 {
            usize::MAX
        } else {
            256
        }
    });

    let mut records = Vec::with_capacity(cfg.max_iters);
    let mut dropped_total = 0usize;
    let mut final_kkt_residual = 0.0;

    let diverged = |epoch: usize, records: Vec<EpochRecord>, bandwidth: f64, dropped: usize| {
        Error::Diverged {
            epoch,
            trace: Box::new(TrainTrace {
                records,
                warmup_epochs: warmup,
                bandwidth,
                dropped_class_events: dropped,
            }),
        }
    };

    for epoch in 0..cfg.max_iters {
        let in_warmup = epoch < warmup;

        // full forward for diagnostics, pseudo-labels and the weight update;
        // non-finite activations mean the optimization blew up
        let fwd_s = forward(&model, &source.features);
        let fwd_t = forward(&model, &target.features);
        let ((_, probs_s), (_, probs_t)) = match (fwd_s, fwd_t) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(Error::NonFinite(_)), _) | (_, Err(Error::NonFinite(_))) => {
                return Err(diverged(epoch, records, kernel.bandwidth, dropped_total));
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let pseudo = pseudo_label(&probs_t);
        let preds_s = pseudo_label(&probs_s);

        if in_warmup {
            weights = ImportanceWeights::identity(p_hat.clone());
        } else {
            if epoch == warmup && cfg.median_heuristic && kernel.kind.needs_bandwidth() {
                // freeze the bandwidth from the current representations
                let (z_s, _) = forward(&model, &source.features)?;
                let (z_t, _) = forward(&model, &target.features)?;
                let mut all = DMatrix::zeros(z_s.nrows() + z_t.nrows(), z_s.ncols());
                all.view_mut((0, 0), (z_s.nrows(), z_s.ncols())).copy_from(&z_s);
                all.view_mut((z_s.nrows(), 0), (z_t.nrows(), z_t.ncols()))
                    .copy_from(&z_t);
                let mut bw_rng = stream(cfg.seed, Purpose::Bandwidth);
                kernel.bandwidth = median_bandwidth(kernel.kind, &all, &mut bw_rng);
            }
            let confusion = confusion_plugin(&preds_s, &source.labels, k)?;
            let q_pred = pred_marginal(&pseudo, k)?;
            let estimate = bbse_solve(&q_pred, &confusion, &p_hat, cfg.weight_method)?;
            final_kkt_residual = estimate.kkt_residual;
            let clipped = estimate.weights.clip_and_renormalize(cfg.weight_clip)?;
            let s = cfg.weight_smoothing;
            let blended: Vec<f64> = weights
                .as_slice()
                .iter()
                .zip(clipped.as_slice())
                .map(|(&prev, &new)| s * prev + (1.0 - s) * new)
                .collect();
            weights = ImportanceWeights::new(blended, p_hat.clone())?;
        }

        // evaluation columns
        let src_acc = accuracy(&probs_s, &source.labels);
        let tgt_acc = accuracy(&probs_t, &target.labels);
        let tv_label = tv_distance(&weights.reweighted_label_dist(), &q_hat_true)?;

        // gradient step
        let step_framework = if in_warmup {
            Framework::LabelOnly
        } else {
            cfg.framework
        };
        let step_weights = if in_warmup { &ones } else { &weights };
        let mut step_cfg = cfg.clone();
        step_cfg.kernel = kernel;
        if in_warmup {
            step_cfg.lambda_g = 0.0;
        }

        // pseudo-label confidence mask for the alignment term
        let (t_feats_store, t_pseudo_store);
        let (t_feats, t_pseudo): (&DMatrix<f64>, &[usize]) = match cfg.pseudo_label_threshold {
            Some(tau) if !in_warmup => {
                let keep: Vec<usize> = (0..target.len())
                    .filter(|&i| probs_t[(i, pseudo[i])] >= tau)
                    .collect();
                if keep.is_empty() || keep.len() == target.len() {
                    (&target.features, pseudo.as_slice())
                } else {
                    let (f, l) = minibatch_rows(&target.features, &pseudo, &keep);
                    t_feats_store = f;
                    t_pseudo_store = l;
                    (&t_feats_store, t_pseudo_store.as_slice())
                }
            }
            _ => (&target.features, pseudo.as_slice()),
        };

        let eval = if batch_size >= source.len() && batch_size >= t_feats.nrows() {
            objective(
                step_framework,
                &model,
                Batch {
                    features: &source.features,
                    labels: &source.labels,
                },
                Batch {
                    features: t_feats,
                    labels: t_pseudo,
                },
                step_weights,
                &step_cfg,
            )?
        } else {
            let bs = batch_size.min(source.len());
            let bt = batch_size.min(t_feats.nrows());
            let si = sample_indices(&mut batch_rng, source.len(), bs);
            let ti = sample_indices(&mut batch_rng, t_feats.nrows(), bt);
            let (sf, sl) = minibatch_rows(&source.features, &source.labels, &si);
            let (tf, tl) = minibatch_rows(t_feats, t_pseudo, &ti);
            objective(
                step_framework,
                &model,
                Batch {
                    features: &sf,
                    labels: &sl,
                },
                Batch {
                    features: &tf,
                    labels: &tl,
                },
                step_weights,
                &step_cfg,
            )?
        };

        if !eval.loss.is_finite() {
            return Err(diverged(epoch, records, kernel.bandwidth, dropped_total));
        }
        dropped_total += eval.dropped_classes;
        records.push(EpochRecord {
            epoch,
            loss: eval.loss,
            src_acc,
            tgt_acc,
            tv_label,
            cond_disc: eval.discrepancy_term,
        });
        apply_step(&mut model, &eval.grads, cfg.learning_rate);
        if model.validate().is_err() {
            return Err(diverged(epoch, records, kernel.bandwidth, dropped_total));
        }
    }

    Ok(TrainOutput {
        model,
        weights,
        trace: TrainTrace {
            records,
            warmup_epochs: warmup,
            bandwidth: kernel.bandwidth,
            dropped_class_events: dropped_total,
        },
        final_kkt_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergences::DiscreteDistribution;
    use crate::shiftgen::{make_scenario, sample, DomainTag};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn dist(v: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(v.to_vec()).unwrap()
    }

    fn tiny_model(d: usize, k: usize, seed: u64) -> ModelParams {
        let mut rng = stream(seed, Purpose::ModelInit);
        ModelParams::init(
            d,
            &[(4, Activation::Tanh), (3, Activation::Tanh)],
            k,
            &mut rng,
        )
    }

    #[test]
    fn forward_uniform_probs_for_zero_hypothesis() {
        let m = ModelParams {
            g_layers: vec![],
            h_weight: DMatrix::zeros(2, 3),
            h_bias: DVector::zeros(3),
        };
        let x = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.1]);
        let (z, p) = forward(&m, &x).unwrap();
        assert_eq!(z, x);
        for i in 0..2 {
            for j in 0..3 {
                assert_abs_diff_eq!(p[(i, j)], 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_hand_computed_linear_layer() {
        // g: 2 -> 1 linear with weight [1, -1]', bias 0.5; h: 1 -> 2
        let m = ModelParams {
            g_layers: vec![Layer {
                weight: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
                bias: DVector::from_vec(vec![0.5]),
                activation: Activation::Identity,
            }],
            h_weight: DMatrix::from_row_slice(1, 2, &[2.0, 0.0]),
            h_bias: DVector::from_vec(vec![0.0, 1.0]),
        };
        let x = DMatrix::from_row_slice(1, 2, &[3.0, 1.0]);
        let (z, p) = forward(&m, &x).unwrap();
        assert_abs_diff_eq!(z[(0, 0)], 2.5, epsilon = 1e-15);
        // logits = [5.0, 1.0]
        let e0 = (5.0f64).exp();
        let e1 = (1.0f64).exp();
        assert_abs_diff_eq!(p[(0, 0)], e0 / (e0 + e1), epsilon = 1e-12);
        assert_abs_diff_eq!(p[(0, 0)] + p[(0, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn probs_rows_sum_to_one() {
        let m = tiny_model(2, 3, 5);
        let mut rng = stream(6, Purpose::MonteCarlo);
        let x = gaussian_matrix(20, 2, 1.0, &mut rng);
        let (_, p) = forward(&m, &x).unwrap();
        for i in 0..p.nrows() {
            let s: f64 = (0..p.ncols()).map(|j| p[(i, j)]).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn weighted_risk_values() {
        let probs = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let labels = [0usize, 1];
        let w = ImportanceWeights::identity(dist(&[0.5, 0.5]));
        // perfect one-hot probabilities: zero up to the floor
        assert!(weighted_risk(&probs, &labels, &w).unwrap() < 1e-10);

        let uniform = DMatrix::from_element(3, 4, 0.25);
        let labels = [0usize, 1, 2];
        let w4 = ImportanceWeights::identity(dist(&[0.25; 4]));
        assert_abs_diff_eq!(
            weighted_risk(&uniform, &labels, &w4).unwrap(),
            (4.0f64).ln(),
            epsilon = 1e-12
        );

        // linear in w: doubling doubles (slice form)
        let v1 = weighted_risk_slice(&uniform, &labels, &[1.0; 4]).unwrap();
        let v2 = weighted_risk_slice(&uniform, &labels, &[2.0; 4]).unwrap();
        assert_abs_diff_eq!(v2, 2.0 * v1, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_label_tie_rule_and_invariance() {
        let p = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.2, 0.8, 1.0, 0.0]);
        assert_eq!(pseudo_label(&p), vec![0, 1, 0]);
        // strictly increasing transform leaves the argmax unchanged
        let q = p.map(|v| (3.0 * v + 1.0).exp());
        assert_eq!(pseudo_label(&q), pseudo_label(&p));
    }

    fn flatten(m: &ModelParams) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &m.g_layers {
            v.extend(l.weight.iter());
            v.extend(l.bias.iter());
        }
        v.extend(m.h_weight.iter());
        v.extend(m.h_bias.iter());
        v
    }

    fn unflatten(template: &ModelParams, v: &[f64]) -> ModelParams {
        let mut m = template.clone();
        let mut pos = 0;
        for l in &mut m.g_layers {
            for x in l.weight.iter_mut() {
                *x = v[pos];
                pos += 1;
            }
            for x in l.bias.iter_mut() {
                *x = v[pos];
                pos += 1;
            }
        }
        for x in m.h_weight.iter_mut() {
            *x = v[pos];
            pos += 1;
        }
        for x in m.h_bias.iter_mut() {
            *x = v[pos];
            pos += 1;
        }
        assert_eq!(pos, v.len());
        m
    }

    fn flatten_grads(g: &GradientSet) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in &g.g_layers {
            v.extend(w.iter());
            v.extend(b.iter());
        }
        v.extend(g.h_weight.iter());
        v.extend(g.h_bias.iter());
        v
    }

    /// Central finite differences against the analytic gradient for one
    /// framework on a random small instance.
    fn gradient_check(framework: Framework, seed: u64) {
        let mut rng = stream(seed, Purpose::MonteCarlo);
        let d = 2;
        let k = 2;
        let m = tiny_model(d, k, seed);
        let sx = gaussian_matrix(6, d, 1.0, &mut rng);
        let tx = gaussian_matrix(5, d, 1.0, &mut rng);
        let mut sy: Vec<usize> = (0..6).map(|_| rng.random_range(0..k)).collect();
        let mut ty: Vec<usize> = (0..5).map(|_| rng.random_range(0..k)).collect();
        // guard against degenerate batches missing a class
        sy[0] = 0;
        sy[1] = 1;
        ty[0] = 0;
        ty[1] = 1;
        let w = ImportanceWeights::new(vec![1.4, 0.6727272727272727], dist(&[0.45, 0.55])).unwrap();
        let mut cfg = TrainConfig::new(framework, seed);
        cfg.lambda_g = 0.3;
        cfg.kernel = KernelSpec::gaussian(0.8).unwrap();

        let eval = objective(
            framework,
            &m,
            Batch { features: &sx, labels: &sy },
            Batch { features: &tx, labels: &ty },
            &w,
            &cfg,
        )
        .unwrap();
        let analytic = flatten_grads(&eval.grads);
        let theta = flatten(&m);
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fp = objective(
                framework,
                &unflatten(&m, &tp),
                Batch { features: &sx, labels: &sy },
                Batch { features: &tx, labels: &ty },
                &w,
                &cfg,
            )
            .unwrap()
            .loss;
            let fm = objective(
                framework,
                &unflatten(&m, &tm),
                Batch { features: &sx, labels: &sy },
                Batch { features: &tx, labels: &ty },
                &w,
                &cfg,
            )
            .unwrap()
            .loss;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-3);
            assert!(
                rel < 1e-4,
                "{framework:?} param {i}: analytic {} fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_all_frameworks() {
        for (i, fw) in Framework::ALL.into_iter().enumerate() {
            gradient_check(fw, 100 + i as u64);
        }
    }

    #[test]
    fn objective_reduces_to_weighted_risk_when_lambda_zero() {
        let mut rng = stream(15, Purpose::MonteCarlo);
        let m = tiny_model(2, 2, 15);
        let sx = gaussian_matrix(8, 2, 1.0, &mut rng);
        let tx = gaussian_matrix(8, 2, 1.0, &mut rng);
        let sy = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let ty = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let w = ImportanceWeights::identity(dist(&[0.5, 0.5]));
        let mut cfg = TrainConfig::new(Framework::Gls, 15);
        cfg.lambda_g = 0.0;
        let eval = objective(
            Framework::Gls,
            &m,
            Batch { features: &sx, labels: &sy },
            Batch { features: &tx, labels: &ty },
            &w,
            &cfg,
        )
        .unwrap();
        let (_, probs) = forward(&m, &sx).unwrap();
        let risk = weighted_risk(&probs, &sy, &w).unwrap();
        assert_abs_diff_eq!(eval.loss, risk, epsilon = 1e-14);
    }

    #[test]
    fn covariate_discrepancy_zero_for_identical_batches() {
        let mut rng = stream(16, Purpose::MonteCarlo);
        let m = tiny_model(2, 2, 16);
        let x = gaussian_matrix(7, 2, 1.0, &mut rng);
        let y = vec![0, 1, 0, 1, 0, 1, 0];
        let w = ImportanceWeights::identity(dist(&[0.5, 0.5]));
        let cfg = TrainConfig::new(Framework::Covariate, 16);
        let eval = objective(
            Framework::Covariate,
            &m,
            Batch { features: &x, labels: &y },
            Batch { features: &x, labels: &y },
            &w,
            &cfg,
        )
        .unwrap();
        assert!(eval.discrepancy_term.abs() < 1e-12);
    }

    #[test]
    fn conditional_term_drops_missing_classes() {
        let mut rng = stream(17, Purpose::MonteCarlo);
        let m = tiny_model(2, 3, 17);
        let sx = gaussian_matrix(6, 2, 1.0, &mut rng);
        let tx = gaussian_matrix(6, 2, 1.0, &mut rng);
        let sy = vec![0, 1, 2, 0, 1, 2];
        let ty = vec![0, 0, 1, 1, 0, 1]; // class 2 collapsed away
        let w = ImportanceWeights::identity(dist(&[1.0 / 3.0; 3]));
        let cfg = TrainConfig::new(Framework::Gls, 17);
        let eval = objective(
            Framework::Gls,
            &m,
            Batch { features: &sx, labels: &sy },
            Batch { features: &tx, labels: &ty },
            &w,
            &cfg,
        )
        .unwrap();
        assert_eq!(eval.dropped_classes, 1);
        assert!(eval.loss.is_finite());
    }

    fn fig1_data(delta: f64, n: usize, seed: u64) -> (SampleSet, SampleSet) {
        let sc = make_scenario(2, 1, delta, dist(&[0.6, 0.4]), dist(&[0.4, 0.6]), seed).unwrap();
        let s = sample(&sc.source, n, seed.wrapping_add(1), DomainTag::Source).unwrap();
        let t = sample(&sc.target, n, seed.wrapping_add(2), DomainTag::Target).unwrap();
        (s, t)
    }

    #[test]
    fn training_is_deterministic() {
        let (s, t) = fig1_data(0.8, 120, 31);
        let mut cfg = TrainConfig::new(Framework::Gls, 31);
        cfg.max_iters = 12;
        let a = train(&s, &t, &cfg).unwrap();
        let b = train(&s, &t, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn warmup_equal_to_total_is_source_only_erm() {
        let (s, t) = fig1_data(0.8, 150, 33);
        let mut cfg = TrainConfig::new(Framework::Gls, 33);
        cfg.max_iters = 30;
        cfg.warmup_epochs = Some(30);
        let out = train(&s, &t, &cfg).unwrap();
        // weights were never estimated
        assert!(out.weights.as_slice().iter().all(|&v| v == 1.0));

        // and the model matches a covariate run with the same degenerate
        // schedule: the objective never leaves warm-up
        let mut cfg2 = cfg.clone();
        cfg2.framework = Framework::Covariate;
        let out2 = train(&s, &t, &cfg2).unwrap();
        assert_eq!(out.model, out2.model);
    }

    #[test]
    fn label_only_keeps_weights_near_one_without_shift() {
        let sc = make_scenario(2, 1, 0.0, dist(&[0.6, 0.4]), dist(&[0.6, 0.4]), 35).unwrap();
        let s = sample(&sc.source, 4000, 36, DomainTag::Source).unwrap();
        let t = sample(&sc.target, 4000, 99, DomainTag::Target).unwrap();
        let mut cfg = TrainConfig::new(Framework::LabelOnly, 35);
        cfg.max_iters = 60;
        cfg.warmup_epochs = Some(20);
        let out = train(&s, &t, &cfg).unwrap();
        for &v in out.weights.as_slice() {
            assert!((v - 1.0).abs() <= 0.1, "weight {v} strayed from 1");
        }
    }

    #[test]
    fn gls_recovers_oracle_weights_on_fig1_regime() {
        use crate::shiftgen::make_translated_scenario;
        let mut hits = 0;
        for seed in 0..3u64 {
            let sc = make_translated_scenario(
                2,
                1,
                0.25,
                dist(&[0.6, 0.4]),
                dist(&[0.4, 0.6]),
                0.5,
            )
            .unwrap();
            let s = sample(&sc.source, 2000, 201 + seed, DomainTag::Source).unwrap();
            let t = sample(&sc.target, 2000, 202 + seed, DomainTag::Target).unwrap();
            let mut cfg = TrainConfig::new(Framework::Gls, 200 + seed);
            cfg.max_iters = 120;
            cfg.warmup_epochs = Some(40);
            let out = train(&s, &t, &cfg).unwrap();
            let err = out
                .weights
                .as_slice()
                .iter()
                .zip([2.0 / 3.0, 1.5])
                .map(|(&w, star)| (w - star).abs())
                .fold(0.0f64, f64::max);
            if err <= 0.15 {
                hits += 1;
            }
        }
        assert!(hits >= 2, "only {hits}/3 seeds recovered w*");
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let (s, t) = fig1_data(0.5, 80, 37);
        let mut cfg = TrainConfig::new(Framework::LabelOnly, 37);
        cfg.learning_rate = f64::INFINITY; // non-finite parameters immediately
        cfg.max_iters = 50;
        cfg.warmup_epochs = Some(0);
        match train(&s, &t, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_expected_schema() {
        let (s, t) = fig1_data(0.5, 100, 39);
        let mut cfg = TrainConfig::new(Framework::Covariate, 39);
        cfg.max_iters = 5;
        cfg.warmup_epochs = Some(2);
        let out = train(&s, &t, &cfg).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,loss,src_acc,tgt_acc,tv_label,cond_disc"
        );
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn as_affine_composes_identity_layers() {
        let m = ModelParams {
            g_layers: vec![
                Layer {
                    weight: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 2.0]),
                    bias: DVector::from_vec(vec![0.1, -0.2]),
                    activation: Activation::Identity,
                },
                Layer {
                    weight: DMatrix::from_row_slice(2, 1, &[3.0, 1.0]),
                    bias: DVector::from_vec(vec![0.7]),
                    activation: Activation::Identity,
                },
            ],
            h_weight: DMatrix::zeros(1, 2),
            h_bias: DVector::zeros(2),
        };
        let (linear, offset) = m.as_affine().unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[1.5, -2.0]);
        let (z, _) = forward(&m, &x).unwrap();
        let expected = &linear * DVector::from_vec(vec![1.5, -2.0]) + &offset;
        assert_abs_diff_eq!(z[(0, 0)], expected[0], epsilon = 1e-12);

        let nonlinear = tiny_model(2, 2, 3);
        assert!(nonlinear.as_affine().is_none());
    }

    #[test]
    fn model_json_roundtrip() {
        let m = tiny_model(3, 2, 77);
        let json = serde_json::to_string(&m).unwrap();
        let back: ModelParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
