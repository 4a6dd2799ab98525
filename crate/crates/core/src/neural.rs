//! Dense-network numerical kernel: layers with cached forward passes,
//! losses, gradient reversal, parameter updates and a central-difference
//! gradient checker. Everything is `f64`; batches are row-major
//! `batch x features` matrices.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A batch of row vectors, `batch x features`.
pub type Batch = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => pre.tanh(),
            Activation::Relu => pre.max(0.0),
            Activation::Linear => pre,
        }
    }

    /// Derivative at `pre`, given `out = apply(pre)`. ReLU uses subgradient 0
    /// at exactly 0.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// `out = act(x W^T + b)`; `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// What [`DenseLayer::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Batch,
    pre: Batch,
    output: Batch,
}

impl DenseCache {
    pub fn output(&self) -> &Batch {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrads {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    /// Weights uniform in `(-bound, bound)`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let weights = Array2::from_shape_simple_fn((output, input), || {
            if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            }
        });
        DenseLayer {
            weights,
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &Batch) -> Result<(Batch, DenseCache)> {
        if x.ncols() != self.input_size() {
            return Err(Error::Shape {
                context: "dense layer input",
                expected: self.input_size(),
                actual: x.ncols(),
            });
        }
        let pre = x.dot(&self.weights.t()) + &self.bias;
        let act = self.activation;
        let output = pre.mapv(|p| act.apply(p));
        let cache = DenseCache {
            input: x.clone(),
            pre,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Returns the gradient w.r.t. the layer input and the parameter
    /// gradients, given the gradient w.r.t. the layer output.
    pub fn backward(&self, cache: &DenseCache, upstream: &Batch) -> Result<(Batch, LayerGrads)> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::Shape {
                context: "dense layer upstream gradient",
                expected: cache.output.len(),
                actual: upstream.len(),
            });
        }
        let act = self.activation;
        let mut d_pre = upstream.clone();
        Zip::from(&mut d_pre)
            .and(&cache.pre)
            .and(&cache.output)
            .for_each(|g, &p, &o| *g *= act.derivative(p, o));
        let grads = LayerGrads {
            weights: d_pre.t().dot(&cache.input),
            bias: d_pre.sum_axis(Axis(0)),
        };
        Ok((d_pre.dot(&self.weights), grads))
    }
}

/// Gradient buffers for an ordered list of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    pub layers: Vec<LayerGrads>,
}

impl GradStore {
    pub fn zeros_like<'a>(layers: impl IntoIterator<Item = &'a DenseLayer>) -> Self {
        GradStore {
            layers: layers.into_iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.iter().chain(g.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flattened in layer order, weights (row-major) then bias per layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.weights.iter().copied());
            out.extend(g.bias.iter().copied());
        }
        out
    }
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax(logits: &Batch) -> Batch {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean natural-log cross-entropy and its gradient w.r.t. the logits,
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Batch, labels: &[usize]) -> Result<(f64, Batch)> {
    let (batch, classes) = logits.dim();
    if labels.len() != batch {
        return Err(Error::Shape {
            context: "cross-entropy labels",
            expected: batch,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            index: bad,
            classes,
        });
    }
    let mut loss = 0.0;
    let mut grad = softmax(logits);
    for ((row, logit_row), &label) in grad.rows_mut().into_iter().zip(logits.rows()).zip(labels) {
        let max = logit_row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_sum = logit_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_sum - (logit_row[label] - max);
        let mut row = row;
        row[label] -= 1.0;
    }
    let n = batch as f64;
    grad.mapv_inplace(|g| g / n);
    Ok((loss / n, grad))
}

/// Mean over all entries of the squared error, and `2 (pred - target) / n`.
pub fn mse_loss(pred: &Batch, target: &Batch) -> Result<(f64, Batch)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape {
            context: "mse operands",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.mapv(|d| 2.0 * d / n)))
}

/// Identity on the way forward, `-lambda * g` on the way back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(
                "lambda",
                format!("must be finite and >= 0, got {lambda}"),
            ));
        }
        Ok(GradientReversal { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn forward<'a>(&self, x: &'a Batch) -> &'a Batch {
        x
    }

    pub fn backward(&self, upstream: &Batch) -> Batch {
        let lambda = self.lambda;
        upstream.mapv(|g| -lambda * g)
    }
}

pub fn grl_backward(upstream: &Batch, lambda: f64) -> Result<Batch> {
    Ok(GradientReversal::new(lambda)?.backward(upstream))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam(AdamConfig::default())
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::Adam(c) => {
                if !(c.lr.is_finite() && c.lr >= 0.0) {
                    return Err(Error::invalid("lr", "must be finite and >= 0"));
                }
                if !(c.beta1 > 0.0 && c.beta1 < 1.0) {
                    return Err(Error::invalid("beta1", "must lie in (0, 1)"));
                }
                if !(c.beta2 > 0.0 && c.beta2 < 1.0) {
                    return Err(Error::invalid("beta2", "must lie in (0, 1)"));
                }
                if !(c.eps > 0.0 && c.eps.is_finite()) {
                    return Err(Error::invalid("eps", "must be finite and > 0"));
                }
            }
            OptimizerConfig::Sgd { lr } => {
                if !(lr.is_finite() && lr >= 0.0) {
                    return Err(Error::invalid("lr", "must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place; `step` is the
/// 1-based update count.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamMoments,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Shape {
            context: "adam step",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    let t = step.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Applies gradient updates to an ordered list of layers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: Vec<(AdamMoments, AdamMoments)>,
    step: u64,
}

impl Optimizer {
    pub fn new<'a>(
        config: OptimizerConfig,
        layers: impl IntoIterator<Item = &'a DenseLayer>,
    ) -> Self {
        let moments = layers
            .into_iter()
            .map(|l| {
                (
                    AdamMoments::zeros(l.weights.len()),
                    AdamMoments::zeros(l.bias.len()),
                )
            })
            .collect();
        Optimizer {
            config,
            moments,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, layers: &mut [&mut DenseLayer], grads: &GradStore) -> Result<()> {
        if layers.len() != grads.layers.len() || layers.len() != self.moments.len() {
            return Err(Error::Shape {
                context: "optimizer layer count",
                expected: self.moments.len(),
                actual: grads.layers.len(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        self.step += 1;
        for ((layer, g), (mw, mb)) in layers.iter_mut().zip(&grads.layers).zip(&mut self.moments) {
            if layer.weights.dim() != g.weights.dim() || layer.bias.dim() != g.bias.dim() {
                return Err(Error::Shape {
                    context: "optimizer parameter",
                    expected: layer.param_count(),
                    actual: g.weights.len() + g.bias.len(),
                });
            }
            match self.config {
                OptimizerConfig::Adam(cfg) => {
                    let w = layer.weights.as_slice_mut().expect("standard layout");
                    adam_step(
                        w,
                        g.weights.as_slice().expect("standard layout"),
                        mw,
                        self.step,
                        &cfg,
                    )?;
                    let b = layer.bias.as_slice_mut().expect("standard layout");
                    adam_step(
                        b,
                        g.bias.as_slice().expect("standard layout"),
                        mb,
                        self.step,
                        &cfg,
                    )?;
                }
                OptimizerConfig::Sgd { lr } => {
                    layer.weights.scaled_add(-lr, &g.weights);
                    layer.bias.scaled_add(-lr, &g.bias);
                }
            }
        }
        Ok(())
    }
}

/// Largest relative disagreement between `analytic` and central differences
/// of `loss` around `params`, with denominator `max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::NonPositiveEps);
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            context: "finite-difference gradient",
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let up = loss(&probe);
        probe[i] = params[i] - eps;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
