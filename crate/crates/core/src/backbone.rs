//! Fully-connected feature extractor with hand-written forward and backward
//! passes. Hidden layers use ReLU; the last layer is linear and produces the
//! embedding.

use std::fmt::Write as _;
use std::hash::Hasher;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier;
use crate::episodes::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::{self, tag};

const CHECKPOINT_MAGIC: &str = "fewshot-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// fan_out x fan_in
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    /// Uniform He-style init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    /// `x W^T + b` for a batch of rows.
    pub fn affine(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_transposed(&self.weights)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Gradients of an affine map given the gradient at its output:
    /// `(dW, db, dX)`.
    pub fn affine_backward(&self, input: &Matrix, grad_out: &Matrix) -> Result<(Layer, Matrix)> {
        let weights = grad_out.transpose().matmul(input)?;
        let mut bias = vec![0.0; self.fan_out()];
        for row in grad_out.iter_rows() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let grad_in = grad_out.matmul(&self.weights)?;
        Ok((Layer { weights, bias }, grad_in))
    }

    fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Same shape as `MlpParams`; one gradient buffer per parameter.
pub type Gradients = MlpParams;

impl MlpParams {
    /// `dims` lists the layer widths from input to embedding, e.g.
    /// `[16, 64, 64, 16]` for two hidden layers.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        let mut rng = seed::rng(seed::derive(seed, tag::INIT));
        let layers = dims
            .windows(2)
            .map(|w| Layer::he_uniform(w[0], w[1], &mut rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let params = Self { layers };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && self.layers[i - 1].fan_out() != l.fan_in() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.fan_in(),
                    self.layers[i - 1].fan_out()
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    /// All parameter values, layer by layer (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable slices over every parameter buffer, in `flatten` order.
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    /// Hash of every parameter bit pattern, used to tie caches to the
    /// parameters that produced them.
    pub fn digest(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for l in &self.layers {
            h.write_usize(l.fan_in());
            h.write_usize(l.fan_out());
            for v in l.weights.as_slice().iter().chain(&l.bias) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Text checkpoint: a header with the layer count, then per layer a shape
    /// line, the weight rows and the bias row. Values use Rust's shortest
    /// round-trip float formatting, so loading is bit-exact.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "layers {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(s, "layer {} {}", l.fan_out(), l.fan_in());
            for row in l.weights.iter_rows() {
                push_values(&mut s, row);
            }
            push_values(&mut s, &l.bias);
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::ConfigParse {
                line: 0,
                message: format!("checkpoint ends before {what}"),
            })
        };
        let (n, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(parse_err(n, "not a fewshot-mlp checkpoint"));
        }
        let version: u32 = parse_field(n, parts.next())?;
        if version != CHECKPOINT_VERSION {
            return Err(parse_err(n, &format!("unsupported checkpoint version {version}")));
        }
        let (n, count_line) = next("layer count")?;
        let count: usize = match count_line.split_whitespace().collect::<Vec<_>>()[..] {
            ["layers", c] => parse_field(n, Some(c))?,
            _ => return Err(parse_err(n, "expected `layers <count>`")),
        };
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, shape) = next("layer shape")?;
            let (fan_out, fan_in): (usize, usize) =
                match shape.split_whitespace().collect::<Vec<_>>()[..] {
                    ["layer", o, i] => (parse_field(n, Some(o))?, parse_field(n, Some(i))?),
                    _ => return Err(parse_err(n, "expected `layer <fan_out> <fan_in>`")),
                };
            let mut weights = Vec::with_capacity(fan_out * fan_in);
            for _ in 0..fan_out {
                let (n, row) = next("weight row")?;
                weights.extend(parse_values(n, row, fan_in)?);
            }
            let (n, row) = next("bias row")?;
            let bias = parse_values(n, row, fan_out)?;
            layers.push(Layer {
                weights: Matrix::from_vec(fan_out, fan_in, weights)?,
                bias,
            });
        }
        Self::from_layers(layers)
    }
}

fn push_values(s: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:?}");
    }
    s.push('\n');
}

fn parse_err(line: usize, message: &str) -> Error {
    Error::ConfigParse {
        line,
        message: message.to_string(),
    }
}

fn parse_field<T: std::str::FromStr>(line: usize, field: Option<&str>) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| parse_err(line, "malformed number"))
}

fn parse_values(line: usize, row: &str, expected: usize) -> Result<Vec<f64>> {
    let values = row
        .split_whitespace()
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse_err(line, &e.to_string()))?;
    if values.len() != expected {
        return Err(parse_err(
            line,
            &format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

/// Everything `backward` needs from the matching `forward` call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the batch itself for layer 0).
    layer_inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<Matrix>,
    digest: u64,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.layer_inputs.first().map_or(0, Matrix::rows)
    }
}

pub fn forward(params: &MlpParams, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if batch.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input dimension {} does not match network input {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut x = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.affine(&x)?;
        let next = if i < last {
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            a
        } else {
            z.clone()
        };
        layer_inputs.push(std::mem::replace(&mut x, next));
        pre_activations.push(z);
    }
    Ok((
        x,
        ForwardCache {
            layer_inputs,
            pre_activations,
            digest: params.digest(),
        },
    ))
}

/// Returns parameter gradients and the gradient with respect to the inputs.
/// ReLU's derivative at exactly zero is taken as zero.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<(Gradients, Matrix)> {
    if cache.digest != params.digest() || cache.layer_inputs.len() != params.layers.len() {
        return Err(Error::Contract(
            "forward cache was produced by different parameters".into(),
        ));
    }
    if upstream.shape() != (cache.batch_size(), params.output_dim()) {
        return Err(Error::Contract(format!(
            "upstream gradient is {}x{}, cache holds a {}x{} output",
            upstream.rows(),
            upstream.cols(),
            cache.batch_size(),
            params.output_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut g = upstream.clone();
    for i in (0..params.layers.len()).rev() {
        if i < last {
            let z = &cache.pre_activations[i];
            for (gv, &zv) in g.as_mut_slice().iter_mut().zip(z.as_slice()) {
                if zv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let (layer_grad, grad_in) = params.layers[i].affine_backward(&cache.layer_inputs[i], &g)?;
        grads.push(layer_grad);
        g = grad_in;
    }
    grads.reverse();
    Ok((MlpParams { layers: grads }, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 30,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Extractor parameters; the classification head is dropped.
    pub params: MlpParams,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains the extractor on base classes through a temporary linear head
/// with minibatch SGD + momentum and softmax cross-entropy.
pub fn pretrain(
    params: &MlpParams,
    base: &Dataset,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if base.is_empty() {
        return Err(Error::Config("base dataset is empty".into()));
    }
    if base.dim != params.input_dim() {
        return Err(Error::Shape(format!(
            "base inputs have dimension {}, network expects {}",
            base.dim,
            params.input_dim()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = seed::rng(seed::derive(config.seed, tag::PRETRAIN));
    let mut net = params.clone();
    let mut head = Layer::he_uniform(params.output_dim(), base.num_classes, &mut rng);
    let mut net_velocity = net.zeros_like();
    let mut head_velocity = Layer::zeros(head.fan_in(), head.fan_out());

    let inputs = base.inputs();
    let labels = base.labels();
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Matrix::zeros(chunk.len(), base.dim);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).copy_from_slice(inputs.row(i));
                batch_labels.push(labels[i]);
            }
            let (features, cache) = forward(&net, &batch)?;
            let logits = head.affine(&features)?;
            if !logits.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
            let probs = classifier::softmax_rows(&logits)?;
            let ce = classifier::cross_entropy(&probs, &batch_labels)?;
            if !ce.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: ce.loss,
                });
            }
            loss_sum += ce.loss * chunk.len() as f64;

            let (head_grad, feature_grad) = head.affine_backward(&features, &ce.logit_grad)?;
            let (net_grad, _) = backward(&net, &cache, &feature_grad)?;
            sgd_momentum(
                &mut head_velocity,
                &mut head,
                &head_grad,
                config.lr,
                config.momentum,
            );
            for ((p, v), g) in net
                .layers
                .iter_mut()
                .zip(net_velocity.layers.iter_mut())
                .zip(&net_grad.layers)
            {
                sgd_momentum(v, p, g, config.lr, config.momentum);
            }
        }
        let epoch_loss = loss_sum / base.len() as f64;
        if !epoch_loss.is_finite() || !net.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        epoch_losses.push(epoch_loss);
    }

    let (features, _) = forward(&net, &inputs)?;
    let logits = head.affine(&features)?;
    let correct = logits
        .iter_rows()
        .zip(&labels)
        .filter(|(row, &y)| crate::linalg::argmax(row) == y)
        .count();
    Ok(PretrainOutcome {
        params: net,
        epoch_losses,
        train_accuracy: correct as f64 / base.len() as f64,
    })
}

fn sgd_momentum(velocity: &mut Layer, param: &mut Layer, grad: &Layer, lr: f64, momentum: f64) {
    let pairs = velocity
        .weights
        .as_mut_slice()
        .iter_mut()
        .zip(param.weights.as_mut_slice())
        .zip(grad.weights.as_slice())
        .chain(
            velocity
                .bias
                .iter_mut()
                .zip(param.bias.iter_mut())
                .zip(&grad.bias),
        );
    for ((v, p), g) in pairs {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}
