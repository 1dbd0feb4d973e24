//! Per-modality MLP (encoder + three-layer classification head) with an exact
//! manual backward pass for mean cross-entropy.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{MieError, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix, Vector};

/// Probability floor inside the log of the cross-entropy.
pub const CE_FLOOR: f64 = 1e-30;

/// Widths of the hidden head layers: `FC(dim×256) → ReLU → FC(256×64) → FC(64×c)`.
pub const HEAD_WIDTHS: [usize; 2] = [256, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Fully connected layer `y = act(x·W + b)` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub biases: Vector,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Layer {
            weights: Matrix::zeros(input, output),
            biases: vec![0.0; output],
            activation,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Layer {
            weights: Matrix::from_vec(input, output, data).expect("sized"),
            biases: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.biases.len()
    }
}

/// Layer sizes for a modality model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Architecture {
            input_dim,
            hidden_dim: 128,
            feature_dim: 64,
            classes,
        }
    }
}

/// Parameters of one modality: encoder layers followed by head layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityModel {
    layers: Vec<Layer>,
    encoder_len: usize,
}

impl ModalityModel {
    /// Encoder `input → hidden (relu) → feature`, then the three-layer head.
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let Architecture {
            input_dim,
            hidden_dim,
            feature_dim,
            classes,
        } = arch;
        let layers = vec![
            Layer::glorot(input_dim, hidden_dim, Activation::Relu, rng),
            Layer::glorot(hidden_dim, feature_dim, Activation::None, rng),
            Layer::glorot(feature_dim, HEAD_WIDTHS[0], Activation::Relu, rng),
            Layer::glorot(HEAD_WIDTHS[0], HEAD_WIDTHS[1], Activation::None, rng),
            Layer::glorot(HEAD_WIDTHS[1], classes, Activation::None, rng),
        ];
        ModalityModel {
            layers,
            encoder_len: 2,
        }
    }

    /// Arbitrary stack; the first `encoder_len` layers form the encoder.
    pub fn from_layers(layers: Vec<Layer>, encoder_len: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(MieError::validation("model needs at least one layer"));
        }
        if encoder_len >= layers.len() {
            return Err(MieError::validation(
                "model needs at least one head layer after the encoder",
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.input_dim() == 0 || l.output_dim() == 0 {
                return Err(MieError::validation(format!("layer {i} has a zero dimension")));
            }
            if l.biases.len() != l.output_dim() {
                return Err(MieError::validation(format!(
                    "layer {i}: {} biases for {} outputs",
                    l.biases.len(),
                    l.output_dim()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(MieError::validation(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        Ok(ModalityModel {
            layers,
            encoder_len,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    /// Indices of the classification-head layers.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.encoder_len..self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    /// `θ ← θ + scale·delta`.
    pub fn add_scaled(&mut self, delta: &GradientSet, scale: f64) -> Result<()> {
        delta.check_congruent(self)?;
        for (l, g) in self.layers.iter_mut().zip(&delta.layers) {
            l.weights.axpy(scale, &g.weights)?;
            for (b, d) in l.biases.iter_mut().zip(&g.biases) {
                *b += scale * d;
            }
        }
        Ok(())
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vector {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(MieError::validation(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(self.encoder_len as u32);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.input_dim() as u32);
            w.u32(l.output_dim() as u32);
            w.u8(l.activation.tag());
            w.f64s(l.weights.as_slice());
            w.f64s(&l.biases);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(MieError::format("magic", "not a MIE1 checkpoint"));
        }
        let encoder_len = r.u32("header")? as usize;
        let n_layers = r.u32("header")? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for i in 0..n_layers {
            let block = format!("layer {i}");
            let input = r.u32(&block)? as usize;
            let output = r.u32(&block)? as usize;
            let activation = Activation::from_tag(r.u8(&block)?)
                .ok_or_else(|| MieError::format(&block, "unknown activation tag"))?;
            let weights = r.f64s(input * output, &format!("{block} weights"))?;
            let biases = r.f64s(output, &format!("{block} biases"))?;
            layers.push(Layer {
                weights: Matrix::from_vec(input, output, weights)?,
                biases,
                activation,
            });
        }
        if r.remaining() != 0 {
            return Err(MieError::format(
                "trailer",
                format!("{} unexpected trailing bytes", r.remaining()),
            ));
        }
        let model = ModalityModel::from_layers(layers, encoder_len)
            .map_err(|e| MieError::format("layers", e.to_string()))?;
        if !model.is_finite() {
            return Err(MieError::format("layers", "non-finite parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| MieError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MieError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MIE1";

/// Gradient (or any parameter-shaped quantity) for one [`ModalityModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub biases: Vector,
}

impl GradientSet {
    pub fn zeros_like(model: &ModalityModel) -> Self {
        GradientSet {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.input_dim(), l.output_dim()),
                    biases: vec![0.0; l.output_dim()],
                })
                .collect(),
        }
    }

    pub fn check_congruent(&self, model: &ModalityModel) -> Result<()> {
        let ok = self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.weights.shape() == l.weights.shape() && g.biases.len() == l.biases.len()
            });
        if ok {
            Ok(())
        } else {
            Err(MieError::validation("gradient set does not match model shape"))
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.as_slice().iter().chain(g.biases.iter()))
    }

    /// Euclidean norm over every weight and bias.
    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &GradientSet) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.weights.scale(s);
            g.biases.iter_mut().for_each(|b| *b *= s);
        }
    }

    /// `self += s·other`.
    pub fn axpy(&mut self, s: f64, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(MieError::validation("gradient sets differ in layer count"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.axpy(s, &b.weights)?;
            if a.biases.len() != b.biases.len() {
                return Err(MieError::validation("gradient bias length mismatch"));
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += s * y;
            }
        }
        Ok(())
    }

    /// Same ordering as [`ModalityModel::flatten`].
    pub fn flatten(&self) -> Vector {
        self.values().copied().collect()
    }
}

/// A minibatch for one modality: `B×d` inputs and class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(MieError::validation(format!(
                "batch has {} rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(MieError::validation("empty batch"));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything the backward pass and the covariance pass need from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the `B×in_l` activation entering layer `l`.
    pub inputs: Vec<Matrix>,
    pub logits: Matrix,
    /// Row-wise softmax of `logits`.
    pub probs: Matrix,
}

impl ForwardTrace {
    /// Output of the encoder, i.e. the input of the first head layer.
    pub fn features(&self, model: &ModalityModel) -> &Matrix {
        &self.inputs[model.encoder_len]
    }
}

pub fn forward(model: &ModalityModel, x: &Matrix) -> Result<ForwardTrace> {
    if x.cols() != model.input_dim() {
        return Err(MieError::validation(format!(
            "input has {} features, model expects {}",
            x.cols(),
            model.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut act = x.clone();
    for layer in &model.layers {
        let mut out = matmul(&act, &layer.weights)?;
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, b) in row.iter_mut().zip(&layer.biases) {
                *o += b;
            }
            if layer.activation == Activation::Relu {
                row.iter_mut().for_each(|o| *o = o.max(0.0));
            }
        }
        debug_assert_eq!(cols, layer.output_dim());
        inputs.push(std::mem::replace(&mut act, out));
    }
    let logits = act;
    let mut probs = logits.clone();
    for r in 0..probs.rows() {
        softmax_in_place(probs.row_mut(r));
    }
    Ok(ForwardTrace {
        inputs,
        logits,
        probs,
    })
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vector {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `−ln p[true class]` for a probability vector and a one-hot target.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(MieError::validation("prediction and target lengths differ"));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(MieError::validation("target is not one-hot"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(MieError::validation(format!(
            "prediction is not on the simplex (sum {sum})"
        )));
    }
    let k = y.iter().position(|&v| v == 1.0).expect("one-hot");
    Ok(class_nll(p, k))
}

#[inline]
fn class_nll(p: &[f64], class: usize) -> f64 {
    -p[class].max(CE_FLOOR).ln()
}

fn check_labels(batch: &Batch, classes: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(MieError::validation("empty batch"));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(MieError::validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the batch.
pub fn batch_loss(model: &ModalityModel, batch: &Batch) -> Result<f64> {
    check_labels(batch, model.classes())?;
    let trace = forward(model, &batch.inputs)?;
    Ok(mean_nll(&trace.probs, &batch.labels))
}

fn mean_nll(probs: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &k)| class_nll(probs.row(i), k))
        .sum();
    total / labels.len() as f64
}

/// Gradient of [`batch_loss`] with respect to every parameter.
pub fn backward(model: &ModalityModel, batch: &Batch) -> Result<GradientSet> {
    loss_and_gradient(model, batch).map(|(_, g)| g)
}

/// Loss and gradient from a single forward pass.
pub fn loss_and_gradient(model: &ModalityModel, batch: &Batch) -> Result<(f64, GradientSet)> {
    check_labels(batch, model.classes())?;
    let trace = forward(model, &batch.inputs)?;
    let loss = mean_nll(&trace.probs, &batch.labels);
    let grads = backward_from_trace(model, &trace, &batch.labels)?;
    Ok((loss, grads))
}

/// Backpropagation given a stored forward trace.
pub fn backward_from_trace(
    model: &ModalityModel,
    trace: &ForwardTrace,
    labels: &[usize],
) -> Result<GradientSet> {
    let b = labels.len() as f64;
    // fused softmax + cross-entropy: dL/dlogits = (p − y) / B
    let mut delta = trace.probs.clone();
    for (i, &k) in labels.iter().enumerate() {
        let row = delta.row_mut(i);
        row[k] -= 1.0;
        row.iter_mut().for_each(|v| *v /= b);
    }

    let mut layers = Vec::with_capacity(model.layers.len());
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let input = &trace.inputs[l];
        let weights = matmul_tn(input, &delta)?;
        let mut biases = vec![0.0; delta.cols()];
        for r in 0..delta.rows() {
            for (g, d) in biases.iter_mut().zip(delta.row(r)) {
                *g += d;
            }
        }
        layers.push(LayerGrad { weights, biases });
        if l > 0 {
            let mut prev = matmul_nt(&delta, &layer.weights)?;
            if model.layers[l - 1].activation == Activation::Relu {
                for (d, a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
    layers.reverse();
    Ok(GradientSet { layers })
}
