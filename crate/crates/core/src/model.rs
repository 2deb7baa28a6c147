//! Classifier head, cross-entropy losses, analytic gradients and SGD.
//!
//! Two architectures are supported:
//!
//! * `Linear`: `logits = x W + b`
//! * `Mlp`: `logits = tanh(x W1 + b1) W2 + b2`, where the hidden layer acts as
//!   a small trainable feature extractor in front of the output layer.
//!
//! Parameters live as a list of flat row-major tensors in declaration order
//! (`[W, b]` or `[W1, b1, W2, b2]`); gradients, optimizer buffers and the
//! checkpoint format all follow that order.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TLMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp,
}

impl Architecture {
    fn tag(self) -> u32 {
        match self {
            Architecture::Linear => 0,
            Architecture::Mlp => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Architecture::Linear),
            1 => Ok(Architecture::Mlp),
            other => Err(Error::MalformedHeader {
                field: "architecture",
                reason: format!("unknown tag {other}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    arch: Architecture,
    d: usize,
    h: usize,
    c: usize,
    tensors: Vec<Vec<f64>>,
}

impl ClassifierParams {
    fn shapes(arch: Architecture, d: usize, h: usize, c: usize) -> Vec<(usize, usize)> {
        match arch {
            Architecture::Linear => vec![(d, c), (1, c)],
            Architecture::Mlp => vec![(d, h), (1, h), (h, c), (1, c)],
        }
    }

    /// All-zero parameters.
    pub fn zeros(arch: Architecture, d: usize, hidden: usize, c: usize) -> Result<Self> {
        if d == 0 || c == 0 {
            return Err(Error::invalid("dims", "D and C must be positive"));
        }
        let h = match arch {
            Architecture::Linear => 0,
            Architecture::Mlp if hidden == 0 => {
                return Err(Error::invalid("model.hidden", "must be positive for mlp"))
            }
            Architecture::Mlp => hidden,
        };
        let tensors = Self::shapes(arch, d, h, c)
            .into_iter()
            .map(|(r, k)| vec![0.0; r * k])
            .collect();
        Ok(Self { arch, d, h, c, tensors })
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases of each layer.
    pub fn init(arch: Architecture, d: usize, hidden: usize, c: usize, rng: &mut StreamRng) -> Result<Self> {
        let mut p = Self::zeros(arch, d, hidden, c)?;
        let fan_ins: Vec<usize> = match arch {
            Architecture::Linear => vec![d, d],
            Architecture::Mlp => vec![d, d, p.h, p.h],
        };
        for (tensor, fan_in) in p.tensors.iter_mut().zip(fan_ins) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in tensor.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn from_tensors(arch: Architecture, d: usize, hidden: usize, c: usize, tensors: Vec<Vec<f64>>) -> Result<Self> {
        let mut p = Self::zeros(arch, d, hidden, c)?;
        if tensors.len() != p.tensors.len() {
            return Err(Error::DimensionMismatch {
                field: "tensors",
                expected: p.tensors.len(),
                found: tensors.len(),
            });
        }
        for (dst, src) in p.tensors.iter_mut().zip(tensors) {
            if dst.len() != src.len() {
                return Err(Error::DimensionMismatch {
                    field: "tensor",
                    expected: dst.len(),
                    found: src.len(),
                });
            }
            *dst = src;
        }
        if let Some(index) = p.tensors.iter().flatten().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { field: "params", index });
        }
        Ok(p)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn hidden_dim(&self) -> usize {
        self.h
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    /// Indices of the output-layer tensors; the rest belong to the extractor.
    pub fn head_tensors(&self) -> std::ops::Range<usize> {
        match self.arch {
            Architecture::Linear => 0..2,
            Architecture::Mlp => 2..4,
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d {
            return Err(Error::DimensionMismatch {
                field: "features",
                expected: self.d,
                found: x.cols(),
            });
        }
        Ok(())
    }
}

/// `out = x W + b` with `W` as `(in, out)` row-major.
fn affine(x: &Matrix, w: &[f64], b: &[f64]) -> Matrix {
    let n_out = b.len();
    let mut out = Matrix::zeros(x.rows(), n_out);
    for i in 0..x.rows() {
        let o = out.row_mut(i);
        o.copy_from_slice(b);
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * n_out..(k + 1) * n_out];
            for (ov, wv) in o.iter_mut().zip(wr) {
                *ov += xv * wv;
            }
        }
    }
    out
}

struct Activations {
    hidden: Option<Matrix>,
    logits: Matrix,
}

fn forward_cached(params: &ClassifierParams, x: &Matrix) -> Activations {
    let t = &params.tensors;
    match params.arch {
        Architecture::Linear => Activations {
            hidden: None,
            logits: affine(x, &t[0], &t[1]),
        },
        Architecture::Mlp => {
            let mut hidden = affine(x, &t[0], &t[1]);
            hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            let logits = affine(&hidden, &t[2], &t[3]);
            Activations {
                hidden: Some(hidden),
                logits,
            }
        }
    }
}

pub fn forward(params: &ClassifierParams, x: &Matrix) -> Result<Matrix> {
    params.check_input(x)?;
    Ok(forward_cached(params, x).logits)
}

/// Row-wise log-softmax with max subtraction, floored at `ln(PROB_FLOOR)`.
pub fn log_softmax(logits: &Matrix) -> Matrix {
    let floor = PROB_FLOOR.ln();
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = (*v - max - lse).max(floor);
        }
    }
    out
}

pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean negative log-likelihood of the true class.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            field: "labels",
            expected: logits.rows(),
            found: labels.len(),
        });
    }
    if let Some((index, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= logits.cols()) {
        return Err(Error::LabelOutOfRange {
            index,
            label: y as u64,
            classes: logits.cols(),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let lp = log_softmax(logits);
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -lp.get(i, y)).sum();
    Ok(total / labels.len() as f64)
}

/// `-(1/B) sum_i sum_j y*_ij log softmax(logits_i)_j`
pub fn soft_ce_loss(logits: &Matrix, targets: &Matrix) -> Result<f64> {
    if targets.rows() != logits.rows() || targets.cols() != logits.cols() {
        return Err(Error::DimensionMismatch {
            field: "soft_labels",
            expected: logits.rows() * logits.cols(),
            found: targets.rows() * targets.cols(),
        });
    }
    if logits.rows() == 0 {
        return Ok(0.0);
    }
    let lp = log_softmax(logits);
    let total: f64 = lp
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(l, y)| -y * l)
        .sum();
    Ok(total / logits.rows() as f64)
}

/// Gradients in the same layout as [`ClassifierParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Soft cross-entropy and its exact gradient with respect to every
/// parameter.
pub fn loss_and_grad(params: &ClassifierParams, x: &Matrix, targets: &Matrix) -> Result<(f64, Gradients)> {
    params.check_input(x)?;
    let acts = forward_cached(params, x);
    let loss = soft_ce_loss(&acts.logits, targets)?;
    let b = x.rows();
    let c = params.c;

    // dL/dlogits = (softmax - y*) / B, given rows of y* sum to one
    let mut delta = softmax(&acts.logits);
    let scale = if b == 0 { 0.0 } else { 1.0 / b as f64 };
    for (dv, yv) in delta.as_mut_slice().iter_mut().zip(targets.as_slice()) {
        *dv = (*dv - yv) * scale;
    }

    let input_of_head = acts.hidden.as_ref().unwrap_or(x);
    let (gw, gb) = affine_grads(input_of_head, &delta, c);
    let tensors = match params.arch {
        Architecture::Linear => vec![gw, gb],
        Architecture::Mlp => {
            let hidden = acts.hidden.as_ref().unwrap();
            let w2 = &params.tensors[2];
            let h = params.h;
            let mut dpre = Matrix::zeros(b, h);
            for i in 0..b {
                let dl = delta.row(i);
                let hr = hidden.row(i);
                for (k, out) in dpre.row_mut(i).iter_mut().enumerate() {
                    let back: f64 = w2[k * c..(k + 1) * c].iter().zip(dl).map(|(w, g)| w * g).sum();
                    *out = back * (1.0 - hr[k] * hr[k]);
                }
            }
            let (gw1, gb1) = affine_grads(x, &dpre, h);
            vec![gw1, gb1, gw, gb]
        }
    };
    Ok((loss, Gradients { tensors }))
}

pub fn backward(params: &ClassifierParams, x: &Matrix, targets: &Matrix) -> Result<Gradients> {
    loss_and_grad(params, x, targets).map(|(_, g)| g)
}

/// `(x^T delta, column sums of delta)`
fn affine_grads(x: &Matrix, delta: &Matrix, n_out: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; x.cols() * n_out];
    let mut gb = vec![0.0; n_out];
    for i in 0..x.rows() {
        let dr = delta.row(i);
        for (g, d) in gb.iter_mut().zip(dr) {
            *g += d;
        }
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (g, d) in gw[k * n_out..(k + 1) * n_out].iter_mut().zip(dr) {
                *g += xv * d;
            }
        }
    }
    (gw, gb)
}

/// SGD with (heavy-ball) momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub step: u64,
    velocity: Vec<Vec<f64>>,
    trainable: Vec<bool>,
}

impl OptimizerState {
    pub fn new(params: &ClassifierParams, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            step: 0,
            velocity: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            trainable: vec![true; params.tensors.len()],
        }
    }

    /// Only the output layer gets updated; extractor tensors stay fixed.
    pub fn freeze_extractor(mut self, params: &ClassifierParams) -> Self {
        let head = params.head_tensors();
        for (i, t) in self.trainable.iter_mut().enumerate() {
            *t = head.contains(&i);
        }
        self
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v <- mu v + g; p <- p - lr v`
pub fn sgd_step(params: &mut ClassifierParams, grads: &Gradients, state: &mut OptimizerState) {
    assert_eq!(grads.tensors.len(), params.tensors.len(), "gradient layout");
    for (k, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
        if !state.trainable[k] {
            continue;
        }
        let v = &mut state.velocity[k];
        assert_eq!(g.len(), p.len(), "gradient shape");
        for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = state.momentum * *vv + gv;
            *pv -= state.lr * *vv;
        }
    }
    state.step += 1;
}

pub fn predict(params: &ClassifierParams, x: &Matrix) -> Result<Vec<usize>> {
    let logits = forward(params, x)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn encode_checkpoint(params: &ClassifierParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + params.num_params() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.arch.tag().to_le_bytes());
    for dim in [params.d, params.h, params.c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in params.tensors.iter().flatten() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ClassifierParams> {
    let header = |field: &'static str, reason: &str| Error::MalformedHeader {
        field,
        reason: reason.into(),
    };
    if buf.len() < 24 {
        return Err(header("header", "checkpoint truncated"));
    }
    if &buf[..4] != CHECKPOINT_MAGIC {
        return Err(header("magic", "expected \"TLMC\""));
    }
    let word = |k: usize| u32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().unwrap());
    if word(1) != CHECKPOINT_VERSION {
        return Err(header("version", "unsupported checkpoint version"));
    }
    let arch = Architecture::from_tag(word(2))?;
    let (d, h, c) = (word(3) as usize, word(4) as usize, word(5) as usize);
    let mut params = ClassifierParams::zeros(arch, d, h, c)?;
    let payload = &buf[24..];
    if payload.len() != params.num_params() * 4 {
        return Err(Error::DimensionMismatch {
            field: "params",
            expected: params.num_params() * 4,
            found: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    for t in params.tensors.iter_mut() {
        for v in t.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    if let Some(index) = params.tensors.iter().flatten().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { field: "params", index });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ClassifierParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
