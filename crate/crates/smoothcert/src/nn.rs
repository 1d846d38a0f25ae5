//! Small dense feed-forward classifiers with exact analytic gradients with
//! respect to both parameters and inputs.
//!
//! Weight matrices are stored `out_dim x in_dim` (one output unit per row);
//! a batch forward is `x . W^T + b` per layer. The cross-entropy loss is the
//! mean over the batch and is computed through a log-sum-exp shift, so it
//! stays finite for logits up to magnitude ~1e3.
//!
//! Model files are binary: magic `SCNETv1\0`, layer table, parameters as
//! little-endian f64 bit patterns, and a trailing fnv1a64 checksum. Loading
//! restores the exact bit pattern that was saved.

use crate::rng::{fnv1a64, RngStream};
use crate::tensor::{matmul, matmul_tn, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer chain broken at layer {index}: out_dim {out} feeds in_dim {next_in}")]
    Chain {
        index: usize,
        out: usize,
        next_in: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file corrupt: {0}")]
    Corrupt(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    None,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "relu" => Some(Activation::Relu),
            "elu" => Some(Activation::Elu),
            "none" => Some(Activation::None),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::None => "none",
        }
    }
}

/// `(value, derivative)` of an activation at `v`. The ReLU subgradient at 0
/// is fixed to 0 (deterministic tie-break); ELU's one-sided derivatives
/// agree at 0, both equal 1.
pub fn activation_eval(kind: Activation, v: f64) -> (f64, f64) {
    match kind {
        Activation::Relu => {
            if v > 0.0 {
                (v, 1.0)
            } else {
                (0.0, 0.0)
            }
        }
        Activation::Elu => {
            if v > 0.0 {
                (v, 1.0)
            } else {
                let e = v.exp();
                (e - 1.0, e)
            }
        }
        Activation::None => (v, 1.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    /// Per layer, `out_dim x in_dim`.
    pub weights: Vec<Tensor>,
    /// Per layer, `[out_dim]`.
    pub biases: Vec<Tensor>,
    pub num_classes: usize,
}

/// Everything backward needs from a forward pass: the input to each layer
/// and each layer's pre-activation.
pub struct ForwardTrace {
    inputs: Vec<Tensor>,
    preacts: Vec<Tensor>,
}

/// Exact gradients of the mean batch loss: `grad_w`/`grad_b` mirror the
/// network's parameter shapes, `grad_x` is `batch x d`.
pub struct GradPair {
    pub grad_w: Vec<Tensor>,
    pub grad_b: Vec<Tensor>,
    pub grad_x: Tensor,
}

fn validate_chain(specs: &[LayerSpec]) -> Result<(), NnError> {
    if specs.is_empty() {
        return Err(NnError::Dimension("empty layer list".into()));
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(NnError::Chain {
                index: i,
                out: pair[0].out_dim,
                next_in: pair[1].in_dim,
            });
        }
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(NnError::Dimension(format!("layer {i} has a zero dimension")));
        }
    }
    let last = specs.last().unwrap();
    if last.activation != Activation::None {
        return Err(NnError::Dimension(
            "last layer must emit raw logits (activation none)".into(),
        ));
    }
    Ok(())
}

/// Fan-in scaled Gaussian initialization: weights ~ N(0, 2/in_dim), biases
/// zero. The last spec's out_dim becomes num_classes.
pub fn init_network(specs: &[LayerSpec], rng: &mut RngStream) -> Result<Network, NnError> {
    validate_chain(specs)?;
    let mut weights = Vec::with_capacity(specs.len());
    let mut biases = Vec::with_capacity(specs.len());
    for s in specs {
        let std = (2.0 / s.in_dim as f64).sqrt();
        let mut w = Tensor::zeros(&[s.out_dim, s.in_dim]);
        for v in w.data_mut() {
            *v = std * rng.normal();
        }
        weights.push(w);
        biases.push(Tensor::zeros(&[s.out_dim]));
    }
    Ok(Network {
        layers: specs.to_vec(),
        weights,
        biases,
        num_classes: specs.last().unwrap().out_dim,
    })
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    /// e.g. "784-256(relu)-256(relu)-10" for manifests.
    pub fn arch_string(&self) -> String {
        let mut s = format!("{}", self.layers[0].in_dim);
        for l in &self.layers {
            if l.activation == Activation::None {
                s.push_str(&format!("-{}", l.out_dim));
            } else {
                s.push_str(&format!("-{}({})", l.out_dim, l.activation.name()));
            }
        }
        s
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        for w in self.weights.iter().chain(&self.biases) {
            w.check_finite("network parameters")?;
        }
        Ok(())
    }
}

/// Batch forward pass; returns logits `batch x C` and the trace backward
/// needs. Pure function of `(net, x)`: repeated calls are byte-identical.
pub fn forward(net: &Network, x: &Tensor) -> Result<(Tensor, ForwardTrace), NnError> {
    if x.cols() != net.input_dim() {
        return Err(NnError::Dimension(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            net.input_dim()
        )));
    }
    let batch = x.rows();
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut preacts = Vec::with_capacity(net.layers.len());
    let mut cur = if x.shape().len() == 1 {
        Tensor::from_vec(&[1, x.cols()], x.data().to_vec())?
    } else {
        x.clone()
    };
    for (l, spec) in net.layers.iter().enumerate() {
        let mut pre = crate::tensor::matmul_nt(&cur, &net.weights[l])?;
        let b = net.biases[l].data();
        for i in 0..batch {
            let row = pre.row_mut(i);
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        inputs.push(cur);
        let mut act = pre.clone();
        if spec.activation != Activation::None {
            for v in act.data_mut() {
                *v = activation_eval(spec.activation, *v).0;
            }
        }
        preacts.push(pre);
        cur = act;
    }
    cur.check_finite("forward")?;
    Ok((cur, ForwardTrace { inputs, preacts }))
}

/// Mean cross-entropy over the batch, via the log-sum-exp shift.
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    Ok(mean(&loss_ce_per_row(logits, labels)?))
}

/// Per-row cross-entropy losses.
pub fn loss_ce_per_row(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>, NnError> {
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.len() != batch {
        return Err(NnError::Dimension(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(batch);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NnError::Label { label, classes });
        }
        let row = logits.row(i);
        out.push(log_sum_exp(row) - row[label]);
    }
    Ok(out)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Gradients of the mean batch cross-entropy w.r.t. parameters and inputs.
pub fn backward_ce(net: &Network, trace: &ForwardTrace, labels: &[usize]) -> Result<GradPair, NnError> {
    let batch = trace.preacts.last().unwrap().rows();
    let scale = vec![1.0 / batch as f64; batch];
    backward_ce_scaled(net, trace, labels, &scale)
}

/// Gradients of `sum_i row_scale[i] * loss_i`. With `row_scale = 1/batch`
/// this is [`backward_ce`]; with unit scales, `grad_x` row i is the exact
/// gradient of row i's own loss (used by the per-instance ascent).
pub fn backward_ce_scaled(
    net: &Network,
    trace: &ForwardTrace,
    labels: &[usize],
    row_scale: &[f64],
) -> Result<GradPair, NnError> {
    let nl = net.layers.len();
    let logits = &trace.preacts[nl - 1];
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.len() != batch || row_scale.len() != batch {
        return Err(NnError::Dimension(format!(
            "batch {batch} with {} labels, {} scales",
            labels.len(),
            row_scale.len()
        )));
    }
    // dL/dlogits row i = row_scale[i] * (softmax(logits_i) - onehot(label_i))
    let mut delta = Tensor::zeros(&[batch, classes]);
    for i in 0..batch {
        let label = labels[i];
        if label >= classes {
            return Err(NnError::Label { label, classes });
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let drow = delta.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            drow[j] = row_scale[i] * (v - lse).exp();
        }
        drow[label] -= row_scale[i];
    }
    let mut grad_w = vec![Tensor::zeros(&[0]); nl];
    let mut grad_b = vec![Tensor::zeros(&[0]); nl];
    let mut grad_x = Tensor::zeros(&[0]);
    for l in (0..nl).rev() {
        grad_w[l] = matmul_tn(&delta, &trace.inputs[l])?;
        let mut gb = Tensor::zeros(&[net.layers[l].out_dim]);
        {
            let gbd = gb.data_mut();
            for i in 0..batch {
                for (g, &d) in gbd.iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }
        }
        grad_b[l] = gb;
        let back = matmul(&delta, &net.weights[l])?;
        if l > 0 {
            let mut next = back;
            let act = net.layers[l - 1].activation;
            if act != Activation::None {
                let pre = &trace.preacts[l - 1];
                for (v, &p) in next.data_mut().iter_mut().zip(pre.data()) {
                    *v *= activation_eval(act, p).1;
                }
            }
            delta = next;
        } else {
            grad_x = back;
        }
    }
    Ok(GradPair {
        grad_w,
        grad_b,
        grad_x,
    })
}

/// Argmax class per row; ties resolve to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

const MODEL_MAGIC: &[u8; 8] = b"SCNETv1\0";

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Elu => 1,
        Activation::None => 2,
    }
}

fn act_from_code(c: u8) -> Option<Activation> {
    match c {
        0 => Some(Activation::Relu),
        1 => Some(Activation::Elu),
        2 => Some(Activation::None),
        _ => None,
    }
}

/// Serialize a network. Layout: magic, u32 layer count, u32 num_classes,
/// per-layer (u32 in, u32 out, u8 activation), per-layer weights then bias
/// as little-endian f64 bit patterns, trailing fnv1a64 checksum.
pub fn save_model(net: &Network, path: &Path) -> Result<(), NnError> {
    net.check_finite()?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(net.num_classes as u32).to_le_bytes());
    for l in &net.layers {
        buf.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        buf.push(act_code(l.activation));
    }
    for (w, b) in net.weights.iter().zip(&net.biases) {
        for v in w.data().iter().chain(b.data()) {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let sum = fnv1a64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MODEL_MAGIC.len() + 16 {
        return Err(NnError::Corrupt("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(NnError::Corrupt("checksum mismatch".into()));
    }
    if &body[..8] != MODEL_MAGIC {
        return Err(NnError::Corrupt("bad magic".into()));
    }
    let mut pos = 8usize;
    let take_u32 = |pos: &mut usize| -> Result<u32, NnError> {
        if *pos + 4 > body.len() {
            return Err(NnError::Corrupt("truncated header".into()));
        }
        let v = u32::from_le_bytes(body[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let nl = take_u32(&mut pos)? as usize;
    let num_classes = take_u32(&mut pos)? as usize;
    if nl == 0 || nl > 64 {
        return Err(NnError::Corrupt(format!("implausible layer count {nl}")));
    }
    let mut layers = Vec::with_capacity(nl);
    for _ in 0..nl {
        let in_dim = take_u32(&mut pos)? as usize;
        let out_dim = take_u32(&mut pos)? as usize;
        if pos >= body.len() {
            return Err(NnError::Corrupt("truncated layer table".into()));
        }
        let act = act_from_code(body[pos]).ok_or_else(|| NnError::Corrupt("bad activation code".into()))?;
        pos += 1;
        layers.push(LayerSpec {
            in_dim,
            out_dim,
            activation: act,
        });
    }
    validate_chain(&layers)?;
    if layers.last().unwrap().out_dim != num_classes {
        return Err(NnError::Corrupt("num_classes disagrees with last layer".into()));
    }
    let mut weights = Vec::with_capacity(nl);
    let mut biases = Vec::with_capacity(nl);
    let take_f64s = |pos: &mut usize, n: usize| -> Result<Vec<f64>, NnError> {
        if *pos + 8 * n > body.len() {
            return Err(NnError::Corrupt("truncated parameters".into()));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let bits = u64::from_le_bytes(body[*pos + 8 * i..*pos + 8 * i + 8].try_into().unwrap());
            out.push(f64::from_bits(bits));
        }
        *pos += 8 * n;
        Ok(out)
    };
    for l in &layers {
        let w = take_f64s(&mut pos, l.in_dim * l.out_dim)?;
        let b = take_f64s(&mut pos, l.out_dim)?;
        weights.push(Tensor::from_vec(&[l.out_dim, l.in_dim], w)?);
        biases.push(Tensor::from_vec(&[l.out_dim], b)?);
    }
    if pos != body.len() {
        return Err(NnError::Corrupt("trailing bytes".into()));
    }
    let net = Network {
        layers,
        weights,
        biases,
        num_classes,
    };
    net.check_finite()?;
    Ok(net)
}
