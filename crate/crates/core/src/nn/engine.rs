//! Forward pass, softmax cross-entropy loss, reverse-mode gradients and SGD.
//!
//! Backpropagation walks the layer stack in reverse using the activations
//! recorded on the forward pass. Masked weights are substituted by exact
//! zeros before any arithmetic, and their gradient entries are zeroed.

use super::{Layer, NetworkSpec, NnError, Parameters, Split};
use crate::pruning::MaskSet;

/// Per-layer records needed by the backward pass.
struct Tape {
    // inputs[i] is the batch input of layer i; the final logits are not stored.
    inputs: Vec<Vec<f64>>,
    // Argmax positions for max-pool layers.
    pool_argmax: Vec<Option<Vec<usize>>>,
}

fn effective_weights(params: &Parameters, mask: &MaskSet) -> Result<Vec<Vec<f64>>, NnError> {
    if params.layers.len() != mask.layers.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} parameter layers but {} mask layers",
            params.layers.len(),
            mask.layers.len()
        )));
    }
    params
        .layers
        .iter()
        .zip(&mask.layers)
        .enumerate()
        .map(|(i, (p, m))| {
            if p.shape != m.shape || p.weights.len() != m.keep.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter layer {i}: weights {:?} vs mask {:?}",
                    p.shape, m.shape
                )));
            }
            Ok(p.weights.iter().zip(&m.keep).map(|(&w, &k)| if k { w } else { 0.0 }).collect())
        })
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let j = c * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn dense_forward(x: &[f64], n: usize, fan_in: usize, fan_out: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * fan_out];
    for s in 0..n {
        let xs = &x[s * fan_in..(s + 1) * fan_in];
        let ys = &mut y[s * fan_out..(s + 1) * fan_out];
        for (o, yo) in ys.iter_mut().enumerate() {
            *yo = b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], xs);
        }
    }
    y
}

struct ConvGeom {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(layer: &Layer, input: &[usize], output: &[usize]) -> Self {
        match *layer {
            Layer::Conv2d { in_ch, out_ch, kernel, stride } => ConvGeom {
                in_ch,
                out_ch,
                kernel,
                stride,
                h: input[1],
                w: input[2],
                ho: output[1],
                wo: output[2],
            },
            _ => unreachable!("not a conv layer"),
        }
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.ho * self.wo
    }
}

fn conv_forward(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
    let (k, st) = (g.kernel, g.stride);
    let mut y = vec![0.0; n * g.out_len()];
    for s in 0..n {
        let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
        let ys = &mut y[s * g.out_len()..(s + 1) * g.out_len()];
        for o in 0..g.out_ch {
            for p in 0..g.ho {
                for q in 0..g.wo {
                    let mut acc = b[o];
                    for c in 0..g.in_ch {
                        for u in 0..k {
                            let xrow = &xs[(c * g.h + p * st + u) * g.w + q * st..][..k];
                            let wrow = &w[((o * g.in_ch + c) * k + u) * k..][..k];
                            acc += dot(wrow, xrow);
                        }
                    }
                    ys[(o * g.ho + p) * g.wo + q] = acc;
                }
            }
        }
    }
    y
}

fn conv_backward(x: &[f64], dy: &[f64], n: usize, g: &ConvGeom, w: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let (k, st) = (g.kernel, g.stride);
    let mut dx = vec![0.0; n * g.in_len()];
    for s in 0..n {
        let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
        let dys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
        let dxs = &mut dx[s * g.in_len()..(s + 1) * g.in_len()];
        for o in 0..g.out_ch {
            for p in 0..g.ho {
                for q in 0..g.wo {
                    let gout = dys[(o * g.ho + p) * g.wo + q];
                    if gout == 0.0 {
                        continue;
                    }
                    db[o] += gout;
                    for c in 0..g.in_ch {
                        for u in 0..k {
                            let xoff = (c * g.h + p * st + u) * g.w + q * st;
                            let woff = ((o * g.in_ch + c) * k + u) * k;
                            axpy(gout, &xs[xoff..xoff + k], &mut dw[woff..woff + k]);
                            axpy(gout, &w[woff..woff + k], &mut dxs[xoff..xoff + k]);
                        }
                    }
                }
            }
        }
    }
    dx
}

fn maxpool_forward(x: &[f64], n: usize, input: &[usize], output: &[usize], window: usize) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (input[0], input[1], input[2]);
    let (ho, wo) = (output[1], output[2]);
    let in_len = c * h * w;
    let out_len = c * ho * wo;
    let mut y = vec![0.0; n * out_len];
    let mut arg = vec![0usize; n * out_len];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for a in 0..window {
                        for bb in 0..window {
                            let idx = s * in_len + (ch * h + i * window + a) * w + j * window + bb;
                            // First maximum in scan order wins ties.
                            if x[idx] > best || best_idx == usize::MAX {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = s * out_len + (ch * ho + i) * wo + j;
                    y[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (y, arg)
}

fn run_forward(spec: &NetworkSpec, eff: &[Vec<f64>], params: &Parameters, batch: &[f64], n: usize, record: bool) -> Result<(Vec<f64>, Option<Tape>), NnError> {
    let mut tape = record.then(|| Tape { inputs: Vec::new(), pool_argmax: Vec::new() });
    let mut x = batch.to_vec();
    let mut p = 0;
    for (i, layer) in spec.layers().iter().enumerate() {
        let input = spec.shape_at(i);
        let output = spec.shape_at(i + 1);
        let mut argmax = None;
        let y = match *layer {
            Layer::Dense { fan_in, fan_out } => {
                let y = dense_forward(&x, n, fan_in, fan_out, &eff[p], &params.layers[p].biases);
                p += 1;
                y
            }
            Layer::Conv2d { .. } => {
                let g = ConvGeom::new(layer, input, output);
                let y = conv_forward(&x, n, &g, &eff[p], &params.layers[p].biases);
                p += 1;
                y
            }
            Layer::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Layer::MaxPool { window } => {
                let (y, arg) = maxpool_forward(&x, n, input, output, window);
                argmax = Some(arg);
                y
            }
            Layer::Flatten => x.clone(),
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NumericalOverflow { layer: i, kind: layer.name() });
        }
        if let Some(t) = tape.as_mut() {
            t.inputs.push(std::mem::replace(&mut x, y));
            t.pool_argmax.push(argmax);
        } else {
            x = y;
        }
    }
    Ok((x, tape))
}

fn batch_len(spec: &NetworkSpec, batch: &[f64]) -> Result<usize, NnError> {
    let d = spec.input_len();
    if !batch.len().is_multiple_of(d) {
        return Err(NnError::ShapeMismatch(format!(
            "batch of {} values is not a multiple of input size {d} ({:?})",
            batch.len(),
            spec.input_shape()
        )));
    }
    Ok(batch.len() / d)
}

/// Masked forward pass. Returns row-major logits `[batch, num_classes]`.
pub fn forward(spec: &NetworkSpec, params: &Parameters, mask: &MaskSet, batch: &[f64]) -> Result<Vec<f64>, NnError> {
    params.check_matches(spec)?;
    let n = batch_len(spec, batch)?;
    let eff = effective_weights(params, mask)?;
    Ok(run_forward(spec, &eff, params, batch, n, false)?.0)
}

/// Row-wise softmax of `[n, classes]` logits.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Mean softmax cross-entropy and its gradient with respect to every
/// parameter. Gradient entries of masked-out weights are exactly zero.
pub fn loss_and_grads(
    spec: &NetworkSpec,
    params: &Parameters,
    mask: &MaskSet,
    batch: &[f64],
    labels: &[usize],
) -> Result<(f64, Parameters), NnError> {
    params.check_matches(spec)?;
    let n = batch_len(spec, batch)?;
    let classes = spec.num_classes();
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::LabelOutOfRange { label, num_classes: classes });
    }
    if n == 0 {
        return Err(NnError::EmptySplit("batch"));
    }
    let eff = effective_weights(params, mask)?;
    let (logits, tape) = run_forward(spec, &eff, params, batch, n, true)?;
    let tape = tape.unwrap();

    // dL/dz = (softmax(z) - onehot) / n
    let mut loss = 0.0;
    let mut dy = vec![0.0; n * classes];
    let inv_n = 1.0 / n as f64;
    for (s, row) in logits.chunks(classes).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        let y = labels[s];
        loss += sum.ln() + m - row[y];
        for c in 0..classes {
            let onehot = if c == y { 1.0 } else { 0.0 };
            dy[s * classes + c] = (e[c] / sum - onehot) * inv_n;
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(NnError::NumericalOverflow { layer: spec.layers().len() - 1, kind: "softmax_cross_entropy" });
    }

    let mut grads = Parameters::zeros(spec);
    let mut p = grads.layers.len();
    for (i, layer) in spec.layers().iter().enumerate().rev() {
        let x = &tape.inputs[i];
        dy = match *layer {
            Layer::Dense { fan_in, fan_out } => {
                p -= 1;
                let w = &eff[p];
                let g = &mut grads.layers[p];
                let mut dx = vec![0.0; n * fan_in];
                for s in 0..n {
                    let xs = &x[s * fan_in..(s + 1) * fan_in];
                    let dxs = &mut dx[s * fan_in..(s + 1) * fan_in];
                    for o in 0..fan_out {
                        let gout = dy[s * fan_out + o];
                        if gout == 0.0 {
                            continue;
                        }
                        g.biases[o] += gout;
                        axpy(gout, xs, &mut g.weights[o * fan_in..(o + 1) * fan_in]);
                        axpy(gout, &w[o * fan_in..(o + 1) * fan_in], dxs);
                    }
                }
                dx
            }
            Layer::Conv2d { .. } => {
                p -= 1;
                let geom = ConvGeom::new(layer, spec.shape_at(i), spec.shape_at(i + 1));
                let g = &mut grads.layers[p];
                conv_backward(x, &dy, n, &geom, &eff[p], &mut g.weights, &mut g.biases)
            }
            Layer::Relu => dy.iter().zip(x).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect(),
            Layer::MaxPool { .. } => {
                let arg = tape.pool_argmax[i].as_ref().unwrap();
                let mut dx = vec![0.0; x.len()];
                for (&d, &a) in dy.iter().zip(arg) {
                    dx[a] += d;
                }
                dx
            }
            Layer::Flatten => dy,
        };
    }
    for (g, m) in grads.layers.iter_mut().zip(&mask.layers) {
        for (gw, &k) in g.weights.iter_mut().zip(&m.keep) {
            if !k {
                *gw = 0.0;
            }
        }
    }
    Ok((loss, grads))
}

pub(crate) fn sgd_step_in_place(params: &mut Parameters, grads: &Parameters, mask: &MaskSet, lr: f64) {
    for ((p, g), m) in params.layers.iter_mut().zip(&grads.layers).zip(&mask.layers) {
        for ((w, gw), &k) in p.weights.iter_mut().zip(&g.weights).zip(&m.keep) {
            if k {
                *w -= lr * gw;
            }
        }
        for (b, gb) in p.biases.iter_mut().zip(&g.biases) {
            *b -= lr * gb;
        }
    }
}

/// Plain SGD: `w' = w - lr * g`. Masked-out weights are left untouched.
pub fn sgd_step(params: &Parameters, grads: &Parameters, mask: &MaskSet, lr: f64) -> Parameters {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grads, mask, lr);
    next
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate_accuracy(spec: &NetworkSpec, params: &Parameters, mask: &MaskSet, split: &Split) -> Result<f64, NnError> {
    if split.is_empty() {
        return Err(NnError::EmptySplit("evaluation"));
    }
    if split.sample_shape != spec.input_shape() {
        return Err(NnError::ShapeMismatch(format!(
            "split samples {:?} vs network input {:?}",
            split.sample_shape,
            spec.input_shape()
        )));
    }
    params.check_matches(spec)?;
    let eff = effective_weights(params, mask)?;
    let classes = spec.num_classes();
    let d = split.sample_len();
    const CHUNK: usize = 512;
    let mut correct = 0usize;
    for (c, labels) in split.labels.chunks(CHUNK).enumerate() {
        let start = c * CHUNK * d;
        let xs = &split.inputs[start..start + labels.len() * d];
        let (logits, _) = run_forward(spec, &eff, params, xs, labels.len(), false)?;
        correct += logits.chunks(classes).zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    }
    Ok(correct as f64 / split.len() as f64)
}
