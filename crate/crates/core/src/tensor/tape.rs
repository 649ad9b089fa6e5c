use super::{log_softmax_row, softmax_row, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv3x3 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftTargetKl {
        logits: Var,
        target: Vec<f64>,
        student: Vec<f64>,
        temperature: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are only ever pushed after their inputs, so the node order is a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`. Trainable leaves always have one (zeros when the
    /// loss does not depend on them); constants never do.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x · W + b` for `x: [B × I]`, `W: [I × O]`, `b: [O]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
            return Err(Error::Shape(format!(
                "affine expects [B×I]·[I×O]+[O], got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (rows, inner) = (x.shape()[0], x.shape()[1]);
        let out = w.shape()[1];
        if w.shape()[0] != inner || b.shape()[0] != out {
            return Err(Error::Shape(format!(
                "affine input {:?} incompatible with weight {:?} / bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut y = vec![0.0; rows * out];
        for (xr, yr) in xd.chunks(inner).zip(y.chunks_mut(out)) {
            yr.copy_from_slice(bd);
            for (i, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &wd[i * out..(i + 1) * out];
                for (yv, &wv) in yr.iter_mut().zip(wr) {
                    *yv += xv * wv;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![rows, out], y);
        self.push(
            value,
            Op::Affine {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    /// 3×3 convolution, stride 1, zero "same" padding.
    /// `x: [B × C × H × W]`, `w: [O × C × 3 × 3]`, `b: [O]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
            return Err(Error::Shape(format!(
                "conv3x3 expects [B×C×H×W], [O×C×3×3], [O]; got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let [batch, chans, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let outc = w.shape()[0];
        if w.shape()[1..] != [chans, 3, 3] || b.shape()[0] != outc {
            return Err(Error::Shape(format!(
                "conv3x3 weight {:?} / bias {:?} incompatible with input {:?}",
                w.shape(),
                b.shape(),
                x.shape()
            )));
        }
        let (xd, kd, bd) = (x.data(), w.data(), b.data());
        let plane = h * wd;
        let mut y = vec![0.0; batch * outc * plane];
        for n in 0..batch {
            for o in 0..outc {
                let yp = &mut y[(n * outc + o) * plane..(n * outc + o + 1) * plane];
                yp.fill(bd[o]);
                for c in 0..chans {
                    let xp = &xd[(n * chans + c) * plane..(n * chans + c + 1) * plane];
                    let k = &kd[(o * chans + c) * 9..(o * chans + c + 1) * 9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let kv = k[ky * 3 + kx];
                            for r in 0..h {
                                let sr = r as isize + ky as isize - 1;
                                if sr < 0 || sr >= h as isize {
                                    continue;
                                }
                                let srow = &xp[sr as usize * wd..(sr as usize + 1) * wd];
                                let yrow = &mut yp[r * wd..(r + 1) * wd];
                                for (col, yv) in yrow.iter_mut().enumerate() {
                                    let sc = col as isize + kx as isize - 1;
                                    if sc >= 0 && sc < wd as isize {
                                        *yv += kv * srow[sc as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![batch, outc, h, wd], y);
        self.push(
            value,
            Op::Conv3x3 {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(value, Op::Relu(input), &[input])
    }

    /// 2×2 max pooling with stride 2 over the trailing two axes of a rank-4
    /// tensor. Odd trailing rows/columns are dropped; ties pick the first
    /// element in row-major window order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 || x.shape()[2] < 2 || x.shape()[3] < 2 {
            return Err(Error::Shape(format!(
                "max_pool2 expects [B×C×H×W] with H,W ≥ 2, got {:?}",
                x.shape()
            )));
        }
        let [batch, chans, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut y = Vec::with_capacity(batch * chans * oh * ow);
        let mut argmax = Vec::with_capacity(y.capacity());
        for p in 0..batch * chans {
            let base = p * h * w;
            for r in 0..oh {
                for c in 0..ow {
                    let mut best = base + 2 * r * w + 2 * c;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * r + dr) * w + 2 * c + dc;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    y.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![batch, chans, oh, ow], y);
        self.push(value, Op::MaxPool2 { input, argmax }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        self.push(value, Op::Reshape(input), &[input])
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let shape = vec![x.rows(), x.row_len()];
        self.reshape(input, shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&u, &v)| f(u, v))
            .collect();
        Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), data))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), data);
        self.push(value, Op::Scale(input, factor), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Mean over the batch of `-log softmax(z)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (rows, k) = batch_dims(z, "cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "{} labels for {rows} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelRange {
                label: bad,
                num_classes: k,
            });
        }
        let mut probs = vec![0.0; rows * k];
        let mut logp = vec![0.0; k];
        let mut total = 0.0;
        for ((zr, pr), &label) in z.data().chunks(k).zip(probs.chunks_mut(k)).zip(labels) {
            log_softmax_row(zr, 1.0, &mut logp);
            softmax_row(zr, 1.0, pr);
            total -= logp[label];
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean over the batch of `T² · KL(softmax(target/T) ‖ softmax(z/T))`.
    /// The target is a plain tensor, so nothing flows back into it.
    pub fn soft_target_kl(
        &mut self,
        logits: Var,
        target: &Tensor,
        temperature: f64,
    ) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let z = self.value(logits);
        let (rows, k) = batch_dims(z, "soft_target_kl")?;
        if target.shape() != z.shape() {
            return Err(Error::Shape(format!(
                "student logits {:?} vs trainer logits {:?}",
                z.shape(),
                target.shape()
            )));
        }
        let mut target_p = vec![0.0; rows * k];
        let mut student_p = vec![0.0; rows * k];
        let mut log_t = vec![0.0; k];
        let mut log_s = vec![0.0; k];
        let mut total = 0.0;
        for (((zr, tr), tp), sp) in z
            .data()
            .chunks(k)
            .zip(target.data().chunks(k))
            .zip(target_p.chunks_mut(k))
            .zip(student_p.chunks_mut(k))
        {
            log_softmax_row(tr, temperature, &mut log_t);
            log_softmax_row(zr, temperature, &mut log_s);
            let mut kl = 0.0;
            for j in 0..k {
                tp[j] = log_t[j].exp();
                sp[j] = log_s[j].exp();
                kl += tp[j] * (log_t[j] - log_s[j]);
            }
            total += kl;
        }
        let value = Tensor::scalar(temperature * temperature * total / rows as f64);
        self.push(
            value,
            Op::SoftTargetKl {
                logits,
                target: target_p,
                student: student_p,
                temperature,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
                continue;
            }
            self.propagate(node, &upstream, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.trainable {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::from_parts_unchecked(shape, data),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (rows, inner) = (x.shape()[0], x.shape()[1]);
                let out = w.shape()[1];
                let (xd, wd) = (x.data(), w.data());
                if self.needs(*input) {
                    let dx = slot(grads, *input, rows * inner);
                    for (dyr, dxr) in dy.chunks(out).zip(dx.chunks_mut(inner)) {
                        for (i, dxv) in dxr.iter_mut().enumerate() {
                            let wr = &wd[i * out..(i + 1) * out];
                            *dxv += wr.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.needs(*weight) {
                    let dw = slot(grads, *weight, inner * out);
                    for (xr, dyr) in xd.chunks(inner).zip(dy.chunks(out)) {
                        for (i, &xv) in xr.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (dwv, &g) in dw[i * out..(i + 1) * out].iter_mut().zip(dyr) {
                                *dwv += xv * g;
                            }
                        }
                    }
                }
                if self.needs(*bias) {
                    let db = slot(grads, *bias, out);
                    for dyr in dy.chunks(out) {
                        for (d, &g) in db.iter_mut().zip(dyr) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Conv3x3 {
                input,
                weight,
                bias,
            } => self.conv3x3_backward(*input, *weight, *bias, dy, grads),
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = slot(grads, *input, x.len());
                for ((d, &xv), &g) in dx.iter_mut().zip(x).zip(dy) {
                    if xv > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let n = self.value(*input).numel();
                let dx = slot(grads, *input, n);
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
            }
            Op::Reshape(input) => accumulate(slot(grads, *input, dy.len()), dy, 1.0),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(slot(grads, v, dy.len()), dy, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let o = self.value(other).data();
                        let d = slot(grads, v, dy.len());
                        for ((dv, &ov), &g) in d.iter_mut().zip(o).zip(dy) {
                            *dv += ov * g;
                        }
                    }
                }
            }
            Op::Scale(input, factor) => accumulate(slot(grads, *input, dy.len()), dy, *factor),
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                let d = slot(grads, *input, n);
                for dv in d.iter_mut() {
                    *dv += dy[0];
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let k = probs.len() / rows;
                let scale = dy[0] / rows as f64;
                let d = slot(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        d[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
            Op::SoftTargetKl {
                logits,
                target,
                student,
                temperature,
            } => {
                let rows = self.value(*logits).rows();
                let scale = dy[0] * temperature / rows as f64;
                let d = slot(grads, *logits, target.len());
                for ((dv, &s), &t) in d.iter_mut().zip(student).zip(target) {
                    *dv += scale * (s - t);
                }
            }
        }
    }

    fn conv3x3_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let [batch, chans, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let outc = w.shape()[0];
        let plane = h * wd;
        let (xd, kd) = (x.data(), w.data());

        if self.needs(bias) {
            let db = slot(grads, bias, outc);
            for n in 0..batch {
                for (o, dbv) in db.iter_mut().enumerate() {
                    *dbv += dy[(n * outc + o) * plane..(n * outc + o + 1) * plane]
                        .iter()
                        .sum::<f64>();
                }
            }
        }
        let need_w = self.needs(weight);
        let need_x = self.needs(input);
        let mut dw = need_w.then(|| vec![0.0; kd.len()]);
        let mut dx = need_x.then(|| vec![0.0; xd.len()]);
        for n in 0..batch {
            for o in 0..outc {
                let gp = &dy[(n * outc + o) * plane..(n * outc + o + 1) * plane];
                for c in 0..chans {
                    let xoff = (n * chans + c) * plane;
                    let koff = (o * chans + c) * 9;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let kv = kd[koff + ky * 3 + kx];
                            let mut acc = 0.0;
                            for r in 0..h {
                                let sr = r as isize + ky as isize - 1;
                                if sr < 0 || sr >= h as isize {
                                    continue;
                                }
                                let srow = xoff + sr as usize * wd;
                                for col in 0..wd {
                                    let sc = col as isize + kx as isize - 1;
                                    if sc < 0 || sc >= wd as isize {
                                        continue;
                                    }
                                    let g = gp[r * wd + col];
                                    let src = srow + sc as usize;
                                    acc += g * xd[src];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[src] += g * kv;
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[koff + ky * 3 + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw {
            accumulate(slot(grads, weight, dw.len()), &dw, 1.0);
        }
        if let Some(dx) = dx {
            accumulate(slot(grads, input, dx.len()), &dx, 1.0);
        }
    }
}

fn batch_dims(z: &Tensor, what: &str) -> Result<(usize, usize)> {
    if z.rank() != 2 {
        return Err(Error::Shape(format!(
            "{what} expects batch × classes logits, got {:?}",
            z.shape()
        )));
    }
    Ok((z.shape()[0], z.shape()[1]))
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Affine { .. } => "affine",
        Op::Conv3x3 { .. } => "conv3x3",
        Op::Relu(_) => "relu",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::Reshape(_) => "reshape",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::SoftTargetKl { .. } => "soft_target_kl",
    }
}
