//! Forward and backward execution of masked super networks.
//!
//! Execution records onto a [`Tape`]: each applied operation keeps its
//! output tensor and the handles of its inputs, which is enough state to
//! replay the computation in reverse for gradients. Module parameters are
//! not tape nodes; they live in a [`ParameterStore`] and their gradients
//! accumulate there during [`backward`].
//!
//! A layer's value is the sum of its selected incoming edge outputs,
//! accumulated in the fixed order of incoming edges (ascending source id).
//! Layers the mask leaves without any computed input produce no value, and
//! edges leaving them are skipped, which matches the sampling rule that
//! never selects an edge out of an unreachable layer.

use crate::error::{Error, Result};
use crate::graph::{Activation, Mask, ModuleKind, ModuleSpec, ParamSlot, SuperNetGraph};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    /// Leaf holding an external input.
    Input,
    /// Passthrough; gradient routes to `src` unchanged.
    Alias { src: ValueId },
    /// Fully connected map; `pooled` marks a spatial input that was
    /// globally average-pooled before the matrix multiply.
    Dense { w: ParamSlot, b: ParamSlot, src: ValueId, pooled: bool },
    /// 2-D cross-correlation plus bias.
    Conv { w: ParamSlot, b: ParamSlot, stride: usize, padding: usize, src: ValueId },
    /// Stride-2 transposed convolution doubling resolution.
    ConvTransposed { w: ParamSlot, b: ParamSlot, src: ValueId },
    Relu { src: ValueId },
    /// Elementwise sum of same-shape values, in recorded order.
    Sum { srcs: Vec<ValueId> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an external input and returns its handle.
    pub fn input(&mut self, x: Tensor) -> ValueId {
        self.push(Op::Input, x)
    }

    /// The tensor a handle refers to.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    fn relu(&mut self, src: ValueId) -> ValueId {
        let mut out = self.value(src).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu { src }, out)
    }

    fn sum(&mut self, srcs: Vec<ValueId>) -> ValueId {
        debug_assert!(!srcs.is_empty());
        let mut out = self.value(srcs[0]).clone();
        for &s in &srcs[1..] {
            let rhs = self.value(s).clone();
            out.add_assign(&rhs);
        }
        self.push(Op::Sum { srcs }, out)
    }
}

/// Applies one module to a recorded value, recording the result.
pub fn apply_module(
    m: &ModuleSpec,
    input: ValueId,
    params: &ParameterStore,
    tape: &mut Tape,
) -> Result<ValueId> {
    let in_shape = tape.value(input).shape().to_vec();
    if let Err(detail) = m.kind.output_shape(&in_shape) {
        return Err(Error::ShapeMismatch { src: 0, dst: 0, detail });
    }
    let id = match m.kind {
        ModuleKind::Identity => {
            let v = tape.value(input).clone();
            tape.push(Op::Alias { src: input }, v)
        }
        ModuleKind::Dense { .. } => {
            let (w, b) = (m.param_slots[0], m.param_slots[1]);
            let pooled = in_shape.len() == 3;
            let out = dense_forward(tape.value(input), params.value(w), params.value(b), pooled);
            tape.push(Op::Dense { w, b, src: input, pooled }, out)
        }
        ModuleKind::Conv2d { stride, padding, .. } => {
            conv_node(tape, params, m.param_slots[0], m.param_slots[1], stride, padding, input)
        }
        ModuleKind::Projection { stride, .. } => {
            conv_node(tape, params, m.param_slots[0], m.param_slots[1], stride, 0, input)
        }
        ModuleKind::DownsampleConv { kernel, .. } => {
            conv_node(tape, params, m.param_slots[0], m.param_slots[1], 2, kernel / 2, input)
        }
        ModuleKind::UpsampleConv { .. } => {
            let (w, b) = (m.param_slots[0], m.param_slots[1]);
            let out = conv_transposed_forward(tape.value(input), params.value(w), params.value(b));
            tape.push(Op::ConvTransposed { w, b, src: input }, out)
        }
        ModuleKind::BasicBlock { stride, .. } => {
            let s = &m.param_slots;
            let c1 = conv_node(tape, params, s[0], s[1], stride, 1, input);
            let r1 = tape.relu(c1);
            let c2 = conv_node(tape, params, s[2], s[3], 1, 1, r1);
            let shortcut = if m.kind.block_needs_projection() {
                conv_node(tape, params, s[4], s[5], stride, 0, input)
            } else {
                let v = tape.value(input).clone();
                tape.push(Op::Alias { src: input }, v)
            };
            let added = tape.sum(vec![c2, shortcut]);
            tape.relu(added)
        }
    };
    Ok(id)
}

fn conv_node(
    tape: &mut Tape,
    params: &ParameterStore,
    w: ParamSlot,
    b: ParamSlot,
    stride: usize,
    padding: usize,
    src: ValueId,
) -> ValueId {
    let out = conv_forward(tape.value(src), params.value(w), params.value(b), stride, padding);
    tape.push(Op::Conv { w, b, stride, padding, src }, out)
}

/// Runs a masked super network on one input, recording onto `tape`.
///
/// Layers are visited in topological order; each layer sums the outputs of
/// its selected incoming edges whose source produced a value, then applies
/// the graph's post-aggregation activation (internal layers only). Returns
/// the output layer's handle. Fails with [`Error::NotConnected`] when the
/// mask leaves the output unreachable.
pub fn ssn_forward(
    g: &SuperNetGraph,
    mask: &Mask,
    x: Tensor,
    params: &ParameterStore,
    tape: &mut Tape,
) -> Result<ValueId> {
    if mask.len() != g.num_edges() {
        return Err(Error::InvalidConfig(format!(
            "mask covers {} edges, graph has {}",
            mask.len(),
            g.num_edges()
        )));
    }
    if x.shape() != g.layer(1).shape.as_slice() {
        return Err(Error::ShapeMismatch {
            src: 1,
            dst: 1,
            detail: format!("input is {:?}, input layer wants {:?}", x.shape(), g.layer(1).shape),
        });
    }
    if !g.is_output_connected(mask) {
        return Err(Error::NotConnected);
    }
    let mut values: Vec<Option<ValueId>> = vec![None; g.num_layers()];
    values[0] = Some(tape.input(x));
    let out_id = g.output_id();
    for &layer in g.topo_order() {
        if layer == 1 {
            continue;
        }
        let mut contributions = Vec::new();
        for &e in g.incoming(layer) {
            if !mask.get(e) {
                continue;
            }
            let edge = g.edge(e);
            if let Some(src_val) = values[edge.src - 1] {
                contributions.push(apply_module(&edge.module, src_val, params, tape)?);
            }
        }
        if contributions.is_empty() {
            continue;
        }
        let mut v = if contributions.len() == 1 {
            contributions[0]
        } else {
            tape.sum(contributions)
        };
        if layer != out_id && g.activation() == Activation::Relu {
            v = tape.relu(v);
        }
        values[layer - 1] = Some(v);
    }
    values[out_id - 1].ok_or(Error::NotConnected)
}

/// Replays the tape in reverse, accumulating parameter gradients.
///
/// `loss_grad` is the loss derivative with respect to the value at
/// `output`. Gradients add into `params`; call
/// [`ParameterStore::zero_grads`] between batches. Values not on a path to
/// `output` receive no gradient, so parameters of unapplied or dead-branch
/// modules are untouched.
pub fn backward(
    tape: &Tape,
    output: ValueId,
    loss_grad: &Tensor,
    params: &mut ParameterStore,
) -> Result<()> {
    run_backward(tape, output, loss_grad, params).map(|_| ())
}

/// Backward pass that also returns the gradient at every tape node
/// (`None` for values off the path to `output`). The gradient at input
/// nodes is what tests check against finite differences.
pub(crate) fn run_backward(
    tape: &Tape,
    output: ValueId,
    loss_grad: &Tensor,
    params: &mut ParameterStore,
) -> Result<Vec<Option<Tensor>>> {
    if tape.is_empty() {
        return Err(Error::EmptyTape);
    }
    if loss_grad.shape() != tape.value(output).shape() {
        return Err(Error::ShapeMismatch {
            src: 0,
            dst: 0,
            detail: format!(
                "loss gradient is {:?}, output is {:?}",
                loss_grad.shape(),
                tape.value(output).shape()
            ),
        });
    }
    let mut grads: Vec<Option<Tensor>> = (0..tape.nodes.len()).map(|_| None).collect();
    grads[output.0] = Some(loss_grad.clone());
    for idx in (0..=output.0).rev() {
        // Keep the node's own gradient available to callers; work on a copy.
        let Some(dout) = grads[idx].clone() else { continue };
        match &tape.nodes[idx].op {
            Op::Input => {}
            Op::Alias { src } => add_grad(&mut grads, *src, dout, tape),
            Op::Relu { src } => {
                let mut dx = dout;
                for (g, y) in dx.data_mut().iter_mut().zip(tape.nodes[idx].value.data()) {
                    if *y <= 0.0 {
                        *g = 0.0;
                    }
                }
                add_grad(&mut grads, *src, dx, tape);
            }
            Op::Sum { srcs } => {
                for &s in srcs {
                    add_grad(&mut grads, s, dout.clone(), tape);
                }
            }
            Op::Dense { w, b, src, pooled } => {
                let x = tape.value(*src);
                let dx = dense_backward(x, params, *w, *b, &dout, *pooled);
                add_grad(&mut grads, *src, dx, tape);
            }
            Op::Conv { w, b, stride, padding, src } => {
                let x = tape.value(*src);
                let dx = conv_backward(x, params, *w, *b, *stride, *padding, &dout);
                add_grad(&mut grads, *src, dx, tape);
            }
            Op::ConvTransposed { w, b, src } => {
                let x = tape.value(*src);
                let dx = conv_transposed_backward(x, params, *w, *b, &dout);
                add_grad(&mut grads, *src, dx, tape);
            }
        }
    }
    Ok(grads)
}

fn add_grad(grads: &mut [Option<Tensor>], id: ValueId, g: Tensor, tape: &Tape) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => {
            debug_assert_eq!(g.shape(), tape.value(id).shape());
            *slot = Some(g);
        }
    }
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, pooled: bool) -> Tensor {
    let xv = if pooled { pool_mean(x) } else { x.data().to_vec() };
    let (m, n) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(xv.len(), n);
    let mut out = vec![0f32; m];
    for j in 0..m {
        let mut acc = b.data()[j];
        let row = &w.data()[j * n..(j + 1) * n];
        for i in 0..n {
            acc += row[i] * xv[i];
        }
        out[j] = acc;
    }
    Tensor::new(vec![m], out).expect("dense output shape")
}

fn dense_backward(
    x: &Tensor,
    params: &mut ParameterStore,
    w: ParamSlot,
    b: ParamSlot,
    dout: &Tensor,
    pooled: bool,
) -> Tensor {
    let xv = if pooled { pool_mean(x) } else { x.data().to_vec() };
    let (m, n) = (params.value(w).shape()[0], params.value(w).shape()[1]);
    {
        let db = params.grad_mut(b);
        for j in 0..m {
            db.data_mut()[j] += dout.data()[j];
        }
    }
    let mut dx_pool = vec![0f32; n];
    {
        // Read weights and write weight gradients in one pass; the two
        // slots are distinct by construction.
        let wd: Vec<f32> = params.value(w).data().to_vec();
        let dw = params.grad_mut(w);
        for j in 0..m {
            let g = dout.data()[j];
            for i in 0..n {
                dw.data_mut()[j * n + i] += g * xv[i];
                dx_pool[i] += wd[j * n + i] * g;
            }
        }
    }
    if pooled {
        let (h, wd_) = (x.shape()[1], x.shape()[2]);
        let scale = 1.0 / (h * wd_) as f32;
        let mut dx = Tensor::zeros(x.shape());
        for c in 0..n {
            let g = dx_pool[c] * scale;
            for p in 0..h * wd_ {
                dx.data_mut()[c * h * wd_ + p] = g;
            }
        }
        dx
    } else {
        Tensor::new(x.shape().to_vec(), dx_pool).expect("dense input gradient shape")
    }
}

/// Global average pool of a `[c,h,w]` tensor to `[c]`.
fn pool_mean(x: &Tensor) -> Vec<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let area = (h * w) as f32;
    (0..c)
        .map(|i| x.data()[i * h * w..(i + 1) * h * w].iter().sum::<f32>() / area)
        .collect()
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (ci, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    debug_assert_eq!(w.shape()[1], ci);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wi + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    let (xd, wd, bd, od) = (x.data(), w.data(), b.data(), out.data_mut());
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bd[o];
                for i in 0..ci {
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * stride + kx) as isize - padding as isize;
                            if xx < 0 || xx >= wi as isize {
                                continue;
                            }
                            acc += wd[((o * ci + i) * k + ky) * k + kx]
                                * xd[(i * h + y as usize) * wi + xx as usize];
                        }
                    }
                }
                od[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn conv_backward(
    x: &Tensor,
    params: &mut ParameterStore,
    w: ParamSlot,
    b: ParamSlot,
    stride: usize,
    padding: usize,
    dout: &Tensor,
) -> Tensor {
    let (ci, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, oh, ow) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
    let k = params.value(w).shape()[2];
    {
        let db = params.grad_mut(b);
        for o in 0..co {
            let mut acc = 0f32;
            for p in 0..oh * ow {
                acc += dout.data()[o * oh * ow + p];
            }
            db.data_mut()[o] += acc;
        }
    }
    let wd: Vec<f32> = params.value(w).data().to_vec();
    let mut dx = Tensor::zeros(x.shape());
    {
        let dw = params.grad_mut(w);
        let (xd, dod) = (x.data(), dout.data());
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dod[(o * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..ci {
                        for ky in 0..k {
                            let y = (oy * stride + ky) as isize - padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xx = (ox * stride + kx) as isize - padding as isize;
                                if xx < 0 || xx >= wi as isize {
                                    continue;
                                }
                                let widx = ((o * ci + i) * k + ky) * k + kx;
                                let xidx = (i * h + y as usize) * wi + xx as usize;
                                dw.data_mut()[widx] += g * xd[xidx];
                                dx.data_mut()[xidx] += wd[widx] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Stride-2 transposed convolution: output resolution is exactly twice the
/// input's. Weights are `[in, out, k, k]` with odd `k` and implicit
/// padding `(k - 1) / 2`.
fn conv_transposed_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (ci, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let (oh, ow) = (2 * h, 2 * wi);
    let pad = (k - 1) / 2;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    {
        let od = out.data_mut();
        for o in 0..co {
            for p in 0..oh * ow {
                od[o * oh * ow + p] = b.data()[o];
            }
        }
        let (xd, wd) = (x.data(), w.data());
        for i in 0..ci {
            for iy in 0..h {
                for ix in 0..wi {
                    let v = xd[(i * h + iy) * wi + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for o in 0..co {
                        for ky in 0..k {
                            let oy = (2 * iy + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (2 * ix + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                od[(o * oh + oy as usize) * ow + ox as usize] +=
                                    wd[((i * co + o) * k + ky) * k + kx] * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_transposed_backward(
    x: &Tensor,
    params: &mut ParameterStore,
    w: ParamSlot,
    b: ParamSlot,
    dout: &Tensor,
) -> Tensor {
    let (ci, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, oh, ow) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
    let k = params.value(w).shape()[2];
    let pad = (k - 1) / 2;
    {
        let db = params.grad_mut(b);
        for o in 0..co {
            let mut acc = 0f32;
            for p in 0..oh * ow {
                acc += dout.data()[o * oh * ow + p];
            }
            db.data_mut()[o] += acc;
        }
    }
    let wd: Vec<f32> = params.value(w).data().to_vec();
    let mut dx = Tensor::zeros(x.shape());
    {
        let dw = params.grad_mut(w);
        let (xd, dod) = (x.data(), dout.data());
        for i in 0..ci {
            for iy in 0..h {
                for ix in 0..wi {
                    let xv = xd[(i * h + iy) * wi + ix];
                    let mut acc = 0f32;
                    for o in 0..co {
                        for ky in 0..k {
                            let oy = (2 * iy + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (2 * ix + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let widx = ((i * co + o) * k + ky) * k + kx;
                                let g = dod[(o * oh + oy as usize) * ow + ox as usize];
                                dw.data_mut()[widx] += g * xv;
                                acc += wd[widx] * g;
                            }
                        }
                    }
                    dx.data_mut()[(i * h + iy) * wi + ix] = acc;
                }
            }
        }
    }
    dx
}

/// Training losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy between prediction logits and a target
    /// distribution (typically one-hot).
    CrossEntropy,
    /// Sum of squared differences.
    SquaredError,
}

/// Loss value; reductions accumulate in f64.
pub fn loss_delta(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<f64> {
    check_loss_shapes(pred, target)?;
    match kind {
        LossKind::CrossEntropy => {
            let lse = log_sum_exp(pred.data());
            let mut acc = 0f64;
            for (p, t) in pred.data().iter().zip(target.data()) {
                acc += *t as f64 * (lse - *p as f64);
            }
            Ok(acc)
        }
        LossKind::SquaredError => {
            let mut acc = 0f64;
            for (p, t) in pred.data().iter().zip(target.data()) {
                let d = (*p - *t) as f64;
                acc += d * d;
            }
            Ok(acc)
        }
    }
}

/// Loss derivative with respect to the prediction.
pub fn loss_gradient(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor> {
    check_loss_shapes(pred, target)?;
    match kind {
        LossKind::CrossEntropy => {
            let lse = log_sum_exp(pred.data());
            // softmax(pred) - target, scaled by the target's total mass.
            let mass: f64 = target.data().iter().map(|&t| t as f64).sum();
            let data = pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| ((mass * (*p as f64 - lse).exp()) - *t as f64) as f32)
                .collect();
            Tensor::new(pred.shape().to_vec(), data)
        }
        LossKind::SquaredError => {
            let data = pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| 2.0 * (p - t))
                .collect();
            Tensor::new(pred.shape().to_vec(), data)
        }
    }
}

fn check_loss_shapes(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            src: 0,
            dst: 0,
            detail: format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        });
    }
    Ok(())
}

fn log_sum_exp(xs: &[f32]) -> f64 {
    let m = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = xs.iter().map(|&x| (x as f64 - m).exp()).sum();
    m + s.ln()
}
