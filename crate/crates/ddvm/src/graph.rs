//! Reverse-mode automatic differentiation over [`DenseField`] values.
//!
//! A [`DiffGraph`] is a tape: every operation is recorded eagerly with its
//! output value, and [`DiffGraph::backward`] walks the tape once in reverse
//! topological (creation) order. One graph per training step, single writer.
//!
//! Conventions for non-grid operands, all expressed as `DenseField`s:
//! - conv kernels are `(k, k, cin*cout)` with `kernel[ky, kx, ci*cout + co]`
//! - vectors (time embeddings, FiLM parameters) are `(1, 1, n)`
//! - linear weights are `(1, n_in, n_out)`, biases `(1, 1, n_out)`

use crate::error::{Error, Result};
use crate::field::DenseField;
use crate::sparse::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero fill, `(k-1)/2` on every side; output spatial size is
    /// `floor((n-1)/stride) + 1` (equals `n` at stride 1).
    Same,
    /// No fill; output spatial size is `floor((n-k)/stride) + 1`.
    Valid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId, f64),
    Silu(VarId),
    SmoothAbs(VarId, f64),
    Mean(VarId),
    Conv2d { input: VarId, kernel: VarId, stride: usize, padding: Padding },
    AddChannels(VarId, VarId),
    MulChannels(VarId, VarId),
    ApplyMask(VarId, Mask),
    GroupNorm { input: VarId, groups: usize },
    Linear { input: VarId, weight: VarId, bias: VarId },
    SliceChannels { input: VarId, start: usize, len: usize },
    ConcatChannels(VarId, VarId),
    UpsampleNearest2x(VarId),
    Attention { q: VarId, k: VarId, v: VarId },
    MaskedSumAbs { pred: VarId, target: VarId, mask: Mask },
    MaskedSumSq { pred: VarId, target: VarId, mask: Mask },
    Detach(VarId),
}

struct Node {
    op: Op,
    value: DenseField,
}

const GROUP_NORM_EPS: f64 = 1e-5;

/// Recorded computation; owns every node value so a forward replay is
/// reproducible bit-for-bit from the leaves.
pub struct DiffGraph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<DenseField>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&DenseField> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<DenseField> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Default for DiffGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl DiffGraph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &DenseField {
        &self.nodes[id.0].value
    }

    fn val(&self, id: VarId) -> &DenseField {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op) -> Result<VarId> {
        let value = eval_op(&op, &|id: VarId| &self.nodes[id.0].value)?;
        self.nodes.push(Node { op, value });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Constant input; gradients do not accumulate here.
    pub fn leaf(&mut self, value: DenseField) -> VarId {
        self.nodes.push(Node { op: Op::Leaf { requires_grad: false }, value });
        VarId(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: DenseField) -> VarId {
        self.nodes.push(Node { op: Op::Leaf { requires_grad: true }, value });
        VarId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> Result<VarId> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> Result<VarId> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn silu(&mut self, a: VarId) -> Result<VarId> {
        self.push(Op::Silu(a))
    }

    /// Smooth |x|: sqrt(x^2 + delta^2). Differentiable everywhere.
    pub fn smooth_abs(&mut self, a: VarId, delta: f64) -> Result<VarId> {
        self.push(Op::SmoothAbs(a, delta))
    }

    /// Mean over all elements; output shape (1, 1, 1).
    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        self.push(Op::Mean(a))
    }

    /// 2-D convolution. `kernel` must be `(k, k, cin*cout)` with odd `k` and
    /// `cin` equal to the input channel count.
    pub fn conv2d(&mut self, input: VarId, kernel: VarId, stride: usize, padding: Padding) -> Result<VarId> {
        self.push(Op::Conv2d { input, kernel, stride, padding })
    }

    /// Broadcast-add a `(1, 1, C)` bias over every pixel.
    pub fn add_channels(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        self.push(Op::AddChannels(x, bias))
    }

    /// Broadcast-multiply by a `(1, 1, C)` per-channel scale.
    pub fn mul_channels(&mut self, x: VarId, scale: VarId) -> Result<VarId> {
        self.push(Op::MulChannels(x, scale))
    }

    /// Zero out mask-false pixels (mask broadcast across channels). The mask
    /// is a constant; gradients at masked-out elements are exactly zero.
    pub fn apply_mask(&mut self, x: VarId, mask: &Mask) -> Result<VarId> {
        self.push(Op::ApplyMask(x, mask.clone()))
    }

    /// Group normalization without affine parameters (FiLM supplies those).
    pub fn group_norm(&mut self, x: VarId, groups: usize) -> Result<VarId> {
        self.push(Op::GroupNorm { input: x, groups })
    }

    /// Vector-matrix product: x (1,1,in) · w (1,in,out) + b (1,1,out).
    pub fn linear(&mut self, x: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        self.push(Op::Linear { input: x, weight, bias })
    }

    pub fn slice_channels(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        self.push(Op::SliceChannels { input: x, start, len })
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::ConcatChannels(a, b))
    }

    pub fn upsample_nearest_2x(&mut self, x: VarId) -> Result<VarId> {
        self.push(Op::UpsampleNearest2x(x))
    }

    /// Single-head dot-product self-attention over all spatial positions.
    pub fn attention(&mut self, q: VarId, k: VarId, v: VarId) -> Result<VarId> {
        self.push(Op::Attention { q, k, v })
    }

    /// Sum over mask-true pixels (all channels) of |target - pred|; output
    /// (1,1,1). The |x| subgradient at 0 is 0.
    pub fn masked_sum_abs(&mut self, pred: VarId, target: VarId, mask: &Mask) -> Result<VarId> {
        self.push(Op::MaskedSumAbs { pred, target, mask: mask.clone() })
    }

    /// Sum over mask-true pixels of (target - pred)^2; output (1,1,1).
    pub fn masked_sum_sq(&mut self, pred: VarId, target: VarId, mask: &Mask) -> Result<VarId> {
        self.push(Op::MaskedSumSq { pred, target, mask: mask.clone() })
    }

    /// Identity forward, gradient barrier backward.
    pub fn detach(&mut self, x: VarId) -> Result<VarId> {
        self.push(Op::Detach(x))
    }

    /// Backward from a scalar output with seed gradient 1.
    pub fn backward(&self, output: VarId) -> Result<Gradients> {
        self.backward_seeded(output, 1.0)
    }

    /// Backward from a scalar output with an explicit seed gradient, used to
    /// fold an outer scale (e.g. 1/batch_count) into one pass.
    pub fn backward_seeded(&self, output: VarId, seed: f64) -> Result<Gradients> {
        let out_val = self.val(output);
        if out_val.shape() != (1, 1, 1) {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar output, got {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<DenseField>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(DenseField::constant(1, 1, 1, seed));

        // Creation order is a topological order, so one reverse sweep visits
        // every reachable node exactly once.
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &DenseField, grads: &mut Vec<Option<DenseField>>) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let da = g.mul(self.val(*b)).expect("recorded shapes agree");
                let db = g.mul(self.val(*a)).expect("recorded shapes agree");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
            Op::Silu(a) => {
                let x = self.val(*a);
                let da = x
                    .zip(g, |x, g| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::SmoothAbs(a, delta) => {
                let x = self.val(*a);
                let d2 = delta * delta;
                let da = x
                    .zip(g, |x, g| g * x / (x * x + d2).sqrt())
                    .expect("same shape");
                accumulate(grads, *a, da);
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let (h, w, c) = x.shape();
                let v = g.get(0, 0, 0) / (h * w * c) as f64;
                accumulate(grads, *a, DenseField::constant(h, w, c, v));
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let (din, dker) = conv2d_backward(
                    self.val(*input),
                    self.val(*kernel),
                    g,
                    *stride,
                    *padding,
                );
                accumulate(grads, *input, din);
                accumulate(grads, *kernel, dker);
            }
            Op::AddChannels(x, b) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, sum_over_pixels(g));
            }
            Op::MulChannels(x, s) => {
                let xv = self.val(*x);
                let sv = self.val(*s);
                let (h, w, c) = xv.shape();
                let mut dx = DenseField::zeros(h, w, c);
                let mut ds = DenseField::zeros(1, 1, c);
                for p in 0..h * w {
                    for ch in 0..c {
                        let gi = g.data()[p * c + ch];
                        dx.data_mut()[p * c + ch] = gi * sv.data()[ch];
                        ds.data_mut()[ch] += gi * xv.data()[p * c + ch];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *s, ds);
            }
            Op::ApplyMask(x, mask) => {
                let (h, w, c) = g.shape();
                let mut dx = g.clone();
                for y in 0..h {
                    for xx in 0..w {
                        if !mask.get(y, xx) {
                            for ch in 0..c {
                                let i = dx.idx(y, xx, ch);
                                dx.data_mut()[i] = 0.0;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GroupNorm { input, groups } => {
                let dx = group_norm_backward(self.val(*input), g, *groups);
                accumulate(grads, *input, dx);
            }
            Op::Linear { input, weight, bias } => {
                let xv = self.val(*input);
                let wv = self.val(*weight);
                let (_, n_in, n_out) = wv.shape();
                let mut dx = DenseField::zeros(1, 1, n_in);
                let mut dw = DenseField::zeros(1, n_in, n_out);
                for i in 0..n_in {
                    let xi = xv.data()[i];
                    let mut acc = 0.0;
                    for o in 0..n_out {
                        let go = g.data()[o];
                        acc += go * wv.data()[i * n_out + o];
                        dw.data_mut()[i * n_out + o] = xi * go;
                    }
                    dx.data_mut()[i] = acc;
                }
                accumulate(grads, *input, dx);
                accumulate(grads, *weight, dw);
                accumulate(grads, *bias, g.clone());
            }
            Op::SliceChannels { input, start, len } => {
                let xv = self.val(*input);
                let (h, w, c) = xv.shape();
                let mut dx = DenseField::zeros(h, w, c);
                for p in 0..h * w {
                    for j in 0..*len {
                        dx.data_mut()[p * c + start + j] = g.data()[p * len + j];
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::ConcatChannels(a, b) => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let (h, w, ca) = av.shape();
                let cb = bv.channels();
                let mut da = DenseField::zeros(h, w, ca);
                let mut db = DenseField::zeros(h, w, cb);
                for p in 0..h * w {
                    let row = &g.data()[p * (ca + cb)..(p + 1) * (ca + cb)];
                    da.data_mut()[p * ca..(p + 1) * ca].copy_from_slice(&row[..ca]);
                    db.data_mut()[p * cb..(p + 1) * cb].copy_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::UpsampleNearest2x(x) => {
                let xv = self.val(*x);
                let (h, w, c) = xv.shape();
                let mut dx = DenseField::zeros(h, w, c);
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        for ch in 0..c {
                            let i = dx.idx(y / 2, xx / 2, ch);
                            dx.data_mut()[i] += g.get(y, xx, ch);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v } => {
                let (dq, dk, dv) = attention_backward(self.val(*q), self.val(*k), self.val(*v), g);
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::MaskedSumAbs { pred, target, mask } => {
                let p = self.val(*pred);
                let t = self.val(*target);
                let (h, w, c) = p.shape();
                let gs = g.get(0, 0, 0);
                let mut dp = DenseField::zeros(h, w, c);
                let mut dt = DenseField::zeros(h, w, c);
                for y in 0..h {
                    for x in 0..w {
                        if !mask.get(y, x) {
                            continue;
                        }
                        for ch in 0..c {
                            let i = p.idx(y, x, ch);
                            let r = t.data()[i] - p.data()[i];
                            let s = if r > 0.0 {
                                1.0
                            } else if r < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            dp.data_mut()[i] = -gs * s;
                            dt.data_mut()[i] = gs * s;
                        }
                    }
                }
                accumulate(grads, *pred, dp);
                accumulate(grads, *target, dt);
            }
            Op::MaskedSumSq { pred, target, mask } => {
                let p = self.val(*pred);
                let t = self.val(*target);
                let (h, w, c) = p.shape();
                let gs = g.get(0, 0, 0);
                let mut dp = DenseField::zeros(h, w, c);
                let mut dt = DenseField::zeros(h, w, c);
                for y in 0..h {
                    for x in 0..w {
                        if !mask.get(y, x) {
                            continue;
                        }
                        for ch in 0..c {
                            let i = p.idx(y, x, ch);
                            let r = t.data()[i] - p.data()[i];
                            dp.data_mut()[i] = -2.0 * gs * r;
                            dt.data_mut()[i] = 2.0 * gs * r;
                        }
                    }
                }
                accumulate(grads, *pred, dp);
                accumulate(grads, *target, dt);
            }
            Op::Detach(_) => {}
        }
    }

    /// Recompute every node from the leaves and compare with the recorded
    /// values. True only if the replay is bit-identical.
    pub fn replay_matches(&self) -> bool {
        let mut rec: Vec<DenseField> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                op => match eval_op(op, &|id: VarId| &rec[id.0]) {
                    Ok(v) => v,
                    Err(_) => return false,
                },
            };
            rec.push(v);
        }
        self.nodes
            .iter()
            .zip(rec.iter())
            .all(|(n, r)| n.value.data() == r.data() && n.value.shape() == r.shape())
    }
}

fn accumulate(grads: &mut [Option<DenseField>], id: VarId, delta: DenseField) {
    match &mut grads[id.0] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                *gi += di;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sum_over_pixels(g: &DenseField) -> DenseField {
    let (h, w, c) = g.shape();
    let mut out = DenseField::zeros(1, 1, c);
    for p in 0..h * w {
        for ch in 0..c {
            out.data_mut()[ch] += g.data()[p * c + ch];
        }
    }
    out
}

fn eval_op<'a, F: Fn(VarId) -> &'a DenseField>(op: &Op, val: &F) -> Result<DenseField> {
    match op {
        Op::Leaf { .. } => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => val(*a).add(val(*b)),
        Op::Sub(a, b) => val(*a).sub(val(*b)),
        Op::Mul(a, b) => val(*a).mul(val(*b)),
        Op::Scale(a, s) => Ok(val(*a).scale(*s)),
        Op::AddScalar(a, s) => Ok(val(*a).add_scalar(*s)),
        Op::Silu(a) => Ok(val(*a).map(|x| x * sigmoid(x))),
        Op::SmoothAbs(a, delta) => {
            let d2 = delta * delta;
            Ok(val(*a).map(|x| (x * x + d2).sqrt()))
        }
        Op::Mean(a) => Ok(DenseField::constant(1, 1, 1, val(*a).mean())),
        Op::Conv2d { input, kernel, stride, padding } => {
            conv2d_forward(val(*input), val(*kernel), *stride, *padding)
        }
        Op::AddChannels(x, b) => {
            let xv = val(*x);
            let bv = val(*b);
            let (h, w, c) = xv.shape();
            if bv.shape() != (1, 1, c) {
                return Err(Error::shape_mismatch(xv.shape(), bv.shape()));
            }
            let mut out = xv.clone();
            for p in 0..h * w {
                for ch in 0..c {
                    out.data_mut()[p * c + ch] += bv.data()[ch];
                }
            }
            Ok(out)
        }
        Op::MulChannels(x, s) => {
            let xv = val(*x);
            let sv = val(*s);
            let (h, w, c) = xv.shape();
            if sv.shape() != (1, 1, c) {
                return Err(Error::shape_mismatch(xv.shape(), sv.shape()));
            }
            let mut out = xv.clone();
            for p in 0..h * w {
                for ch in 0..c {
                    out.data_mut()[p * c + ch] *= sv.data()[ch];
                }
            }
            Ok(out)
        }
        Op::ApplyMask(x, mask) => {
            let xv = val(*x);
            let (h, w, c) = xv.shape();
            if (mask.height(), mask.width()) != (h, w) {
                return Err(Error::shape_mismatch(xv.shape(), (mask.height(), mask.width())));
            }
            let mut out = xv.clone();
            for y in 0..h {
                for xx in 0..w {
                    if !mask.get(y, xx) {
                        for ch in 0..c {
                            let i = out.idx(y, xx, ch);
                            out.data_mut()[i] = 0.0;
                        }
                    }
                }
            }
            Ok(out)
        }
        Op::GroupNorm { input, groups } => group_norm_forward(val(*input), *groups),
        Op::Linear { input, weight, bias } => {
            let xv = val(*input);
            let wv = val(*weight);
            let bv = val(*bias);
            let (_, n_in, n_out) = wv.shape();
            if xv.shape() != (1, 1, n_in) {
                return Err(Error::shape_mismatch(xv.shape(), (1usize, 1usize, n_in)));
            }
            if bv.shape() != (1, 1, n_out) {
                return Err(Error::shape_mismatch(bv.shape(), (1usize, 1usize, n_out)));
            }
            let mut out = DenseField::zeros(1, 1, n_out);
            for i in 0..n_in {
                let xi = xv.data()[i];
                for o in 0..n_out {
                    out.data_mut()[o] += xi * wv.data()[i * n_out + o];
                }
            }
            for o in 0..n_out {
                out.data_mut()[o] += bv.data()[o];
            }
            Ok(out)
        }
        Op::SliceChannels { input, start, len } => {
            let xv = val(*input);
            let (h, w, c) = xv.shape();
            if start + len > c {
                return Err(Error::InvalidArg(format!(
                    "channel slice {start}..{} out of {c}",
                    start + len
                )));
            }
            let mut out = DenseField::zeros(h, w, *len);
            for p in 0..h * w {
                for j in 0..*len {
                    out.data_mut()[p * len + j] = xv.data()[p * c + start + j];
                }
            }
            Ok(out)
        }
        Op::ConcatChannels(a, b) => DenseField::concat_channels(val(*a), val(*b)),
        Op::UpsampleNearest2x(x) => {
            let xv = val(*x);
            let (h, w, c) = xv.shape();
            Ok(DenseField::from_fn(2 * h, 2 * w, c, |y, xx, ch| xv.get(y / 2, xx / 2, ch)))
        }
        Op::Attention { q, k, v } => attention_forward(val(*q), val(*k), val(*v)),
        Op::MaskedSumAbs { pred, target, mask } => {
            let p = val(*pred);
            let t = val(*target);
            if !p.same_shape(t) {
                return Err(Error::shape_mismatch(p.shape(), t.shape()));
            }
            let (h, w, c) = p.shape();
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(y, x) {
                        continue;
                    }
                    for ch in 0..c {
                        let i = p.idx(y, x, ch);
                        acc += (t.data()[i] - p.data()[i]).abs();
                    }
                }
            }
            Ok(DenseField::constant(1, 1, 1, acc))
        }
        Op::MaskedSumSq { pred, target, mask } => {
            let p = val(*pred);
            let t = val(*target);
            if !p.same_shape(t) {
                return Err(Error::shape_mismatch(p.shape(), t.shape()));
            }
            let (h, w, c) = p.shape();
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(y, x) {
                        continue;
                    }
                    for ch in 0..c {
                        let i = p.idx(y, x, ch);
                        let r = t.data()[i] - p.data()[i];
                        acc += r * r;
                    }
                }
            }
            Ok(DenseField::constant(1, 1, 1, acc))
        }
        Op::Detach(x) => Ok(val(*x).clone()),
    }
}

fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize, usize) {
    let pad = match padding {
        Padding::Same => (k - 1) / 2,
        Padding::Valid => 0,
    };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    (oh, ow, pad)
}

fn conv_check(input: &DenseField, kernel: &DenseField, stride: usize, padding: Padding) -> Result<(usize, usize, usize)> {
    let (kh, kw, kc) = kernel.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArg(format!("kernel must be square with odd size, got ({kh}, {kw})")));
    }
    let cin = input.channels();
    if kc % cin != 0 {
        return Err(Error::ChannelMismatch { expected: cin, got: kc });
    }
    if stride == 0 {
        return Err(Error::InvalidArg("stride must be >= 1".into()));
    }
    let (h, w, _) = input.shape();
    if padding == Padding::Valid && (h < kh || w < kh) {
        return Err(Error::InvalidArg(format!(
            "valid padding needs input >= kernel, got ({h}, {w}) vs {kh}"
        )));
    }
    Ok((kh, cin, kc / cin))
}

fn conv2d_forward(input: &DenseField, kernel: &DenseField, stride: usize, padding: Padding) -> Result<DenseField> {
    let (k, cin, cout) = conv_check(input, kernel, stride, padding)?;
    let (h, w, _) = input.shape();
    let (oh, ow, pad) = conv_out_dims(h, w, k, stride, padding);
    let mut out = DenseField::zeros(oh, ow, cout);
    let id = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * cout;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = id[ibase + ci];
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let orow = &mut od[obase..obase + cout];
                        for (o, kk) in orow.iter_mut().zip(krow) {
                            *o += a * kk;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    input: &DenseField,
    kernel: &DenseField,
    g: &DenseField,
    stride: usize,
    padding: Padding,
) -> (DenseField, DenseField) {
    let (k, _, cout) = conv_check(input, kernel, stride, padding).expect("validated at record time");
    let (h, w, cin) = input.shape();
    let (oh, ow, _) = g.shape();
    let pad = match padding {
        Padding::Same => (k - 1) / 2,
        Padding::Valid => 0,
    };
    let mut din = DenseField::zeros(h, w, cin);
    let mut dker = DenseField::zeros(k, k, cin * cout);
    let id = input.data();
    let kd = kernel.data();
    let gd = g.data();
    let dind = din.data_mut();
    let dkerd = dker.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let gbase = (oy * ow + ox) * cout;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = id[ibase + ci];
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let dkrow = &mut dkerd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let grow = &gd[gbase..gbase + cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            let gv = grow[co];
                            acc += gv * krow[co];
                            dkrow[co] += a * gv;
                        }
                        dind[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    (din, dker)
}

fn group_norm_forward(x: &DenseField, groups: usize) -> Result<DenseField> {
    let (h, w, c) = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArg(format!("{c} channels not divisible into {groups} groups")));
    }
    let gc = c / groups;
    let m = (h * w * gc) as f64;
    let mut out = DenseField::zeros(h, w, c);
    for grp in 0..groups {
        let mut mean = 0.0;
        for p in 0..h * w {
            for j in 0..gc {
                mean += x.data()[p * c + grp * gc + j];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for p in 0..h * w {
            for j in 0..gc {
                let d = x.data()[p * c + grp * gc + j] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for p in 0..h * w {
            for j in 0..gc {
                let i = p * c + grp * gc + j;
                out.data_mut()[i] = (x.data()[i] - mean) * inv_std;
            }
        }
    }
    Ok(out)
}

fn group_norm_backward(x: &DenseField, g: &DenseField, groups: usize) -> DenseField {
    let (h, w, c) = x.shape();
    let gc = c / groups;
    let m = (h * w * gc) as f64;
    let mut dx = DenseField::zeros(h, w, c);
    for grp in 0..groups {
        let mut mean = 0.0;
        for p in 0..h * w {
            for j in 0..gc {
                mean += x.data()[p * c + grp * gc + j];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for p in 0..h * w {
            for j in 0..gc {
                let d = x.data()[p * c + grp * gc + j] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        // dL/dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for p in 0..h * w {
            for j in 0..gc {
                let i = p * c + grp * gc + j;
                let xhat = (x.data()[i] - mean) * inv_std;
                g_mean += g.data()[i];
                gx_mean += g.data()[i] * xhat;
            }
        }
        g_mean /= m;
        gx_mean /= m;
        for p in 0..h * w {
            for j in 0..gc {
                let i = p * c + grp * gc + j;
                let xhat = (x.data()[i] - mean) * inv_std;
                dx.data_mut()[i] = inv_std * (g.data()[i] - g_mean - xhat * gx_mean);
            }
        }
    }
    dx
}

fn attention_scores(q: &DenseField, k: &DenseField) -> Vec<f64> {
    let (h, w, d) = q.shape();
    let n = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for ch in 0..d {
                s += q.data()[i * d + ch] * k.data()[j * d + ch];
            }
            a[i * n + j] = s * scale;
        }
    }
    // row-wise softmax with max subtraction
    for i in 0..n {
        let row = &mut a[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    a
}

fn attention_forward(q: &DenseField, k: &DenseField, v: &DenseField) -> Result<DenseField> {
    if !q.same_shape(k) || !q.same_shape(v) {
        return Err(Error::shape_mismatch(q.shape(), k.shape()));
    }
    let (h, w, d) = q.shape();
    let n = h * w;
    let a = attention_scores(q, k);
    let mut out = DenseField::zeros(h, w, d);
    for i in 0..n {
        for j in 0..n {
            let aij = a[i * n + j];
            for ch in 0..d {
                out.data_mut()[i * d + ch] += aij * v.data()[j * d + ch];
            }
        }
    }
    Ok(out)
}

fn attention_backward(
    q: &DenseField,
    k: &DenseField,
    v: &DenseField,
    g: &DenseField,
) -> (DenseField, DenseField, DenseField) {
    let (h, w, d) = q.shape();
    let n = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let a = attention_scores(q, k);

    let mut dv = DenseField::zeros(h, w, d);
    let mut da = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let aij = a[i * n + j];
            let mut acc = 0.0;
            for ch in 0..d {
                let gi = g.data()[i * d + ch];
                dv.data_mut()[j * d + ch] += aij * gi;
                acc += gi * v.data()[j * d + ch];
            }
            da[i * n + j] = acc;
        }
    }
    // softmax jacobian: ds_ij = a_ij * (da_ij - sum_j' da_ij' a_ij')
    let mut ds = vec![0.0; n * n];
    for i in 0..n {
        let mut dot = 0.0;
        for j in 0..n {
            dot += da[i * n + j] * a[i * n + j];
        }
        for j in 0..n {
            ds[i * n + j] = a[i * n + j] * (da[i * n + j] - dot);
        }
    }
    let mut dq = DenseField::zeros(h, w, d);
    let mut dk = DenseField::zeros(h, w, d);
    for i in 0..n {
        for j in 0..n {
            let s = ds[i * n + j] * scale;
            for ch in 0..d {
                dq.data_mut()[i * d + ch] += s * k.data()[j * d + ch];
                dk.data_mut()[j * d + ch] += s * q.data()[i * d + ch];
            }
        }
    }
    (dq, dk, dv)
}

/// One row of a [`GradCheckReport`].
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol_rel: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol_rel
    }
}

/// Compare analytic gradients with central finite differences.
///
/// `f` builds a scalar output on a fresh graph from the given parameter vars
/// (one per entry of `params`, in order). Relative error uses a unit floor:
/// |a - n| / max(|a|, |n|, 1).
pub fn grad_check<F>(
    f: F,
    params: &[(&str, DenseField)],
    step: f64,
    tol_rel: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut DiffGraph, &[VarId]) -> Result<VarId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArg("grad_check step must be > 0".into()));
    }
    let eval = |values: &[DenseField]| -> Result<(f64, Option<Gradients>, Option<Vec<VarId>>)> {
        let mut graph = DiffGraph::new();
        let ids: Vec<VarId> = values.iter().map(|v| graph.param(v.clone())).collect();
        let out = f(&mut graph, &ids)?;
        let y = graph.value(out).get(0, 0, 0);
        if !y.is_finite() {
            return Err(Error::NonFinite { context: "grad_check objective".into() });
        }
        let grads = graph.backward(out)?;
        Ok((y, Some(grads), Some(ids)))
    };

    let base: Vec<DenseField> = params.iter().map(|(_, v)| v.clone()).collect();
    let (_, grads, ids) = eval(&base)?;
    let grads = grads.unwrap();
    let ids = ids.unwrap();

    let scalar_eval = |values: &[DenseField]| -> Result<f64> {
        let mut graph = DiffGraph::new();
        let vids: Vec<VarId> = values.iter().map(|v| graph.param(v.clone())).collect();
        let out = f(&mut graph, &vids)?;
        let y = graph.value(out).get(0, 0, 0);
        if !y.is_finite() {
            return Err(Error::NonFinite { context: "grad_check objective".into() });
        }
        Ok(y)
    };

    let mut entries = Vec::new();
    let mut max_rel = 0.0f64;
    for (pi, (name, value)) in params.iter().enumerate() {
        let n = value.len();
        for j in 0..n {
            let mut plus = base.clone();
            plus[pi].data_mut()[j] += step;
            let mut minus = base.clone();
            minus[pi].data_mut()[j] -= step;
            let numeric = (scalar_eval(&plus)? - scalar_eval(&minus)?) / (2.0 * step);
            let analytic = grads
                .get(ids[pi])
                .map(|g| g.data()[j])
                .unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            entries.push(GradCheckEntry {
                param: name.to_string(),
                index: j,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(GradCheckReport { entries, max_rel_err: max_rel, tol_rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::DenseField;
    use crate::sparse::Mask;

    fn scalar(v: f64) -> DenseField {
        DenseField::constant(1, 1, 1, v)
    }

    #[test]
    fn identity_kernel_is_noop() {
        let mut g = DiffGraph::new();
        let x = g.leaf(DenseField::from_fn(3, 3, 2, |y, x, c| (y * 7 + x * 3 + c) as f64 * 0.21));
        // 1x1 kernel mapping each channel to itself
        let mut k = DenseField::zeros(1, 1, 4);
        k.data_mut()[0] = 1.0; // ci=0 -> co=0
        k.data_mut()[3] = 1.0; // ci=1 -> co=1
        let kv = g.leaf(k);
        let y = g.conv2d(x, kv, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn all_ones_kernel_interior_sums_nine_taps() {
        let mut g = DiffGraph::new();
        let c = 0.7;
        let x = g.leaf(DenseField::constant(5, 5, 1, c));
        let k = g.leaf(DenseField::constant(3, 3, 1, 1.0));
        let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).shape(), (5, 5, 1));
        assert!((g.value(y).get(2, 2, 0) - 9.0 * c).abs() < 1e-12);
        // corner sees only 4 taps under zero fill
        assert!((g.value(y).get(0, 0, 0) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn stride_two_valid_output_shape() {
        let mut g = DiffGraph::new();
        let x = g.leaf(DenseField::zeros(4, 4, 1));
        let k = g.leaf(DenseField::zeros(3, 3, 1));
        let y = g.conv2d(x, k, 2, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), (1, 1, 1));
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let mut g = DiffGraph::new();
        let x = g.leaf(DenseField::zeros(4, 4, 3));
        let k = g.leaf(DenseField::zeros(3, 3, 4)); // 4 not divisible by 3
        assert!(g.conv2d(x, k, 1, Padding::Same).is_err());
    }

    #[test]
    fn square_gradient_is_two_x() {
        // f(x) = x^2 at x = 3 via mul
        let report = grad_check(
            |g, p| {
                let y = g.mul(p[0], p[0])?;
                g.mean(y)
            },
            &[("x", scalar(3.0))],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!((report.entries[0].analytic - 6.0).abs() < 1e-12);
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let report = grad_check(
            |g, p| {
                let zero = g.scale(p[0], 0.0)?;
                g.mean(zero)
            },
            &[("x", DenseField::from_fn(2, 2, 1, |y, x, _| (y + x) as f64))],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.entries.iter().all(|e| e.analytic == 0.0));
        assert!(report.passed());
    }

    #[test]
    fn backward_is_linear_in_output() {
        // backward of a*f + b*g vs a*backward(f) + b*backward(g)
        let x0 = DenseField::from_fn(3, 3, 1, |y, x, _| 0.31 * (y as f64) - 0.17 * (x as f64) + 0.05);
        let (a, b) = (2.5, -1.25);

        let build_f = |g: &mut DiffGraph, x: VarId| {
            let s = g.smooth_abs(x, 0.3).unwrap();
            g.mean(s).unwrap()
        };
        let build_g = |g: &mut DiffGraph, x: VarId| {
            let m = g.mul(x, x).unwrap();
            g.mean(m).unwrap()
        };

        let mut g1 = DiffGraph::new();
        let x1 = g1.param(x0.clone());
        let f1 = build_f(&mut g1, x1);
        let h1 = build_g(&mut g1, x1);
        let fa = g1.scale(f1, a).unwrap();
        let gb = g1.scale(h1, b).unwrap();
        let sum = g1.add(fa, gb).unwrap();
        let combined = g1.backward(sum).unwrap();

        let mut g2 = DiffGraph::new();
        let x2 = g2.param(x0.clone());
        let f2 = build_f(&mut g2, x2);
        let gf = g2.backward(f2).unwrap();
        let mut g3 = DiffGraph::new();
        let x3 = g3.param(x0.clone());
        let h3 = build_g(&mut g3, x3);
        let gg = g3.backward(h3).unwrap();

        let lhs = combined.get(x1).unwrap();
        let f_part = gf.get(x2).unwrap().scale(a);
        let g_part = gg.get(x3).unwrap().scale(b);
        let rhs = f_part.add(&g_part).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut g = DiffGraph::new();
        let x = g.param(DenseField::from_fn(4, 4, 2, |y, x, c| ((y * 13 + x * 5 + c) as f64).sin()));
        let k = g.param(DenseField::from_fn(3, 3, 4, |y, x, c| ((y + x + c) as f64 * 0.123).cos()));
        let c1 = g.conv2d(x, k, 1, Padding::Same).unwrap();
        let s = g.silu(c1).unwrap();
        let n = g.group_norm(s, 2).unwrap();
        let _ = g.mean(n).unwrap();
        assert!(g.replay_matches());
    }

    #[test]
    fn masked_ops_have_exact_zero_grads_off_mask() {
        let mut g = DiffGraph::new();
        let pred = g.param(DenseField::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64 * 0.4));
        let target = g.leaf(DenseField::constant(2, 2, 1, 1.0));
        let mask = Mask::from_fn(2, 2, |y, x| (y, x) != (1, 1));
        let loss = g.masked_sum_abs(pred, target, &mask).unwrap();
        let grads = g.backward(loss).unwrap();
        let gp = grads.get(pred).unwrap();
        assert_eq!(gp.get(1, 1, 0), 0.0);
        assert!(gp.get(0, 0, 0) != 0.0);
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut g = DiffGraph::new();
        let x = g.param(scalar(2.0));
        let d = g.detach(x).unwrap();
        let y = g.mul(d, d).unwrap();
        let out = g.mean(y).unwrap();
        let grads = g.backward(out).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(g.value(d).get(0, 0, 0), 2.0);
    }

    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let mut g = DiffGraph::new();
            let x = g.param(DenseField::from_fn(6, 6, 2, |y, x, c| ((y * 31 + x * 17 + c * 7) as f64 * 0.01).tanh()));
            let k = g.param(DenseField::from_fn(3, 3, 6, |y, x, c| ((y * 5 + x * 3 + c) as f64 * 0.02).sin()));
            let c1 = g.conv2d(x, k, 2, Padding::Same).unwrap();
            let a = g.silu(c1).unwrap();
            let m = g.mean(a).unwrap();
            let grads = g.backward(m).unwrap();
            (g.value(m).get(0, 0, 0), grads.get(x).unwrap().data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gradcheck_composite_ops() {
        // exercise conv2d, group_norm, attention, linear, slices in one net
        let x = DenseField::from_fn(4, 4, 2, |y, x, c| ((y * 3 + x * 7 + c * 11) as f64 * 0.13).sin());
        let k = DenseField::from_fn(3, 3, 8, |y, x, c| ((y * 9 + x + c * 2) as f64 * 0.07).cos() * 0.3);
        let w = DenseField::from_fn(1, 4, 8, |_, i, o| ((i * 8 + o) as f64 * 0.11).sin() * 0.2);
        let b = DenseField::from_fn(1, 1, 8, |_, _, o| o as f64 * 0.01);
        let report = grad_check(
            |g, p| {
                let conv = g.conv2d(p[0], p[1], 1, Padding::Same)?;
                let gn = g.group_norm(conv, 2)?;
                let att = g.attention(gn, gn, gn)?;
                let act = g.silu(att)?;
                let emb = g.leaf(DenseField::from_fn(1, 1, 4, |_, _, i| (i as f64 * 0.3).cos()));
                let lin = g.linear(emb, p[2], p[3])?;
                let s = g.slice_channels(lin, 0, 4)?;
                let t = g.slice_channels(lin, 4, 4)?;
                let scaled = g.mul_channels(act, s)?;
                let shifted = g.add_channels(scaled, t)?;
                let sm = g.smooth_abs(shifted, 0.1)?;
                g.mean(sm)
            },
            &[("x", x), ("k", k), ("w", w), ("b", b)],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradcheck_upsample_concat_slice() {
        let x = DenseField::from_fn(2, 2, 2, |y, x, c| (y as f64) - 0.3 * (x as f64) + 0.1 * c as f64);
        let report = grad_check(
            |g, p| {
                let up = g.upsample_nearest_2x(p[0])?;
                let cat = g.concat_channels(up, up)?;
                let sl = g.slice_channels(cat, 1, 2)?;
                let sq = g.mul(sl, sl)?;
                g.mean(sq)
            },
            &[("x", x)],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
