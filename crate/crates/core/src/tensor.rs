//! Dense rank-3 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every tensor is laid out as `(batch, channel, time)` in row-major order;
//! lower-rank values use unit dimensions (a per-channel vector is `(1, C, 1)`,
//! a scalar is `(1, 1, 1)`). Binary elementwise ops broadcast unit dimensions.
//!
//! A [`Graph`] records every op as it is executed. Nodes are appended in
//! execution order, so walking them backwards is a valid topological order
//! and the reduction order of every gradient is fixed.

use std::fmt;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 3]);

impl Shape {
    pub fn new(batch: usize, channels: usize, time: usize) -> Self {
        Self([batch, channels, time])
    }

    pub fn scalar() -> Self {
        Self([1, 1, 1])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn time(&self) -> usize {
        self.0[2]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                shape.numel(),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, b: usize, c: usize, t: usize) -> f64 {
        let [_, cn, tn] = self.shape.0;
        self.data[(b * cn + c) * tn + t]
    }

    /// Contiguous time row `(b, c, ..)`.
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let [_, cn, tn] = self.shape.0;
        let start = (b * cn + c) * tn;
        &self.data[start..start + tn]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return invalid(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Output length of a strided convolution, `⌊(L + 2P − K)/S⌋ + 1`.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return invalid("kernel size and stride must be positive");
    }
    let padded = len + 2 * padding;
    if padded < kernel {
        return invalid(format!(
            "input of length {len} (padding {padding}) is shorter than kernel {kernel}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    kernel: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvDims {
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Output frames `t` whose input index `t·S + k − P` lies inside the signal.
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let lo = if self.padding > k {
            (self.padding - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.len + self.padding > k {
            ((self.len - 1 + self.padding - k) / self.stride + 1).min(self.out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv_dims(x: Shape, w: Shape, stride: usize, padding: usize, groups: usize) -> Result<ConvDims> {
    let [batch, c_in, len] = x.0;
    let [c_out, in_per_group, kernel] = w.0;
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return invalid(format!(
            "groups={groups} must divide input channels {c_in} and output channels {c_out}"
        ));
    }
    if in_per_group != c_in / groups {
        return invalid(format!(
            "conv1d weight {:?} does not match input {:?} with {} groups",
            w, x, groups
        ));
    }
    let out_len = conv_output_len(len, kernel, stride, padding)?;
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        len,
        kernel,
        out_len,
        stride,
        padding,
        groups,
    })
}

/// Cross-correlation of `x: (B, Cin, L)` with `w: (Cout, Cin/groups, K)`.
pub fn conv1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize, groups: usize) -> Result<Tensor> {
    let d = conv_dims(x.shape, w.shape, stride, padding, groups)?;
    let mut y = Tensor::zeros(Shape::new(d.batch, d.c_out, d.out_len));
    let (ipg, opg) = (d.in_per_group(), d.out_per_group());
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let group = co / opg;
            let y_off = (b * d.c_out + co) * d.out_len;
            for cl in 0..ipg {
                let ci = group * ipg + cl;
                let x_row = &x.data[(b * d.c_in + ci) * d.len..][..d.len];
                let w_row = &w.data[(co * ipg + cl) * d.kernel..][..d.kernel];
                let y_row = &mut y.data[y_off..y_off + d.out_len];
                for (k, &wk) in w_row.iter().enumerate() {
                    let (lo, hi) = d.valid_range(k);
                    if d.stride == 1 {
                        let start = lo + k - d.padding;
                        for (yv, xv) in y_row[lo..hi].iter_mut().zip(&x_row[start..]) {
                            *yv += wk * xv;
                        }
                    } else {
                        for t in lo..hi {
                            y_row[t] += wk * x_row[t * d.stride + k - d.padding];
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    d: ConvDims,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape));
    let (ipg, opg) = (d.in_per_group(), d.out_per_group());
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let group = co / opg;
            let dy_row = &dy.data[(b * d.c_out + co) * d.out_len..][..d.out_len];
            for cl in 0..ipg {
                let ci = group * ipg + cl;
                let x_off = (b * d.c_in + ci) * d.len;
                let w_off = (co * ipg + cl) * d.kernel;
                for k in 0..d.kernel {
                    let (lo, hi) = d.valid_range(k);
                    if let Some(dx) = dx.as_mut() {
                        let wk = w.data[w_off + k];
                        let dx_row = &mut dx.data[x_off..x_off + d.len];
                        for t in lo..hi {
                            dx_row[t * d.stride + k - d.padding] += wk * dy_row[t];
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        let x_row = &x.data[x_off..x_off + d.len];
                        let mut acc = 0.0;
                        for t in lo..hi {
                            acc += dy_row[t] * x_row[t * d.stride + k - d.padding];
                        }
                        dw.data[w_off + k] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Transposed convolution of `x: (B, Cin, T)` with `w: (Cin, Cout, K)`;
/// output length `(T − 1)·S + K`. Adjoint of [`conv1d`] with zero padding.
pub fn conv_transpose1d(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let [batch, c_in, frames] = x.shape.0;
    let [w_in, c_out, kernel] = w.shape.0;
    if w_in != c_in {
        return invalid(format!(
            "transposed conv weight {:?} does not match input {:?}",
            w.shape, x.shape
        ));
    }
    if stride == 0 || kernel == 0 || frames == 0 {
        return invalid("transposed conv needs positive stride, kernel and frame count");
    }
    let out_len = (frames - 1) * stride + kernel;
    let mut y = Tensor::zeros(Shape::new(batch, c_out, out_len));
    for b in 0..batch {
        for ci in 0..c_in {
            let x_row = &x.data[(b * c_in + ci) * frames..][..frames];
            for co in 0..c_out {
                let w_row = &w.data[(ci * c_out + co) * kernel..][..kernel];
                let y_row = &mut y.data[(b * c_out + co) * out_len..][..out_len];
                for (t, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let seg = &mut y_row[t * stride..t * stride + kernel];
                    for (yv, &wk) in seg.iter_mut().zip(w_row) {
                        *yv += xv * wk;
                    }
                }
            }
        }
    }
    Ok(y)
}

fn conv_transpose1d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let [batch, c_in, frames] = x.shape.0;
    let [_, c_out, kernel] = w.shape.0;
    let out_len = dy.shape.time();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape));
    for b in 0..batch {
        for ci in 0..c_in {
            let x_off = (b * c_in + ci) * frames;
            for co in 0..c_out {
                let w_off = (ci * c_out + co) * kernel;
                let dy_row = &dy.data[(b * c_out + co) * out_len..][..out_len];
                for t in 0..frames {
                    let seg = &dy_row[t * stride..t * stride + kernel];
                    if let Some(dx) = dx.as_mut() {
                        let w_row = &w.data[w_off..w_off + kernel];
                        dx.data[x_off + t] += seg.iter().zip(w_row).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xv = x.data[x_off + t];
                        for (g, &s) in dw.data[w_off..w_off + kernel].iter_mut().zip(seg) {
                            *g += xv * s;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn check_channel_param(x: Shape, p: Shape, what: &str) -> Result<()> {
    if p.0[0] != 1 || p.0[2] != 1 || (p.0[1] != x.0[1] && p.0[1] != 1) {
        return invalid(format!(
            "{what} of shape {:?} cannot scale input {:?} per channel",
            p, x
        ));
    }
    Ok(())
}

/// Per-item statistics of a global layer norm.
struct GlnStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Global layer normalization over `(C, T)` per batch item, then per-channel gain and bias.
pub fn global_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(gln_forward(x, gain, bias, eps)?.0)
}

fn gln_forward(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, GlnStats)> {
    check_channel_param(x.shape, gain.shape, "layer-norm gain")?;
    check_channel_param(x.shape, bias.shape, "layer-norm bias")?;
    let [batch, cn, tn] = x.shape.0;
    if cn == 0 || tn == 0 {
        return invalid("layer norm needs at least one channel and one frame");
    }
    let n = (cn * tn) as f64;
    let mut y = Tensor::zeros(x.shape);
    let mut stats = GlnStats {
        mean: Vec::with_capacity(batch),
        inv_std: Vec::with_capacity(batch),
    };
    for b in 0..batch {
        let item = &x.data[b * cn * tn..(b + 1) * cn * tn];
        let mean = item.iter().sum::<f64>() / n;
        let var = item.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        for c in 0..cn {
            let g = gain.data[c.min(gain.data.len() - 1)];
            let bb = bias.data[c.min(bias.data.len() - 1)];
            let off = b * cn * tn + c * tn;
            for t in 0..tn {
                y.data[off + t] = g * (x.data[off + t] - mean) * inv_std + bb;
            }
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
    }
    Ok((y, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch = 0,
    Channel = 1,
    Time = 2,
}

/// Broadcast-compatible output shape of two operands.
fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 3];
    for d in 0..3 {
        let (x, y) = (a.0[d], b.0[d]);
        out[d] = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return invalid(format!("shapes {:?} and {:?} do not broadcast", a, b));
        };
    }
    Ok(Shape(out))
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 3] {
    let [_, c, t] = s.0;
    let full = [c * t, t, 1];
    let mut strides = [0; 3];
    for d in 0..3 {
        strides[d] = if s.0[d] == 1 && out.0[d] != 1 { 0 } else { full[d] };
    }
    strides
}

/// Visits `(out_index, a_index, b_index)` for a broadcast binary op.
fn for_each_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let [o0, o1, o2] = out.0;
    let mut idx = 0;
    for i0 in 0..o0 {
        for i1 in 0..o1 {
            let ba = i0 * sa[0] + i1 * sa[1];
            let bb = i0 * sb[0] + i1 * sb[1];
            for i2 in 0..o2 {
                f(idx, ba + i2 * sa[2], bb + i2 * sb[2]);
                idx += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

fn binary(a: &Tensor, b: &Tensor, kind: BinaryKind) -> Result<Tensor> {
    let out = broadcast_shape(a.shape, b.shape)?;
    let mut y = Tensor::zeros(out);
    if a.shape == b.shape {
        for ((yv, &x), &z) in y.data.iter_mut().zip(&a.data).zip(&b.data) {
            *yv = match kind {
                BinaryKind::Add => x + z,
                BinaryKind::Sub => x - z,
                BinaryKind::Mul => x * z,
            };
        }
        return Ok(y);
    }
    for_each_broadcast(a.shape, b.shape, out, |o, i, j| {
        let (x, z) = (a.data[i], b.data[j]);
        y.data[o] = match kind {
            BinaryKind::Add => x + z,
            BinaryKind::Sub => x - z,
            BinaryKind::Mul => x * z,
        };
    });
    Ok(y)
}

/// Backward hook for ops implemented outside this module.
///
/// Receives the input values, the op output and `∂L/∂output`; returns one
/// gradient per input, shaped like that input.
pub trait CustomBackward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        stride: usize,
    },
    Gln {
        x: Var,
        gain: Var,
        bias: Var,
        stats: GlnStats,
    },
    Relu(Var),
    Prelu {
        x: Var,
        slope: Var,
    },
    Sigmoid(Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Ln(Var),
    SumAll(Var),
    Upsample2(Var),
    FitTime(Var),
    Narrow {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        backward: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording tape for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    finite_checks: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            finite_checks: cfg!(debug_assertions),
        }
    }

    /// Toggle the per-op finiteness assertion (on by default in debug builds).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.finite_checks = on;
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        if self.finite_checks {
            assert!(value.is_finite(), "non-finite values produced by tensor op");
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let dims = conv_dims(self.shape(x), self.shape(w), stride, padding, groups)?;
        let y = conv1d(self.value(x), self.value(w), stride, padding, groups)?;
        let tracked = self.tracked(x) || self.tracked(w);
        Ok(self.push(y, Op::Conv1d { x, w, dims }, tracked))
    }

    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let y = conv_transpose1d(self.value(x), self.value(w), stride)?;
        let tracked = self.tracked(x) || self.tracked(w);
        Ok(self.push(y, Op::ConvTranspose1d { x, w, stride }, tracked))
    }

    pub fn global_layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (y, stats) = gln_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(y, Op::Gln { x, gain, bias, stats }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let tracked = self.tracked(x);
        self.push(y, Op::Relu(x), tracked)
    }

    /// Parametric ReLU with one slope per channel, `slope: (1, C, 1)` or `(1, 1, 1)`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = self.shape(x);
        check_channel_param(xs, self.shape(slope), "prelu slope")?;
        let s = self.value(slope).data.clone();
        let [_, cn, tn] = xs.0;
        let mut y = self.value(x).clone();
        for (i, v) in y.data.iter_mut().enumerate() {
            if *v < 0.0 {
                let c = (i / tn) % cn;
                *v *= s[c.min(s.len() - 1)];
            }
        }
        let tracked = self.tracked(x) || self.tracked(slope);
        Ok(self.push(y, Op::Prelu { x, slope }, tracked))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        let tracked = self.tracked(x);
        self.push(y, Op::Sigmoid(x), tracked)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let y = binary(self.value(a), self.value(b), kind)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(y, Op::Binary(kind, a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut y = self.value(x).clone();
        y.data.iter_mut().for_each(|v| *v *= factor);
        let tracked = self.tracked(x);
        self.push(y, Op::Scale(x, factor), tracked)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let mut y = self.value(x).clone();
        y.data.iter_mut().for_each(|v| *v += offset);
        let tracked = self.tracked(x);
        self.push(y, Op::Offset(x), tracked)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data.iter().any(|&v| v <= 0.0) {
            return invalid("logarithm of a non-positive value");
        }
        let mut y = self.value(x).clone();
        y.data.iter_mut().for_each(|v| *v = v.ln());
        let tracked = self.tracked(x);
        Ok(self.push(y, Op::Ln(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(y, Op::SumAll(x), tracked)
    }

    /// Nearest-neighbour ×2 upsampling along time.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [b, c, t] = xv.shape.0;
        let mut y = Tensor::zeros(Shape::new(b, c, 2 * t));
        for (dst, &v) in y.data.chunks_exact_mut(2).zip(&xv.data) {
            dst[0] = v;
            dst[1] = v;
        }
        let tracked = self.tracked(x);
        self.push(y, Op::Upsample2(x), tracked)
    }

    /// Trims or zero-pads the time axis to exactly `len` samples.
    pub fn fit_time(&mut self, x: Var, len: usize) -> Var {
        let xv = self.value(x);
        let [b, c, t] = xv.shape.0;
        if t == len {
            let y = xv.clone();
            let tracked = self.tracked(x);
            return self.push(y, Op::Reshape(x), tracked);
        }
        let keep = t.min(len);
        let mut y = Tensor::zeros(Shape::new(b, c, len));
        for (dst, src) in y.data.chunks_exact_mut(len).zip(xv.data.chunks_exact(t)) {
            dst[..keep].copy_from_slice(&src[..keep]);
        }
        let tracked = self.tracked(x);
        self.push(y, Op::FitTime(x), tracked)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        let a = axis as usize;
        if start + len > xs.0[a] || len == 0 {
            return invalid(format!(
                "narrow [{start}, {}) out of range for axis {:?} of {:?}",
                start + len,
                axis,
                xs
            ));
        }
        let mut out = xs;
        out.0[a] = len;
        let mut y = Tensor::zeros(out);
        let xv = self.value(x);
        visit_narrow(xs, axis, start, len, |dst, src| y.data[dst] = xv.data[src]);
        let tracked = self.tracked(x);
        Ok(self.push(y, Op::Narrow { x, axis, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(y, Op::Reshape(x), tracked))
    }

    /// Records an externally computed value with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: Box<dyn CustomBackward>) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            tracked,
        )
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        debug_assert_eq!(g.shape, self.shape(v));
        match grads[v.0].as_mut() {
            Some(existing) => existing
                .data
                .iter_mut()
                .zip(&g.data)
                .for_each(|(a, b)| *a += b),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, dims } => {
                let (dx, dw) = conv1d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *dims,
                    self.tracked(*x),
                    self.tracked(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::ConvTranspose1d { x, w, stride } => {
                let (dx, dw) = conv_transpose1d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    self.tracked(*x),
                    self.tracked(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Gln { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let [batch, cn, tn] = xv.shape.0;
                let n = (cn * tn) as f64;
                let mut dx = Tensor::zeros(xv.shape);
                let mut dgain = Tensor::zeros(gv.shape);
                let mut dbias = Tensor::zeros(self.shape(*bias));
                for b in 0..batch {
                    let (mean, inv_std) = (stats.mean[b], stats.inv_std[b]);
                    let base = b * cn * tn;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cn {
                        let gc = gv.data[c.min(gv.data.len() - 1)];
                        for t in 0..tn {
                            let i = base + c * tn + t;
                            let xhat = (xv.data[i] - mean) * inv_std;
                            let dxhat = g.data[i] * gc;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            let gi = dgain.data.len().min(c + 1) - 1;
                            dgain.data[gi] += g.data[i] * xhat;
                            let bi = dbias.data.len().min(c + 1) - 1;
                            dbias.data[bi] += g.data[i];
                        }
                    }
                    let m1 = sum_dxhat / n;
                    let m2 = sum_dxhat_xhat / n;
                    for c in 0..cn {
                        let gc = gv.data[c.min(gv.data.len() - 1)];
                        for t in 0..tn {
                            let i = base + c * tn + t;
                            let xhat = (xv.data[i] - mean) * inv_std;
                            dx.data[i] = inv_std * (g.data[i] * gc - m1 - xhat * m2);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                dx.data
                    .iter_mut()
                    .zip(&xv.data)
                    .for_each(|(d, &v)| if v <= 0.0 { *d = 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Prelu { x, slope } => {
                let xv = self.value(*x);
                let sv = self.value(*slope);
                let [_, cn, tn] = xv.shape.0;
                let mut dx = g.clone();
                let mut ds = Tensor::zeros(sv.shape);
                for (i, (d, &v)) in dx.data.iter_mut().zip(&xv.data).enumerate() {
                    if v < 0.0 {
                        let c = ((i / tn) % cn).min(sv.data.len() - 1);
                        ds.data[c] += *d * v;
                        *d *= sv.data[c];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *slope, ds);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                dx.data
                    .iter_mut()
                    .zip(&node.value.data)
                    .for_each(|(d, &y)| *d *= y * (1.0 - y));
                self.accumulate(grads, *x, dx);
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let out = node.value.shape;
                let mut da = self.tracked(*a).then(|| Tensor::zeros(av.shape));
                let mut db = self.tracked(*b).then(|| Tensor::zeros(bv.shape));
                for_each_broadcast(av.shape, bv.shape, out, |o, i, j| {
                    let go = g.data[o];
                    let (ga, gb) = match kind {
                        BinaryKind::Add => (go, go),
                        BinaryKind::Sub => (go, -go),
                        BinaryKind::Mul => (go * bv.data[j], go * av.data[i]),
                    };
                    if let Some(da) = da.as_mut() {
                        da.data[i] += ga;
                    }
                    if let Some(db) = db.as_mut() {
                        db.data[j] += gb;
                    }
                });
                if let Some(da) = da {
                    self.accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, f) => {
                let mut dx = g.clone();
                dx.data.iter_mut().for_each(|d| *d *= f);
                self.accumulate(grads, *x, dx);
            }
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Ln(x) => {
                let mut dx = g.clone();
                dx.data
                    .iter_mut()
                    .zip(&self.value(*x).data)
                    .for_each(|(d, &v)| *d /= v);
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let dx = Tensor::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (d, pair) in dx.data.iter_mut().zip(g.data.chunks_exact(2)) {
                    *d = pair[0] + pair[1];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::FitTime(x) => {
                let xs = self.shape(*x);
                let (t, len) = (xs.time(), g.shape.time());
                let keep = t.min(len);
                let mut dx = Tensor::zeros(xs);
                for (dst, src) in dx.data.chunks_exact_mut(t).zip(g.data.chunks_exact(len)) {
                    dst[..keep].copy_from_slice(&src[..keep]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let len = g.shape.0[*axis as usize];
                let mut dx = Tensor::zeros(xs);
                visit_narrow(xs, *axis, *start, len, |dst, src| dx.data[src] += g.data[dst]);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let dins = backward.backward(&values, &node.value, g);
                for (&v, d) in inputs.iter().zip(dins) {
                    if d.shape != self.shape(v) {
                        return invalid(format!(
                            "custom backward returned {:?} for an input of shape {:?}",
                            d.shape,
                            self.shape(v)
                        ));
                    }
                    self.accumulate(grads, v, d);
                }
            }
        }
        Ok(())
    }
}

/// Visits `(narrowed_index, source_index)` pairs of a narrow along `axis`.
fn visit_narrow(src: Shape, axis: Axis, start: usize, len: usize, mut f: impl FnMut(usize, usize)) {
    let [b, c, t] = src.0;
    let mut out = src.0;
    out[axis as usize] = len;
    let mut dst = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let (s0, s1, s2) = match axis {
                    Axis::Batch => (i0 + start, i1, i2),
                    Axis::Channel => (i0, i1 + start, i2),
                    Axis::Time => (i0, i1, i2 + start),
                };
                debug_assert!(s0 < b && s1 < c && s2 < t);
                f(dst, (s0 * c + s1) * t + s2);
                dst += 1;
            }
        }
    }
}

/// Rescales all gradients so their global l2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping was needed).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        g.data.iter_mut().for_each(|v| *v *= factor);
    }
    factor
}

/// Step decay: `initial · factor^⌊epoch / interval⌋`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            factor: 1.0 / 3.0,
            interval: 10,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.interval.max(1)) as i32)
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_scales: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(shapes: &[Shape], schedule: LrSchedule) -> Self {
        Self {
            m: shapes.iter().map(|s| vec![0.0; s.numel()]).collect(),
            v: shapes.iter().map(|s| vec![0.0; s.numel()]).collect(),
            lr_scales: vec![1.0; shapes.len()],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Multiplies the learning rate of tensor `index`. Adam steps are
    /// invariant to gradient scale, so this is how parameters living on a
    /// large numeric scale get steps of a matching size.
    pub fn set_lr_scale(&mut self, index: usize, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return invalid("learning-rate scale must be positive and finite");
        }
        match self.lr_scales.get_mut(index) {
            Some(s) => {
                *s = scale;
                Ok(())
            }
            None => invalid(format!("optimizer tracks no tensor {index}")),
        }
    }

    /// One bias-corrected Adam update at the learning rate scheduled for `epoch`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], epoch: usize) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.data.len() != self.m[i].len() || g.data.len() != self.m[i].len() {
                return invalid(format!("parameter {i} shape does not match optimizer state"));
            }
        }
        self.step += 1;
        let lr = self.schedule.lr_at(epoch);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let lr = lr * self.lr_scales[i];
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
