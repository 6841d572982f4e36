use std::ops::Range;

use super::tensor::{for_each_index, strides, Tensor};
use crate::error::{shape_err, Error, Result};

/// Epsilon added to the variance inside layer norm.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, axis: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice(Var, Vec<Range<usize>>),
    Concat(Vec<Var>, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    L1 { x: Var, target: Vec<f64> },
    WindowPartition { x: Var, h: usize, w: usize, win: usize },
    WindowReverse { x: Var, h: usize, w: usize, win: usize },
    Upsample2x(Var),
    AvgPool2x(Var),
    GlobalAvgPool(Var),
    Log(Var),
    Exp(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// Four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; zeros for tensors the loss did
    /// not depend on.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape matches value"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Borrowed gradient buffer, `None` when nothing reached the node.
    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "{} produced non-finite value {} at index {bad}",
                op_name(&op),
                data[bad]
            )));
        }
        let value = Tensor::new(shape, data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or_else(|| shape_err!("add_bias on scalar"))?;
        if self.shape(bias) != [n] {
            return Err(shape_err!("add_bias: bias {:?} for last extent {n}", self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        self.push(self.shape(x).to_vec(), data, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, s), &[x])
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; a rank-2 `b` is
    /// broadcast over the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a x b^T` with `b` of shape `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize, bool)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let broadcast_b = sb.len() == 2;
        if !broadcast_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(shape_err!("matmul batch extents differ: {sa:?} x {sb:?}"));
        }
        Ok((batch, m, k, n, broadcast_b))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n, bcast) = self.matmul_dims(a, b, trans_b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = if bcast { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let arow = &ab[i * k..(i + 1) * k];
                let orow = &mut ob[i * n..(i + 1) * n];
                if trans_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = dot(arow, &bb[j * k..(j + 1) * k]);
                    }
                } else {
                    for (p, &aval) in arow.iter().enumerate() {
                        axpy(aval, &bb[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
        let mut shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        shape.push(n);
        self.push(shape, out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// `x W^T + b` over the last axis of `x`, with `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[1] {
            return Err(shape_err!("linear: input {sx:?} with weight {sw:?}"));
        }
        let (fan_out, fan_in) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(shape_err!("linear: bias {:?} for {fan_out} outputs", self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let rows = xv.len() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let xr = &xv[r * fan_in..(r + 1) * fan_in];
            let or = &mut out[r * fan_out..(r + 1) * fan_out];
            for (o, val) in or.iter_mut().enumerate() {
                *val = dot(xr, &wv[o * fan_in..(o + 1) * fan_in]);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(fan_out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(shape, out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = lanes(self.shape(x), axis)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * n * inner + r;
                let max = (0..n).map(|i| xv[base + i * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (xv[base + i * inner] - max).exp();
                    out[base + i * inner] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[base + i * inner] /= sum;
                }
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x, axis), &[x])
    }

    /// Layer norm along `axis` with per-channel `gain` and `bias`.
    /// Zero-variance lanes normalize to zero before the affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = lanes(self.shape(x), axis)?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err!(
                "layer_norm: gain {:?} / bias {:?} for extent {n}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * n * inner + r;
                let mean = (0..n).map(|i| xv[base + i * inner]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (xv[base + i * inner] - mean).powi(2)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[o * inner + r] = rs;
                for i in 0..n {
                    let idx = base + i * inner;
                    let xh = (xv[idx] - mean) * rs;
                    xhat[idx] = xh;
                    out[idx] = xh * g[i] + b[i];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LayerNorm { x, gain, bias, axis, xhat, rstd }, &[x, gain, bias])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(shape_err!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("invalid permutation {axes:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src = permute_offsets(&shape, axes);
        let xv = self.value(x).data();
        let data = src.iter().map(|&o| xv[o]).collect();
        self.push(out_shape, data, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn slice(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let t = self.value(x).slice(ranges)?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Slice(x, ranges.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = lanes(&base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(shape, out, Op::Concat(xs.to_vec(), axis), xs)
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let (outer, n, inner) = lanes(self.shape(x), axis)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv[(o * n + i) * inner..(o * n + i + 1) * inner];
                axpy(1.0, src, &mut out[o * inner..(o + 1) * inner]);
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        self.push(shape, out, op, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Vec::new(), vec![s], Op::MeanAll(x), &[x])
    }

    /// Mean softmax cross-entropy of `[.., C]` logits against class indices,
    /// one per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let c = *shape.last().ok_or_else(|| shape_err!("cross_entropy on scalar"))?;
        let rows = self.value(logits).numel() / c;
        if rows != targets.len() {
            return Err(shape_err!("cross_entropy: {rows} rows, {} targets", targets.len()));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err!("cross_entropy: target {t} >= {c} classes"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = loss / rows as f64;
        self.push(Vec::new(), vec![value], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Mean absolute error against a constant target of the same size.
    pub fn l1_loss(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != target.len() {
            return Err(shape_err!("l1_loss: {} values vs {} targets", xv.len(), target.len()));
        }
        let value = xv.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / xv.len() as f64;
        self.push(Vec::new(), vec![value], Op::L1 { x, target: target.to_vec() }, &[x])
    }

    /// `[B, H, W, C]` -> `[B * nW, win * win, C]`. Sides that `win` does not
    /// divide are zero-padded up to the next multiple.
    pub fn window_partition(&mut self, x: Var, win: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || win == 0 {
            return Err(shape_err!("window_partition expects [B,H,W,C] and win > 0, got {s:?}"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let map = window_map(b, h, w, win);
        let xv = self.value(x).data();
        let mut out = vec![0.0; map.len() * c];
        for (dst, src) in map.iter().enumerate() {
            if let Some(src) = src {
                out[dst * c..(dst + 1) * c].copy_from_slice(&xv[src * c..(src + 1) * c]);
            }
        }
        let nw = map.len() / (win * win);
        self.push(vec![nw, win * win, c], out, Op::WindowPartition { x, h, w, win }, &[x])
    }

    /// Inverse of [`window_partition`](Self::window_partition) for an
    /// `h x w` map; padding is dropped.
    pub fn window_reverse(&mut self, x: Var, h: usize, w: usize, win: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (hp, wp) = (h.div_ceil(win), w.div_ceil(win));
        if s.len() != 3 || s[1] != win * win || s[0] % (hp * wp) != 0 {
            return Err(shape_err!("window_reverse: {s:?} is not a window stack for {h}x{w}/{win}"));
        }
        let (b, c) = (s[0] / (hp * wp), s[2]);
        let map = window_map(b, h, w, win);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * h * w * c];
        for (src, dst) in map.iter().enumerate() {
            if let Some(dst) = dst {
                out[dst * c..(dst + 1) * c].copy_from_slice(&xv[src * c..(src + 1) * c]);
            }
        }
        self.push(vec![b, h, w, c], out, Op::WindowReverse { x, h, w, win }, &[x])
    }

    pub fn nearest_upsample_2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("upsample expects [B,H,W,C], got {s:?}"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() * 4);
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    out.extend_from_slice(&xv[src..src + c]);
                }
            }
        }
        self.push(vec![b, 2 * h, 2 * w, c], out, Op::Upsample2x(x), &[x])
    }

    pub fn avgpool_2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(shape_err!("avgpool_2x expects [B,H,W,C] with even sides, got {s:?}"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len() / 4];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((bi * h + y) * w + xx) * c;
                    let dst = ((bi * h / 2 + y / 2) * (w / 2) + xx / 2) * c;
                    axpy(0.25, &xv[src..src + c], &mut out[dst..dst + c]);
                }
            }
        }
        self.push(vec![b, h / 2, w / 2, c], out, Op::AvgPool2x(x), &[x])
    }

    /// `[B, H, W, C]` -> `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("global_avg_pool expects [B,H,W,C], got {s:?}"));
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for p in 0..hw {
                let src = (bi * hw + p) * c;
                axpy(1.0 / hw as f64, &xv[src..src + c], &mut out[bi * c..(bi + 1) * c]);
            }
        }
        self.push(vec![b, c], out, Op::GlobalAvgPool(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        self.push(self.shape(x).to_vec(), data, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), data, Op::Exp(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier passes
    /// must be cleared with [`zero_grad`](Self::zero_grad) first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward called twice without zero_grad".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward from non-scalar of shape {:?}", self.shape(loss)));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let contributions = self.vjp(i, &gout);
            self.nodes[i].grad = Some(gout);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => axpy(1.0, &g, acc),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn vjp(&self, i: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::AddBias(x, b) => {
                out.push((*x, gy.to_vec()));
                if self.needs(*b) {
                    let n = self.shape(*b)[0];
                    let mut gb = vec![0.0; n];
                    for row in gy.chunks(n) {
                        axpy(1.0, row, &mut gb);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(x, s) => out.push((*x, gy.iter().map(|g| g * s).collect())),
            Op::MatMul { a, b, trans_b } => {
                let (batch, m, k, n, bcast) = self.matmul_dims(*a, *b, *trans_b).expect("checked in forward");
                let av = val(*a);
                let bv = val(*b);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let boff = if bcast { 0 } else { bi * k * n };
                    let bb = &bv[boff..boff + k * n];
                    let gyb = &gy[bi * m * n..(bi + 1) * m * n];
                    let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for r in 0..m {
                        let grow = &gyb[r * n..(r + 1) * n];
                        let garow = &mut gab[r * k..(r + 1) * k];
                        if *trans_b {
                            // y[r, j] = a[r, :] . b[j, :]
                            for (j, &g) in grow.iter().enumerate() {
                                axpy(g, &bb[j * k..(j + 1) * k], garow);
                            }
                        } else {
                            for (p, ga_v) in garow.iter_mut().enumerate() {
                                *ga_v += dot(grow, &bb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    let gbb = &mut gb[boff..boff + k * n];
                    for r in 0..m {
                        let grow = &gyb[r * n..(r + 1) * n];
                        let arow = &ab[r * k..(r + 1) * k];
                        if *trans_b {
                            for (j, &g) in grow.iter().enumerate() {
                                axpy(g, arow, &mut gbb[j * k..(j + 1) * k]);
                            }
                        } else {
                            for (p, &aval) in arow.iter().enumerate() {
                                axpy(aval, grow, &mut gbb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Linear { x, w, b } => {
                let xv = val(*x);
                let wv = val(*w);
                let sw = self.shape(*w);
                let (fan_out, fan_in) = (sw[0], sw[1]);
                let rows = xv.len() / fan_in;
                if self.needs(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        let gxr = &mut gx[r * fan_in..(r + 1) * fan_in];
                        for (o, &g) in gy[r * fan_out..(r + 1) * fan_out].iter().enumerate() {
                            if g != 0.0 {
                                axpy(g, &wv[o * fan_in..(o + 1) * fan_in], gxr);
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    for r in 0..rows {
                        let xr = &xv[r * fan_in..(r + 1) * fan_in];
                        for (o, &g) in gy[r * fan_out..(r + 1) * fan_out].iter().enumerate() {
                            if g != 0.0 {
                                axpy(g, xr, &mut gw[o * fan_in..(o + 1) * fan_in]);
                            }
                        }
                    }
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![0.0; fan_out];
                        for row in gy.chunks(fan_out) {
                            axpy(1.0, row, &mut gb);
                        }
                        out.push((*b, gb));
                    }
                }
            }
            Op::Gelu(x) => out.push((*x, gy.iter().zip(val(*x)).map(|(g, &v)| g * gelu_grad(v)).collect())),
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = lanes(node.value.shape(), *axis).expect("checked in forward");
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * n * inner + r;
                        let s: f64 = (0..n).map(|j| gy[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx[idx] = y[idx] * (gy[idx] - s);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm { x, gain, bias, axis, xhat, rstd } => {
                let (outer, n, inner) = lanes(node.value.shape(), *axis).expect("checked in forward");
                let g = val(*gain);
                let mut gx = vec![0.0; gy.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * n * inner + r;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let idx = base + j * inner;
                            let d = gy[idx] * g[j];
                            m1 += d;
                            m2 += d * xhat[idx];
                            gg[j] += gy[idx] * xhat[idx];
                            gb[j] += gy[idx];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let rs = rstd[o * inner + r];
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx[idx] = rs * (gy[idx] * g[j] - m1 - xhat[idx] * m2);
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*gain, gg));
                out.push((*bias, gb));
            }
            Op::Reshape(x) => out.push((*x, gy.to_vec())),
            Op::Permute(x, axes) => {
                let src = permute_offsets(self.shape(*x), axes);
                let mut gx = vec![0.0; gy.len()];
                for (g, &o) in gy.iter().zip(&src) {
                    gx[o] += g;
                }
                out.push((*x, gx));
            }
            Op::Slice(x, ranges) => {
                let shape = self.shape(*x);
                let st = strides(shape);
                let mut gx = vec![0.0; val(*x).len()];
                let last = ranges.len() - 1;
                let inner = ranges[last].len();
                let outer_shape: Vec<usize> = ranges[..last].iter().map(|r| r.len()).collect();
                let mut pos = 0;
                for_each_index(&outer_shape, |idx| {
                    let mut off = ranges[last].start;
                    for (a, &i) in idx.iter().enumerate() {
                        off += (ranges[a].start + i) * st[a];
                    }
                    axpy(1.0, &gy[pos..pos + inner], &mut gx[off..off + inner]);
                    pos += inner;
                });
                out.push((*x, gx));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = lanes(node.value.shape(), *axis).expect("checked in forward");
                let mut start = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let off = (o * total + start) * inner;
                        gv.extend_from_slice(&gy[off..off + n * inner]);
                    }
                    start += n;
                    out.push((v, gv));
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (outer, n, inner) = lanes(self.shape(*x), *axis).expect("checked in forward");
                let f = if matches!(node.op, Op::Mean(..)) { 1.0 / n as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        axpy(f, &gy[o * inner..(o + 1) * inner], dst);
                    }
                }
                out.push((*x, gx));
            }
            Op::SumAll(x) => out.push((*x, vec![gy[0]; val(*x).len()])),
            Op::MeanAll(x) => {
                let n = val(*x).len();
                out.push((*x, vec![gy[0] / n as f64; n]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = *self.shape(*logits).last().unwrap();
                let f = gy[0] / targets.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * f).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] -= f;
                }
                out.push((*logits, gx));
            }
            Op::L1 { x, target } => {
                let f = gy[0] / target.len() as f64;
                let gx = val(*x)
                    .iter()
                    .zip(target)
                    .map(|(a, b)| if a > b { f } else if a < b { -f } else { 0.0 })
                    .collect();
                out.push((*x, gx));
            }
            Op::WindowPartition { x, h, w, win } => {
                let s = self.shape(*x);
                let c = s[3];
                let map = window_map(s[0], *h, *w, *win);
                let mut gx = vec![0.0; val(*x).len()];
                for (dst, src) in map.iter().enumerate() {
                    if let Some(src) = src {
                        axpy(1.0, &gy[dst * c..(dst + 1) * c], &mut gx[src * c..(src + 1) * c]);
                    }
                }
                out.push((*x, gx));
            }
            Op::WindowReverse { x, h, w, win } => {
                let s = node.value.shape();
                let c = s[3];
                let map = window_map(s[0], *h, *w, *win);
                let mut gx = vec![0.0; val(*x).len()];
                for (src, dst) in map.iter().enumerate() {
                    if let Some(dst) = dst {
                        gx[src * c..(src + 1) * c].copy_from_slice(&gy[dst * c..(dst + 1) * c]);
                    }
                }
                out.push((*x, gx));
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![0.0; val(*x).len()];
                let mut pos = 0;
                for bi in 0..b {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                            axpy(1.0, &gy[pos..pos + c], &mut gx[dst..dst + c]);
                            pos += c;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::AvgPool2x(x) => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![0.0; val(*x).len()];
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((bi * h + y) * w + xx) * c;
                            let src = ((bi * h / 2 + y / 2) * (w / 2) + xx / 2) * c;
                            axpy(0.25, &gy[src..src + c], &mut gx[dst..dst + c]);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
                let mut gx = vec![0.0; val(*x).len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let dst = (bi * hw + p) * c;
                        axpy(1.0 / hw as f64, &gy[bi * c..(bi + 1) * c], &mut gx[dst..dst + c]);
                    }
                }
                out.push((*x, gx));
            }
            Op::Log(x) => out.push((*x, gy.iter().zip(val(*x)).map(|(g, v)| g / v).collect())),
            Op::Exp(x) => out.push((*x, gy.iter().zip(node.value.data()).map(|(g, y)| g * y).collect())),
        }
        out
    }
}

/// For every output element of a permutation, the flat input offset.
fn permute_offsets(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    let mut offsets = Vec::with_capacity(shape.iter().product());
    for_each_index(&out_shape, |idx| {
        offsets.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
    });
    offsets
}

/// Maps each row of the window stack (window-major, then in-window
/// row-major) to its source pixel in the `[B, H, W]` grid, `None` for
/// padding.
pub(crate) fn window_map(b: usize, h: usize, w: usize, win: usize) -> Vec<Option<usize>> {
    let (nh, nw) = (h.div_ceil(win), w.div_ceil(win));
    let mut map = Vec::with_capacity(b * nh * nw * win * win);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for i in 0..win {
                    for j in 0..win {
                        let (y, x) = (wy * win + i, wx * win + j);
                        map.push((y < h && x < w).then(|| (bi * h + y) * w + x));
                    }
                }
            }
        }
    }
    map
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul { .. } => "matmul",
        Op::Linear { .. } => "linear",
        Op::Gelu(..) => "gelu",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::Slice(..) => "slice",
        Op::Concat(..) => "concat",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::L1 { .. } => "l1_loss",
        Op::WindowPartition { .. } => "window_partition",
        Op::WindowReverse { .. } => "window_reverse",
        Op::Upsample2x(..) => "nearest_upsample_2x",
        Op::AvgPool2x(..) => "avgpool_2x",
        Op::GlobalAvgPool(..) => "global_avg_pool",
        Op::Log(..) => "log",
        Op::Exp(..) => "exp",
    }
}
