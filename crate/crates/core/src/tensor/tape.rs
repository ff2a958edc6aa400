//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its value and enough context to
//! push gradients back to its inputs. Node indices are created in evaluation
//! order, so walking the tape backwards is a valid topological order.
//!
//! Gradients of leaves accumulate across [`Tape::backward`] calls until
//! [`Tape::zero_grad`] is called; intermediate gradients are recomputed from
//! scratch on every pass.

use super::array::{numel, strides_of, Tensor};
use super::gemm::{gemm, MatView};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Relu,
    LeakyRelu(f64),
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Square,
}

#[derive(Debug)]
enum Broadcast {
    Same,
    /// The right operand repeats every `n` output elements.
    SuffixB(usize),
    SuffixA(usize),
    General(Vec<usize>, Vec<usize>),
}

impl Broadcast {
    #[inline]
    fn index(&self, o: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (o, o),
            Broadcast::SuffixB(n) => (o, o % n),
            Broadcast::SuffixA(n) => (o % n, o),
            Broadcast::General(ia, ib) => (ia[o], ib[o]),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var, plan: Broadcast },
    Unary { kind: UnKind, a: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Sum { a: Var },
    SumAxis { a: Var, outer: usize, n: usize, inner: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize>, inner: usize },
    Slice { a: Var, outer: usize, n: usize, inner: usize, start: usize, len: usize },
    Pad { a: Var, outer: usize, n: usize, inner: usize, before: usize, after: usize },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, outer: usize, d: usize, inner: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LogSumExpMasked { a: Var, mask: Vec<bool> },
    MaxPool2 { a: Var, argmax: Vec<usize> },
    Upsample2 { a: Var, outer: usize, n: usize, inner: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Flat source index for every element of `out`.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let src_strides = strides_of(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let oi = i + rank - src.len();
        eff[oi] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn plan_broadcast(a: &[usize], b: &[usize], out: &[usize]) -> Broadcast {
    if a == b {
        Broadcast::Same
    } else if a == out && out.ends_with(b) {
        Broadcast::SuffixB(numel(b))
    } else if b == out && out.ends_with(a) {
        Broadcast::SuffixA(numel(a))
    } else {
        Broadcast::General(broadcast_map(out, a), broadcast_map(out, b))
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(data[cur]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride >= 1).then(|| (padded - k) / stride + 1)
}

/// im2col for one sample: `cols[(ci*k + j), t] = x[ci, t*stride + j - pad]`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, len: usize, k: usize, stride: usize, pad: usize, lo: usize, cols: &mut [f64]) {
    for ci in 0..cin {
        let row_in = &x[ci * len..(ci + 1) * len];
        for j in 0..k {
            let row = &mut cols[(ci * k + j) * lo..(ci * k + j + 1) * lo];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + j) as isize - pad as isize;
                *slot = if pos >= 0 && (pos as usize) < len { row_in[pos as usize] } else { 0.0 };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], cin: usize, len: usize, k: usize, stride: usize, pad: usize, lo: usize, gx: &mut [f64]) {
    for ci in 0..cin {
        let row_out = &mut gx[ci * len..(ci + 1) * len];
        for j in 0..k {
            let row = &cols[(ci * k + j) * lo..(ci * k + j + 1) * lo];
            for (t, &g) in row.iter().enumerate() {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    row_out[pos as usize] += g;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf. Leaves with `requires_grad` receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.value(v).shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise --------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let plan = plan_broadcast(&sa, &sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let total = numel(&out_shape);
        let f: fn(f64, f64) -> f64 = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
        };
        let data = (0..total)
            .map(|o| {
                let (ia, ib) = plan.index(o);
                f(da[ia], db[ib])
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Binary { kind, a, b, plan }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let f = |x: f64| match kind {
            UnKind::Neg => -x,
            UnKind::Relu => x.max(0.0),
            UnKind::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::Sqrt => x.sqrt(),
            UnKind::Tanh => x.tanh(),
            UnKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            UnKind::Square => x * x,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary { kind, a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnKind::Neg, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Relu, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnKind::LeakyRelu(slope), a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnKind::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sqrt, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnKind::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sigmoid, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnKind::Square, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar { a }, rg)
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), Dimension, "axis {axis} out of range for {shape:?}");
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { a, outer, n, inner }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::Dimension(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]` (or `[..., k, m]` with `ta`), `b` is `[..., k, n]`
    /// (or `[..., n, k]` with `tb`). A 2-D `b` is shared across all leading
    /// axes of `a`; otherwise the leading axes must agree.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        ensure!(sa.len() >= 2 && sb.len() >= 2, Dimension, "matmul needs rank ≥ 2, got {sa:?} @ {sb:?}");
        let shared_b = sb.len() == 2;
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (mut m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        ensure!(k == kb, Dimension, "matmul inner dims differ: {sa:?} @ {sb:?} (ta={ta}, tb={tb})");
        let lead_a: Vec<usize> = sa[..sa.len() - 2].to_vec();
        let mut batch: usize = lead_a.iter().product();
        if shared_b && !ta {
            m *= batch;
            batch = 1;
        } else if !shared_b {
            ensure!(
                sb[..sb.len() - 2] == lead_a[..],
                Dimension,
                "matmul batch dims differ: {sa:?} @ {sb:?}"
            );
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let av = if ta { MatView::dense_t(bi * m * k, k, m) } else { MatView::dense(bi * m * k, m, k) };
            let boff = if shared_b { 0 } else { bi * k * n };
            let bv = if tb { MatView::dense_t(boff, n, k) } else { MatView::dense(boff, k, n) };
            gemm(da, av, db, bv, &mut out, MatView::dense(bi * m * n, m, n), 0.0);
        }
        let mut out_shape = lead_a;
        out_shape.push(if shared_b && !ta { ra } else { m });
        out_shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul { a, b, ta, tb, batch, m, k, n, shared_b },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    // ---- shape ops ----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        ensure!(perm.len() == shape.len(), Dimension, "permutation {perm:?} for shape {shape:?}");
        for &p in perm {
            ensure!(p < shape.len() && !seen[p], Dimension, "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(a).len()).collect();
        ensure!(d0 < perm.len() && d1 < perm.len(), Dimension, "transpose axes out of range");
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        ensure!(!parts.is_empty(), Usage, "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        ensure!(axis < first.len(), Dimension, "concat axis {axis} for {first:?}");
        let (outer, _, inner) = split_axis(&first, axis);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            ensure!(
                s.len() == first.len()
                    && s[..axis] == first[..axis]
                    && s[axis + 1..] == first[axis + 1..],
                Dimension,
                "concat shape mismatch {s:?} vs {first:?}"
            );
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat { parts: parts.to_vec(), outer, widths, inner },
            rg,
        ))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), Dimension, "slice axis {axis} for {shape:?}");
        ensure!(start + len <= shape[axis], Dimension, "slice [{start}, {}) beyond {}", start + len, shape[axis]);
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Slice { a, outer, n, inner, start, len }, rg))
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), Dimension, "pad axis {axis} for {shape:?}");
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let w = n + before + after;
        let mut out = vec![0.0; outer * w * inner];
        for o in 0..outer {
            out[(o * w + before) * inner..(o * w + before + n) * inner]
                .copy_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Pad { a, outer, n, inner, before, after }, rg))
    }

    // ---- layers -------------------------------------------------------

    /// 1-D cross-correlation: `x` is `[batch, c_in, L]`, `w` is `[c_out, c_in, k]`,
    /// optional bias `[c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        ensure!(sx.len() == 3 && sw.len() == 3, Dimension, "conv1d expects [B,C,L] and [O,C,K], got {sx:?}, {sw:?}");
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, cin_w, k) = (sw[0], sw[1], sw[2]);
        ensure!(cin == cin_w, Dimension, "conv1d input has {cin} channels, weight expects {cin_w}");
        ensure!(stride >= 1, Usage, "conv1d stride must be ≥ 1");
        let lo = conv_out_len(len, k, stride, pad)
            .ok_or_else(|| Error::Dimension(format!("kernel {k} longer than padded input {}", len + 2 * pad)))?;
        if let Some(b) = b {
            ensure!(self.shape(b) == [cout], Dimension, "conv1d bias shape {:?}", self.shape(b));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; bsz * cout * lo];
        let mut cols = vec![0.0; cin * k * lo];
        for bi in 0..bsz {
            im2col(&xd[bi * cin * len..(bi + 1) * cin * len], cin, len, k, stride, pad, lo, &mut cols);
            gemm(
                wd,
                MatView::dense(0, cout, cin * k),
                &cols,
                MatView::dense(0, cin * k, lo),
                &mut out,
                MatView::dense(bi * cout * lo, cout, lo),
                0.0,
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for bi in 0..bsz {
                for co in 0..cout {
                    let row = &mut out[(bi * cout + co) * lo..(bi * cout + co + 1) * lo];
                    row.iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(&[bsz, cout, lo], out)?, Op::Conv1d { x, w, b, stride, pad }, rg))
    }

    /// Layer normalization over `axis` with per-feature affine `gamma`, `beta`.
    pub fn layer_norm_axis(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), Dimension, "layer_norm axis {axis} for {shape:?}");
        let (outer, d, inner) = split_axis(&shape, axis);
        ensure!(d >= 1, Dimension, "layer_norm over empty axis");
        ensure!(
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            Dimension,
            "layer_norm affine params must be [{d}], got {:?} / {:?}",
            self.shape(gamma),
            self.shape(beta)
        );
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * d + j) * inner + i;
                let mean = (0..d).map(|j| xd[at(j)]).sum::<f64>() / d as f64;
                let var = (0..d).map(|j| (xd[at(j)] - mean).powi(2)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..d {
                    let h = (xd[at(j)] - mean) * r;
                    xhat[at(j)] = h;
                    out[at(j)] = g[j] * h + bt[j];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        if !rg {
            xhat = Vec::new();
            rstd = Vec::new();
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gamma, beta, outer, d, inner, xhat, rstd },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let axis = self.shape(x).len().checked_sub(1).ok_or_else(|| Error::Dimension("layer_norm on scalar".into()))?;
        self.layer_norm_axis(x, gamma, beta, axis, eps)
    }

    fn last_axis_rows(&self, a: Var) -> Result<(usize, usize)> {
        let shape = self.shape(a);
        let w = *shape.last().ok_or_else(|| Error::Dimension("softmax on scalar".into()))?;
        ensure!(w >= 1, Dimension, "softmax over empty axis");
        Ok((numel(shape) / w, w))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, w) = self.last_axis_rows(a)?;
        let mut out = self.value(a).data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * w..(r + 1) * w];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, w) = self.last_axis_rows(a)?;
        let mut out = self.value(a).data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * w..(r + 1) * w];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { a }, rg))
    }

    /// `log Σ_{mask} exp(x)` along the last axis. Every row needs at least one
    /// selected entry.
    pub fn logsumexp_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (rows, w) = self.last_axis_rows(a)?;
        ensure!(mask.len() == rows * w, Dimension, "mask length {} for {} elements", mask.len(), rows * w);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let sel = || (0..w).filter(|&j| mask[r * w + j]).map(|j| d[r * w + j]);
            let mx = sel().fold(f64::NEG_INFINITY, f64::max);
            ensure!(mx > f64::NEG_INFINITY, Usage, "logsumexp row {r} has no selected entries");
            out.push(mx + sel().map(|v| (v - mx).exp()).sum::<f64>().ln());
        }
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSumExpMasked { a, mask: mask.to_vec() }, rg))
    }

    /// Max pooling with window and stride 2 along `axis`; a trailing odd element is dropped.
    pub fn max_pool2(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), Dimension, "pool axis {axis} for {shape:?}");
        let (outer, n, inner) = split_axis(&shape, axis);
        let half = n / 2;
        ensure!(half >= 1, Dimension, "cannot pool an axis of length {n}");
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * half * inner);
        let mut argmax = Vec::with_capacity(outer * half * inner);
        for o in 0..outer {
            for j in 0..half {
                for i in 0..inner {
                    let p = (o * n + 2 * j) * inner + i;
                    let q = p + inner;
                    let best = if d[q] > d[p] { q } else { p };
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = half;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MaxPool2 { a, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by 2 along `axis`.
    pub fn upsample2(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), Dimension, "upsample axis {axis} for {shape:?}");
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(d.len() * 2);
        for o in 0..outer {
            for j in 0..n {
                let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                out.extend_from_slice(row);
                out.extend_from_slice(row);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 2 * n;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Upsample2 { a, outer, n, inner }, rg))
    }

    // ---- backward -----------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            Usage,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let need = |v: Var| nodes[v.0].requires_grad;
            let len_of = |v: Var| nodes[v.0].value.len();
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    let acc = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Binary { kind, a, b, plan } => {
                    let (a, b) = (*a, *b);
                    let (da, db) = (val(a), val(b));
                    if need(a) {
                        let ga = slot(&mut grads, a, len_of(a));
                        for (o, &go) in g.iter().enumerate() {
                            let (ia, ib) = plan.index(o);
                            ga[ia] += match kind {
                                BinKind::Add | BinKind::Sub => go,
                                BinKind::Mul => go * db[ib],
                                BinKind::Div => go / db[ib],
                            };
                        }
                    }
                    if need(b) {
                        let gb = slot(&mut grads, b, len_of(b));
                        for (o, &go) in g.iter().enumerate() {
                            let (ia, ib) = plan.index(o);
                            gb[ib] += match kind {
                                BinKind::Add => go,
                                BinKind::Sub => -go,
                                BinKind::Mul => go * da[ia],
                                BinKind::Div => -go * da[ia] / (db[ib] * db[ib]),
                            };
                        }
                    }
                }
                Op::Unary { kind, a } => {
                    let a = *a;
                    if need(a) {
                        let x = val(a);
                        let y = node.value.data();
                        let ga = slot(&mut grads, a, len_of(a));
                        for j in 0..g.len() {
                            ga[j] += g[j]
                                * match kind {
                                    UnKind::Neg => -1.0,
                                    UnKind::Relu => f64::from(u8::from(x[j] > 0.0)),
                                    UnKind::LeakyRelu(s) => {
                                        if x[j] > 0.0 {
                                            1.0
                                        } else {
                                            *s
                                        }
                                    }
                                    UnKind::Exp => y[j],
                                    UnKind::Log => 1.0 / x[j],
                                    UnKind::Sqrt => 0.5 / y[j],
                                    UnKind::Tanh => 1.0 - y[j] * y[j],
                                    UnKind::Sigmoid => y[j] * (1.0 - y[j]),
                                    UnKind::Square => 2.0 * x[j],
                                };
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let ga = slot(&mut grads, *a, len_of(*a));
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                }
                Op::AddScalar { a } | Op::Reshape { a } => {
                    let ga = slot(&mut grads, *a, len_of(*a));
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                Op::Sum { a } => {
                    let ga = slot(&mut grads, *a, len_of(*a));
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::SumAxis { a, outer, n, inner } => {
                    let ga = slot(&mut grads, *a, len_of(*a));
                    for o in 0..*outer {
                        for j in 0..*n {
                            for ii in 0..*inner {
                                ga[(o * n + j) * inner + ii] += g[o * inner + ii];
                            }
                        }
                    }
                }
                Op::MatMul { a, b, ta, tb, batch, m, k, n, shared_b } => {
                    let (a, b) = (*a, *b);
                    let (m, k, n) = (*m, *k, *n);
                    let (da, db) = (val(a), val(b));
                    if need(a) {
                        let ga = slot(&mut grads, a, len_of(a));
                        for bi in 0..*batch {
                            let gv = MatView::dense(bi * m * n, m, n);
                            let boff = if *shared_b { 0 } else { bi * k * n };
                            // op(B) as a k×n view
                            let bv = if *tb { MatView::dense_t(boff, n, k) } else { MatView::dense(boff, k, n) };
                            if *ta {
                                // dA (k×m stored) = op(B) · dCᵀ
                                gemm(db, bv, &g, gv.t(), ga, MatView::dense(bi * m * k, k, m), 1.0);
                            } else {
                                gemm(&g, gv, db, bv.t(), ga, MatView::dense(bi * m * k, m, k), 1.0);
                            }
                        }
                    }
                    if need(b) {
                        let gb = slot(&mut grads, b, len_of(b));
                        for bi in 0..*batch {
                            let gv = MatView::dense(bi * m * n, m, n);
                            let av = if *ta { MatView::dense_t(bi * m * k, k, m) } else { MatView::dense(bi * m * k, m, k) };
                            let boff = if *shared_b { 0 } else { bi * k * n };
                            if *tb {
                                // dB (n×k stored) = dCᵀ · op(A)
                                gemm(&g, gv.t(), da, av, gb, MatView::dense(boff, n, k), 1.0);
                            } else {
                                gemm(da, av.t(), &g, gv, gb, MatView::dense(boff, k, n), 1.0);
                            }
                        }
                    }
                }
                Op::Permute { a, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, back) = permute_data(&g, node.value.shape(), &inv);
                    let ga = slot(&mut grads, *a, len_of(*a));
                    ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
                }
                Op::Concat { parts, outer, widths, inner } => {
                    let total: usize = widths.iter().sum();
                    let mut off = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        if need(p) {
                            let gp = slot(&mut grads, p, len_of(p));
                            for o in 0..*outer {
                                let src = &g[(o * total + off) * inner..(o * total + off + w) * inner];
                                let dst = &mut gp[o * w * inner..(o + 1) * w * inner];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        }
                        off += w;
                    }
                }
                Op::Slice { a, outer, n, inner, start, len } => {
                    let ga = slot(&mut grads, *a, len_of(*a));
                    for o in 0..*outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst = &mut ga[(o * n + start) * inner..(o * n + start + len) * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Pad { a, outer, n, inner, before, after } => {
                    let w = n + before + after;
                    let ga = slot(&mut grads, *a, len_of(*a));
                    for o in 0..*outer {
                        let src = &g[(o * w + before) * inner..(o * w + before + n) * inner];
                        let dst = &mut ga[o * n * inner..(o + 1) * n * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Conv1d { x, w, b, stride, pad } => {
                    let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                    let sx = nodes[x.0].value.shape();
                    let sw = nodes[w.0].value.shape();
                    let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
                    let (cout, k) = (sw[0], sw[2]);
                    let lo = node.value.shape()[2];
                    let (xd, wd) = (val(x), val(w));
                    if let Some(b) = *b {
                        if need(b) {
                            let gb = slot(&mut grads, b, cout);
                            for bi in 0..bsz {
                                for co in 0..cout {
                                    gb[co] += g[(bi * cout + co) * lo..(bi * cout + co + 1) * lo].iter().sum::<f64>();
                                }
                            }
                        }
                    }
                    let mut cols = vec![0.0; cin * k * lo];
                    if need(w) {
                        let mut gw = vec![0.0; cout * cin * k];
                        for bi in 0..bsz {
                            im2col(&xd[bi * cin * len..(bi + 1) * cin * len], cin, len, k, stride, pad, lo, &mut cols);
                            gemm(
                                &g,
                                MatView::dense(bi * cout * lo, cout, lo),
                                &cols,
                                MatView::dense_t(0, cin * k, lo),
                                &mut gw,
                                MatView::dense(0, cout, cin * k),
                                1.0,
                            );
                        }
                        let dst = slot(&mut grads, w, gw.len());
                        dst.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                    }
                    if need(x) {
                        let mut gx = vec![0.0; bsz * cin * len];
                        for bi in 0..bsz {
                            gemm(
                                wd,
                                MatView::dense_t(0, cout, cin * k),
                                &g,
                                MatView::dense(bi * cout * lo, cout, lo),
                                &mut cols,
                                MatView::dense(0, cin * k, lo),
                                0.0,
                            );
                            col2im(&cols, cin, len, k, stride, pad, lo, &mut gx[bi * cin * len..(bi + 1) * cin * len]);
                        }
                        let dst = slot(&mut grads, x, gx.len());
                        dst.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
                    }
                }
                Op::LayerNorm { x, gamma, beta, outer, d, inner, xhat, rstd } => {
                    let (outer, d, inner) = (*outer, *d, *inner);
                    let gd = val(*gamma);
                    if need(*gamma) || need(*beta) {
                        let mut gg = vec![0.0; d];
                        let mut gbt = vec![0.0; d];
                        for o in 0..outer {
                            for j in 0..d {
                                for ii in 0..inner {
                                    let at = (o * d + j) * inner + ii;
                                    gg[j] += g[at] * xhat[at];
                                    gbt[j] += g[at];
                                }
                            }
                        }
                        if need(*gamma) {
                            let dst = slot(&mut grads, *gamma, d);
                            dst.iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
                        }
                        if need(*beta) {
                            let dst = slot(&mut grads, *beta, d);
                            dst.iter_mut().zip(&gbt).for_each(|(a, b)| *a += b);
                        }
                    }
                    if need(*x) {
                        let gx = slot(&mut grads, *x, len_of(*x));
                        for o in 0..outer {
                            for ii in 0..inner {
                                let at = |j: usize| (o * d + j) * inner + ii;
                                let mut m1 = 0.0;
                                let mut m2 = 0.0;
                                for j in 0..d {
                                    let gh = g[at(j)] * gd[j];
                                    m1 += gh;
                                    m2 += gh * xhat[at(j)];
                                }
                                m1 /= d as f64;
                                m2 /= d as f64;
                                let r = rstd[o * inner + ii];
                                for j in 0..d {
                                    let gh = g[at(j)] * gd[j];
                                    gx[at(j)] += r * (gh - m1 - xhat[at(j)] * m2);
                                }
                            }
                        }
                    }
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let w = *node.value.shape().last().unwrap();
                    let ga = slot(&mut grads, *a, len_of(*a));
                    for r in 0..y.len() / w {
                        let span = r * w..(r + 1) * w;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax { a } => {
                    let y = node.value.data();
                    let w = *node.value.shape().last().unwrap();
                    let ga = slot(&mut grads, *a, len_of(*a));
                    for r in 0..y.len() / w {
                        let span = r * w..(r + 1) * w;
                        let gs: f64 = g[span.clone()].iter().sum();
                        for j in span {
                            ga[j] += g[j] - y[j].exp() * gs;
                        }
                    }
                }
                Op::LogSumExpMasked { a, mask } => {
                    let x = val(*a);
                    let w = *nodes[a.0].value.shape().last().unwrap();
                    let lse = node.value.data();
                    let ga = slot(&mut grads, *a, len_of(*a));
                    for r in 0..lse.len() {
                        for j in 0..w {
                            let at = r * w + j;
                            if mask[at] {
                                ga[at] += g[r] * (x[at] - lse[r]).exp();
                            }
                        }
                    }
                }
                Op::MaxPool2 { a, argmax } => {
                    let ga = slot(&mut grads, *a, len_of(*a));
                    for (o, &src) in argmax.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
                Op::Upsample2 { a, outer, n, inner } => {
                    let ga = slot(&mut grads, *a, len_of(*a));
                    for o in 0..*outer {
                        for j in 0..*n {
                            for ii in 0..*inner {
                                let src = ((o * n + j) * 2) * inner + ii;
                                ga[(o * n + j) * inner + ii] += g[src] + g[src + inner];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
