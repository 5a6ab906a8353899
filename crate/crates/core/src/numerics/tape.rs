//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose value is computed eagerly; nodes only refer
//! to earlier nodes, so the tape is already in topological order and the
//! backward sweep is a single reverse pass.

use rand::Rng;

use super::kernels::{self, gemm, gemm_at, gemm_bt};
use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

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
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    /// a[..., p, q] · b[q, r]
    MatMul(Var, Var),
    /// a[B, p, q] · b[B, q, r] with B the product of leading extents
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    PairSum(Var, Var),
    Aggregate {
        msg: Var,
        weights: Var,
    },
    LocalConv {
        x: Var,
        kernel: Var,
        causal: bool,
    },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder. Borrows the parameter store so layers can bind
/// parameters lazily by id.
pub struct Tape<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    bound: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. Its gradient is tracked when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        let t = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(t, Op::Leaf, g)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter, copying it onto the tape on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id.index()).copied().flatten() {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let t = store.get(id);
        let v = self.push(
            Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
            Op::Leaf,
            t.requires_grad(),
        );
        self.bound[id.index()] = Some(v);
        v
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{sa:?} with {sb:?}")))
        }
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let ad = self.data(a);
        let bd = self.data(b);
        let n = bd.len();
        let mut out = Vec::with_capacity(ad.len());
        if n > 0 {
            for chunk in ad.chunks(n) {
                out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        }
        out
    }

    /// Elementwise sum. `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let out = self.broadcast_binary(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let out = self.broadcast_binary(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let out = self.broadcast_binary(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::AddScalar(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Relu(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Exp(a), g)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        let out = self.data(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Log(a), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `a[..., p, q] · b[q, r]`; leading axes of `a` are batch axes sharing `b`.
    /// A rank-1 `a` is a row vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let q = sb[0];
        let r = sb[1];
        let rows = self.value(a).numel() / q;
        let mut out = vec![0.0; rows * r];
        gemm(self.data(a), self.data(b), &mut out, rows, q, r);
        let mut shape = sa;
        *shape.last_mut().unwrap() = r;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), g))
    }

    /// Batched product over identical leading axes: `a[.., p, q] · b[.., q, r]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ra = sa.len();
        if ra < 3
            || sb.len() != ra
            || sa[..ra - 2] != sb[..ra - 2]
            || sa[ra - 1] != sb[ra - 2]
        {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (p, q, r) = (sa[ra - 2], sa[ra - 1], sb[ra - 1]);
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out = vec![0.0; batch * p * r];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..batch {
                gemm(
                    &ad[i * p * q..(i + 1) * p * q],
                    &bd[i * q * r..(i + 1) * q * r],
                    &mut out[i * p * r..(i + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let mut shape = sa;
        shape[ra - 1] = r;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchMatMul(a, b), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), g))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} on {shape:?}")));
        }
        let out = kernels::permute(self.data(a), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let g = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute(a, perm.to_vec()),
            g,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}, {}) of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let g = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x: a, axis, start },
            g,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no parts"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let e = self.shape(p)[axis];
                let src = self.data(p);
                out.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            g,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let out = softmax_forward(self.data(a), &shape, axis, false);
        let g = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x: a, axis }, g))
    }

    /// Softmax over the last axis of `a[.., n, n]` with entries above the
    /// diagonal excluded (row t attends to columns ≤ t).
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::shape("causal_softmax", format!("{shape:?}")));
        }
        let out = softmax_forward(self.data(a), &shape, r - 1, true);
        let g = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x: a, axis: r - 1 },
            g,
        ))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("log_softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (src[at(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[at(k)] = src[at(k)] - lse;
                }
            }
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { x: a, axis },
            g,
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", format!("width {d}")));
        }
        let rows = self.value(x).numel() / d;
        let src = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..d {
                let h = (row[k] - mu) * is;
                xhat[r * d + k] = h;
                out[r * d + k] = h * gd[k] + bd[k];
            }
        }
        let g = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Unpadded dilated 1-D convolution, left-aligned: output step `t` reads
    /// input steps `t, t + dilation, …, t + (kernel − 1)·dilation`.
    ///
    /// Shapes: `x[.., c_in, len]`, `w[c_out, c_in, kernel]`, `b[c_out]`.
    pub fn conv1d_dilated(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() < 2 || sw.len() != 3 || sw[1] != sx[sx.len() - 2] || self.shape(b) != [sw[0]] {
            return Err(Error::shape("conv1d_dilated", format!("x {sx:?}, w {sw:?}")));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        let (c_out, c_in, k) = (sw[0], sw[1], sw[2]);
        let len = sx[sx.len() - 1];
        let span = (k - 1) * dilation;
        if len < span + 1 {
            return Err(Error::shape(
                "conv1d_dilated",
                format!("length {len} shorter than receptive field {}", span + 1),
            ));
        }
        let len_out = len - span;
        let batch = self.value(x).numel() / (c_in * len);
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; batch * c_out * len_out];
        for n in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(n * c_out + o) * len_out..(n * c_out + o + 1) * len_out];
                orow.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..c_in {
                    let xrow = &xd[(n * c_in + c) * len..(n * c_in + c + 1) * len];
                    for kk in 0..k {
                        let wv = wd[(o * c_in + c) * k + kk];
                        let shift = kk * dilation;
                        for (t, ov) in orow.iter_mut().enumerate() {
                            *ov += wv * xrow[t + shift];
                        }
                    }
                }
            }
        }
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = c_out;
        shape[r - 1] = len_out;
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d { x, w, b, dilation },
            g,
        ))
    }

    /// `out[.., i, j, :] = p[.., i, :] + q[.., j, :]`
    pub fn pair_sum(&mut self, p: Var, q: Var) -> Result<Var> {
        let sp = self.shape(p).to_vec();
        if sp.len() < 2 || self.shape(q) != sp.as_slice() {
            return Err(Error::shape("pair_sum", format!("{sp:?} vs {:?}", self.shape(q))));
        }
        let r = sp.len();
        let (m, h) = (sp[r - 2], sp[r - 1]);
        let batch = self.value(p).numel() / (m * h);
        let pd = self.data(p);
        let qd = self.data(q);
        let mut out = Vec::with_capacity(batch * m * m * h);
        for b in 0..batch {
            let base = b * m * h;
            for i in 0..m {
                let prow = &pd[base + i * h..base + (i + 1) * h];
                for j in 0..m {
                    let qrow = &qd[base + j * h..base + (j + 1) * h];
                    out.extend(prow.iter().zip(qrow).map(|(x, y)| x + y));
                }
            }
        }
        let mut shape = sp[..r - 2].to_vec();
        shape.extend([m, m, h]);
        let g = self.any_grad(&[p, q]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::PairSum(p, q), g))
    }

    /// Weighted in-neighbour aggregation:
    /// `out[.., i, :] = Σ_j weights[j, i] · msg[.., i, j, :]`.
    pub fn aggregate(&mut self, msg: Var, weights: Var) -> Result<Var> {
        let sm = self.shape(msg).to_vec();
        let r = sm.len();
        if r < 3 || sm[r - 2] != sm[r - 3] || self.shape(weights) != [sm[r - 2], sm[r - 2]] {
            return Err(Error::shape(
                "aggregate",
                format!("messages {sm:?}, weights {:?}", self.shape(weights)),
            ));
        }
        let (m, c) = (sm[r - 2], sm[r - 1]);
        let batch = self.value(msg).numel() / (m * m * c);
        let md = self.data(msg);
        let wd = self.data(weights);
        let mut out = vec![0.0; batch * m * c];
        for b in 0..batch {
            for i in 0..m {
                let orow = &mut out[(b * m + i) * c..(b * m + i + 1) * c];
                for j in 0..m {
                    let w = wd[j * m + i];
                    if w == 0.0 {
                        continue;
                    }
                    let mrow = &md[((b * m + i) * m + j) * c..((b * m + i) * m + j + 1) * c];
                    for (o, v) in orow.iter_mut().zip(mrow) {
                        *o += w * v;
                    }
                }
            }
        }
        let mut shape = sm[..r - 2].to_vec();
        shape.push(c);
        let g = self.any_grad(&[msg, weights]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Aggregate { msg, weights },
            g,
        ))
    }

    /// Depthwise convolution along the time axis of `x[.., n, d]` with kernel
    /// `kernel[groups, width]`; channel `c` uses row `c·groups/d`. Edges are
    /// replicate-padded. A centred window reads `t−w/2..=t+w/2`; a causal one
    /// reads `t−w+1..=t`.
    pub fn local_conv(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let r = sx.len();
        if r < 2 || sk.len() != 2 || sx[r - 1] % sk[0] != 0 {
            return Err(Error::shape("local_conv", format!("x {sx:?}, kernel {sk:?}")));
        }
        let (n, d) = (sx[r - 2], sx[r - 1]);
        let (groups, width) = (sk[0], sk[1]);
        let per_group = d / groups;
        let offset = if causal { width - 1 } else { width / 2 };
        let batch = self.value(x).numel() / (n * d);
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..n {
                for k in 0..width {
                    let src = clamp_index(t + k, offset, n);
                    let xrow = &xd[(b * n + src) * d..(b * n + src + 1) * d];
                    let orow = &mut out[(b * n + t) * d..(b * n + t + 1) * d];
                    for (c, (o, v)) in orow.iter_mut().zip(xrow).enumerate() {
                        *o += kd[(c / per_group) * width + k] * v;
                    }
                }
            }
        }
        let g = self.any_grad(&[x, kernel]);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LocalConv { x, kernel, causal },
            g,
        ))
    }

    /// Forward value is `hard`; the backward pass routes the gradient to
    /// `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.shape(soft)),
            ));
        }
        let g = self.any_grad(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), g))
    }

    /// Inverted dropout. A no-op when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {p}")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::from_parts(self.shape(x).to_vec(), mask));
        self.mul(x, m)
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Detached);
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut bindings = Vec::new();
        for (pid, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                bindings.push((ParamId::new(pid), *v));
            }
        }
        Ok(Gradients { grads, bindings })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(b) {
                    accumulate(grads, *b, fold_broadcast(g, nodes[b.0].value.numel()));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(b) {
                    let mut gb = fold_broadcast(g, nodes[b.0].value.numel());
                    gb.iter_mut().for_each(|v| *v = -*v);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                let nb = bd.len();
                if wants(a) {
                    let ga = g.chunks(nb.max(1)).flat_map(|c| c.iter().zip(bd).map(|(gv, bv)| gv * bv)).collect();
                    accumulate(grads, *a, ga);
                }
                if wants(b) {
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    accumulate(grads, *b, fold_broadcast(&prod, nb));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let ad = nodes[a.0].value.data();
                let ga = g
                    .iter()
                    .zip(ad)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect());
            }
            Op::Log(a) => {
                let x = nodes[a.0].value.data();
                accumulate(grads, *a, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
            }
            Op::Sum(a) => accumulate(grads, *a, vec![g[0]; nodes[a.0].value.numel()]),
            Op::MatMul(a, b) => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (q, r) = (tb.shape()[0], tb.shape()[1]);
                let rows = ta.numel() / q;
                if wants(a) {
                    let mut ga = vec![0.0; ta.numel()];
                    gemm_bt(g, tb.data(), &mut ga, rows, q, r);
                    accumulate(grads, *a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; tb.numel()];
                    gemm_at(ta.data(), g, &mut gb, rows, q, r);
                    accumulate(grads, *b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let rk = ta.rank();
                let (p, q, r) = (ta.shape()[rk - 2], ta.shape()[rk - 1], tb.shape()[rk - 1]);
                let batch = ta.numel() / (p * q);
                if wants(a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for i in 0..batch {
                        gemm_bt(
                            &g[i * p * r..(i + 1) * p * r],
                            &tb.data()[i * q * r..(i + 1) * q * r],
                            &mut ga[i * p * q..(i + 1) * p * q],
                            p,
                            q,
                            r,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for i in 0..batch {
                        gemm_at(
                            &ta.data()[i * p * q..(i + 1) * p * q],
                            &g[i * p * r..(i + 1) * p * r],
                            &mut gb[i * q * r..(i + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_perm(perm);
                accumulate(grads, *a, kernels::permute(g, node.value.shape(), &inv));
            }
            Op::Narrow { x, axis, start } => {
                let sx = nodes[x.0].value.shape();
                let (outer, extent, inner) = axis_split(sx, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; nodes[x.0].value.numel()];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let e = nodes[p.0].value.shape()[*axis];
                    if wants(p) {
                        let mut gp = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[src..src + e * inner]);
                        }
                        accumulate(grads, *p, gp);
                    }
                    offset += e;
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let total: f64 = (0..n).map(|k| g[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = g[at(k)] - y[at(k)].exp() * total;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.numel();
                let gd = nodes[gain.0].value.data();
                let rows = xhat.len() / d;
                if wants(gain) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for k in 0..d {
                            gg[k] += g[r * d + k] * xhat[r * d + k];
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if wants(bias) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for k in 0..d {
                            gb[k] += g[r * d + k];
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
                if wants(x) {
                    let mut gx = vec![0.0; xhat.len()];
                    let df = d as f64;
                    for r in 0..rows {
                        let dh: Vec<f64> = (0..d).map(|k| g[r * d + k] * gd[k]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 =
                            dh.iter().zip(&xhat[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            gx[r * d + k] = inv_std[r] / df
                                * (df * dh[k] - sum_dh - xhat[r * d + k] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let tx = &nodes[x.0].value;
                let tw = &nodes[w.0].value;
                let (c_out, c_in, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let len = tx.shape()[tx.rank() - 1];
                let len_out = node.value.shape()[node.value.rank() - 1];
                let batch = tx.numel() / (c_in * len);
                let xd = tx.data();
                let wd = tw.data();
                let mut gx = wants(x).then(|| vec![0.0; tx.numel()]);
                let mut gw = wants(w).then(|| vec![0.0; tw.numel()]);
                let mut gb = wants(b).then(|| vec![0.0; c_out]);
                for n in 0..batch {
                    for o in 0..c_out {
                        let grow = &g[(n * c_out + o) * len_out..(n * c_out + o + 1) * len_out];
                        if let Some(gb) = gb.as_mut() {
                            gb[o] += grow.iter().sum::<f64>();
                        }
                        for c in 0..c_in {
                            let xoff = (n * c_in + c) * len;
                            for kk in 0..k {
                                let widx = (o * c_in + c) * k + kk;
                                let shift = kk * dilation;
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += grow
                                        .iter()
                                        .zip(&xd[xoff + shift..xoff + shift + len_out])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let wv = wd[widx];
                                    for (t, gv) in grow.iter().enumerate() {
                                        gx[xoff + t + shift] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, gb);
                }
            }
            Op::PairSum(p, q) => {
                let sp = nodes[p.0].value.shape();
                let r = sp.len();
                let (m, h) = (sp[r - 2], sp[r - 1]);
                let batch = nodes[p.0].value.numel() / (m * h);
                let mut gp = vec![0.0; batch * m * h];
                let mut gq = vec![0.0; batch * m * h];
                for b in 0..batch {
                    for i in 0..m {
                        for j in 0..m {
                            let src = &g[((b * m + i) * m + j) * h..((b * m + i) * m + j + 1) * h];
                            for k in 0..h {
                                gp[(b * m + i) * h + k] += src[k];
                                gq[(b * m + j) * h + k] += src[k];
                            }
                        }
                    }
                }
                if wants(p) {
                    accumulate(grads, *p, gp);
                }
                if wants(q) {
                    accumulate(grads, *q, gq);
                }
            }
            Op::Aggregate { msg, weights } => {
                let tm = &nodes[msg.0].value;
                let wd = nodes[weights.0].value.data();
                let r = tm.rank();
                let (m, c) = (tm.shape()[r - 2], tm.shape()[r - 1]);
                let batch = tm.numel() / (m * m * c);
                let md = tm.data();
                if wants(msg) {
                    let mut gm = vec![0.0; tm.numel()];
                    for b in 0..batch {
                        for i in 0..m {
                            let grow = &g[(b * m + i) * c..(b * m + i + 1) * c];
                            for j in 0..m {
                                let w = wd[j * m + i];
                                let base = ((b * m + i) * m + j) * c;
                                for k in 0..c {
                                    gm[base + k] = w * grow[k];
                                }
                            }
                        }
                    }
                    accumulate(grads, *msg, gm);
                }
                if wants(weights) {
                    let mut gw = vec![0.0; m * m];
                    for b in 0..batch {
                        for i in 0..m {
                            let grow = &g[(b * m + i) * c..(b * m + i + 1) * c];
                            for j in 0..m {
                                let base = ((b * m + i) * m + j) * c;
                                gw[j * m + i] += grow
                                    .iter()
                                    .zip(&md[base..base + c])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                    }
                    accumulate(grads, *weights, gw);
                }
            }
            Op::LocalConv { x, kernel, causal } => {
                let tx = &nodes[x.0].value;
                let tk = &nodes[kernel.0].value;
                let r = tx.rank();
                let (n, d) = (tx.shape()[r - 2], tx.shape()[r - 1]);
                let (groups, width) = (tk.shape()[0], tk.shape()[1]);
                let per_group = d / groups;
                let offset = if *causal { width - 1 } else { width / 2 };
                let batch = tx.numel() / (n * d);
                let xd = tx.data();
                let kd = tk.data();
                let mut gx = vec![0.0; tx.numel()];
                let mut gk = vec![0.0; tk.numel()];
                for b in 0..batch {
                    for t in 0..n {
                        let grow = &g[(b * n + t) * d..(b * n + t + 1) * d];
                        for k in 0..width {
                            let src = clamp_index(t + k, offset, n);
                            for c in 0..d {
                                let kidx = (c / per_group) * width + k;
                                gx[(b * n + src) * d + c] += kd[kidx] * grow[c];
                                gk[kidx] += grow[c] * xd[(b * n + src) * d + c];
                            }
                        }
                    }
                }
                if wants(x) {
                    accumulate(grads, *x, gx);
                }
                if wants(kernel) {
                    accumulate(grads, *kernel, gk);
                }
            }
            Op::StraightThrough(soft) => accumulate(grads, *soft, g.to_vec()),
        }
    }
}

/// `t + k − offset` clamped into `[0, n)`, computed without underflow.
fn clamp_index(t_plus_k: usize, offset: usize, n: usize) -> usize {
    t_plus_k.saturating_sub(offset).min(n - 1)
}

fn softmax_forward(src: &[f64], shape: &[usize], axis: usize, causal: bool) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let rows_per_block = if causal { shape[shape.len() - 2] } else { 1 };
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        // for the causal variant inner == 1 and `o` enumerates rows
        let limit = if causal { o % rows_per_block + 1 } else { n };
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let m = (0..limit).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..limit {
                let e = (src[at(k)] - m).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..limit {
                out[at(k)] /= total;
            }
        }
    }
    out
}

fn fold_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every bound parameter's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(pid, v) in &self.bindings {
            if let Some(g) = self.wrt(v) {
                if store.get(pid).requires_grad() {
                    store.get_mut(pid).accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}
