//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! needs for the vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! reverse insertion order (a valid reverse topological order, since inputs are
//! always recorded before their consumers) and adds exactly one contribution per
//! use of each input.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        count: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        rows: Vec<usize>,
    },
    MulRows(Var, Var),
    GatherEntries {
        x: Var,
        rows: Vec<usize>,
        col: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
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

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
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

    /// Floating-point operations performed so far (forward and backward).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::Dimension(format!("transpose {:?}", av.shape())));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let out = kernels::transpose(av.data(), r, c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out: Vec<f32> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.flops += out.len() as u64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    /// Adds a `[d]` bias to every row of `a[..×d]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let d = av.cols();
        if bv.numel() != d {
            return Err(Error::Dimension(format!(
                "bias of {} for rows of {}",
                bv.numel(),
                d
            )));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = av.shape().to_vec();
        self.flops += out.len() as u64;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let av = self.value(a);
        let out: Vec<f32> = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f32> = av.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        self.flops += 8 * t.numel() as u64;
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Dimension(format!(
                "layernorm over {} with gain {} / bias {}",
                d,
                self.value(gain).numel(),
                self.value(bias).numel()
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.flops += 8 * out.len() as u64;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row lookup `table[ids[i]]` for a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Dimension(format!("embedding table {:?}", tv.shape())));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token id {id} >= vocabulary {v}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        self.flops += 4 * t.numel() as u64;
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Softmax restricted to the entries where `mask` is true; other entries
    /// are exactly zero. A row with no selected entry is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(Error::Dimension(format!(
                "mask of {} for {} logits",
                mask.len(),
                av.numel()
            )));
        }
        let d = av.cols();
        let mut out = vec![0.0f32; av.numel()];
        for (r, row) in av.data().chunks(d).enumerate() {
            let m = &mask[r * d..(r + 1) * d];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0f32;
            for j in 0..d {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MaskedSoftmax(a), ng))
    }

    /// Multi-head scaled dot-product attention over `[batch·seq × d]`
    /// projections. `key_valid` (length `batch·seq`) hides padding keys; a
    /// query with no visible key produces a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let n = dims.batch * dims.seq;
        if qv.shape() != [n, d] || kv.shape() != [n, d] || vv.shape() != [n, d] {
            return Err(Error::Dimension(format!(
                "attention q{:?} k{:?} v{:?} for batch {} seq {}",
                qv.shape(),
                kv.shape(),
                vv.shape(),
                dims.batch,
                dims.seq
            )));
        }
        if dims.heads == 0 || d % dims.heads != 0 {
            return Err(Error::Dimension(format!(
                "width {} not divisible by {} heads",
                d, dims.heads
            )));
        }
        if let Some(kvld) = key_valid {
            if kvld.len() != n {
                return Err(Error::Dimension("key mask length".into()));
            }
        }
        let s = dims.seq;
        let dh = d / dims.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; dims.batch * dims.heads * s * s];
        let mut out = vec![0.0f32; n * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..dims.batch {
            for h in 0..dims.heads {
                let off = h * dh;
                for i in 0..s {
                    let qi = &qd[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                    let prow = &mut probs[((b * dims.heads + h) * s + i) * s..][..s];
                    let jmax = if dims.causal { i + 1 } else { s };
                    let mut max = f32::NEG_INFINITY;
                    for (j, p) in prow.iter_mut().enumerate().take(jmax) {
                        if key_valid.is_some_and(|m| !m[b * s + j]) {
                            continue;
                        }
                        let kj = &kd[(b * s + j) * d + off..(b * s + j) * d + off + dh];
                        *p = kernels::dot(qi, kj) * scale;
                        max = max.max(*p);
                    }
                    if max == f32::NEG_INFINITY {
                        prow.fill(0.0);
                        continue;
                    }
                    let mut sum = 0.0f32;
                    for (j, p) in prow.iter_mut().enumerate() {
                        let visible = j < jmax && !key_valid.is_some_and(|m| !m[b * s + j]);
                        if visible {
                            *p = (*p - max).exp();
                            sum += *p;
                        } else {
                            *p = 0.0;
                        }
                    }
                    let orow = &mut out[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                    for (j, p) in prow.iter_mut().enumerate().take(jmax) {
                        *p /= sum;
                        if *p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b * s + j) * d + off..(b * s + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += *p * x;
                        }
                    }
                }
            }
        }
        self.flops += 4 * (dims.batch * s * s * d) as u64;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            ng,
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over rows where `mask` is true.
    /// With no masked row the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        let rows = lv.rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets / {} mask entries for {} rows",
                targets.len(),
                mask.len(),
                rows
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Index(format!("target {t} >= vocabulary {vocab}")));
            }
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
            total += (lse - row[t]) as f64;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            count += 1;
        }
        self.flops += 4 * (rows * vocab) as u64;
        let loss = if count == 0 { 0.0 } else { (total / count as f64) as f32 };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let n = xv.rows();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index(format!("row {r} of {n}")));
            }
            out.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Inverse of [`Tape::gather_rows`]: an `[n×d]` result with `x[i]` added
    /// into row `rows[i]`.
    pub fn scatter_add_rows(&mut self, x: Var, rows: &[usize], n: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if rows.len() != xv.rows() {
            return Err(Error::Dimension(format!(
                "{} row indices for {} rows",
                rows.len(),
                xv.rows()
            )));
        }
        let mut out = vec![0.0f32; n * d];
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(Error::Index(format!("row {r} of {n}")));
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(&xv.data()[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::ScatterAddRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Scales row `i` of `x[k×d]` by `w[i]` (`w` has `k` entries).
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = xv.cols();
        if wv.numel() != xv.rows() {
            return Err(Error::Dimension(format!(
                "{} row weights for {} rows",
                wv.numel(),
                xv.rows()
            )));
        }
        let mut out = xv.data().to_vec();
        for (row, s) in out.chunks_mut(d).zip(wv.data()) {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::MulRows(x, w),
            ng,
        ))
    }

    /// Picks `x[rows[i], col]` into a `[k]` vector.
    pub fn gather_entries(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if col >= d {
            return Err(Error::Index(format!("column {col} of {d}")));
        }
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::Index(format!("row {r} of {}", xv.rows())));
            }
            out.push(xv.data()[r * d + col]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![rows.len()], out)?,
            Op::GatherEntries {
                x,
                rows: rows.to_vec(),
                col,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Backpropagates from scalar `root`, seeding it with `seed`.
    pub fn backward(&mut self, root: Var, seed: f32) -> Gradients {
        let mut g = Tensor::zeros(self.value(root).shape());
        g.data_mut().fill(seed);
        self.backward_with(root, g)
    }

    /// Backpropagates an arbitrary upstream gradient for `root`.
    pub fn backward_with(&mut self, root: Var, upstream: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(upstream);
        let mut flops = 0u64;
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contrib: Vec<(Var, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.ng(*a) {
                        let ga = kernels::matmul_a_bt(gout.data(), bv.data(), m, n, k);
                        contrib.push((*a, Tensor::new(vec![m, k], ga).unwrap()));
                        flops += 2 * (m * k * n) as u64;
                    }
                    if self.ng(*b) {
                        let gb = kernels::matmul_at_b(av.data(), gout.data(), m, k, n);
                        contrib.push((*b, Tensor::new(vec![k, n], gb).unwrap()));
                        flops += 2 * (m * k * n) as u64;
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (gout.shape()[0], gout.shape()[1]);
                    let ga = kernels::transpose(gout.data(), r, c);
                    contrib.push((*a, Tensor::new(vec![c, r], ga).unwrap()));
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        contrib.push((*a, gout.clone()));
                    }
                    if self.ng(*b) {
                        contrib.push((*b, gout.clone()));
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.ng(*bias) {
                        let d = gout.cols();
                        let mut gb = vec![0.0f32; d];
                        for row in gout.data().chunks(d) {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        contrib.push((*bias, Tensor::new(shape, gb).unwrap()));
                    }
                    if self.ng(*a) {
                        contrib.push((*a, gout.clone()));
                    }
                }
                Op::Scale(a, s) => {
                    let mut ga = gout.clone();
                    ga.scale_assign(*s);
                    contrib.push((*a, ga));
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let ga: Vec<f32> = av
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(&x, &g)| g * gelu_grad(x))
                        .collect();
                    contrib.push((*a, Tensor::new(av.shape().to_vec(), ga).unwrap()));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = gout.cols();
                    let gv = self.value(*gain).data();
                    if self.ng(*gain) || self.ng(*bias) {
                        let mut gg = vec![0.0f32; d];
                        let mut gb = vec![0.0f32; d];
                        for (row, hrow) in gout.data().chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += row[j] * hrow[j];
                                gb[j] += row[j];
                            }
                        }
                        if self.ng(*gain) {
                            let shape = self.value(*gain).shape().to_vec();
                            contrib.push((*gain, Tensor::new(shape, gg).unwrap()));
                        }
                        if self.ng(*bias) {
                            let shape = self.value(*bias).shape().to_vec();
                            contrib.push((*bias, Tensor::new(shape, gb).unwrap()));
                        }
                    }
                    if self.ng(*x) {
                        let mut gx = vec![0.0f32; gout.numel()];
                        for (r, row) in gout.data().chunks(d).enumerate() {
                            let h = &xhat[r * d..(r + 1) * d];
                            let mut mean_dy = 0.0f32;
                            let mut mean_dyh = 0.0f32;
                            for j in 0..d {
                                let dy = row[j] * gv[j];
                                mean_dy += dy;
                                mean_dyh += dy * h[j];
                            }
                            mean_dy /= d as f32;
                            mean_dyh /= d as f32;
                            for j in 0..d {
                                let dy = row[j] * gv[j];
                                gx[r * d + j] = rstd[r] * (dy - mean_dy - h[j] * mean_dyh);
                            }
                        }
                        flops += 8 * gout.numel() as u64;
                        let shape = self.value(*x).shape().to_vec();
                        contrib.push((*x, Tensor::new(shape, gx).unwrap()));
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut gt = tv.zeros_like();
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                        for (o, v) in dst.iter_mut().zip(&gout.data()[i * d..(i + 1) * d]) {
                            *o += v;
                        }
                    }
                    contrib.push((*table, gt));
                }
                Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                    // Masked entries have y = 0, so the same rule covers both.
                    let y = &node.value;
                    let d = y.cols();
                    let mut ga = vec![0.0f32; y.numel()];
                    for ((yr, gr), out) in y
                        .data()
                        .chunks(d)
                        .zip(gout.data().chunks(d))
                        .zip(ga.chunks_mut(d))
                    {
                        let dotv: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] = yr[j] * (gr[j] - dotv);
                        }
                    }
                    contrib.push((*a, Tensor::new(y.shape().to_vec(), ga).unwrap()));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    dims,
                    probs,
                } => {
                    let (qd, kd, vd) = (
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                    );
                    let d = gout.cols();
                    let s = dims.seq;
                    let dh = d / dims.heads;
                    let scale = 1.0 / (dh as f32).sqrt();
                    let mut gq = vec![0.0f32; qd.len()];
                    let mut gk = vec![0.0f32; kd.len()];
                    let mut gv = vec![0.0f32; vd.len()];
                    let go = gout.data();
                    let mut dp = vec![0.0f32; s];
                    for b in 0..dims.batch {
                        for h in 0..dims.heads {
                            let off = h * dh;
                            for i in 0..s {
                                let prow = &probs[((b * dims.heads + h) * s + i) * s..][..s];
                                let gi = &go[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                                let jmax = if dims.causal { i + 1 } else { s };
                                let mut sdot = 0.0f32;
                                for j in 0..jmax {
                                    if prow[j] == 0.0 {
                                        dp[j] = 0.0;
                                        continue;
                                    }
                                    let vrow = (b * s + j) * d + off;
                                    dp[j] = kernels::dot(gi, &vd[vrow..vrow + dh]);
                                    sdot += prow[j] * dp[j];
                                    for (o, g) in gv[vrow..vrow + dh].iter_mut().zip(gi) {
                                        *o += prow[j] * g;
                                    }
                                }
                                let qrow = (b * s + i) * d + off;
                                for j in 0..jmax {
                                    if prow[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = prow[j] * (dp[j] - sdot) * scale;
                                    let krow = (b * s + j) * d + off;
                                    for t in 0..dh {
                                        gq[qrow + t] += ds * kd[krow + t];
                                        gk[krow + t] += ds * qd[qrow + t];
                                    }
                                }
                            }
                        }
                    }
                    flops += 8 * (dims.batch * s * s * d) as u64;
                    let shape = gout.shape().to_vec();
                    if self.ng(*q) {
                        contrib.push((*q, Tensor::new(shape.clone(), gq).unwrap()));
                    }
                    if self.ng(*k) {
                        contrib.push((*k, Tensor::new(shape.clone(), gk).unwrap()));
                    }
                    if self.ng(*v) {
                        contrib.push((*v, Tensor::new(shape, gv).unwrap()));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let lv = self.value(*logits);
                    let vocab = lv.cols();
                    let mut gl = vec![0.0f32; lv.numel()];
                    if *count > 0 {
                        let s = gout.item() / *count as f32;
                        for (r, (row, prow)) in
                            gl.chunks_mut(vocab).zip(probs.chunks(vocab)).enumerate()
                        {
                            if !mask[r] {
                                continue;
                            }
                            for j in 0..vocab {
                                row[j] = prow[j] * s;
                            }
                            row[targets[r]] -= s;
                        }
                    }
                    contrib.push((*logits, Tensor::new(lv.shape().to_vec(), gl).unwrap()));
                }
                Op::GatherRows { x, rows } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut gx = xv.zeros_like();
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for (o, v) in dst.iter_mut().zip(&gout.data()[i * d..(i + 1) * d]) {
                            *o += v;
                        }
                    }
                    contrib.push((*x, gx));
                }
                Op::ScatterAddRows { x, rows } => {
                    let d = gout.cols();
                    let mut gx = Vec::with_capacity(rows.len() * d);
                    for &r in rows {
                        gx.extend_from_slice(&gout.data()[r * d..(r + 1) * d]);
                    }
                    contrib.push((*x, Tensor::new(vec![rows.len(), d], gx).unwrap()));
                }
                Op::MulRows(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let d = xv.cols();
                    if self.ng(*x) {
                        let mut gx = gout.data().to_vec();
                        for (row, s) in gx.chunks_mut(d).zip(wv.data()) {
                            for v in row.iter_mut() {
                                *v *= s;
                            }
                        }
                        contrib.push((*x, Tensor::new(xv.shape().to_vec(), gx).unwrap()));
                    }
                    if self.ng(*w) {
                        let gw: Vec<f32> = gout
                            .data()
                            .chunks(d)
                            .zip(xv.data().chunks(d))
                            .map(|(g, x)| kernels::dot(g, x))
                            .collect();
                        contrib.push((*w, Tensor::new(wv.shape().to_vec(), gw).unwrap()));
                    }
                }
                Op::GatherEntries { x, rows, col } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut gx = xv.zeros_like();
                    for (i, &r) in rows.iter().enumerate() {
                        gx.data_mut()[r * d + col] += gout.data()[i];
                    }
                    contrib.push((*x, gx));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    contrib.push((*a, Tensor::full(&shape, gout.item())));
                }
            }
            for (var, g) in contrib {
                if !self.ng(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.flops += flops;
        Gradients { grads }
    }
}
