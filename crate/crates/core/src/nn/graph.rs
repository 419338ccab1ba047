//! Reverse-mode differentiation over a recorded tape of matrix ops.
//!
//! A [`Graph`] records every op eagerly: values are computed when the op is
//! added, and [`Graph::backward`] walks the tape in reverse accumulating
//! vector-Jacobian products. All values are viewed as matrices with the
//! last dimension as columns.

use std::collections::BTreeMap;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, lit, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    BlockMean {
        src: Var,
        blocks: usize,
    },
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    Mix {
        src: Var,
        weights: Vec<Vec<(usize, T)>>,
    },
    MixRows {
        weights: Var,
        values: Var,
    },
    RowSum(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seqs: usize,
        probs: Vec<T>,
    },
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of a scalar loss with respect to named parameters.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `name`; errors when the parameter never entered the graph.
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::Detached(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.by_name.iter_mut()
    }

    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let x = v.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s: T = lit(max_norm / norm);
            for t in self.by_name.values_mut() {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Binds a trainable parameter. Gradients are reported under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(a, bias)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor { shape, data: out }, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(Tensor { shape, data: out }, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by expects a scalar factor"));
        }
        let f = self.value(s).data()[0];
        Ok(self.map(a, |x| x * f, Op::ScaleBy(a, s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(Error::shape(format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { src: a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(Error::shape(format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { src: a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.dims(p);
            if c != n {
                return Err(Error::shape(format!("concat rows: {c} vs {n} columns")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += m;
        }
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Rows are laid out block-major (`row = block * width + i`); returns the
    /// `[width × cols]` mean over blocks.
    pub fn block_mean(&mut self, a: Var, blocks: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if blocks == 0 || m % blocks != 0 {
            return Err(Error::shape(format!("{m} rows in {blocks} blocks")));
        }
        let width = m / blocks;
        let inv: T = T::one() / lit(blocks as f64);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); width * n];
        for blk in src.chunks(width * n) {
            for (o, &x) in out.iter_mut().zip(blk) {
                *o += x;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        Ok(self.push(
            Tensor::new(vec![width, n], out)?,
            Op::BlockMean { src: a, blocks },
        ))
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &r in &index {
            if r >= m {
                return Err(Error::shape(format!("row {r} of {m}")));
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rows = index.len();
        Ok(self.push(
            Tensor::new(vec![rows, n], out)?,
            Op::GatherRows { src: a, index },
        ))
    }

    /// Output row `q` is `Σ w · a[row]` over the constant `(row, w)` pairs of
    /// `weights[q]`.
    pub fn mix(&mut self, a: Var, weights: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); weights.len() * n];
        for (q, ws) in weights.iter().enumerate() {
            let orow = &mut out[q * n..(q + 1) * n];
            for &(r, w) in ws {
                if r >= m {
                    return Err(Error::shape(format!("row {r} of {m}")));
                }
                for (o, &x) in orow.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                    *o += w * x;
                }
            }
        }
        let rows = weights.len();
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::Mix { src: a, weights }))
    }

    /// `weights` is `[q × k]`, `values` is `[q·k × c]`; output row `i` is
    /// `Σ_j weights[i][j] · values[i·k + j]`.
    pub fn mix_rows(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (q, k) = self.dims(weights);
        let (qk, c) = self.dims(values);
        if q * k != qk {
            return Err(Error::shape(format!("mix_rows: [{q}x{k}] weights for {qk} rows")));
        }
        let w = self.value(weights).data();
        let v = self.value(values).data();
        let mut out = vec![T::zero(); q * c];
        for i in 0..q {
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let wij = w[i * k + j];
                let vrow = &v[(i * k + j) * c..(i * k + j + 1) * c];
                for (o, &x) in orow.iter_mut().zip(vrow) {
                    *o += wij * x;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![q, c], out)?, Op::MixRows { weights, values }))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        self.push(
            Tensor {
                shape: vec![m, 1],
                data: out,
            },
            Op::RowSum(a),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data: out }, Op::SoftmaxRows(a))
    }

    /// Multi-head scaled dot-product self-attention over sequences stored
    /// time-major: row `t * seqs + s` holds step `t` of sequence `s`. Each
    /// head uses the column block `h·d_k .. (h+1)·d_k` and scores are scaled
    /// by `1/√d_k`. Returns the concatenated per-head context.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seqs: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return Err(Error::shape("attention q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 || seqs == 0 || rows % seqs != 0 {
            return Err(Error::shape(format!(
                "attention: {rows} rows, {d} columns, {heads} heads, {seqs} sequences"
            )));
        }
        let t_len = rows / seqs;
        let dk = d / heads;
        let scale: T = T::one() / lit::<T>(dk as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); seqs * heads * t_len * t_len];
        let mut out = vec![T::zero(); rows * d];
        for s in 0..seqs {
            for h in 0..heads {
                let base = (s * heads + h) * t_len * t_len;
                let c0 = h * dk;
                for i in 0..t_len {
                    let qi = &qd[(i * seqs + s) * d + c0..][..dk];
                    let prow = &mut probs[base + i * t_len..base + (i + 1) * t_len];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &kd[(j * seqs + s) * d + c0..][..dk];
                        *p = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(i * seqs + s) * d + c0..][..dk];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &vd[(j * seqs + s) * d + c0..][..dk];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seqs,
                probs,
            },
        ))
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, laid
    /// out `[seqs × heads × T × T]`.
    pub fn attention_probs(&self, node: Var) -> Option<(&[T], usize, usize)> {
        match &self.nodes[node.0].op {
            Op::Attention {
                probs, heads, seqs, ..
            } => Some((probs, *heads, *seqs)),
            _ => None,
        }
    }

    /// Mean of squared errors over entries where `mask` is true.
    pub fn masked_mse(&mut self, pred: Var, target: Vec<T>, mask: Vec<bool>) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(Error::shape(format!(
                "mse: {} predictions, {} targets, {} mask entries",
                p.len(),
                target.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut s = T::zero();
        for ((&x, &y), &m) in p.iter().zip(&target).zip(&mask) {
            if m {
                s += (x - y) * (x - y);
            }
        }
        let value = s / lit(count as f64);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            },
        ))
    }

    /// Back-propagates from the scalar `loss` and returns gradients for every
    /// parameter bound on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut by_name: BTreeMap<String, Tensor<T>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    let t = Tensor::new(out.shape().to_vec(), g)?;
                    match by_name.get_mut(name) {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            by_name.insert(name.clone(), t);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt_acc(&g, self.value(*b).data(), &mut ga, m, n, k);
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn_acc(self.value(*a).data(), &g, &mut gb, m, k, n);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let n = out.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (o, &x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|&x| -x).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let ga = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    let gb = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|&x| x * *s).collect());
                }
                Op::ScaleBy(a, s) => {
                    let f = self.value(*s).data()[0];
                    let av = self.value(*a).data();
                    let gs = g.iter().zip(av).map(|(&x, &y)| x * y).sum();
                    accumulate(&mut grads, *s, vec![gs]);
                    accumulate(&mut grads, *a, g.iter().map(|&x| x * f).collect());
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .iter()
                        .zip(out.data())
                        .map(|(&x, &y)| x * y * (T::one() - y))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .iter()
                        .zip(out.data())
                        .map(|(&x, &y)| x * (T::one() - y * y))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(out.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols { src, start } => {
                    let (m, n) = self.dims(*src);
                    let len = out.cols();
                    let mut gs = vec![T::zero(); m * n];
                    for (r, grow) in g.chunks(len).enumerate() {
                        gs[r * n + start..r * n + start + len].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::SliceRows { src, start } => {
                    let (m, n) = self.dims(*src);
                    let mut gs = vec![T::zero(); m * n];
                    gs[start * n..start * n + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *src, gs);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        accumulate(&mut grads, p, g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::BlockMean { src, blocks } => {
                    let inv: T = T::one() / lit(*blocks as f64);
                    let scaled: Vec<T> = g.iter().map(|&x| x * inv).collect();
                    let mut gs = Vec::with_capacity(scaled.len() * blocks);
                    for _ in 0..*blocks {
                        gs.extend_from_slice(&scaled);
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::GatherRows { src, index } => {
                    let (m, n) = self.dims(*src);
                    let mut gs = vec![T::zero(); m * n];
                    for (i, &r) in index.iter().enumerate() {
                        for (o, &x) in gs[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..]) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::Mix { src, weights } => {
                    let (m, n) = self.dims(*src);
                    let mut gs = vec![T::zero(); m * n];
                    for (q, ws) in weights.iter().enumerate() {
                        let grow = &g[q * n..(q + 1) * n];
                        for &(r, w) in ws {
                            for (o, &x) in gs[r * n..(r + 1) * n].iter_mut().zip(grow) {
                                *o += w * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::MixRows { weights, values } => {
                    let (q, k) = self.dims(*weights);
                    let c = self.dims(*values).1;
                    let w = self.value(*weights).data();
                    let v = self.value(*values).data();
                    let mut gw = vec![T::zero(); q * k];
                    let mut gv = vec![T::zero(); q * k * c];
                    for i in 0..q {
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..k {
                            let r = i * k + j;
                            let vrow = &v[r * c..(r + 1) * c];
                            gw[r] = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                            let wij = w[r];
                            for (o, &x) in gv[r * c..(r + 1) * c].iter_mut().zip(grow) {
                                *o += wij * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *weights, gw);
                    accumulate(&mut grads, *values, gv);
                }
                Op::RowSum(a) => {
                    let n = self.dims(*a).1;
                    let mut ga = Vec::with_capacity(g.len() * n);
                    for &x in &g {
                        ga.extend(std::iter::repeat_n(x, n));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let len = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; len]);
                }
                Op::SoftmaxRows(a) => {
                    let n = out.cols().max(1);
                    let mut ga = vec![T::zero(); g.len()];
                    for ((grow, prow), orow) in
                        g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n))
                    {
                        let dot: T = grow.iter().zip(prow).map(|(&x, &p)| x * p).sum();
                        for ((o, &x), &p) in orow.iter_mut().zip(grow).zip(prow) {
                            *o = p * (x - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    seqs,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        self.attention_backward(*q, *k, *v, *heads, *seqs, probs, &g);
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::MaskedMse {
                    pred,
                    target,
                    mask,
                    count,
                } => {
                    let p = self.value(*pred).data();
                    let f: T = g[0] * lit(2.0) / lit(*count as f64);
                    let gp = p
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((&x, &y), &m)| if m { f * (x - y) } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(Gradients { by_name })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seqs: usize,
        probs: &[T],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (rows, d) = self.dims(q);
        let t_len = rows / seqs;
        let dk = d / heads;
        let scale: T = T::one() / lit::<T>(dk as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![T::zero(); rows * d];
        let mut gk = vec![T::zero(); rows * d];
        let mut gv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); t_len];
        for s in 0..seqs {
            for h in 0..heads {
                let base = (s * heads + h) * t_len * t_len;
                let c0 = h * dk;
                for i in 0..t_len {
                    let gi = &g[(i * seqs + s) * d + c0..][..dk];
                    let prow = &probs[base + i * t_len..base + (i + 1) * t_len];
                    for j in 0..t_len {
                        let r = (j * seqs + s) * d + c0;
                        let vj = &vd[r..r + dk];
                        dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        for (o, &x) in gv[r..r + dk].iter_mut().zip(gi) {
                            *o += prow[j] * x;
                        }
                    }
                    let dot: T = dp.iter().zip(prow).map(|(&a, &p)| a * p).sum();
                    let qi_off = (i * seqs + s) * d + c0;
                    for j in 0..t_len {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let r = (j * seqs + s) * d + c0;
                        for c in 0..dk {
                            gq[qi_off + c] += ds * kd[r + c];
                            gk[r + c] += ds * qd[qi_off + c];
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_graph_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_w() {
        let w = rand_t(&[3, 4], 1);
        let mut g = Graph::new();
        let v = g.param("w", &w);
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        for (a, b) in grads.get("w").unwrap().data().iter().zip(w.data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        assert!(matches!(grads.get("other"), Err(Error::Detached(_))));
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let p = rand_t(&[2, 3], 2);
        let mut g = Graph::new();
        let v = g.param("p", &p);
        let mask = vec![true, false, true, false, false, true];
        let loss = g.masked_mse(v, vec![0.0; 6], mask.clone()).unwrap();
        let grads = g.backward(loss).unwrap();
        for (gv, m) in grads.get("p").unwrap().data().iter().zip(&mask) {
            if !m {
                assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn masked_mse_rejects_empty_mask() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            g.masked_mse(v, vec![0.0; 2], vec![false; 2]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn softmax_is_shift_invariant_and_stochastic() {
        let x = rand_t(&[4, 7], 3);
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            *v += 123.25;
        }
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(shifted);
        let sa = g.softmax_rows(a);
        let sb = g.softmax_rows(b);
        for row in g.value(sa).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn every_op_passes_finite_differences() {
        // One graph touching each differentiable op.
        let params = vec![
            ("a".to_string(), rand_t(&[6, 4], 10)),
            ("b".to_string(), rand_t(&[4, 4], 11)),
            ("bias".to_string(), rand_t(&[4], 12)),
            ("s".to_string(), rand_t(&[1, 1], 13)),
            ("wq".to_string(), rand_t(&[4, 4], 14)),
            ("wk".to_string(), rand_t(&[4, 4], 15)),
        ];
        let build = |g: &mut Graph<f64>, p: &[(String, Tensor<f64>)]| -> Result<Var> {
            let a = g.param("a", &p[0].1);
            let b = g.param("b", &p[1].1);
            let bias = g.param("bias", &p[2].1);
            let s = g.param("s", &p[3].1);
            let wq = g.param("wq", &p[4].1);
            let wk = g.param("wk", &p[5].1);
            let x = g.matmul(a, b)?;
            let x = g.add_bias(x, bias)?;
            let sg = g.sigmoid(x);
            let th = g.tanh(x);
            let m = g.mul(sg, th)?;
            let m = g.add(m, a)?;
            let q = g.matmul(m, wq)?;
            let k = g.matmul(m, wk)?;
            // 3 steps x 2 sequences, 2 heads
            let att = g.attention(q, k, m, 2, 2)?;
            let pooled = g.block_mean(att, 3)?;
            let left = g.slice_cols(pooled, 0, 2)?;
            let right = g.slice_cols(pooled, 2, 2)?;
            let diff = g.sub(left, right)?;
            let e = g.exp(diff);
            let e = g.scale_by(e, s)?;
            let top = g.slice_rows(att, 0, 2)?;
            let top = g.slice_cols(top, 1, 2)?;
            let cat = g.concat_rows(&[e, top])?;
            let gathered = g.gather_rows(cat, vec![0, 3, 3, 1])?;
            let sq = g.mul(gathered, gathered)?;
            let rs = g.row_sum(sq);
            let logits = g.reshape(rs, vec![2, 2])?;
            let logits = g.scale(logits, -0.7);
            let w = g.softmax_rows(logits);
            let vals = g.mix(cat, vec![vec![(0, 0.3), (1, 0.7)], vec![(2, 1.0)], vec![(3, 0.5)], vec![(1, 0.25), (0, 0.75)]])?;
            let mixed = g.mix_rows(w, vals)?;
            g.masked_mse(mixed, vec![0.1, -0.2, 0.3, 0.05], vec![true, true, false, true])
        };
        let report = check_graph_gradients(&params, build, 1e-5, usize::MAX, 7).unwrap();
        assert!(report.checked > 40);
        assert!(
            report.max_rel_error < 1e-6,
            "max relative error {}",
            report.max_rel_error
        );
    }
}
