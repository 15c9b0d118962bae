//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! intermediate values its backward rule needs. [`Graph::backward`] consumes
//! the tape, so a recorded computation can be differentiated exactly once;
//! gradients from several passes are combined by accumulating them into the
//! [`ParamStore`].

use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::error::{shape_err, NnError, Result};
use crate::linalg::{gemm, Trans};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Additive bias applied to masked attention scores before the softmax.
pub const MASK_BIAS: f64 = -1e9;

/// Padded batch geometry: `batch` sequences of `len` rows each, laid out as a
/// `[batch * len, d]` matrix. `valid[b * len + i]` marks real (unpadded) rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl SeqLayout {
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(shape_err(
                "layout",
                format!("{} mask entries for {batch}x{len}", valid.len()),
            ));
        }
        Ok(Self { batch, len, valid })
    }

    /// Layout with every position valid.
    pub fn dense(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn is_valid(&self, sequence: usize, pos: usize) -> bool {
        self.valid[sequence * self.len + pos]
    }

    pub fn valid_count(&self, sequence: usize) -> usize {
        self.valid[sequence * self.len..(sequence + 1) * self.len]
            .iter()
            .filter(|&&v| v)
            .count()
    }
}

/// Rows of weighted table lookups in compressed form: output row `r` is
/// `sum(weight * table[id])` over the entries of bag `r`. An empty bag yields
/// a zero row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bags<T> {
    offsets: Vec<usize>,
    ids: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> Bags<T> {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            ids: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn push(&mut self, entries: &[(usize, T)]) {
        for &(id, w) in entries {
            self.ids.push(id);
            self.weights.push(w);
        }
        self.offsets.push(self.ids.len());
    }

    pub fn push_single(&mut self, id: usize) {
        self.push(&[(id, T::one())]);
    }

    pub fn push_empty(&mut self) {
        self.push(&[]);
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn bag(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.ids[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    fn max_id(&self) -> Option<usize> {
        self.ids.iter().copied().max()
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<SeqLayout>,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    EmbeddingBag {
        table: Var,
        bags: Arc<Bags<T>>,
    },
    MeanPool {
        x: Var,
        layout: Arc<SeqLayout>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `id`; `None` when the loss does not depend on it.
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            (None, _) => unreachable!("only parameter leaves borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Trans::No,
            self.value(b).data(),
            Trans::No,
            &mut out,
            false,
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for {n} columns", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::from_vec(self.shape(a), out).expect("same length");
        self.push(value, Op::Relu(a), &[a])
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} for width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * d];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * d];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gs[j] * h + bs[j];
            }
        }
        let value = Tensor::from_vec(&[m, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention over each sequence of `layout`.
    ///
    /// `q`, `k`, `v` are `[batch * len, d]`. Keys at invalid positions get an
    /// additive [`MASK_BIAS`] before the softmax, so their weight is zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &Arc<SeqLayout>,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if rows != layout.rows() {
            return Err(shape_err(
                "attention",
                format!("{rows} rows for layout {}x{}", layout.batch, layout.len),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        for b in 0..layout.batch {
            if layout.valid_count(b) == 0 {
                return Err(NnError::EmptyMask {
                    op: "attention",
                    sequence: b,
                });
            }
        }
        let len = layout.len;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mask_bias = T::lit(MASK_BIAS);
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );

        let per_seq = par::map_range(layout.batch, |b| {
            let base = b * len * d;
            let mut out = vec![T::zero(); len * d];
            let mut probs = vec![T::zero(); heads * len * len];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qs[base + i * d + off..base + i * d + off + dh];
                    let row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                    let mut max = T::neg_infinity();
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &ks[base + j * d + off..base + j * d + off + dh];
                        let mut dot = T::zero();
                        for (&a, &c) in qi.iter().zip(kj) {
                            dot += a * c;
                        }
                        *s = dot * scale
                            + if layout.valid[b * len + j] {
                                T::zero()
                            } else {
                                mask_bias
                            };
                        if *s > max {
                            max = *s;
                        }
                    }
                    let mut total = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let oi = &mut out[i * d + off..i * d + off + dh];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s /= total;
                        if *s == T::zero() {
                            continue;
                        }
                        let vj = &vs[base + j * d + off..base + j * d + off + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += *s * x;
                        }
                    }
                }
            }
            (out, probs)
        });

        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::with_capacity(layout.batch * heads * len * len);
        for (o, p) in per_seq {
            out.extend(o);
            probs.extend(p);
        }
        let value = Tensor::from_vec(&[rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout: Arc::clone(layout),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights recorded by [`Graph::attention`], laid out as
    /// `[batch, heads, len(query), len(key)]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. `p == 0` records nothing.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(NnError::Contract(format!("dropout probability {p} >= 1")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Weighted row lookups from a `[vocab, e]` table; see [`Bags`].
    pub fn embedding_bag(&mut self, table: Var, bags: Arc<Bags<T>>) -> Result<Var> {
        let (size, e) = self.dims2(table, "embedding_bag")?;
        if let Some(max) = bags.max_id() {
            if max >= size {
                return Err(NnError::IndexOutOfRange {
                    what: "embedding table",
                    index: max,
                    size,
                });
            }
        }
        let t = self.value(table).data();
        let rows = bags.rows();
        let mut out = vec![T::zero(); rows * e];
        for r in 0..rows {
            let o = &mut out[r * e..(r + 1) * e];
            for (id, w) in bags.bag(r) {
                for (x, &y) in o.iter_mut().zip(&t[id * e..(id + 1) * e]) {
                    *x += w * y;
                }
            }
        }
        let value = Tensor::from_vec(&[rows, e], out)?;
        Ok(self.push(value, Op::EmbeddingBag { table, bags }, &[table]))
    }

    /// Mean over the valid rows of each sequence: `[batch * len, d] -> [batch, d]`.
    pub fn mean_pool(&mut self, x: Var, layout: &Arc<SeqLayout>) -> Result<Var> {
        let (rows, d) = self.dims2(x, "mean_pool")?;
        if rows != layout.rows() {
            return Err(shape_err(
                "mean_pool",
                format!("{rows} rows for layout {}x{}", layout.batch, layout.len),
            ));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); layout.batch * d];
        for b in 0..layout.batch {
            let count = layout.valid_count(b);
            if count == 0 {
                return Err(NnError::EmptyMask {
                    op: "mean_pool",
                    sequence: b,
                });
            }
            let inv = T::one() / T::lit(count as f64);
            let o = &mut out[b * d..(b + 1) * d];
            for i in 0..layout.len {
                if !layout.is_valid(b, i) {
                    continue;
                }
                let r = b * layout.len + i;
                for (acc, &val) in o.iter_mut().zip(&xs[r * d..(r + 1) * d]) {
                    *acc += val;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::from_vec(&[layout.batch, d], out)?;
        Ok(self.push(
            value,
            Op::MeanPool {
                x,
                layout: Arc::clone(layout),
            },
            &[x],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b || b == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(NnError::IndexOutOfRange {
                    what: "class labels",
                    index: label,
                    size: c,
                });
            }
            let row = &ls[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::lit(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Propagates d(loss)/d(node) back through the tape and returns the
    /// gradient of every parameter the loss depends on.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.params.len());
        out.resize_with(self.params.len(), || None);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, g, &mut grads, &mut out)?;
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = self.params.get(*id).value.shape();
                match &mut out[id.0] {
                    Some(t) => t.add_assign(&g),
                    slot => *slot = Some(Tensor::from_vec(shape, g)?),
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked in forward");
                let n = g.len() / m.max(1);
                if rg(*a) {
                    let da = acc(grads, *a, m * k);
                    gemm(m, n, k, &g, Trans::No, self.value(*b).data(), Trans::Yes, da, true);
                }
                if rg(*b) {
                    let db = acc(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a).data(), Trans::Yes, &g, Trans::No, db, true);
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                if rg(*bias) {
                    let db = acc(grads, *bias, n);
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if rg(*x) {
                    add_into(acc(grads, *x, g.len()), &g);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        add_into(acc(grads, v, g.len()), &g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if rg(v) {
                        let o = self.value(other).data();
                        let dv = acc(grads, v, g.len());
                        for ((d, &gi), &oi) in dv.iter_mut().zip(&g).zip(o) {
                            *d += gi * oi;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let n = self.value(*a).len();
                    acc(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Relu(a) => {
                if rg(*a) {
                    let xs = self.value(*a).data();
                    let da = acc(grads, *a, g.len());
                    for ((d, &gi), &x) in da.iter_mut().zip(&g).zip(xs) {
                        if x > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                let m = inv_std.len();
                if rg(*gamma) {
                    let dg = acc(grads, *gamma, d);
                    for r in 0..m {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if rg(*beta) {
                    let db = acc(grads, *beta, d);
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
                if rg(*x) {
                    let gs = self.value(*gamma).data();
                    let dn = T::lit(d as f64);
                    let dx = acc(grads, *x, m * d);
                    let mut gh = vec![T::zero(); d];
                    for r in 0..m {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..d {
                            gh[j] = g[r * d + j] * gs[j];
                            mean_g += gh[j];
                            mean_gx += gh[j] * xh[j];
                        }
                        mean_g /= dn;
                        mean_gx /= dn;
                        for j in 0..d {
                            dx[r * d + j] += inv_std[r] * (gh[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                self.backward_attention(*q, *k, *v, layout, *heads, probs, &g, grads);
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gi), &mi) in dx.iter_mut().zip(&g).zip(mask) {
                        *d += gi * mi;
                    }
                }
            }
            Op::EmbeddingBag { table, bags } => {
                if rg(*table) {
                    let t = self.value(*table);
                    let (size, e) = t.dims2().expect("checked in forward");
                    let dt = acc(grads, *table, size * e);
                    for r in 0..bags.rows() {
                        let gr = &g[r * e..(r + 1) * e];
                        for (id, w) in bags.bag(r) {
                            for (d, &gi) in dt[id * e..(id + 1) * e].iter_mut().zip(gr) {
                                *d += w * gi;
                            }
                        }
                    }
                }
            }
            Op::MeanPool { x, layout } => {
                if rg(*x) {
                    let d = g.len() / layout.batch;
                    let dx = acc(grads, *x, layout.rows() * d);
                    for b in 0..layout.batch {
                        let inv = T::one() / T::lit(layout.valid_count(b) as f64);
                        let gb = &g[b * d..(b + 1) * d];
                        for i in 0..layout.len {
                            if !layout.is_valid(b, i) {
                                continue;
                            }
                            let r = b * layout.len + i;
                            for (dd, &gi) in dx[r * d..(r + 1) * d].iter_mut().zip(gb) {
                                *dd += gi * inv;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if rg(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / T::lit(b as f64);
                    let dl = acc(grads, *logits, b * c);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            dl[r * c + j] += (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SeqLayout,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, d) = self.value(q).dims2().expect("checked in forward");
        let len = layout.len;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );

        let per_seq = par::map_range(layout.batch, |b| {
            let base = b * len * d;
            let mut dq = vec![T::zero(); len * d];
            let mut dk = vec![T::zero(); len * d];
            let mut dv = vec![T::zero(); len * d];
            let mut dp = vec![T::zero(); len];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let p = &probs[((b * heads + h) * len + i) * len..][..len];
                    let go = &g[base + i * d + off..base + i * d + off + dh];
                    let mut weighted = T::zero();
                    for j in 0..len {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vs[base + j * d + off..base + j * d + off + dh];
                        let mut dot = T::zero();
                        for (&a, &c) in go.iter().zip(vj) {
                            dot += a * c;
                        }
                        dp[j] = dot;
                        weighted += p[j] * dot;
                        for (dvv, &gi) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                            *dvv += p[j] * gi;
                        }
                    }
                    let qi = &qs[base + i * d + off..base + i * d + off + dh];
                    for j in 0..len {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        let kj = &ks[base + j * d + off..base + j * d + off + dh];
                        for (dqq, &kk) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                            *dqq += ds * kk;
                        }
                        for (dkk, &qq) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                            *dkk += ds * qq;
                        }
                    }
                }
            }
            (dq, dk, dv)
        });

        let rg = |x: Var| self.nodes[x.0].requires_grad;
        for (b, (dq, dk, dv)) in per_seq.into_iter().enumerate() {
            let span = b * len * d..(b + 1) * len * d;
            for (var, block) in [(q, dq), (k, dk), (v, dv)] {
                if rg(var) {
                    add_into(&mut acc(grads, var, rows * d)[span.clone()], &block);
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.add(*n, t.clone()).unwrap())
            .collect();
        (store, ids)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn gradient_of_weighted_sum_is_the_input() {
        let x = [0.5, -2.0, 3.25, 7.0];
        let (store, ids) = store_with(&[("w", t(&[4], &[1.0, 2.0, 3.0, 4.0]))]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let xv = g.input(t(&[4], &x));
        let prod = g.mul(w, xv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &x);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let (store, ids) = store_with(&[
            ("used", t(&[2], &[1.0, 2.0])),
            ("unused", t(&[2], &[5.0, 6.0])),
        ]);
        let mut g = Graph::new(&store);
        let u = g.param(ids[0]);
        let _ = g.param(ids[1]);
        let loss = g.sum(u);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(ids[1]).is_none());
        let mut store = store.clone();
        store.accumulate(&grads);
        assert!(store.get(ids[1]).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (store, ids) = store_with(&[("w", t(&[3], &[1.0, 2.0, 3.0]))]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let r = g.relu(w);
        assert_eq!(g.backward(r).unwrap_err(), NnError::NonScalarLoss(vec![3]));
    }

    #[test]
    fn accumulate_sums_repeated_passes() {
        let (mut store, ids) = store_with(&[("w", t(&[2], &[1.0, -1.0]))]);
        for _ in 0..3 {
            let mut g = Graph::new(&store);
            let w = g.param(ids[0]);
            let loss = g.sum(w);
            let grads = g.backward(loss).unwrap();
            store.accumulate(&grads);
        }
        assert_eq!(store.get(ids[0]).grad.data(), &[3.0, 3.0]);
        store.zero_grad();
        assert_eq!(store.get(ids[0]).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_two() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(t(&[1, 2], &[0.0, 0.0]));
        let loss = g.cross_entropy(logits, &[1]).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mean_pool_of_constant_sequence_is_the_constant() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let row = [1.5, -0.25, 4.0];
        let data: Vec<f64> = row.iter().copied().cycle().take(12).collect();
        let x = g.input(t(&[4, 3], &data));
        let layout = Arc::new(SeqLayout::dense(1, 4));
        let p = g.mean_pool(x, &layout).unwrap();
        assert_eq!(g.value(p).data(), &row);
    }

    #[test]
    fn mean_pool_ignores_masked_rows() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        // Two sequences of length 4, second half of each masked.
        let data: Vec<f64> = (0..16).map(|i| (i * i) as f64 * 0.5 - 3.0).collect();
        let valid = vec![true, true, false, false, true, false, true, false];
        let layout = Arc::new(SeqLayout::new(2, 4, valid.clone()).unwrap());
        let x = g.input(t(&[8, 2], &data));
        let p = g.mean_pool(x, &layout).unwrap();
        // Brute force: average of visible rows.
        for b in 0..2 {
            for c in 0..2 {
                let rows: Vec<usize> = (0..4).filter(|&i| valid[b * 4 + i]).map(|i| b * 4 + i).collect();
                let avg = rows.iter().map(|&r| data[r * 2 + c]).sum::<f64>() / rows.len() as f64;
                assert!((g.value(p).data()[b * 2 + c] - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_pool_with_everything_masked_is_an_error() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2, 3]));
        let layout = Arc::new(SeqLayout::new(1, 2, vec![false, false]).unwrap());
        assert!(matches!(
            g.mean_pool(x, &layout),
            Err(NnError::EmptyMask { .. })
        ));
    }

    fn attention_fixture(valid: Vec<bool>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let d = 4;
        let len = valid.len();
        let mk = |s: f64| -> Tensor<f64> {
            t(
                &[len, d],
                &(0..len * d).map(|i| ((i as f64) * s).sin()).collect::<Vec<_>>(),
            )
        };
        let (q, k, v) = (g.input(mk(0.7)), g.input(mk(1.3)), g.input(mk(2.1)));
        let layout = Arc::new(SeqLayout::new(1, len, valid).unwrap());
        let a = g.attention(q, k, v, &layout, 2).unwrap();
        (
            g.attention_weights(a).unwrap().to_vec(),
            g.value(a).data().to_vec(),
            g.value(v).data().to_vec(),
        )
    }

    #[test]
    fn attention_rows_sum_to_one_and_masked_keys_get_zero() {
        let valid = vec![true, false, true, true, false];
        let (probs, _, _) = attention_fixture(valid.clone());
        let len = valid.len();
        for row in probs.chunks(len) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (j, &p) in row.iter().enumerate() {
                if !valid[j] {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_with_single_visible_key_copies_its_value() {
        let valid = vec![false, false, true, false];
        let (probs, out, v) = attention_fixture(valid);
        let d = 4;
        for row in probs.chunks(4) {
            assert_eq!(row, &[0.0, 0.0, 1.0, 0.0]);
        }
        for i in 0..4 {
            assert_eq!(&out[i * d..(i + 1) * d], &v[2 * d..3 * d]);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(NnError::Shape { .. })));
        let c = g.input(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(NnError::Shape { .. })));
    }
}
