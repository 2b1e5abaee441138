//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so building a graph per
//! training sample is cheap and several graphs can be evaluated in parallel
//! against one store.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Xavier-uniform initialized matrix.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        // Irwin-Hall approximation keeps us off rand_distr for one call site.
        let data = (0..rows * cols)
            .map(|_| {
                let s: f64 = (0..12).map(|_| rng.gen::<f64>()).sum();
                (s - 6.0) * std
            })
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, Tensor::full(&[rows, cols], value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Add `scale * g` into each parameter's gradient.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        if grads.0.len() != self.params.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} grads for {} params", grads.0.len(), self.params.len()),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                if g.len() != p.grad.len() {
                    return Err(Error::shape("accumulate", p.name.clone()));
                }
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass (`None` = unused).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    /// Elementwise sum, in argument order.
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    /// a · bᵀ
    MatMulNT(usize, usize),
    Add(usize, usize),
    /// matrix + broadcast row vector
    AddRow(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Vec<f64>),
    Scale(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Softmax(usize),
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: Vec<(f64, f64)>,
    },
    Gather(usize, Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    RelGather(usize, Vec<usize>),
    RelScatter(usize, Vec<usize>),
    OuterAdd(usize, usize),
    CrossEntropySum {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
    MeanRows(usize),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<usize, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: HashMap::new(),
        }
    }

    /// A graph with no parameter store, for tests over plain leaves.
    pub fn detached() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Borrow a leaf that outlives the graph without copying it.
    pub fn leaf_ref(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id.0) {
            return *v;
        }
        let store = self.params.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(&store.params[id.0].value),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id.0, v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        tensor::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a.0, b.0)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} * ({n}x{k2})T")));
        }
        let mut out = vec![0.0; m * n];
        tensor::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNT(a.0, b.0)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let r = self.value(row);
        if r.len() != n {
            return Err(Error::shape("add_row", format!("{m}x{n} + row of {}", r.len())));
        }
        let rd = r.data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(&rd) {
                *x += b;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data), Op::AddRow(a.0, row.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a.0, s))
    }

    /// Inverted dropout with a mask drawn from `rng`; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::MulConst(a.0, mask))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LeakyRelu(a.0, slope))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut out = vec![0.0; t.len()];
        for (row, o) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            tensor::softmax_row(row, o);
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(a.0))
    }

    /// Row-wise softmax restricted to entries where `allowed` is true; masked
    /// entries get probability 0. Every row must allow at least one entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if allowed.len() != t.len() {
            return Err(Error::shape("masked_softmax", "mask size"));
        }
        let n = t.cols();
        let mut out = vec![0.0; t.len()];
        for ((row, o), m) in t.data().chunks(n).zip(out.chunks_mut(n)).zip(allowed.chunks(n)) {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::shape("masked_softmax", "row with no allowed entries"));
            }
            let mut sum = 0.0;
            for ((oi, &v), &ok) in o.iter_mut().zip(row).zip(m) {
                if ok {
                    *oi = (v - max).exp();
                    sum += *oi;
                }
            }
            for oi in o.iter_mut() {
                *oi /= sum;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        Ok(self.push(t, Op::MaskedSoftmax(a.0)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        if g.len() != n || b.len() != n || n < 2 {
            return Err(Error::shape("layer_norm", format!("row {n}, gain {}", g.len())));
        }
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        for (row, o) in self.value(x).data().chunks(n).zip(out.chunks_mut(n)) {
            let (mean, inv) = tensor::layer_norm_stats(row, eps);
            for j in 0..n {
                o[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
            stats.push((mean, inv));
        }
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                stats,
            },
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::IdOutOfRange { id, size: rows });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        if ids.is_empty() {
            return Err(Error::Empty("gather ids"));
        }
        Ok(self.push(Tensor::matrix(ids.len(), n, data), Op::Gather(table.0, ids.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", format!("{start}+{len} of {n}")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, data), Op::SliceCols(a.0, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Tensor::matrix(m, n, data),
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    /// `out[i][j] = x[i][index[i*n + j]]` for an `m × n` index table.
    pub fn rel_gather(&mut self, x: Var, index: Vec<usize>, n: usize) -> Result<Var> {
        let (m, r) = self.dims(x);
        if index.len() != m * n || index.iter().any(|&k| k >= r) {
            return Err(Error::shape("rel_gather", "bad index table"));
        }
        let t = self.value(x);
        let data = index
            .iter()
            .enumerate()
            .map(|(flat, &k)| t.data()[(flat / n) * r + k])
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::RelGather(x.0, index)))
    }

    /// `out[i][k] = Σ_{j : index[i*n+j] = k} x[i][j]`, with `buckets` output columns.
    pub fn rel_scatter(&mut self, x: Var, index: Vec<usize>, buckets: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if index.len() != m * n || index.iter().any(|&k| k >= buckets) {
            return Err(Error::shape("rel_scatter", "bad index table"));
        }
        let mut data = vec![0.0; m * buckets];
        for (flat, (&k, &v)) in index.iter().zip(self.value(x).data()).enumerate() {
            data[(flat / n) * buckets + k] += v;
        }
        Ok(self.push(Tensor::matrix(m, buckets, data), Op::RelScatter(x.0, index)))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a[m×1]`, `b[n×1]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ca) = self.dims(a);
        let (n, cb) = self.dims(b);
        if ca != 1 || cb != 1 {
            return Err(Error::shape("outer_add", "operands must be column vectors"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * n);
        for &x in ad {
            for &y in bd {
                data.push(x + y);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data), Op::OuterAdd(a.0, b.0)))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows whose target equals `pad` are skipped.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", format!("{m} rows, {} targets", targets.len())));
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = self.value(logits).row(r);
            tensor::softmax_row(row, &mut probs[r * n..(r + 1) * n]);
            if t == pad {
                continue;
            }
            if t >= n {
                return Err(Error::IdOutOfRange { id: t, size: n });
            }
            loss -= tensor::log_softmax_at(row, t);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySum {
                logits: logits.0,
                targets: targets
                    .iter()
                    .map(|&t| if t == pad { usize::MAX } else { t })
                    .collect(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    /// Column means, as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut data = vec![0.0; n];
        for r in 0..m {
            for (d, v) in data.iter_mut().zip(self.value(a).row(r)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= m as f64;
        }
        self.push(Tensor::matrix(1, n, data), Op::MeanRows(a.0))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward_all(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to the parameter store, indexed by [`ParamId`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let store = self
            .params
            .ok_or_else(|| Error::InvalidArgument("graph has no parameter store".into()))?;
        let mut all = self.backward_all(loss)?;
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for (pid, var) in &self.param_vars {
            out[*pid] = all[var.0].take();
        }
        Ok(Gradients(out))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |target: usize, delta: Tensor| match &mut grads[target] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let like = |target: usize, data: Vec<f64>| {
            Tensor::new(self.nodes[target].value.shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut da = vec![0.0; m * k];
                tensor::gemm_nt(gd, tb.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                tensor::gemm_tn(ta.data(), gd, &mut db, m, k, n);
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let mut da = vec![0.0; m * k];
                tensor::gemm_nn(gd, tb.data(), &mut da, m, n, k);
                let mut db = vec![0.0; n * k];
                tensor::gemm_tn(gd, ta.data(), &mut db, m, n, k);
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Add(a, b) => {
                acc(*a, like(*a, gd.to_vec()));
                acc(*b, like(*b, gd.to_vec()));
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut dr = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*a, like(*a, gd.to_vec()));
                acc(*row, like(*row, dr));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let da = gd.iter().zip(tb).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(ta).map(|(g, x)| g * x).collect();
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::MulConst(a, mask) => {
                acc(*a, like(*a, gd.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::Scale(a, s) => acc(*a, like(*a, gd.iter().map(|g| g * s).collect())),
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                acc(*a, like(*a, d));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[*a].value.data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                    .collect();
                acc(*a, like(*a, d));
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(gd.chunks(n)).zip(d.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((di, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *di = yi * (gi - s);
                    }
                }
                acc(*a, like(*a, d));
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gain].value.data();
                let n = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (r, &(mean, inv)) in stats.iter().enumerate() {
                    let row = xv.row(r);
                    let gr = &gd[r * n..(r + 1) * n];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    if inv == 0.0 {
                        continue;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                acc(*x, like(*x, dx));
                acc(*gain, like(*gain, dg));
                acc(*bias, like(*bias, db));
            }
            Op::Gather(table, ids) => {
                let t = &self.nodes[*table].value;
                let n = t.cols();
                let mut d = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        d[id * n + j] += gd[r * n + j];
                    }
                }
                acc(*table, like(*table, d));
            }
            Op::SliceCols(a, start) => {
                let t = &self.nodes[*a].value;
                let (m, n) = (t.rows(), t.cols());
                let len = g.cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(*a, like(*a, d));
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, like(p, d));
                    offset += w;
                }
            }
            Op::RelGather(x, index) => {
                let t = &self.nodes[*x].value;
                let r = t.cols();
                let n = g.cols();
                let mut d = vec![0.0; t.len()];
                for (flat, &k) in index.iter().enumerate() {
                    d[(flat / n) * r + k] += gd[flat];
                }
                acc(*x, like(*x, d));
            }
            Op::RelScatter(x, index) => {
                let n = self.nodes[*x].value.cols();
                let buckets = g.cols();
                let d = index
                    .iter()
                    .enumerate()
                    .map(|(flat, &k)| gd[(flat / n) * buckets + k])
                    .collect();
                acc(*x, like(*x, d));
            }
            Op::OuterAdd(a, b) => {
                let (m, n) = (g.rows(), g.cols());
                let mut da = vec![0.0; m];
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        da[i] += gd[i * n + j];
                        db[j] += gd[i * n + j];
                    }
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let n = self.nodes[*logits].value.cols();
                let scale = gd[0];
                let mut d = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == usize::MAX || t >= n {
                        continue;
                    }
                    d[r * n..(r + 1) * n].copy_from_slice(&probs[r * n..(r + 1) * n]);
                    d[r * n + t] -= 1.0;
                    for v in &mut d[r * n..(r + 1) * n] {
                        *v *= scale;
                    }
                }
                acc(*logits, like(*logits, d));
            }
            Op::Sum(a) => {
                let len = self.nodes[*a].value.len();
                acc(*a, like(*a, vec![gd[0]; len]));
            }
            Op::MeanRows(a) => {
                let t = &self.nodes[*a].value;
                let m = t.rows() as f64;
                let mut d = Vec::with_capacity(t.len());
                for _ in 0..t.rows() {
                    d.extend(gd.iter().map(|v| v / m));
                }
                acc(*a, like(*a, d));
            }
        }
    }
}
