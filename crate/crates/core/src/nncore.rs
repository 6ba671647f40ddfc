//! Small deterministic autodiff engine: dense tensors, a reverse-mode tape,
//! Adam with a cosine schedule, finite-difference gradient checking and a
//! versioned checkpoint format.
//!
//! Every op works on whole batches. Parallel loops (convolutions) keep a fixed
//! reduction order, so results are bit-identical for any rayon pool size.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape { op: "Tensor::new", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Row-major matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged rows".into()));
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value, checking that names and shapes line up.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Malformed("checkpoint parameter names differ from the model".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape != b.shape {
                return Err(Error::Shape { op: "load_values", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            *a = b.clone();
        }
        Ok(())
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect() }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    ClampMax(Var, f64),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(Var, Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    Transpose(Var),
    EmbeddingMean { table: Var, ids: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    MulScalarVar { x: Var, s: Var },
    RowSum(Var),
    WeightedSum { x: Var, w: Vec<f64> },
    Sum(Var),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Gradients with respect to every parameter that took part in a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    /// Adds `other` into `self` (fixed order, so sums are reproducible).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Reverse-mode tape. Parameter nodes borrow their values from the store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, lhs: a.shape.clone(), rhs: b.shape.clone() }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Parameter node; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameter node by name.
    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    /// `[n,k] x [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul_raw(&ta.data, &tb.data, ta.shape[0], ta.shape[1], tb.shape[1]);
        let shape = vec![ta.shape[0], tb.shape[1]];
        Ok(self.push(Op::MatMul(a, b), Tensor { shape, data: out }))
    }

    /// `x [B,in]`, `w [out,in]`, `b [out]` to `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape.len() != 2 || tw.shape.len() != 2 || tx.shape[1] != tw.shape[1] {
            return Err(shape_err("linear", tx, tw));
        }
        if tb.shape != [tw.shape[0]] {
            return Err(shape_err("linear(bias)", tw, tb));
        }
        let (n, k, m) = (tx.shape[0], tx.shape[1], tw.shape[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = &tx.data[i * k..(i + 1) * k];
            for j in 0..m {
                let wr = &tw.data[j * k..(j + 1) * k];
                out[i * m + j] = tb.data[j] + dot(xr, wr);
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, Tensor { shape: vec![n, m], data: out }))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape.clone();
        Ok(self.push(op, Tensor { shape, data }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| f(v)).collect() };
        self.push(op, value)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// `min(x, c)`; no gradient flows where the clamp is active.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v.min(c), Op::ClampMax(x, c))
    }

    /// `x [B,C,H,W]`, `w [O,C,K,K]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape.len() != 4 || tw.shape.len() != 4 || tx.shape[1] != tw.shape[1] || tw.shape[2] != tw.shape[3] {
            return Err(shape_err("conv2d", tx, tw));
        }
        if tb.shape != [tw.shape[0]] {
            return Err(shape_err("conv2d(bias)", tw, tb));
        }
        let g = ConvGeom::new(&tx.shape, &tw.shape, stride, pad)?;
        let per: Vec<Vec<f64>> = (0..g.batch)
            .into_par_iter()
            .map(|bi| conv_forward_one(&g, &tx.data[bi * g.in_len()..(bi + 1) * g.in_len()], &tw.data, &tb.data))
            .collect();
        let shape = vec![g.batch, g.out_c, g.out_h, g.out_w];
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, Tensor { shape, data: per.concat() }))
    }

    /// Non-overlapping `k x k` max pooling (trailing rows/cols dropped).
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 4 || k == 0 || t.shape[2] < k || t.shape[3] < k {
            return Err(Error::Shape { op: "max_pool2d", lhs: t.shape.clone(), rhs: vec![k, k] });
        }
        let (b, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let (oh, ow) = (h / k, w / k);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + j * k + dj;
                            if t.data[idx] > t.data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(t.data[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(Op::MaxPool2d { x, argmax }, Tensor { shape: vec![b, c, oh, ow], data: out }))
    }

    /// Mean over the spatial dims: `[B,C,H,W]` to `[B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 4 {
            return Err(Error::Shape { op: "global_avg_pool", lhs: t.shape.clone(), rhs: vec![4] });
        }
        let hw = t.shape[2] * t.shape[3];
        let data = t.data.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let shape = vec![t.shape[0], t.shape[1]];
        Ok(self.push(Op::GlobalAvgPool(x), Tensor { shape, data }))
    }

    /// Per-row layer normalisation of `[B,D]` with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.shape.len() != 2 || tg.shape != [tx.shape[1]] || tb.shape != tg.shape {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let d = tx.shape[1];
        let mut xhat = Vec::with_capacity(tx.data.len());
        let mut inv_std = Vec::with_capacity(tx.shape[0]);
        let mut out = Vec::with_capacity(tx.data.len());
        for row in tx.data.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + 1e-5).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data[j] + tb.data[j]);
            }
        }
        let shape = tx.shape.clone();
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, Tensor { shape, data: out }))
    }

    /// Column concatenation of `[B,d1]` and `[B,d2]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[0] != tb.shape[0] {
            return Err(shape_err("concat", ta, tb));
        }
        let (n, d1, d2) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut data = Vec::with_capacity(n * (d1 + d2));
        for i in 0..n {
            data.extend_from_slice(&ta.data[i * d1..(i + 1) * d1]);
            data.extend_from_slice(&tb.data[i * d2..(i + 1) * d2]);
        }
        Ok(self.push(Op::Concat(a, b), Tensor { shape: vec![n, d1 + d2], data }))
    }

    /// Scales each row of `[B,D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(Error::Shape { op: "l2_normalize", lhs: t.shape.clone(), rhs: vec![2] });
        }
        let d = t.shape[1];
        let norms: Vec<f64> = t.data.chunks(d).map(|r| dot(r, r).sqrt().max(1e-12)).collect();
        let data = t.data.chunks(d).zip(&norms).flat_map(|(r, n)| r.iter().map(move |v| v / n)).collect();
        let shape = t.shape.clone();
        Ok(self.push(Op::L2Normalize { x, norms }, Tensor { shape, data }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(Error::Shape { op: "transpose", lhs: t.shape.clone(), rhs: vec![2] });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(x), Tensor { shape: vec![c, r], data }))
    }

    /// Mean of table rows `ids[b]` for every batch row: `[V,D]` to `[B,D]`.
    pub fn embedding_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(Error::Shape { op: "embedding_mean", lhs: t.shape.clone(), rhs: vec![2] });
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; ids.len() * d];
        for (b, row) in ids.iter().enumerate() {
            if row.is_empty() || row.iter().any(|&i| i >= v) {
                return Err(Error::Domain(format!("embedding ids {row:?} invalid for {v} rows")));
            }
            let out = &mut data[b * d..(b + 1) * d];
            for &i in row {
                for (o, x) in out.iter_mut().zip(&t.data[i * d..(i + 1) * d]) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= row.len() as f64);
        }
        let shape = vec![ids.len(), d];
        Ok(self.push(Op::EmbeddingMean { table, ids }, Tensor { shape, data }))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let t = self.value(logits);
        if t.shape.len() != 2 || t.shape[0] != targets.len() || targets.iter().any(|&c| c >= t.shape[1]) {
            return Err(Error::Shape { op: "cross_entropy", lhs: t.shape.clone(), rhs: vec![targets.len()] });
        }
        let c = t.shape[1];
        let mut probs = Vec::with_capacity(t.data.len());
        let mut loss = 0.0;
        for (row, &y) in t.data.chunks(c).zip(&targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss += m + z.ln() - row[y];
            probs.extend(row.iter().map(|v| (v - m).exp() / z));
        }
        let n = targets.len().max(1) as f64;
        Ok(self.push(Op::CrossEntropy { logits, targets, probs }, Tensor::scalar(loss / n)))
    }

    /// `x * s` with `s` a one-element variable.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.numel() != 1 {
            return Err(shape_err("mul_scalar_var", tx, ts));
        }
        let k = ts.data[0];
        let value = Tensor { shape: tx.shape.clone(), data: tx.data.iter().map(|v| v * k).collect() };
        Ok(self.push(Op::MulScalarVar { x, s }, value))
    }

    /// Row sums of `[B,D]`, giving `[B]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() != 2 {
            return Err(Error::Shape { op: "row_sum", lhs: t.shape.clone(), rhs: vec![2] });
        }
        let data: Vec<f64> = t.data.chunks(t.shape[1].max(1)).map(|r| r.iter().sum()).collect();
        let data = if t.shape[1] == 0 { vec![0.0; t.shape[0]] } else { data };
        Ok(self.push(Op::RowSum(x), Tensor::vector(data)))
    }

    /// `sum_i w_i x_i` over all elements.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != w.len() {
            return Err(Error::Shape { op: "weighted_sum", lhs: t.shape.clone(), rhs: vec![w.len()] });
        }
        let s = dot(&t.data, &w);
        Ok(self.push(Op::WeightedSum { x, w }, Tensor::scalar(s)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Fails if any forward value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(v) = &n.value {
                if !v.is_finite() {
                    return Err(Error::Domain(format!("non-finite value at tape node {i} ({:?})", op_name(&n.op))));
                }
            }
        }
        Ok(())
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let t = self.value(out);
        if t.numel() != 1 {
            return Err(Error::Shape { op: "backward", lhs: t.shape.clone(), rhs: vec![1] });
        }
        self.backward_with(out, Tensor { shape: t.shape.clone(), data: vec![1.0] })
    }

    /// Back-propagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape != self.value(out).shape {
            return Err(shape_err("backward_with", &seed, self.value(out)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        let mut result = Gradients::empty(self.params.len());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let acc = |v: Var, d: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads[v.0] {
                Some(e) => e.add_assign(&d),
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    result.grads[id.0] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    let bt = transpose_raw(&tb.data, k, m);
                    let at = transpose_raw(&ta.data, n, k);
                    acc(*a, Tensor { shape: ta.shape.clone(), data: matmul_raw(&g.data, &bt, n, m, k) }, &mut grads);
                    acc(*b, Tensor { shape: tb.shape.clone(), data: matmul_raw(&at, &g.data, k, n, m) }, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (tx.shape[0], tx.shape[1], tw.shape[0]);
                    let dx = matmul_raw(&g.data, &tw.data, n, m, k);
                    let gt = transpose_raw(&g.data, n, m);
                    let dw = matmul_raw(&gt, &tx.data, m, n, k);
                    let mut db = vec![0.0; m];
                    for row in g.data.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*x, Tensor { shape: tx.shape.clone(), data: dx }, &mut grads);
                    acc(*w, Tensor { shape: tw.shape.clone(), data: dw }, &mut grads);
                    acc(*b, Tensor::vector(db), &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|v| -v).collect() };
                    acc(*a, g, &mut grads);
                    acc(*b, neg, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = g.data.iter().zip(&tb.data).map(|(g, y)| g * y).collect();
                    let db = g.data.iter().zip(&ta.data).map(|(g, x)| g * x).collect();
                    acc(*a, Tensor { shape: g.shape.clone(), data: da }, &mut grads);
                    acc(*b, Tensor { shape: g.shape.clone(), data: db }, &mut grads);
                }
                Op::Scale(x, k) => {
                    let d = g.data.iter().map(|v| v * k).collect();
                    acc(*x, Tensor { shape: g.shape.clone(), data: d }, &mut grads);
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let d = g.data.iter().zip(&tx.data).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    acc(*x, Tensor { shape: g.shape.clone(), data: d }, &mut grads);
                }
                Op::Exp(x) => {
                    let y = node.value.as_ref().expect("exp value");
                    let d = g.data.iter().zip(&y.data).map(|(g, y)| g * y).collect();
                    acc(*x, Tensor { shape: g.shape.clone(), data: d }, &mut grads);
                }
                Op::ClampMax(x, c) => {
                    let tx = self.value(*x);
                    let d = g.data.iter().zip(&tx.data).map(|(g, v)| if v < c { *g } else { 0.0 }).collect();
                    acc(*x, Tensor { shape: g.shape.clone(), data: d }, &mut grads);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let geom = ConvGeom::new(&tx.shape, &tw.shape, *stride, *pad)?;
                    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..geom.batch)
                        .into_par_iter()
                        .map(|bi| {
                            conv_backward_one(
                                &geom,
                                &tx.data[bi * geom.in_len()..(bi + 1) * geom.in_len()],
                                &tw.data,
                                &g.data[bi * geom.out_len()..(bi + 1) * geom.out_len()],
                            )
                        })
                        .collect();
                    let mut dx = Vec::with_capacity(tx.data.len());
                    let mut dw = vec![0.0; tw.data.len()];
                    let mut db = vec![0.0; geom.out_c];
                    for (px, pw, pb) in parts {
                        dx.extend(px);
                        dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
                        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
                    }
                    acc(*x, Tensor { shape: tx.shape.clone(), data: dx }, &mut grads);
                    acc(*w, Tensor { shape: tw.shape.clone(), data: dw }, &mut grads);
                    acc(*b, Tensor::vector(db), &mut grads);
                }
                Op::MaxPool2d { x, argmax } => {
                    let tx = self.value(*x);
                    let mut d = vec![0.0; tx.data.len()];
                    for (gv, &idx) in g.data.iter().zip(argmax) {
                        d[idx] += gv;
                    }
                    acc(*x, Tensor { shape: tx.shape.clone(), data: d }, &mut grads);
                }
                Op::GlobalAvgPool(x) => {
                    let tx = self.value(*x);
                    let hw = tx.shape[2] * tx.shape[3];
                    let d = g.data.iter().flat_map(|v| std::iter::repeat_n(v / hw as f64, hw)).collect();
                    acc(*x, Tensor { shape: tx.shape.clone(), data: d }, &mut grads);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let tg = self.value(*gamma);
                    let d = tg.numel();
                    let mut dx = Vec::with_capacity(g.data.len());
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (r, (grow, hrow)) in g.data.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(&tg.data).map(|(g, w)| g * w).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2 = dot(&dh, hrow);
                        for j in 0..d {
                            dx.push(inv_std[r] / d as f64 * (d as f64 * dh[j] - s1 - hrow[j] * s2));
                            dgamma[j] += grow[j] * hrow[j];
                            dbeta[j] += grow[j];
                        }
                    }
                    acc(*x, Tensor { shape: g.shape.clone(), data: dx }, &mut grads);
                    acc(*gamma, Tensor::vector(dgamma), &mut grads);
                    acc(*beta, Tensor::vector(dbeta), &mut grads);
                }
                Op::Concat(a, b) => {
                    let (d1, d2) = (self.value(*a).shape[1], self.value(*b).shape[1]);
                    let n = g.shape[0];
                    let mut ga = Vec::with_capacity(n * d1);
                    let mut gb = Vec::with_capacity(n * d2);
                    for row in g.data.chunks(d1 + d2) {
                        ga.extend_from_slice(&row[..d1]);
                        gb.extend_from_slice(&row[d1..]);
                    }
                    acc(*a, Tensor { shape: vec![n, d1], data: ga }, &mut grads);
                    acc(*b, Tensor { shape: vec![n, d2], data: gb }, &mut grads);
                }
                Op::L2Normalize { x, norms } => {
                    let y = node.value.as_ref().expect("normalize value");
                    let d = y.shape[1];
                    let mut dx = Vec::with_capacity(g.data.len());
                    for ((grow, yrow), n) in g.data.chunks(d).zip(y.data.chunks(d)).zip(norms) {
                        let p = dot(grow, yrow);
                        dx.extend(grow.iter().zip(yrow).map(|(g, y)| (g - y * p) / n));
                    }
                    acc(*x, Tensor { shape: y.shape.clone(), data: dx }, &mut grads);
                }
                Op::Transpose(x) => {
                    let (r, c) = (g.shape[0], g.shape[1]);
                    acc(*x, Tensor { shape: vec![c, r], data: transpose_raw(&g.data, r, c) }, &mut grads);
                }
                Op::EmbeddingMean { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.shape[1];
                    let mut dt = vec![0.0; tt.data.len()];
                    for (row, grow) in ids.iter().zip(g.data.chunks(d)) {
                        let k = 1.0 / row.len() as f64;
                        for &i in row {
                            for (o, v) in dt[i * d..(i + 1) * d].iter_mut().zip(grow) {
                                *o += v * k;
                            }
                        }
                    }
                    acc(*table, Tensor { shape: tt.shape.clone(), data: dt }, &mut grads);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let tl = self.value(*logits);
                    let c = tl.shape[1];
                    let k = g.data[0] / targets.len().max(1) as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * k).collect();
                    for (r, &y) in targets.iter().enumerate() {
                        d[r * c + y] -= k;
                    }
                    acc(*logits, Tensor { shape: tl.shape.clone(), data: d }, &mut grads);
                }
                Op::MulScalarVar { x, s } => {
                    let (tx, ts) = (self.value(*x), self.value(*s));
                    let k = ts.data[0];
                    let dx = g.data.iter().map(|v| v * k).collect();
                    let ds = dot(&g.data, &tx.data);
                    acc(*x, Tensor { shape: tx.shape.clone(), data: dx }, &mut grads);
                    acc(*s, Tensor { shape: ts.shape.clone(), data: vec![ds] }, &mut grads);
                }
                Op::RowSum(x) => {
                    let tx = self.value(*x);
                    let d = tx.shape[1];
                    let dx = g.data.iter().flat_map(|v| std::iter::repeat_n(*v, d)).collect();
                    acc(*x, Tensor { shape: tx.shape.clone(), data: dx }, &mut grads);
                }
                Op::WeightedSum { x, w } => {
                    let tx = self.value(*x);
                    let dx = w.iter().map(|w| w * g.data[0]).collect();
                    acc(*x, Tensor { shape: tx.shape.clone(), data: dx }, &mut grads);
                }
                Op::Sum(x) => {
                    let tx = self.value(*x);
                    acc(*x, Tensor { shape: tx.shape.clone(), data: vec![g.data[0]; tx.numel()] }, &mut grads);
                }
            }
        }
        Ok(result)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Exp(_) => "exp",
        Op::ClampMax(..) => "clamp_max",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool2d { .. } => "max_pool2d",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Concat(..) => "concat",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Transpose(_) => "transpose",
        Op::EmbeddingMean { .. } => "embedding_mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::MulScalarVar { .. } => "mul_scalar_var",
        Op::RowSum(_) => "row_sum",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Sum(_) => "sum",
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (h, wd, k) = (x[2], x[3], w[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() });
        }
        Ok(Self {
            batch: x[0],
            in_c: x[1],
            h,
            w: wd,
            out_c: w[0],
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn in_len(&self) -> usize {
        self.in_c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    /// Input index for output `(i, j)` and kernel offset `(ki, kj)`, if inside.
    #[inline]
    fn src(&self, i: usize, j: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let r = (i * self.stride + ki).checked_sub(self.pad)?;
        let c = (j * self.stride + kj).checked_sub(self.pad)?;
        (r < self.h && c < self.w).then_some((r, c))
    }
}

fn conv_forward_one(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (hw, ohw, kk) = (g.h * g.w, g.out_h * g.out_w, g.k * g.k);
    let mut out = vec![0.0; g.out_len()];
    for o in 0..g.out_c {
        let plane = &mut out[o * ohw..(o + 1) * ohw];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.in_c {
            let xin = &x[c * hw..(c + 1) * hw];
            let wk = &w[(o * g.in_c + c) * kk..(o * g.in_c + c + 1) * kk];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = wk[ki * g.k + kj];
                    for i in 0..g.out_h {
                        for j in 0..g.out_w {
                            if let Some((r, s)) = g.src(i, j, ki, kj) {
                                plane[i * g.out_w + j] += wv * xin[r * g.w + s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_one(g: &ConvGeom, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (hw, ohw, kk) = (g.h * g.w, g.out_h * g.out_w, g.k * g.k);
    let mut dx = vec![0.0; g.in_len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_c];
    for o in 0..g.out_c {
        let gplane = &dy[o * ohw..(o + 1) * ohw];
        db[o] = gplane.iter().sum();
        for c in 0..g.in_c {
            let xin = &x[c * hw..(c + 1) * hw];
            let dxin = &mut dx[c * hw..(c + 1) * hw];
            let base = (o * g.in_c + c) * kk;
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = w[base + ki * g.k + kj];
                    let mut acc = 0.0;
                    for i in 0..g.out_h {
                        for j in 0..g.out_w {
                            if let Some((r, s)) = g.src(i, j, ki, kj) {
                                let gv = gplane[i * g.out_w + j];
                                acc += gv * xin[r * g.w + s];
                                dxin[r * g.w + s] += gv * wv;
                            }
                        }
                    }
                    dw[base + ki * g.k + kj] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Cosine learning-rate schedule from `peak` at step 0 to `floor` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub floor: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step == 0 {
            return self.peak;
        }
        if step >= self.total_steps {
            return self.floor;
        }
        let p = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Adam optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: CosineSchedule,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, schedule: CosineSchedule) -> Self {
        let zeros = || params.values.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the learning rate used. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        if self.m.len() != params.len() {
            return Err(Error::Shape { op: "adam_step", lhs: vec![self.m.len()], rhs: vec![params.len()] });
        }
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, p) in params.values.iter_mut().enumerate() {
            let Some(g) = grads.grads.get(i).and_then(Option::as_ref) else { continue };
            if g.shape != p.shape {
                return Err(shape_err("adam_step", p, g));
            }
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(lr)
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub h: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { h: 1e-4, max_per_param: usize::MAX, floor: 1e-6 }
    }
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape { op: "gradcheck", lhs: v.shape.clone(), rhs: vec![1] });
    }
    Ok(v.data[0])
}

/// Compares analytic gradients of the scalar built by `f` against central
/// finite differences.
pub fn gradcheck<F>(store: &ParamStore, opts: GradcheckOptions, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    compare_with_finite_differences(store, &analytic, opts, f)
}

/// Finite-difference check of externally supplied gradients.
pub fn compare_with_finite_differences<F>(
    store: &ParamStore,
    analytic: &Gradients,
    opts: GradcheckOptions,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut work = store.clone();
    let mut report = GradcheckReport { max_rel_error: 0.0, worst_param: None, checked: 0 };
    for id in store.ids() {
        let n = store.get(id).numel();
        let stride = n.div_ceil(opts.max_per_param.min(n).max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = work.get(id).data[j];
            work.get_mut(id).data[j] = orig + opts.h;
            let up = eval_scalar(&work, &f)?;
            work.get_mut(id).data[j] = orig - opts.h;
            let down = eval_scalar(&work, &f)?;
            work.get_mut(id).data[j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let a = analytic.get(id).map_or(0.0, |g| g.data[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(format!("{}[{j}]", store.name(id)));
            }
        }
    }
    Ok(report)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ELSACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters plus a JSON configuration block and optional optimiser
/// state. Values are stored as little-endian f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f32s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    Ok(w.write_all(&bytes)?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0; n.checked_mul(4).ok_or_else(|| Error::Malformed("size overflow".into()))?];
    r.read_exact(&mut bytes).map_err(truncated)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

fn get_string(r: &mut impl Read, limit: usize) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > limit {
        return Err(Error::Malformed(format!("string of {len} bytes exceeds {limit}")));
    }
    let mut b = vec![0; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|e| Error::Malformed(e.to_string()))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Malformed("truncated file".into())
    } else {
        Error::Io(e)
    }
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u32(w, self.config_json.len() as u32)?;
        w.write_all(self.config_json.as_bytes())?;
        put_u32(w, self.params.len() as u32)?;
        for id in self.params.ids() {
            let name = self.params.name(id);
            let t = self.params.get(id);
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.shape.len() as u32)?;
            for &d in &t.shape {
                put_u64(w, d as u64)?;
            }
            put_f32s(w, &t.data)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(opt) => {
                w.write_all(&[1])?;
                let s = &opt.schedule;
                for x in [opt.beta1, opt.beta2, opt.eps, s.peak, s.floor] {
                    w.write_all(&x.to_le_bytes())?;
                }
                put_u64(w, s.total_steps)?;
                put_u64(w, opt.step)?;
                for t in opt.m.iter().chain(&opt.v) {
                    put_f32s(w, &t.data)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Malformed("not a checkpoint file".into()));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let config_json = get_string(r, 1 << 24)?;
        let n = get_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = get_string(r, 1 << 16)?;
            let ndim = get_u32(r)? as usize;
            if ndim > 8 {
                return Err(Error::Malformed(format!("{ndim} dimensions for {name}")));
            }
            let shape = (0..ndim).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Malformed("size overflow".into()))?;
            let data = get_f32s(r, numel)?;
            params.add(name, Tensor { shape, data })?;
        }
        let mut flag = [0; 1];
        r.read_exact(&mut flag).map_err(truncated)?;
        let optimizer = match flag[0] {
            0 => None,
            1 => {
                let mut f = [0.0; 5];
                for x in &mut f {
                    let mut b = [0; 8];
                    r.read_exact(&mut b).map_err(truncated)?;
                    *x = f64::from_le_bytes(b);
                }
                let total_steps = get_u64(r)?;
                let step = get_u64(r)?;
                let read_set = |r: &mut dyn Read| -> Result<Vec<Tensor>> {
                    params
                        .values
                        .iter()
                        .map(|t| Ok(Tensor { shape: t.shape.clone(), data: get_f32s(&mut &mut *r, t.numel())? }))
                        .collect()
                };
                let m = read_set(r)?;
                let v = read_set(r)?;
                Some(Adam {
                    beta1: f[0],
                    beta2: f[1],
                    eps: f[2],
                    schedule: CosineSchedule { peak: f[3], floor: f[4], total_steps },
                    step,
                    m,
                    v,
                })
            }
            other => return Err(Error::Malformed(format!("bad optimizer flag {other}"))),
        };
        Ok(Self { config_json, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Parameters rounded through f32, exactly as they would load from disk.
    pub fn round_trip_params(params: &ParamStore) -> ParamStore {
        let mut out = params.clone();
        for t in &mut out.values {
            t.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        out
    }
}
