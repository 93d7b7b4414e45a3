//! Eager computation graph with reverse-mode differentiation.
//!
//! Every op computes its value immediately. When at least one input
//! requires a gradient the op is also recorded, together with whatever it
//! needs for the backward pass; otherwise the node is stored as a plain
//! constant and nothing is retained.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;

use super::kernels::{self, dot};
use super::tensor::{ParameterSet, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;

/// Additive attention-mask value for hidden positions.
pub const MASK_NEG: f32 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<String>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geo: AttnShape,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<f32>,
        smoothing: f32,
        probs: Vec<f32>,
        total_weight: f32,
    },
    MeanPool {
        x: Var,
        mask: Vec<bool>,
        batch: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Sum {
        a: Var,
    },
    Dropout {
        a: Var,
        keep: Vec<f32>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_name: IndexMap<String, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Adds every gradient into the matching parameter's grad buffer.
    pub fn accumulate_into(&self, params: &mut ParameterSet) -> Result<()> {
        for (name, g) in &self.by_name {
            params.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Tape of eagerly evaluated nodes.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    params: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(mismatch(op, shape, &[])),
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn slot(dst: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    /// A recording graph: ops touching trainable parameters are taped.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
        }
    }

    /// A graph that never records; parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `len`. Only valid on inference
    /// graphs, where later nodes are never referenced by earlier ones.
    pub fn truncate(&mut self, len: usize) {
        assert!(!self.record, "truncate is only supported on inference graphs");
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Snapshot of a node's value as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), (*n.value).clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf { param: None } };
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant input. Non-finite values are rejected.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        self.constant_tensor(&t)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Var> {
        if !t.values().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "constant" });
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_values(),
            requires_grad: false,
            op: Op::Leaf { param: None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Binds a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?;
        let requires_grad = self.record && t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_values(),
            requires_grad,
            op: Op::Leaf {
                param: requires_grad.then(|| name.to_string()),
            },
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a[m,k] · b[k,n]`, or `a[m,k] · b[n,k]ᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (r, c) = dims2("matmul", self.shape(b))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            kernels::matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        } else {
            kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        }
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x[n,in] · w[in,out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = dims2("linear", self.shape(x))?;
        let (win, dout) = dims2("linear", self.shape(w))?;
        if din != win {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(mismatch("linear", self.shape(w), self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(self.value(x), self.value(w), &mut out, n, din, dout);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(vec![n, dout], out, &inputs, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, b], Op::Add { a, b }))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.shape(row) != [d] {
            return Err(mismatch("add_broadcast", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(d.max(1)) {
            chunk.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, row], Op::AddRow { a, row }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Scale { a, factor }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Relu { a }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = *self.shape(a).last().ok_or_else(|| mismatch("softmax", &[], &[]))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            kernels::softmax_row(row);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Softmax { a }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims2("layer_norm", self.shape(x))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * r * g[j] + b[j];
            }
        }
        Ok(self.push(vec![n, d], out, &[x, gain, bias], Op::LayerNorm { x, gain, bias, rstd }))
    }

    /// Rows of `table[v,d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = dims2("embedding_lookup", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(mismatch("embedding_lookup", &[v, d], &[bad as usize]));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i as usize * d..(i as usize + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Selects (and possibly repeats) rows of a 2-D node.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = dims2("gather_rows", self.shape(a))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(mismatch("gather_rows", &[n, d], &[bad]));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&av[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            vec![rows.len(), d],
            out,
            &[a],
            Op::GatherRows { a, rows: rows.to_vec() },
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch·q_len, dim]`, `k` and `v` are `[batch·k_len, dim]`,
    /// and `mask` is `[batch, q_len, k_len]` holding 0 for visible and
    /// [`MASK_NEG`] for hidden keys. Hidden keys receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[f32], geo: AttnShape) -> Result<Var> {
        let AttnShape {
            batch,
            q_len,
            k_len,
            heads,
        } = geo;
        let (qr, dim) = dims2("scaled_dot_attention", self.shape(q))?;
        let (kr, kd) = dims2("scaled_dot_attention", self.shape(k))?;
        if qr != batch * q_len || kr != batch * k_len || kd != dim || self.shape(v) != self.shape(k) {
            return Err(mismatch("scaled_dot_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(mismatch("scaled_dot_attention", &[dim], &[heads]));
        }
        if mask.len() != batch * q_len * k_len {
            return Err(mismatch("scaled_dot_attention", &[batch, q_len, k_len], &[mask.len()]));
        }
        if mask.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite {
                op: "scaled_dot_attention",
            });
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0f32; batch * heads * q_len * k_len];
        let mut out = vec![0.0f32; qr * dim];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qv[(b * q_len + i) * dim + off..][..dh];
                    let mrow = &mask[(b * q_len + i) * k_len..][..k_len];
                    let prow = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let mut any_visible = false;
                    for j in 0..k_len {
                        let krow = &kv[(b * k_len + j) * dim + off..][..dh];
                        prow[j] = dot(qrow, krow) * scale + mrow[j];
                        any_visible |= mrow[j] > MASK_NEG * 0.5;
                    }
                    if !any_visible {
                        prow.iter_mut().for_each(|p| *p = 0.0);
                        continue;
                    }
                    kernels::softmax_row(prow);
                    for j in 0..k_len {
                        if mrow[j] <= MASK_NEG * 0.5 {
                            prow[j] = 0.0;
                        }
                    }
                    let orow = &mut out[(b * q_len + i) * dim + off..][..dh];
                    for j in 0..k_len {
                        let p = prow[j];
                        if p != 0.0 {
                            kernels::axpy(p, &vv[(b * k_len + j) * dim + off..][..dh], orow);
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![qr, dim], out, &[q, k, v], Op::Attention { q, k, v, geo, probs }))
    }

    /// Weighted mean token cross-entropy with label smoothing.
    ///
    /// The smoothed target puts `1 - smoothing` on the reference and spreads
    /// `smoothing` uniformly over the whole vocabulary. Rows with weight 0
    /// are ignored; if every weight is 0 the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[f32], smoothing: f32) -> Result<Var> {
        let (n, vocab) = dims2("cross_entropy_with_label_smoothing", self.shape(logits))?;
        if targets.len() != n || weights.len() != n {
            return Err(mismatch(
                "cross_entropy_with_label_smoothing",
                &[n, vocab],
                &[targets.len(), weights.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(mismatch(
                "cross_entropy_with_label_smoothing",
                &[n, vocab],
                &[bad as usize],
            ));
        }
        if !(0.0..1.0).contains(&smoothing) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(
                "cross_entropy: smoothing must be in [0,1), weights >= 0",
            ));
        }
        let lv = self.value(logits);
        let total_weight: f32 = weights.iter().sum();
        let mut probs = vec![0.0f32; n * vocab];
        let mut loss = 0.0f64;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &lv[i * vocab..(i + 1) * vocab];
            let lse = kernels::log_sum_exp(row);
            let nll_target = (lse - row[targets[i] as usize]) as f64;
            let nll_mean = if smoothing > 0.0 {
                row.iter().map(|&x| (lse - x) as f64).sum::<f64>() / vocab as f64
            } else {
                0.0
            };
            let l = (1.0 - smoothing as f64) * nll_target + smoothing as f64 * nll_mean;
            loss += weights[i] as f64 * l;
            let prow = &mut probs[i * vocab..(i + 1) * vocab];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = if total_weight > 0.0 {
            (loss / total_weight as f64) as f32
        } else {
            0.0
        };
        Ok(self.push(
            vec![1],
            vec![value],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                probs,
                total_weight,
            },
        ))
    }

    /// Mean over valid positions: `x[batch·len, d]` → `[batch, d]`.
    pub fn mean_pool_masked(&mut self, x: Var, mask: &[bool], batch: usize) -> Result<Var> {
        let (rows, d) = dims2("mean_pool_masked", self.shape(x))?;
        if batch == 0 || rows % batch != 0 || mask.len() != rows {
            return Err(mismatch("mean_pool_masked", &[rows, d], &[batch, mask.len()]));
        }
        let len = rows / batch;
        let xv = self.value(x);
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let count = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f32;
            let orow = &mut out[b * d..(b + 1) * d];
            for t in 0..len {
                if mask[b * len + t] {
                    kernels::axpy(inv, &xv[(b * len + t) * d..][..d], orow);
                }
            }
        }
        Ok(self.push(
            vec![batch, d],
            out,
            &[x],
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
                batch,
            },
        ))
    }

    /// Concatenation along the last axis of 2-D nodes with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let (n, _) = dims2("concat", self.shape(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat", self.shape(p))?;
            if r != n {
                return Err(mismatch("concat", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![n, total], out, parts, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        Ok(self.push(vec![1], vec![s as f32], &[a], Op::Sum { a }))
    }

    /// Inverted dropout. A rate of 0 returns the input unchanged.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f32, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::invalid("dropout rate must be < 1"));
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f32> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { scale })
            .collect();
        let out = self.value(a).iter().zip(&keep).map(|(x, k)| x * k).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Dropout { a, keep }))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// reachable parameter; the graph itself is left intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        if !node.requires_grad || matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::NoGraph);
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        let mut leaves: Vec<(usize, Vec<f32>)> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            if let Op::Leaf { param: Some(_) } = node.op {
                leaves.push((idx, g));
            }
        }
        leaves.sort_by_key(|(idx, _)| *idx);
        for (idx, g) in leaves {
            if let Op::Leaf { param: Some(name) } = &self.nodes[idx].op {
                out.by_name.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2("matmul", self.shape(*a))?;
                let n = node.shape[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = slot(&mut grads[a.0], m * k);
                    if *trans_b {
                        // b is [n,k]: dA = g · b
                        kernels::matmul_acc(g, bv, ga, m, n, k);
                    } else {
                        // b is [k,n]: dA = g · bᵀ
                        kernels::matmul_nt_acc(g, bv, ga, m, n, k);
                    }
                }
                if self.wants(*b) {
                    let gb = slot(&mut grads[b.0], k * n);
                    if *trans_b {
                        // dB[n,k] = gᵀ · a
                        kernels::matmul_tn_acc(g, av, gb, m, n, k);
                    } else {
                        kernels::matmul_tn_acc(av, g, gb, m, k, n);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = dims2("linear", self.shape(*x))?;
                let dout = node.shape[1];
                if self.wants(*x) {
                    let gx = slot(&mut grads[x.0], n * din);
                    kernels::matmul_nt_acc(g, self.value(*w), gx, n, dout, din);
                }
                if self.wants(*w) {
                    let gw = slot(&mut grads[w.0], din * dout);
                    kernels::matmul_tn_acc(self.value(*x), g, gw, n, din, dout);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = slot(&mut grads[b.0], dout);
                        for row in g.chunks_exact(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*row) {
                    let d = self.shape(*row)[0];
                    let gr = slot(&mut grads[row.0], d);
                    for chunk in g.chunks_exact(d) {
                        gr.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let ga = slot(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let gb = slot(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                let ga = slot(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
            }
            Op::Relu { a } => {
                let av = self.value(*a);
                let ga = slot(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                let ga = slot(&mut grads[a.0], g.len());
                for ((yr, gr), out) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(ga.chunks_exact_mut(d)) {
                    let s = dot(yr, gr);
                    for j in 0..d {
                        out[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let (n, d) = dims2("layer_norm", self.shape(*x))?;
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut xhat = vec![0.0f32; d];
                let mut dxhat = vec![0.0f32; d];
                let want_x = self.wants(*x);
                let want_g = self.wants(*gain);
                let want_b = self.wants(*bias);
                let mut gg = vec![0.0f32; if want_g { d } else { 0 }];
                let mut gbias = vec![0.0f32; if want_b { d } else { 0 }];
                let mut gx = if want_x {
                    grads[x.0].take().unwrap_or_else(|| vec![0.0; n * d])
                } else {
                    Vec::new()
                };
                for i in 0..n {
                    let row = &xv[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f32>() / d as f32;
                    let r = rstd[i];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * r;
                        dxhat[j] = grow[j] * gv[j];
                    }
                    if want_g {
                        for j in 0..d {
                            gg[j] += grow[j] * xhat[j];
                        }
                    }
                    if want_b {
                        for j in 0..d {
                            gbias[j] += grow[j];
                        }
                    }
                    if want_x {
                        let mean_dx = dxhat.iter().sum::<f32>() / d as f32;
                        let mean_dxx = dot(&dxhat, &xhat) / d as f32;
                        let out = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            out[j] += r * (dxhat[j] - mean_dx - xhat[j] * mean_dxx);
                        }
                    }
                }
                if want_x {
                    grads[x.0] = Some(gx);
                }
                if want_g {
                    add_into(&mut grads[gain.0], &gg);
                }
                if want_b {
                    add_into(&mut grads[bias.0], &gbias);
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = dims2("embedding_lookup", self.shape(*table))?;
                let gt = slot(&mut grads[table.0], v * d);
                for (row, &id) in g.chunks_exact(d).zip(ids) {
                    kernels::axpy(1.0, row, &mut gt[id as usize * d..(id as usize + 1) * d]);
                }
            }
            Op::GatherRows { a, rows } => {
                let (n, d) = dims2("gather_rows", self.shape(*a))?;
                let ga = slot(&mut grads[a.0], n * d);
                for (row, &r) in g.chunks_exact(d).zip(rows) {
                    kernels::axpy(1.0, row, &mut ga[r * d..(r + 1) * d]);
                }
            }
            Op::Attention { q, k, v, geo, probs } => self.attention_backward(*q, *k, *v, geo, probs, g, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                probs,
                total_weight,
            } => {
                if *total_weight > 0.0 {
                    let (n, vocab) = dims2("cross_entropy", self.shape(*logits))?;
                    let gl = slot(&mut grads[logits.0], n * vocab);
                    let uniform = smoothing / vocab as f32;
                    for i in 0..n {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let coef = g[0] * weights[i] / total_weight;
                        let prow = &probs[i * vocab..(i + 1) * vocab];
                        let grow = &mut gl[i * vocab..(i + 1) * vocab];
                        for j in 0..vocab {
                            grow[j] += coef * (prow[j] - uniform);
                        }
                        grow[targets[i] as usize] -= coef * (1.0 - smoothing);
                    }
                }
            }
            Op::MeanPool { x, mask, batch } => {
                let (rows, d) = dims2("mean_pool_masked", self.shape(*x))?;
                let len = rows / batch;
                let gx = slot(&mut grads[x.0], rows * d);
                for b in 0..*batch {
                    let count = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
                    if count == 0 {
                        continue;
                    }
                    let inv = 1.0 / count as f32;
                    let grow = &g[b * d..(b + 1) * d];
                    for t in 0..len {
                        if mask[b * len + t] {
                            kernels::axpy(inv, grow, &mut gx[(b * len + t) * d..][..d]);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.shape[1];
                let n = node.shape[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let gp = slot(&mut grads[p.0], n * w);
                        for i in 0..n {
                            let src = &g[i * total + off..i * total + off + w];
                            gp[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                        }
                    }
                    off += w;
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                let ga = slot(&mut grads[a.0], n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Dropout { a, keep } => {
                let ga = slot(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * keep[i];
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geo: &AttnShape,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let AttnShape {
            batch,
            q_len,
            k_len,
            heads,
        } = *geo;
        let dim = self.shape(q)[1];
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0f32; if self.wants(q) { qv.len() } else { 0 }];
        let mut gk = vec![0.0f32; if self.wants(k) { kv.len() } else { 0 }];
        let mut gv = vec![0.0f32; if self.wants(v) { vv.len() } else { 0 }];
        let mut dp = vec![0.0f32; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let prow = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let grow = &g[(b * q_len + i) * dim + off..][..dh];
                    for j in 0..k_len {
                        dp[j] = if prow[j] != 0.0 {
                            dot(grow, &vv[(b * k_len + j) * dim + off..][..dh])
                        } else {
                            0.0
                        };
                    }
                    let s = dot(prow, &dp);
                    for j in 0..k_len {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        if !gv.is_empty() {
                            kernels::axpy(p, grow, &mut gv[(b * k_len + j) * dim + off..][..dh]);
                        }
                        let ds = p * (dp[j] - s) * scale;
                        if !gq.is_empty() {
                            kernels::axpy(
                                ds,
                                &kv[(b * k_len + j) * dim + off..][..dh],
                                &mut gq[(b * q_len + i) * dim + off..][..dh],
                            );
                        }
                        if !gk.is_empty() {
                            kernels::axpy(
                                ds,
                                &qv[(b * q_len + i) * dim + off..][..dh],
                                &mut gk[(b * k_len + j) * dim + off..][..dh],
                            );
                        }
                    }
                }
            }
        }
        if !gq.is_empty() {
            add_into(&mut grads[q.0], &gq);
        }
        if !gk.is_empty() {
            add_into(&mut grads[k.0], &gk);
        }
        if !gv.is_empty() {
            add_into(&mut grads[v.0], &gv);
        }
        Ok(())
    }
}
