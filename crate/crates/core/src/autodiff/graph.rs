//! Tape-style computation graph.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. Intermediate values are held in
//! `f64`; parameters and all tensors crossing the graph boundary are `f32`.
//! A graph is built fresh for every step and dropped afterwards.

use std::collections::HashMap;

use super::kernels;
use super::params::ParamStore;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::rng::{Rng, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { a: Var, s: f64 },
    Gelu { a: Var },
    Relu { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<f64> },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    TransposeLast2 { a: Var },
    Narrow { a: Var, start: usize, len: usize },
    SliceToken { a: Var, index: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    MeanLast { a: Var },
    SumAll { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy {
        a: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    track: bool,
    params: HashMap<String, Var>,
}

impl Graph {
    /// Graph that records operations for a backward pass.
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            track: true,
            params: HashMap::new(),
        }
    }

    /// Evaluation-only graph: nothing requires a gradient.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            mode: Mode::Eval,
            track: false,
            params: HashMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            dims,
            value,
            op,
            requires_grad: requires_grad && self.track,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, name: &'static str, dims: Vec<usize>, value: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: name.to_string() });
        }
        Ok(self.push(dims, value, op, rg))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a node, rounded to `f32` storage.
    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.dims.clone(), n.value.iter().map(|&x| x as f32).collect())
            .expect("graph node dims are consistent")
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.dims().to_vec(), value, Op::Leaf, false)
    }

    /// Leaf that gradients are tracked for (when the graph tracks at all).
    pub fn input(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.dims().to_vec(), value, Op::Leaf, true)
    }

    /// Leaf bound to a named store entry. Repeated lookups reuse the node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let trainable = store.is_trainable(name);
        let v = if trainable { self.input(t) } else { self.constant(t) };
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ── primitives ─────────────────────────────────────────────────────

    /// `a @ b`. `a: [.., m, k]`; `b` is either `[k, n]` (shared across the
    /// leading axes of `a`) or `[.., k, n]` with the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        if ad.len() < 2 || bd.len() < 2 {
            return Err(Error::dim("matmul", format!("{ad:?} x {bd:?} (need rank >= 2)")));
        }
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (k2, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{ad:?} x {bd:?}")));
        }
        let lead = &ad[..ad.len() - 2];
        let shared_rhs = bd.len() == 2;
        if !shared_rhs && lead != &bd[..bd.len() - 2] {
            return Err(Error::dim("matmul", format!("{ad:?} x {bd:?} (batch axes differ)")));
        }
        let batch = numel(lead);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.node(a).value;
            let bv = &self.node(b).value;
            if shared_rhs {
                kernels::mm(av, bv, batch * m, k, n, &mut out);
            } else {
                for t in 0..batch {
                    kernels::mm(
                        &av[t * m * k..(t + 1) * m * k],
                        &bv[t * k * n..(t + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[t * m * n..(t + 1) * m * n],
                    );
                }
            }
        }
        let mut dims = lead.to_vec();
        dims.extend([m, n]);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.checked(
            "matmul",
            dims,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        )
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let ad = self.dims(a);
        let bd = self.dims(b);
        if bd.len() > ad.len() || ad[ad.len() - bd.len()..] != *bd {
            return Err(Error::dim(op, format!("{ad:?} with {bd:?} (rhs must be a trailing suffix)")));
        }
        Ok(())
    }

    /// Elementwise `a + b`, with `b` broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let w = bv.len();
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x + bv[i % w]).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.checked("add", dims, out, Op::Add { a, b }, rg)
    }

    /// Elementwise `a * b`, with `b` broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let w = bv.len();
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x * bv[i % w]).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.checked("mul", dims, out, Op::Mul { a, b }, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.node(a).value.iter().map(|x| x * s).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.requires_grad(a);
        self.checked("mul_scalar", dims, out, Op::MulScalar { a, s }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.node(a).value.iter().map(|&x| kernels::gelu(x)).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.requires_grad(a);
        self.checked("gelu", dims, out, Op::Gelu { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.node(a).value.iter().map(|&x| x.max(0.0)).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.requires_grad(a);
        self.checked("relu", dims, out, Op::Relu { a }, rg)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let w = *dims.last().ok_or_else(|| Error::dim("softmax_lastdim", "scalar input"))?;
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(w) {
            kernels::softmax_in_place(row);
        }
        let rg = self.requires_grad(a);
        self.checked("softmax_lastdim", dims, out, Op::Softmax { a }, rg)
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis, without affine terms.
    pub fn layer_norm_lastdim(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let w = *dims.last().ok_or_else(|| Error::dim("layer_norm_lastdim", "scalar input"))?;
        let mut out = self.node(a).value.clone();
        let mut rstd = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.requires_grad(a);
        self.checked("layer_norm_lastdim", dims, out, Op::LayerNorm { a, rstd }, rg)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        if numel(dims) != numel(self.dims(a)) || dims.contains(&0) {
            return Err(Error::dim("reshape", format!("{:?} -> {dims:?}", self.dims(a))));
        }
        let out = self.node(a).value.clone();
        let rg = self.requires_grad(a);
        Ok(self.push(dims.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let mut seen = vec![false; dims.len()];
        if axes.len() != dims.len() || axes.iter().any(|&x| x >= dims.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", format!("{dims:?} by {axes:?}")));
        }
        let (out, odims) = kernels::permute(&self.node(a).value, &dims, axes);
        let rg = self.requires_grad(a);
        Ok(self.push(
            odims,
            out,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if dims.len() < 2 {
            return Err(Error::dim("transpose_last2", format!("{dims:?}")));
        }
        let mut axes: Vec<usize> = (0..dims.len()).collect();
        axes.swap(dims.len() - 2, dims.len() - 1);
        let (out, odims) = kernels::permute(&self.node(a).value, &dims, &axes);
        let rg = self.requires_grad(a);
        Ok(self.push(odims, out, Op::TransposeLast2 { a }, rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn narrow_lastdim(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let mut dims = self.dims(a).to_vec();
        let w = *dims.last().ok_or_else(|| Error::dim("narrow_lastdim", "scalar input"))?;
        if len == 0 || start + len > w {
            return Err(Error::dim("narrow_lastdim", format!("{dims:?} [{start}..{})", start + len)));
        }
        let out = self
            .node(a)
            .value
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        *dims.last_mut().unwrap() = len;
        let rg = self.requires_grad(a);
        Ok(self.push(dims, out, Op::Narrow { a, start, len }, rg))
    }

    /// Gathers entries `rows` along the leading axis: `[B, ..] -> [rows.len(), ..]`.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if dims.is_empty() || rows.iter().any(|&r| r >= dims[0]) {
            return Err(Error::dim("select_rows", format!("{dims:?} rows {rows:?}")));
        }
        let w = numel(&dims[1..]);
        let v = &self.node(a).value;
        let out = rows.iter().flat_map(|&r| v[r * w..(r + 1) * w].iter().copied()).collect();
        let mut odims = dims;
        odims[0] = rows.len();
        let rg = self.requires_grad(a);
        Ok(self.push(odims, out, Op::SelectRows { a, rows: rows.to_vec() }, rg))
    }

    /// Picks token `index` along the second-to-last axis: `[.., n, d] -> [.., d]`.
    pub fn slice_token(&mut self, a: Var, index: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if dims.len() < 2 || index >= dims[dims.len() - 2] {
            return Err(Error::dim("slice_token", format!("{dims:?} token {index}")));
        }
        let (n, d) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let out = self
            .node(a)
            .value
            .chunks(n * d)
            .flat_map(|blk| blk[index * d..(index + 1) * d].iter().copied())
            .collect();
        let mut odims = dims[..dims.len() - 2].to_vec();
        odims.push(d);
        let rg = self.requires_grad(a);
        Ok(self.push(odims, out, Op::SliceToken { a, index }, rg))
    }

    pub fn mean_lastdim(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let w = *dims.last().ok_or_else(|| Error::dim("mean_lastdim", "scalar input"))?;
        let out = self
            .node(a)
            .value
            .chunks(w)
            .map(|r| r.iter().sum::<f64>() / w as f64)
            .collect();
        let rg = self.requires_grad(a);
        self.checked("mean_lastdim", dims[..dims.len() - 1].to_vec(), out, Op::MeanLast { a }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a).value.iter().sum::<f64>();
        let rg = self.requires_grad(a);
        self.checked("sum_all", Vec::new(), vec![s], Op::SumAll { a }, rg)
    }

    /// Inverted dropout. In eval mode (or with `p == 0`) returns `a` itself.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut StreamRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let len = self.node(a).value.len();
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let dims = self.dims(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(dims, out, Op::Dropout { a, mask }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` (or `[K]`) against class
    /// indices. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let dims = self.dims(logits).to_vec();
        let (b, k) = match dims.as_slice() {
            [k] => (1, *k),
            [b, k] => (*b, *k),
            _ => return Err(Error::dim("cross_entropy", format!("logits {dims:?}"))),
        };
        if targets.len() != b {
            return Err(Error::dim(
                "cross_entropy",
                format!("{b} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::dim("cross_entropy", format!("target {t} >= {k} classes")));
        }
        let mut probs = self.node(logits).value.clone();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[t];
            kernels::softmax_in_place(row);
        }
        loss /= b as f64;
        let rg = self.requires_grad(logits);
        self.checked(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                a: logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Gradients of a scalar with respect to every node that requires one.
    fn sweep(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                ln.dims
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !ln.requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let len = self.node(v).value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let av = &self.node(a).value;
                let bv = &self.node(b).value;
                self.accumulate(grads, a, |ga| {
                    if shared_rhs {
                        kernels::mm_nt_acc(g, bv, batch * m, n, k, ga);
                    } else {
                        for t in 0..batch {
                            kernels::mm_nt_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut ga[t * m * k..(t + 1) * m * k],
                            );
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    if shared_rhs {
                        kernels::mm_tn_acc(av, g, batch * m, k, n, gb);
                    } else {
                        for t in 0..batch {
                            kernels::mm_tn_acc(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut gb[t * k * n..(t + 1) * k * n],
                            );
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    let w = gb.len();
                    for (j, y) in g.iter().enumerate() {
                        gb[j % w] += y;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let av = &self.node(a).value;
                let bv = &self.node(b).value;
                let w = bv.len();
                self.accumulate(grads, a, |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * bv[j % w];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for (j, y) in g.iter().enumerate() {
                        gb[j % w] += y * av[j];
                    }
                });
            }
            &Op::MulScalar { a, s } => self.accumulate(grads, a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y * s;
                }
            }),
            &Op::Gelu { a } => {
                let av = &self.node(a).value;
                self.accumulate(grads, a, |ga| {
                    for ((x, y), &u) in ga.iter_mut().zip(g).zip(av) {
                        *x += y * kernels::gelu_grad(u);
                    }
                });
            }
            &Op::Relu { a } => {
                let av = &self.node(a).value;
                self.accumulate(grads, a, |ga| {
                    for ((x, y), &u) in ga.iter_mut().zip(g).zip(av) {
                        if u > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            &Op::Softmax { a } => {
                let w = *node.dims.last().unwrap();
                let yv = &node.value;
                self.accumulate(grads, a, |ga| {
                    for ((gx, gy), y) in ga.chunks_mut(w).zip(g.chunks(w)).zip(yv.chunks(w)) {
                        let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                        for j in 0..w {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, rstd } => {
                let w = *node.dims.last().unwrap();
                let yv = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for (((gx, gy), y), r) in ga
                        .chunks_mut(w)
                        .zip(g.chunks(w))
                        .zip(yv.chunks(w))
                        .zip(rstd)
                    {
                        let mg = gy.iter().sum::<f64>() / w as f64;
                        let mgy = gy.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / w as f64;
                        for j in 0..w {
                            gx[j] += r * (gy[j] - mg - y[j] * mgy);
                        }
                    }
                });
            }
            &Op::Reshape { a } => self.accumulate(grads, a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }),
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (back, _) = kernels::permute(g, &node.dims, &inv);
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(&back) {
                        *x += y;
                    }
                });
            }
            &Op::TransposeLast2 { a } => {
                let r = node.dims.len();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 2, r - 1);
                let (back, _) = kernels::permute(g, &node.dims, &axes);
                self.accumulate(grads, a, |ga| {
                    for (x, y) in ga.iter_mut().zip(&back) {
                        *x += y;
                    }
                });
            }
            &Op::Narrow { a, start, len } => {
                let w = *self.dims(a).last().unwrap();
                self.accumulate(grads, a, |ga| {
                    for (row, gy) in ga.chunks_mut(w).zip(g.chunks(len)) {
                        for (x, y) in row[start..start + len].iter_mut().zip(gy) {
                            *x += y;
                        }
                    }
                });
            }
            &Op::SliceToken { a, index } => {
                let ad = self.dims(a);
                let (n, d) = (ad[ad.len() - 2], ad[ad.len() - 1]);
                self.accumulate(grads, a, |ga| {
                    for (blk, gy) in ga.chunks_mut(n * d).zip(g.chunks(d)) {
                        for (x, y) in blk[index * d..(index + 1) * d].iter_mut().zip(gy) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SelectRows { a, rows } => {
                let w = numel(&self.dims(*a)[1..]);
                self.accumulate(grads, *a, |ga| {
                    for (&r, gy) in rows.iter().zip(g.chunks(w)) {
                        for (x, y) in ga[r * w..(r + 1) * w].iter_mut().zip(gy) {
                            *x += y;
                        }
                    }
                });
            }
            &Op::MeanLast { a } => {
                let w = *self.dims(a).last().unwrap();
                self.accumulate(grads, a, |ga| {
                    for (row, y) in ga.chunks_mut(w).zip(g) {
                        for x in row {
                            *x += y / w as f64;
                        }
                    }
                });
            }
            &Op::SumAll { a } => self.accumulate(grads, a, |ga| {
                for x in ga {
                    *x += g[0];
                }
            }),
            Op::Dropout { a, mask } => self.accumulate(grads, *a, |ga| {
                for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += y * m;
                }
            }),
            Op::CrossEntropy { a, targets, probs } => {
                let k = *self.dims(*a).last().unwrap();
                let scale = g[0] / targets.len() as f64;
                self.accumulate(grads, *a, |ga| {
                    for (r, (row, &t)) in probs.chunks(k).zip(targets).enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            ga[r * k + j] += scale * (row[j] - onehot);
                        }
                    }
                });
            }
        }
    }

    /// Backpropagates from a scalar loss and accumulates into the trainable
    /// entries of `store` that took part in the graph. Frozen entries are
    /// never touched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.sweep(loss)?;
        for (name, &v) in &self.params {
            if let Some(Some(g)) = grads.get(v.0) {
                store.accumulate_grad(name, g);
            }
        }
        Ok(())
    }

    /// Gradients of a scalar with respect to arbitrary nodes (`None` when
    /// the node does not influence the loss or is untracked).
    pub fn grad_wrt(&self, loss: Var, vars: &[Var]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut grads = self.sweep(loss)?;
        Ok(vars
            .iter()
            .map(|v| grads.get_mut(v.0).and_then(Option::take))
            .collect())
    }
}
