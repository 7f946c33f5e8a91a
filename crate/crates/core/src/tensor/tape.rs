//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in execution order, so the node list
//! is already topologically sorted; [`Tape::gradients`] walks it backwards
//! once. Parameters enter the tape as leaves tagged with their [`ParamId`]
//! and [`Tape::backward`] adds the leaf adjoints into the owning store.

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{ensure_finite, finite, matmul_dims, ParamId, ParamStore, Tensor};
use crate::{Error, Result};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: usize,
    },
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    Mixout {
        w: usize,
        masked_rows: Vec<bool>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Single-threaded record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn permute_data(
    data: &[f64],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Shared Mixout kernel. `masked(i, j)` says whether entry `(i, j)` belongs
/// to a dropped input neuron. The form `w0 + scale * (w - w0)` makes
/// `w == w0` an exact fixed point.
pub(crate) fn mixout_values(
    w: &[f64],
    w0: &[f64],
    cols: usize,
    masked: impl Fn(usize, usize) -> bool,
    scale: f64,
) -> Vec<f64> {
    w.iter()
        .zip(w0)
        .enumerate()
        .map(|(k, (&wi, &w0i))| {
            if masked(k / cols, k % cols) {
                w0i
            } else {
                w0i + scale * (wi - w0i)
            }
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Records a leaf. Leaves receive gradients but do not propagate them.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values nobody will read gradients of.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    /// Binds a stored parameter as a leaf; repeated binds return the same
    /// variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).value().clone());
        self.nodes[v.index].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (r, k, c) = matmul_dims(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let mut out = vec![0.0; r * c];
        gemm_nn(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
            r,
            k,
            c,
        );
        let t = finite(vec![r, c], out, "matmul")?;
        Ok(self.push(t, Op::MatMul(ia, ib)))
    }

    /// Batched product of `[n, r, k]` with `[n, k, c]`, or with `[n, c, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let bad = || Error::ShapeMismatch {
            op: "batch_matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (n, r, k) = (sa[0], sa[1], sa[2]);
        let c = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let (ad, bd) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; n * r * c];
        for i in 0..n {
            let a_i = &ad[i * r * k..(i + 1) * r * k];
            let b_i = &bd[i * k * c..(i + 1) * k * c];
            let o_i = &mut out[i * r * c..(i + 1) * r * c];
            if trans_b {
                gemm_nt(a_i, b_i, o_i, r, k, c);
            } else {
                gemm_nn(a_i, b_i, o_i, r, k, c);
            }
        }
        let t = finite(vec![n, r, c], out, "batch_matmul")?;
        Ok(self.push(
            t,
            Op::BatchMatMul {
                a: ia,
                b: ib,
                trans_b,
            },
        ))
    }

    fn same_shape(&self, ia: usize, ib: usize, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "add")?;
        let x = &self.nodes[ia].value;
        let data = x
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(p, q)| p + q)
            .collect();
        let t = finite(x.shape().to_vec(), data, "add")?;
        Ok(self.push(t, Op::Add(ia, ib)))
    }

    /// Adds a vector of length `d` to every row of `x` (`[..., d]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (xv, bv) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let d = xv.last_dim();
        if bv.len() != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let t = finite(xv.shape().to_vec(), data, "add_bias")?;
        Ok(self.push(t, Op::AddBias(ix, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "mul")?;
        let x = &self.nodes[ia].value;
        let data = x
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(p, q)| p * q)
            .collect();
        let t = finite(x.shape().to_vec(), data, "mul")?;
        Ok(self.push(t, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.map(|v| v * factor, "scale")?;
        Ok(self.push(t, Op::Scale(ix, factor)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.map(f64::tanh, "tanh")?;
        Ok(self.push(t, Op::Tanh(ix)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.map(gelu, "gelu")?;
        Ok(self.push(t, Op::Gelu(ix)))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = finite(xv.shape().to_vec(), data, "softmax")?;
        Ok(self.push(t, Op::Softmax(ix)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let (gv, bv) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut inv_std = vec![0.0; rows];
        // Normalize with unit gain / zero bias first to keep xhat for backward.
        let ones = vec![1.0; d];
        let zeros = vec![0.0; d];
        let mut xhat = vec![0.0; xv.len()];
        kernels::layer_norm_forward(xv.data(), &ones, &zeros, eps, d, &mut xhat, &mut inv_std);
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = gv.data()[j] * row[j] + bv.data()[j];
            }
        }
        ensure_finite(&inv_std, "layer_norm")?;
        let t = finite(xv.shape().to_vec(), out, "layer_norm")?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of a `[n, d]` table; used for embeddings and pooling.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let tv = &self.nodes[it].value;
        if tv.shape().len() != 2 {
            return Err(Error::Invalid(format!(
                "gather_rows expects a matrix, got {:?}",
                tv.shape()
            )));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Invalid(format!(
                "row {bad} out of range for {n} rows"
            )));
        }
        if rows.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(tv.row(r));
        }
        let t = Tensor::from_parts(vec![rows.len(), d], data);
        Ok(self.push(
            t,
            Op::GatherRows {
                table: it,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.reshape(shape)?;
        Ok(self.push(t, Op::Reshape(ix)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let rank = xv.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Invalid(format!(
                "bad permutation {axes:?} for shape {:?}",
                xv.shape()
            )));
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), axes);
        let t = Tensor::from_parts(shape, data);
        Ok(self.push(
            t,
            Op::Permute {
                x: ix,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = lv.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Invalid(format!(
                "target {t} out of range for {c} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            loss += z.ln() + max - (row[t].ln() + max);
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let n = targets.len() as f64;
        let t = finite(vec![1], vec![loss / n], "cross_entropy")?;
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = finite(vec![1], vec![self.nodes[ix].value.sum()], "sum")?;
        Ok(self.push(t, Op::Sum(ix)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        let t = finite(vec![1], vec![v.sum() / v.len() as f64], "mean")?;
        Ok(self.push(t, Op::Mean(ix)))
    }

    /// Mixout on a weight stored as `[in, out]`: rows of dropped input
    /// neurons take their anchor values, the rest are rescaled by `scale`
    /// around the anchor.
    pub fn mixout(
        &mut self,
        w: Var,
        anchor: &Tensor,
        masked_rows: &[bool],
        scale: f64,
    ) -> Result<Var> {
        let iw = self.idx(w)?;
        let wv = &self.nodes[iw].value;
        if wv.shape() != anchor.shape()
            || wv.shape().len() != 2
            || masked_rows.len() != wv.shape()[0]
        {
            return Err(Error::ShapeMismatch {
                op: "mixout",
                lhs: wv.shape().to_vec(),
                rhs: anchor.shape().to_vec(),
            });
        }
        let cols = wv.shape()[1];
        let data = mixout_values(wv.data(), anchor.data(), cols, |i, _| masked_rows[i], scale);
        let t = finite(wv.shape().to_vec(), data, "mixout")?;
        Ok(self.push(
            t,
            Op::Mixout {
                w: iw,
                masked_rows: masked_rows.to_vec(),
                scale,
            },
        ))
    }

    /// Adjoints of every recorded node with respect to the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// Backpropagates `loss` and adds every parameter adjoint into `store`.
    /// Frozen parameters receive gradients too.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |i: usize| self.nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[i].get_or_insert_with(|| Tensor::zeros(self.shape_of(i)));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                let c = self.shape_of(*b)[1];
                acc(*a, &mut |da| gemm_nt(gd, val(*b), da, r, c, k));
                acc(*b, &mut |db| gemm_tn(val(*a), gd, db, r, k, c));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape_of(*a);
                let (n, r, k) = (sa[0], sa[1], sa[2]);
                let c = node.value.shape()[2];
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..n {
                        let gi = &gd[i * r * c..(i + 1) * r * c];
                        let bi = &bd[i * k * c..(i + 1) * k * c];
                        let dai = &mut da[i * r * k..(i + 1) * r * k];
                        if *trans_b {
                            gemm_nn(gi, bi, dai, r, c, k);
                        } else {
                            gemm_nt(gi, bi, dai, r, c, k);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..n {
                        let gi = &gd[i * r * c..(i + 1) * r * c];
                        let ai = &ad[i * r * k..(i + 1) * r * k];
                        let dbi = &mut db[i * k * c..(i + 1) * k * c];
                        if *trans_b {
                            gemm_tn(gi, ai, dbi, r, c, k);
                        } else {
                            gemm_tn(ai, gi, dbi, r, k, c);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for i in [*a, *b] {
                    acc(i, &mut |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(gd).for_each(|(p, q)| *p += q));
                let dim = self.nodes[*b].value.len();
                acc(*b, &mut |db| {
                    for row in gd.chunks_exact(dim) {
                        db.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * av[k];
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, &mut |d| {
                    d.iter_mut().zip(gd).for_each(|(p, q)| *p += f * q)
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * gelu_grad(xv[k]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dim = node.value.last_dim();
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d
                        .chunks_exact_mut(dim)
                        .zip(y.chunks_exact(dim))
                        .zip(gd.chunks_exact(dim))
                    {
                        let s = kernels::dot(yr, gr);
                        for j in 0..dim {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let dim = node.value.last_dim();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; dim];
                let mut dbias = vec![0.0; dim];
                kernels::layer_norm_backward(
                    gd,
                    xhat,
                    inv_std,
                    val(*gain),
                    dim,
                    &mut dx,
                    &mut dgain,
                    &mut dbias,
                );
                for (i, src) in [(*x, &dx), (*gain, &dgain), (*bias, &dbias)] {
                    acc(i, &mut |d| d.iter_mut().zip(src).for_each(|(p, q)| *p += q));
                }
            }
            Op::GatherRows { table, rows } => {
                let dim = node.value.last_dim();
                acc(*table, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &gd[k * dim..(k + 1) * dim];
                        d[r * dim..(r + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(gd).for_each(|(p, q)| *p += q));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (back, _) = permute_data(gd, node.value.shape(), &inverse);
                acc(*x, &mut |d| {
                    d.iter_mut().zip(&back).for_each(|(p, q)| *p += q)
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape_of(*logits)[1];
                let scale = gd[0] / targets.len() as f64;
                acc(*logits, &mut |d| {
                    for (row, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[row * c + j] += scale * (probs[row * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|p| *p += gd[0]));
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|p| *p += gd[0] / n));
            }
            Op::Mixout {
                w,
                masked_rows,
                scale,
            } => {
                let cols = node.value.shape()[1];
                acc(*w, &mut |d| {
                    for (k, p) in d.iter_mut().enumerate() {
                        if !masked_rows[k / cols] {
                            *p += scale * gd[k];
                        }
                    }
                });
            }
        }
    }
}

/// Adjoints produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient for a leaf of the given tape, zeros when unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor> {
        let shape = tape.value(v)?.shape().to_vec();
        Ok(self
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape)))
    }
}
