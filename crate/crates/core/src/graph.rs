//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep. Parameters are borrowed from
//! a [`ParamStore`] rather than copied; their gradients are pulled back into
//! the store with [`ParamStore::accumulate`] once the graph is done.

use std::borrow::Cow;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor, View};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Constant,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
    },
    RelLogits {
        q: Var,
        table: Var,
        q_offset: usize,
        max_dist: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Nll {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        pad: Option<usize>,
        count: usize,
    },
    Sum(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recorded computation for one forward pass.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn zeros_like<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), shape, op, needs)
    }

    /// Leaf borrowing `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad(),
        )
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let rg = t.requires_grad();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf { param: None }, rg)
    }

    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf { param: Some(id) },
            true,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        assert_eq!(numel(shape), data.len(), "constant shape");
        self.push(Cow::Owned(data), shape.to_vec(), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, shape: &[usize], data: &'a [T]) -> Var {
        assert_eq!(numel(shape), data.len(), "constant shape");
        self.push(Cow::Borrowed(data), shape.to_vec(), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Leaf { param: Some(id) }, Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    // ---- forward operations ----

    /// Batched product `op(a)·op(b)` over the last two axes. `b` may be 2-D,
    /// in which case it is shared across every batch entry of `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared = batch_b.is_empty();
        if k != k2 || !(shared || batch_a == batch_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batches = numel(batch_a);
        let mut out = vec![T::zero(); batches * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for bi in 0..batches {
                let a_s = &av[bi * ra * ca..(bi + 1) * ra * ca];
                let b_s = if shared {
                    bv
                } else {
                    &bv[bi * rb * cb..(bi + 1) * rb * cb]
                };
                gemm(
                    View::matrix(a_s, ra, ca, ta),
                    View::matrix(b_s, rb, cb, tb),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n,
                    1,
                    false,
                );
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        Ok(self.derived(out, shape, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Mul(a, b), &[a, b]))
    }

    /// `a[..., j] + bias[j]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_row", &sa, &sb));
        }
        let d = sb[0];
        let bv = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % d])
            .collect();
        Ok(self.derived(out, sa, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.derived(out, shape, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.derived(out, shape, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        self.derived(vec![s], vec![1], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.derived(out, shape.to_vec(), Op::Reshape(a), &[a]))
    }

    /// Rows `start..start + n` of a 2-D node.
    pub fn slice_rows(&mut self, x: Var, start: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start + n > shape[0] || n == 0 {
            return Err(Error::Length {
                len: start + n,
                max: shape.first().copied().unwrap_or(0),
            });
        }
        if start == 0 && n == shape[0] {
            return Ok(x);
        }
        let d = shape[1];
        let out = self.value(x)[start * d..(start + n) * d].to_vec();
        Ok(self.derived(out, vec![n, d], Op::SliceRows { x, start }, &[x]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(xv[at(l)]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    let e = (xv[at(l)] - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        Ok(self.derived(
            out,
            shape,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Softmax over the last axis with masked logits replaced by
    /// [`Real::MASK_VALUE`]. `masked` has one flag per `[rows × cols]` entry
    /// of the trailing two axes and is broadcast over leading axes. A row
    /// with every entry masked produces zeros.
    pub fn masked_softmax(&mut self, x: Var, masked: &Arc<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("masked_softmax", &shape, &[]));
        }
        let cols = shape[shape.len() - 1];
        let rows = shape[shape.len() - 2];
        if masked.len() != rows * cols {
            return Err(Error::shape("masked_softmax", &shape, &[masked.len()]));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (r, (xrow, orow)) in xv.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mrow = &masked[(r % rows) * cols..(r % rows + 1) * cols];
            if mrow.iter().all(|&m| m) {
                continue;
            }
            let logit = |c: usize| if mrow[c] { T::MASK_VALUE } else { xrow[c] };
            let mut max = T::neg_infinity();
            for c in 0..cols {
                max = max.max(logit(c));
            }
            let mut z = T::zero();
            for (c, o) in orow.iter_mut().enumerate() {
                let e = (logit(c) - max).exp();
                *o = e;
                z += e;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        Ok(self.derived(out, shape, Op::MaskedSoftmax { x }, &[x]))
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (xr, or) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                or[j] = (xr[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.derived(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", &shape, &[]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.derived(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `[I × D] → [heads × I × D/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || heads == 0 || !shape[1].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &shape, &[heads]));
        }
        let (rows, d) = (shape[0], shape[1]);
        let dh = d / heads;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for h in 0..heads {
            for i in 0..rows {
                out[(h * rows + i) * dh..(h * rows + i + 1) * dh]
                    .copy_from_slice(&xv[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        Ok(self.derived(out, vec![heads, rows, dh], Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[heads × I × dh] → [I × heads·dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("merge_heads", &shape, &[]));
        }
        let (heads, rows, dh) = (shape[0], shape[1], shape[2]);
        let d = heads * dh;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for h in 0..heads {
            for i in 0..rows {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&xv[(h * rows + i) * dh..(h * rows + i + 1) * dh]);
            }
        }
        Ok(self.derived(out, vec![rows, d], Op::MergeHeads { x }, &[x]))
    }

    /// Relative-position logits
    /// `out[h, a, j] = q[h, a, :] · table[(a + q_offset) − j + max_dist, :]`
    /// for `n_keys` keys at positions `0..n_keys`. `table` has
    /// `2·max_dist + 1` rows.
    pub fn relative_logits(
        &mut self,
        q: Var,
        table: Var,
        q_offset: usize,
        n_keys: usize,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let st = self.shape(table).to_vec();
        if sq.len() != 3 || st.len() != 2 || sq[2] != st[1] || st[0].is_multiple_of(2) {
            return Err(Error::shape("relative_logits", &sq, &st));
        }
        let (heads, nq, dh) = (sq[0], sq[1], sq[2]);
        let max_dist = (st[0] - 1) / 2;
        check_rel_range(nq, q_offset, n_keys, max_dist)?;
        let (lo, nr) = rel_rows(nq, q_offset, n_keys, max_dist);
        let qv = self.value(q);
        let tv = &self.value(table)[lo * dh..(lo + nr) * dh];
        let mut out = vec![T::zero(); heads * nq * n_keys];
        let mut band = vec![T::zero(); nq * nr];
        for h in 0..heads {
            let qh = &qv[h * nq * dh..(h + 1) * nq * dh];
            gemm(
                View::matrix(qh, nq, dh, false),
                View::matrix(tv, nr, dh, true),
                &mut band,
                nr,
                1,
                false,
            );
            let oh = &mut out[h * nq * n_keys..(h + 1) * nq * n_keys];
            for a in 0..nq {
                for j in 0..n_keys {
                    let r = a + q_offset + max_dist - j - lo;
                    oh[a * n_keys + j] = band[a * nr + r];
                }
            }
        }
        Ok(self.derived(
            out,
            vec![heads, nq, n_keys],
            Op::RelLogits {
                q,
                table,
                q_offset,
                max_dist,
            },
            &[q, table],
        ))
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Dropout { x, mask }, &[x])
    }

    /// Label-smoothed negative log-likelihood averaged over non-pad rows.
    ///
    /// The target class receives `1 − smoothing` and every other class
    /// `smoothing / (V − 1)`.
    pub fn label_smoothed_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad: Option<usize>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("label_smoothed_nll", &shape, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target id {bad} outside vocabulary of {v}")));
        }
        if smoothing > 0.0 && v < 2 {
            return Err(Error::Config("label smoothing needs at least two classes".into()));
        }
        let eps = T::lit(smoothing);
        let off = if v > 1 { eps / T::lit((v - 1) as f64) } else { T::zero() };
        let lv = self.value(logits);
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, &t) in lv.chunks(v).zip(targets) {
            if pad == Some(t) {
                continue;
            }
            count += 1;
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            let mut loss = T::zero();
            for (c, &x) in row.iter().enumerate() {
                let q = if c == t { T::one() - eps } else { off };
                if q > T::zero() {
                    loss -= q * (x - lse);
                }
            }
            total += loss;
        }
        let value = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        Ok(self.derived(
            vec![value],
            vec![1],
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                pad,
                count,
            },
            &[logits],
        ))
    }

    // ---- reverse sweep ----

    /// Propagates `∂loss/∂node` to every differentiable leaf. Leaf gradients
    /// accumulate across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_updates = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            let val = |v: &Var| -> &[T] { &self.nodes[v.0].value };
            let shp = |v: &Var| -> &[usize] { &self.nodes[v.0].shape };
            match &node.op {
                Op::Leaf { .. } => leaf_updates.push((idx, g)),
                Op::Constant => {}
                Op::MatMul { a, b, ta, tb } => {
                    let sa = shp(a);
                    let sb = shp(b);
                    let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                    let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                    let n = if *tb { rb } else { cb };
                    let shared = sb.len() == 2;
                    let batches = numel(&sa[..sa.len() - 2]);
                    let (av, bv) = (val(a), val(b));
                    let (na, nb) = (ra * ca, rb * cb);
                    if needs(a) {
                        let ga = zeros_like(&mut grads[a.0], av.len());
                        let (rs, cs) = if *ta { (1, m) } else { (k, 1) };
                        for bi in 0..batches {
                            let b_s = if shared { bv } else { &bv[bi * nb..(bi + 1) * nb] };
                            gemm(
                                View::matrix(&g[bi * m * n..(bi + 1) * m * n], m, n, false),
                                View::matrix(b_s, rb, cb, *tb).t(),
                                &mut ga[bi * na..(bi + 1) * na],
                                rs,
                                cs,
                                true,
                            );
                        }
                    }
                    if needs(b) {
                        let gb = zeros_like(&mut grads[b.0], bv.len());
                        let (rs, cs) = if *tb { (1, k) } else { (n, 1) };
                        for bi in 0..batches {
                            let off = if shared { 0 } else { bi * nb };
                            gemm(
                                View::matrix(&av[bi * na..(bi + 1) * na], ra, ca, *ta).t(),
                                View::matrix(&g[bi * m * n..(bi + 1) * m * n], m, n, false),
                                &mut gb[off..off + nb],
                                rs,
                                cs,
                                true,
                            );
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (v, sign) in [(a, T::one()), (b, T::one())] {
                        if needs(v) {
                            let gv = zeros_like(&mut grads[v.0], g.len());
                            gv.iter_mut().zip(&g).for_each(|(s, &d)| *s += sign * d);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(a, T::one()), (b, -T::one())] {
                        if needs(v) {
                            let gv = zeros_like(&mut grads[v.0], g.len());
                            gv.iter_mut().zip(&g).for_each(|(s, &d)| *s += sign * d);
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if needs(a) {
                        let gv = zeros_like(&mut grads[a.0], g.len());
                        gv.iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                    }
                    if needs(bias) {
                        let d = shp(bias)[0];
                        let gb = zeros_like(&mut grads[bias.0], d);
                        for (i, &dv) in g.iter().enumerate() {
                            gb[i % d] += dv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    if needs(a) {
                        let gv = zeros_like(&mut grads[a.0], g.len());
                        for i in 0..g.len() {
                            gv[i] += g[i] * bv[i];
                        }
                    }
                    if needs(b) {
                        let gv = zeros_like(&mut grads[b.0], g.len());
                        for i in 0..g.len() {
                            gv[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let gv = zeros_like(&mut grads[a.0], g.len());
                    gv.iter_mut().zip(&g).for_each(|(s, &d)| *s += *c * d);
                }
                Op::Relu(a) => {
                    let out = &node.value;
                    let gv = zeros_like(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        if out[i] > T::zero() {
                            gv[i] += g[i];
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = val(a).len();
                    let gv = zeros_like(&mut grads[a.0], n);
                    gv.iter_mut().for_each(|s| *s += g[0]);
                }
                Op::Reshape(a) => {
                    let gv = zeros_like(&mut grads[a.0], g.len());
                    gv.iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                }
                Op::SliceRows { x, start } => {
                    let n = val(x).len();
                    let d = shp(x)[1];
                    let gx = zeros_like(&mut grads[x.0], n);
                    for (s, &v) in gx[start * d..start * d + g.len()].iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::Dropout { x, mask } => {
                    let gv = zeros_like(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        gv[i] += g[i] * mask[i];
                    }
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = &node.value;
                    let gv = zeros_like(&mut grads[x.0], g.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..*len {
                                gv[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
                Op::MaskedSoftmax { x } => {
                    let y = &node.value;
                    let cols = *node.shape.last().expect("rank >= 2");
                    let gv = zeros_like(&mut grads[x.0], g.len());
                    for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(gv.chunks_mut(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            out[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let xv = val(x);
                    let gn = val(gain);
                    let d = gn.len();
                    let inv_d = T::one() / T::lit(d as f64);
                    let rows = xv.len() / d;
                    if needs(gain) || needs(bias) {
                        let mut dg = vec![T::zero(); d];
                        let mut db = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                                dg[j] += g[r * d + j] * xhat;
                                db[j] += g[r * d + j];
                            }
                        }
                        if needs(gain) {
                            let s = zeros_like(&mut grads[gain.0], d);
                            s.iter_mut().zip(&dg).for_each(|(s, &v)| *s += v);
                        }
                        if needs(bias) {
                            let s = zeros_like(&mut grads[bias.0], d);
                            s.iter_mut().zip(&db).for_each(|(s, &v)| *s += v);
                        }
                    }
                    if needs(x) {
                        let gx = zeros_like(&mut grads[x.0], xv.len());
                        for r in 0..rows {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                                let dxhat = g[r * d + j] * gn[j];
                                m1 += dxhat;
                                m2 += dxhat * xhat;
                            }
                            m1 *= inv_d;
                            m2 *= inv_d;
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                                let dxhat = g[r * d + j] * gn[j];
                                gx[r * d + j] += rstd[r] * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let n = val(table).len();
                    let d = shp(table)[1];
                    let gt = zeros_like(&mut grads[table.0], n);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
                Op::SplitHeads { x, heads } => {
                    let s = shp(x);
                    let (rows, d) = (s[0], s[1]);
                    let dh = d / heads;
                    let gx = zeros_like(&mut grads[x.0], g.len());
                    for h in 0..*heads {
                        for i in 0..rows {
                            for c in 0..dh {
                                gx[i * d + h * dh + c] += g[(h * rows + i) * dh + c];
                            }
                        }
                    }
                }
                Op::MergeHeads { x } => {
                    let s = shp(x);
                    let (heads, rows, dh) = (s[0], s[1], s[2]);
                    let d = heads * dh;
                    let gx = zeros_like(&mut grads[x.0], g.len());
                    for h in 0..heads {
                        for i in 0..rows {
                            for c in 0..dh {
                                gx[(h * rows + i) * dh + c] += g[i * d + h * dh + c];
                            }
                        }
                    }
                }
                Op::RelLogits {
                    q,
                    table,
                    q_offset,
                    max_dist,
                } => {
                    let sq = shp(q);
                    let (heads, nq, dh) = (sq[0], sq[1], sq[2]);
                    let n_keys = node.shape[2];
                    let (lo, nr) = rel_rows(nq, *q_offset, n_keys, *max_dist);
                    let (qv, tv) = (val(q), val(table));
                    let t_len = tv.len();
                    let t_band = &tv[lo * dh..(lo + nr) * dh];
                    let mut dband = vec![T::zero(); nq * nr];
                    for h in 0..heads {
                        dband.iter_mut().for_each(|v| *v = T::zero());
                        let gh = &g[h * nq * n_keys..(h + 1) * nq * n_keys];
                        for a in 0..nq {
                            for j in 0..n_keys {
                                let r = a + q_offset + max_dist - j - lo;
                                dband[a * nr + r] += gh[a * n_keys + j];
                            }
                        }
                        if needs(q) {
                            let gq = zeros_like(&mut grads[q.0], qv.len());
                            gemm(
                                View::matrix(&dband, nq, nr, false),
                                View::matrix(t_band, nr, dh, false),
                                &mut gq[h * nq * dh..(h + 1) * nq * dh],
                                dh,
                                1,
                                true,
                            );
                        }
                        if needs(table) {
                            let gt = zeros_like(&mut grads[table.0], t_len);
                            gemm(
                                View::matrix(&dband, nq, nr, true),
                                View::matrix(&qv[h * nq * dh..(h + 1) * nq * dh], nq, dh, false),
                                &mut gt[lo * dh..(lo + nr) * dh],
                                dh,
                                1,
                                true,
                            );
                        }
                    }
                }
                Op::Nll {
                    logits,
                    targets,
                    smoothing,
                    pad,
                    count,
                } => {
                    if *count > 0 {
                        let lv = val(logits);
                        let v = shp(logits)[1];
                        let off = if v > 1 {
                            *smoothing / T::lit((v - 1) as f64)
                        } else {
                            T::zero()
                        };
                        let scale = g[0] / T::lit(*count as f64);
                        let gl = zeros_like(&mut grads[logits.0], lv.len());
                        for (r, &t) in targets.iter().enumerate() {
                            if *pad == Some(t) {
                                continue;
                            }
                            let row = &lv[r * v..(r + 1) * v];
                            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
                            for c in 0..v {
                                let p = (row[c] - max).exp() / z;
                                let q = if c == t { T::one() - *smoothing } else { off };
                                gl[r * v + c] += scale * (p - q);
                            }
                        }
                    }
                }
            }
        }

        for (idx, g) in leaf_updates {
            let slot = zeros_like(&mut self.nodes[idx].grad, g.len());
            slot.iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
        }
        Ok(())
    }
}

fn check_rel_range(nq: usize, q_offset: usize, n_keys: usize, max_dist: usize) -> Result<()> {
    let furthest_back = n_keys.saturating_sub(1);
    let furthest_fwd = q_offset + nq.saturating_sub(1);
    let needed = furthest_back.max(furthest_fwd);
    if needed > max_dist {
        return Err(Error::Length {
            len: needed + 1,
            max: max_dist,
        });
    }
    Ok(())
}

/// First table row and row count touched by a relative-logit block.
fn rel_rows(nq: usize, q_offset: usize, n_keys: usize, max_dist: usize) -> (usize, usize) {
    let lo = q_offset + max_dist + 1 - n_keys;
    let hi = q_offset + nq - 1 + max_dist;
    (lo, hi - lo + 1)
}
