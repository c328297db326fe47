use std::sync::Arc;

use log::warn;

use super::attention::{self, AttentionLayout, AttentionProbs};
use crate::error::{PatError, Result};
use crate::tensor::{kernels, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SumAll(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<T>,
    },
    SubsetNll {
        logits: Var,
        subsets: Vec<Vec<usize>>,
    },
    Triplet {
        x: Var,
        triplets: Vec<(usize, usize, usize)>,
        weights: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: AttentionProbs<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of a computation, replayed backwards for gradients.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.dims[v.0].clone(), g.clone()).expect("grad dims"))
    }

    /// Gradient of `v`, or zeros of the right shape when nothing flowed.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.dims[v.0]))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Attention weights retained by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&AttentionProbs<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let d = self.dims(v);
        if d.len() != 2 {
            return Err(PatError::shape(op, d, &[2]));
        }
        Ok((d[0], d[1]))
    }

    fn checked_finite(&self, v: Var, op: &'static str) -> Result<Var> {
        if self.nodes[v.0].value.is_finite() {
            Ok(v)
        } else {
            Err(PatError::NonFinite(op.to_string()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(PatError::shape("matmul", self.dims(a), self.dims(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(PatError::shape("add", self.dims(a), self.dims(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).len() != cols {
            return Err(PatError::shape("add_row", self.dims(a), self.dims(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (x, &y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(PatError::shape("mul", self.dims(a), self.dims(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.dims(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Row-wise layer normalization followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(PatError::shape("layer_norm", self.dims(x), self.dims(gamma)));
        }
        let n = T::of(cols as f64);
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + bt[c];
            }
        }
        let value = Tensor::new(xv.dims().to_vec(), out)?;
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

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Row-wise L2 normalization. A zero row maps to zero with zero gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let norms: Vec<T> = xv
            .data()
            .chunks(cols)
            .map(|r| kernels::dot(r, r).sqrt())
            .collect();
        let value = xv.l2_normalize_rows();
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_last();
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| PatError::config("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(PatError::shape("concat_rows", self.dims(first), v.dims()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix();
        if start >= end || end > rows {
            return Err(PatError::shape("slice_rows", self.dims(x), &[start, end]));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(vec![end - start, cols], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(PatError::Index {
                what: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(PatError::shape("weighted_sum", self.dims(x), &[weights.len()]));
        }
        let s = kernels::dot(self.value(x).data(), weights);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Sum over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != rows {
            return Err(PatError::shape("cross_entropy", self.dims(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(PatError::Index {
                what: "cross_entropy label",
                index: bad,
                len: cols,
            });
        }
        let lv = self.value(logits);
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            total += kernels::log_sum_exp(row.iter().copied()) - row[y];
        }
        let v = self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        );
        self.checked_finite(v, "cross_entropy")
    }

    /// Sum over rows of `-sum_c target[c] * log softmax(logits)[c]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.dims(logits) != targets.dims() {
            return Err(PatError::shape("soft_cross_entropy", self.dims(logits), targets.dims()));
        }
        let lv = self.value(logits);
        let cols = lv.cols();
        let mut total = T::zero();
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let lse = kernels::log_sum_exp(row.iter().copied());
            for (c, &x) in row.iter().enumerate() {
                let t = targets.data()[r * cols + c];
                total += t * (lse - x);
            }
        }
        let v = self.push(
            Tensor::scalar(total),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        );
        self.checked_finite(v, "soft_cross_entropy")
    }

    /// Sum over rows of `-log(sum_{c in subset} softmax(row)[c])`, stabilized
    /// with log-sum-exp on both numerator and denominator.
    pub fn subset_nll(&mut self, logits: Var, subsets: &[Vec<usize>]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(logits, "subset_nll")?;
        if subsets.len() != rows {
            return Err(PatError::shape("subset_nll", self.dims(logits), &[subsets.len()]));
        }
        let lv = self.value(logits);
        let mut total = T::zero();
        for (r, subset) in subsets.iter().enumerate() {
            if subset.is_empty() {
                return Err(PatError::config("empty positive subset"));
            }
            if let Some(&bad) = subset.iter().find(|&&c| c >= cols) {
                return Err(PatError::Index {
                    what: "subset_nll",
                    index: bad,
                    len: cols,
                });
            }
            let row = lv.row(r);
            let all = kernels::log_sum_exp(row.iter().copied());
            let pos = kernels::log_sum_exp(subset.iter().map(|&c| row[c]));
            // -log of a mass <= 1; clamp rounding noise below zero
            total += (all - pos).max(T::zero());
        }
        let v = self.push(
            Tensor::scalar(total),
            Op::SubsetNll {
                logits,
                subsets: subsets.to_vec(),
            },
            &[logits],
        );
        self.checked_finite(v, "subset_nll")
    }

    /// Soft-margin triplet loss with batch-hard mining on squared Euclidean
    /// distances, averaged over anchors that have both a positive and a
    /// negative in the batch.
    pub fn soft_margin_triplet(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "soft_margin_triplet")?;
        if ids.len() != rows {
            return Err(PatError::shape("soft_margin_triplet", self.dims(x), &[ids.len()]));
        }
        let xv = self.value(x);
        let mut d2 = vec![T::zero(); rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                let (a, b) = (xv.row(i), xv.row(j));
                d2[i * rows + j] = a.iter().zip(b).map(|(&u, &w)| (u - w) * (u - w)).sum();
            }
        }
        let mut triplets = Vec::new();
        let mut margins = Vec::new();
        for a in 0..rows {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..rows {
                if j == a {
                    continue;
                }
                let d = d2[a * rows + j];
                if ids[j] == ids[a] {
                    if pos.is_none_or(|p| d > d2[a * rows + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| d < d2[a * rows + n]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(n)) => {
                    triplets.push((a, p, n));
                    margins.push(d2[a * rows + p] - d2[a * rows + n]);
                }
                (None, _) => warn!("triplet: anchor {a} (id {}) has no positive; skipped", ids[a]),
                (_, None) => warn!("triplet: anchor {a} has no negative; skipped"),
            }
        }
        let count = T::of(triplets.len().max(1) as f64);
        let mut loss = T::zero();
        let mut weights = Vec::with_capacity(margins.len());
        for &z in &margins {
            // log(1 + e^z), stable for large |z|
            let sp = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
            loss += sp;
            let sig = T::one() / (T::one() + (-z).exp());
            weights.push(sig / count);
        }
        loss /= count;
        let _ = cols;
        let v = self.push(
            Tensor::scalar(loss),
            Op::Triplet {
                x,
                triplets,
                weights,
            },
            &[x],
        );
        self.checked_finite(v, "soft_margin_triplet")
    }

    /// Multi-head attention over `batch` stacked sequences. `q`, `k`, `v` are
    /// `(batch * seq_len) x width`; each query row only sees the key rows of
    /// its group in `layout`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &Arc<AttentionLayout>,
    ) -> Result<Var> {
        let (rows, width) = self.matrix_dims(q, "attention")?;
        if self.dims(k) != self.dims(q) || self.dims(v) != self.dims(q) {
            return Err(PatError::shape("attention", self.dims(q), self.dims(k)));
        }
        if heads == 0 || width % heads != 0 {
            return Err(PatError::config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        if rows % layout.seq_len != 0 || !layout.validate() {
            return Err(PatError::config("attention layout does not fit the input"));
        }
        let batch = rows / layout.seq_len;
        let fwd = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            width,
            batch,
            heads,
            layout,
        );
        let value = Tensor::new(vec![rows, width], fwd.out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                probs: fwd.probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse pass seeded with `d(root)/d(root) = 1`; `root` must be a scalar.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(PatError::shape("backward", self.dims(root), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let dims = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Gradients { grads, dims })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.as_matrix();
                let n = bv.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::gemm_nt(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::gemm_tn(av.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        for (x, &y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                let cols = node.value.cols();
                if let Some(gr) = self.slot(grads, *row) {
                    for chunk in g.chunks(cols) {
                        for (x, &y) in gr.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * *s;
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
                let cols = node.value.cols();
                let n = T::of(cols as f64);
                let gam = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks(cols) {
                        for c in 0..cols {
                            gb[c] += gr[c];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (gr, hr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let is = inv_std[r];
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            gx[r * cols + c] += is * (dh - sum_dh / n - hr[c] * sum_dh_h / n);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &y), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += y * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == T::zero() {
                            continue;
                        }
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let proj = kernels::dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] += (gr[c] - yr[c] * proj) / norm;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let inner = kernels::dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (x, &y) in gp.iter_mut().zip(&g[off..off + n]) {
                            *x += y;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &y) in gx[start * cols..].iter_mut().zip(g) {
                        *o += y;
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).as_matrix();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let cols = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..cols {
                            gx[src * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &w) in gx.iter_mut().zip(weights) {
                        *o += g[0] * w;
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        let mut p = lv.row(r).to_vec();
                        kernels::softmax_in_place(&mut p);
                        p[y] -= T::one();
                        for c in 0..cols {
                            gl[r * cols + c] += g[0] * p[c];
                        }
                    }
                }
            }
            Op::SoftCrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                if let Some(gl) = self.slot(grads, *logits) {
                    for r in 0..lv.rows() {
                        let mut p = lv.row(r).to_vec();
                        kernels::softmax_in_place(&mut p);
                        let t = &targets[r * cols..(r + 1) * cols];
                        let mass: T = t.iter().copied().sum();
                        for c in 0..cols {
                            gl[r * cols + c] += g[0] * (mass * p[c] - t[c]);
                        }
                    }
                }
            }
            Op::SubsetNll { logits, subsets } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, subset) in subsets.iter().enumerate() {
                        let row = lv.row(r);
                        let mut p = row.to_vec();
                        kernels::softmax_in_place(&mut p);
                        let pos = kernels::log_sum_exp(subset.iter().map(|&c| row[c]));
                        for c in 0..cols {
                            gl[r * cols + c] += g[0] * p[c];
                        }
                        for &c in subset {
                            gl[r * cols + c] -= g[0] * (row[c] - pos).exp();
                        }
                    }
                }
            }
            Op::Triplet {
                x,
                triplets,
                weights,
            } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (&(a, p, n), &w) in triplets.iter().zip(weights) {
                        let s = g[0] * w * T::of(2.0);
                        for c in 0..cols {
                            let dap = xv.at(a, c) - xv.at(p, c);
                            let dan = xv.at(a, c) - xv.at(n, c);
                            gx[a * cols + c] += s * (dap - dan);
                            gx[p * cols + c] -= s * dap;
                            gx[n * cols + c] += s * dan;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, probs } => {
                let width = node.value.cols();
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let n = qv.len();
                let mut gq = vec![T::zero(); n];
                let mut gk = vec![T::zero(); n];
                let mut gv = vec![T::zero(); n];
                attention::backward(qv, kv, vv, width, probs, g, &mut gq, &mut gk, &mut gv);
                for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(slot) = self.slot(grads, var) {
                        for (x, y) in slot.iter_mut().zip(local) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
}
