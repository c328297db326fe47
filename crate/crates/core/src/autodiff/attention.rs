use std::sync::Arc;

use crate::tensor::{kernels, Real};

/// One attention pattern inside a sequence: each query row attends to the
/// listed key rows and to nothing else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Attention groups for one sequence of `seq_len` rows, applied to every
/// sample of a batch. A row that is a query in no group gets a zero output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub seq_len: usize,
    pub groups: Vec<AttentionGroup>,
}

impl AttentionLayout {
    pub fn dense(seq_len: usize) -> Self {
        let all: Vec<usize> = (0..seq_len).collect();
        Self {
            seq_len,
            groups: vec![AttentionGroup {
                queries: all.clone(),
                keys: all,
            }],
        }
    }

    pub fn validate(&self) -> bool {
        let mut seen = vec![false; self.seq_len];
        for g in &self.groups {
            if g.keys.is_empty() || g.keys.iter().any(|&k| k >= self.seq_len) {
                return false;
            }
            for &q in &g.queries {
                if q >= self.seq_len || seen[q] {
                    return false;
                }
                seen[q] = true;
            }
        }
        true
    }
}

/// Softmax weights from one attention call, indexed `[sample][group][head]`,
/// each a row-major `|queries| x |keys|` matrix.
#[derive(Clone, Debug)]
pub struct AttentionProbs<T> {
    pub layout: Arc<AttentionLayout>,
    pub heads: usize,
    pub probs: Vec<Vec<Vec<Vec<T>>>>,
}

impl<T: Real> AttentionProbs<T> {
    pub fn group(&self, sample: usize, group: usize, head: usize) -> &[T] {
        &self.probs[sample][group][head]
    }
}

pub(crate) struct AttentionForward<T> {
    pub out: Vec<T>,
    pub probs: AttentionProbs<T>,
}

pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    width: usize,
    batch: usize,
    heads: usize,
    layout: &Arc<AttentionLayout>,
) -> AttentionForward<T> {
    let s = layout.seq_len;
    let dh = width / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * s * width];
    let mut probs = Vec::with_capacity(batch);
    for b in 0..batch {
        let base = b * s;
        let mut per_group = Vec::with_capacity(layout.groups.len());
        for g in &layout.groups {
            let nq = g.queries.len();
            let nk = g.keys.len();
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = vec![T::zero(); nq * nk];
                for (qi, &qr) in g.queries.iter().enumerate() {
                    let qrow = &q[(base + qr) * width + c0..(base + qr) * width + c0 + dh];
                    let prow = &mut p[qi * nk..(qi + 1) * nk];
                    for (ki, &kr) in g.keys.iter().enumerate() {
                        let krow = &k[(base + kr) * width + c0..(base + kr) * width + c0 + dh];
                        prow[ki] = kernels::dot(qrow, krow) * scale;
                    }
                    kernels::softmax_in_place(prow);
                    let orow = &mut out[(base + qr) * width + c0..(base + qr) * width + c0 + dh];
                    for (ki, &kr) in g.keys.iter().enumerate() {
                        let w = prow[ki];
                        let vrow = &v[(base + kr) * width + c0..(base + kr) * width + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += w * vv;
                        }
                    }
                }
                per_head.push(p);
            }
            per_group.push(per_head);
        }
        probs.push(per_group);
    }
    AttentionForward {
        out,
        probs: AttentionProbs {
            layout: Arc::clone(layout),
            heads,
            probs,
        },
    }
}

/// Accumulates gradients w.r.t. q, k, v given the upstream gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    width: usize,
    probs: &AttentionProbs<T>,
    grad_out: &[T],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    let layout = &probs.layout;
    let s = layout.seq_len;
    let heads = probs.heads;
    let dh = width / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    for (b, per_group) in probs.probs.iter().enumerate() {
        let base = b * s;
        for (g, per_head) in layout.groups.iter().zip(per_group) {
            let nk = g.keys.len();
            for (h, p) in per_head.iter().enumerate() {
                let c0 = h * dh;
                let mut dscore = vec![T::zero(); nk];
                for (qi, &qr) in g.queries.iter().enumerate() {
                    let prow = &p[qi * nk..(qi + 1) * nk];
                    let go = &grad_out[(base + qr) * width + c0..(base + qr) * width + c0 + dh];
                    // dP = dO . V^T, dV += P^T . dO
                    for (ki, &kr) in g.keys.iter().enumerate() {
                        let off = (base + kr) * width + c0;
                        dscore[ki] = kernels::dot(go, &v[off..off + dh]);
                        let w = prow[ki];
                        for (gvv, &gov) in gv[off..off + dh].iter_mut().zip(go) {
                            *gvv += w * gov;
                        }
                    }
                    let inner: T = prow.iter().zip(&dscore).map(|(&a, &b)| a * b).sum();
                    let qoff = (base + qr) * width + c0;
                    for (ki, &kr) in g.keys.iter().enumerate() {
                        let ds = prow[ki] * (dscore[ki] - inner) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let koff = (base + kr) * width + c0;
                        for d in 0..dh {
                            gq[qoff + d] += ds * k[koff + d];
                            gk[koff + d] += ds * q[qoff + d];
                        }
                    }
                }
            }
        }
    }
}
