//! Cross-ID similarity learning: a per-part memory bank of normalized local
//! features for every source sample, nearest-neighbour positive mining over
//! the whole bank, and the softmax-clustering loss that pulls a feature
//! towards its mined neighbours regardless of their identity labels.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, EncoderParams};
use crate::error::{PatError, Result};
use crate::tensor::{kernels, Real, Tensor};

/// One `K x D` matrix of unit rows per part token; row `j` belongs to
/// dataset sample `j` for the bank's whole life.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T: Real = f32> {
    parts: Vec<Tensor<T>>,
    ids: Vec<usize>,
    momentum: T,
    initialized: bool,
    /// Epoch counter; 0 until the initial fill has happened.
    pub epoch: usize,
}

/// The `k` nearest bank rows for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveSet<T = f32> {
    pub indices: Vec<usize>,
    pub scores: Vec<T>,
    pub ids: Vec<usize>,
}

impl<T: Real> MemoryBank<T> {
    /// An all-zero, uninitialized bank.
    pub fn empty(num_parts: usize, num_samples: usize, dim: usize, ids: Vec<usize>, momentum: T) -> Result<Self> {
        if num_samples == 0 {
            return Err(PatError::config("memory bank over an empty dataset"));
        }
        if ids.len() != num_samples {
            return Err(PatError::config("one identity label per bank row required"));
        }
        check_momentum(momentum)?;
        Ok(Self {
            parts: (0..num_parts).map(|_| Tensor::zeros(&[num_samples, dim])).collect(),
            ids,
            momentum,
            initialized: false,
            epoch: 0,
        })
    }

    /// Fills every row with the normalized local feature of its sample.
    /// `locals[i]` is the `K x D` part-`i` feature matrix.
    pub fn from_features(locals: Vec<Tensor<T>>, ids: Vec<usize>, momentum: T) -> Result<Self> {
        check_momentum(momentum)?;
        let k = locals.first().map_or(0, Tensor::rows);
        if k == 0 {
            return Err(PatError::config("memory bank over an empty dataset"));
        }
        if ids.len() != k || locals.iter().any(|t| t.rows() != k) {
            return Err(PatError::config("bank parts and labels disagree on sample count"));
        }
        Ok(Self {
            parts: locals.iter().map(Tensor::l2_normalize_rows).collect(),
            ids,
            momentum,
            initialized: true,
            epoch: 0,
        })
    }

    /// Restores a bank from stored rows (checkpoint path).
    pub fn from_parts(parts: Vec<Tensor<T>>, ids: Vec<usize>, momentum: T, initialized: bool, epoch: usize) -> Result<Self> {
        check_momentum(momentum)?;
        let k = parts.first().map_or(0, Tensor::rows);
        if k == 0 || ids.len() != k || parts.iter().any(|t| t.rows() != k) {
            return Err(PatError::config("bank parts and labels disagree on sample count"));
        }
        Ok(Self {
            parts,
            ids,
            momentum,
            initialized,
            epoch,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.parts[0].cols()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn part(&self, i: usize) -> &Tensor<T> {
        &self.parts[i]
    }

    pub fn parts(&self) -> &[Tensor<T>] {
        &self.parts
    }

    fn check_part(&self, part: usize) -> Result<()> {
        if part >= self.parts.len() {
            return Err(PatError::Index {
                what: "bank part",
                index: part,
                len: self.parts.len(),
            });
        }
        Ok(())
    }

    /// `w <- normalize((1 - m) w + m normalize(feature))`.
    pub fn update(&mut self, sample: usize, part: usize, feature: &[T]) -> Result<()> {
        if !self.initialized {
            return Err(PatError::State("bank update before initialization".into()));
        }
        self.check_part(part)?;
        if sample >= self.len() {
            return Err(PatError::Index {
                what: "bank row",
                index: sample,
                len: self.len(),
            });
        }
        let d = self.dim();
        if feature.len() != d {
            return Err(PatError::shape("bank_update", &[feature.len()], &[d]));
        }
        let mut f = feature.to_vec();
        kernels::l2_normalize_in_place(&mut f);
        let m = self.momentum;
        let row = &mut self.parts[part].data_mut()[sample * d..(sample + 1) * d];
        for (w, &x) in row.iter_mut().zip(&f) {
            *w = (T::one() - m) * *w + m * x;
        }
        kernels::l2_normalize_in_place(row);
        Ok(())
    }

    /// Cosine similarity of a query against every row of a part.
    pub fn similarities(&self, part: usize, feature: &[T]) -> Result<Vec<T>> {
        self.check_part(part)?;
        let d = self.dim();
        if feature.len() != d {
            return Err(PatError::shape("similarities", &[feature.len()], &[d]));
        }
        let mut q = feature.to_vec();
        kernels::l2_normalize_in_place(&mut q);
        Ok(self.parts[part]
            .data()
            .chunks(d)
            .map(|row| kernels::dot(row, &q))
            .collect())
    }
}

fn check_momentum<T: Real>(m: T) -> Result<()> {
    if !(m > T::zero() && m <= T::one()) {
        return Err(PatError::config(format!("bank momentum {:?} outside (0, 1]", m)));
    }
    Ok(())
}

#[derive(PartialEq)]
struct Candidate<T> {
    score: T,
    index: usize,
}

impl<T: Real> Eq for Candidate<T> {}

impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for Candidate<T> {
    /// "Greater" means better: higher score, then lower index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .partial_cmp(&other.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// The `k` most similar rows from per-row scores, best first, skipping
/// `exclude`. Ties go to the lower row index.
pub fn top_k<T: Real>(scores: &[T], k: usize, exclude: Option<usize>) -> Vec<(usize, T)> {
    // min-heap of the current best k
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate<T>>> = BinaryHeap::with_capacity(k + 1);
    for (index, &score) in scores.iter().enumerate() {
        if Some(index) == exclude {
            continue;
        }
        let c = Candidate { score, index };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(c));
        } else if let Some(worst) = heap.peek() {
            if c > worst.0 {
                heap.pop();
                heap.push(std::cmp::Reverse(c));
            }
        }
    }
    let mut out: Vec<Candidate<T>> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out.into_iter().map(|c| (c.index, c.score)).collect()
}

/// Top-`k` bank rows by cosine to `feature`, excluding the query's own row.
pub fn select_positives<T: Real>(
    bank: &MemoryBank<T>,
    part: usize,
    feature: &[T],
    self_index: Option<usize>,
    k: usize,
) -> Result<PositiveSet<T>> {
    if !bank.is_initialized() {
        return Err(PatError::State("positive mining on an uninitialized bank".into()));
    }
    if k == 0 || k >= bank.len() {
        return Err(PatError::config(format!(
            "k = {k} must satisfy 0 < k < K = {}",
            bank.len()
        )));
    }
    let scores = bank.similarities(part, feature)?;
    let best = top_k(&scores, k, self_index);
    Ok(PositiveSet {
        ids: best.iter().map(|&(i, _)| bank.ids()[i]).collect(),
        indices: best.iter().map(|&(i, _)| i).collect(),
        scores: best.into_iter().map(|(_, s)| s).collect(),
    })
}

fn check_tau<T: Real>(tau: T) -> Result<()> {
    if !(tau > T::zero()) {
        return Err(PatError::config(format!("temperature {:?} must be > 0", tau)));
    }
    Ok(())
}

/// Records `sum_j -log(sum_{w in P_j} e^{f_j.w/tau} / sum_n e^{f_j.w_n/tau})`
/// for a `B x D` block of raw part features. Bank rows are constants.
pub fn csl_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    bank: &MemoryBank<T>,
    part: usize,
    positives: &[PositiveSet<T>],
    tau: T,
) -> Result<Var> {
    check_tau(tau)?;
    bank.check_part(part)?;
    let f = tape.l2_normalize(features);
    let rows_t = tape.constant(bank.part(part).transpose()?);
    let logits = tape.matmul(f, rows_t)?;
    let logits = tape.scale(logits, T::one() / tau);
    let subsets: Vec<Vec<usize>> = positives.iter().map(|p| p.indices.clone()).collect();
    tape.subset_nll(logits, &subsets)
}

/// Softmax-clustering loss of a single feature against its positive set.
pub fn csl_loss<T: Real>(
    bank: &MemoryBank<T>,
    part: usize,
    feature: &[T],
    positives: &PositiveSet<T>,
    tau: T,
) -> Result<T> {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![1, feature.len()], feature.to_vec())?);
    let loss = csl_loss_tape(&mut tape, f, bank, part, std::slice::from_ref(positives), tau)?;
    Ok(tape.scalar(loss))
}

/// Fills a bank with one gradient-free forward pass over `images`.
pub fn bank_init<T: Real>(
    encoder: &Encoder,
    params: &EncoderParams<T>,
    images: &[Tensor<T>],
    ids: Vec<usize>,
    momentum: T,
    batch_size: usize,
) -> Result<MemoryBank<T>> {
    if images.is_empty() {
        return Err(PatError::config("memory bank over an empty dataset"));
    }
    let locals = crate::engine::embed::embed_images(encoder, params, images, batch_size)?.locals;
    MemoryBank::from_features(locals, ids, momentum)
}
