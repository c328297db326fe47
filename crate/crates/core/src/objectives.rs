//! Part-guided soft labels, the self-distillation loss, the soft-margin
//! triplet loss and the assembly of the full training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{PatError, Result};
use crate::tensor::{Real, Tensor};

/// Distribution over source identities built from part neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
    pub ground_truth: usize,
    /// `(id, count)` for every distinct neighbour id, ascending by id.
    pub neighbor_counts: Vec<(usize, usize)>,
    pub alpha: f64,
}

/// `Y[gt] = 1 - alpha + alpha/n * count(gt)`, `Y[i] = alpha/n * count(i)` for
/// other neighbour ids, zero elsewhere, with `n = neighbor_ids.len()`.
///
/// Neighbour mass that lands on the ground-truth id is folded into its
/// entry so the label always sums to one.
pub fn build_soft_label(
    ground_truth: usize,
    neighbor_ids: &[usize],
    alpha: f64,
    num_classes: usize,
) -> Result<SoftLabel> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(PatError::config(format!("alpha {alpha} outside [0, 1)")));
    }
    if neighbor_ids.is_empty() {
        return Err(PatError::config("soft label needs at least one neighbour id"));
    }
    if let Some(&bad) = std::iter::once(&ground_truth)
        .chain(neighbor_ids)
        .find(|&&i| i >= num_classes)
    {
        return Err(PatError::Index {
            what: "soft label id",
            index: bad,
            len: num_classes,
        });
    }
    let mut counts = vec![0usize; num_classes];
    for &i in neighbor_ids {
        counts[i] += 1;
    }
    let unit = alpha / neighbor_ids.len() as f64;
    let mut probs: Vec<f64> = counts.iter().map(|&c| unit * c as f64).collect();
    probs[ground_truth] += 1.0 - alpha;
    let neighbor_counts = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i, c))
        .collect();
    Ok(SoftLabel {
        probs,
        ground_truth,
        neighbor_counts,
        alpha,
    })
}

/// One-hot label with `epsilon` spread uniformly over all classes.
pub fn smoothed_one_hot(label: usize, num_classes: usize, epsilon: f64) -> Vec<f64> {
    let off = epsilon / num_classes as f64;
    let mut v = vec![off; num_classes];
    v[label] += 1.0 - epsilon;
    v
}

/// Per-row distillation targets `lambda * Y_s + (1 - lambda) * smooth(y)`.
/// Since the loss is linear in its target this equals the two-term form.
pub fn psd_targets<T: Real>(
    soft: &[SoftLabel],
    hard: &[usize],
    lambda: f64,
    epsilon: f64,
    num_classes: usize,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PatError::config(format!("lambda {lambda} outside [0, 1]")));
    }
    if soft.len() != hard.len() {
        return Err(PatError::shape("psd_targets", &[soft.len()], &[hard.len()]));
    }
    let mut data = Vec::with_capacity(soft.len() * num_classes);
    for (s, &y) in soft.iter().zip(hard) {
        if s.probs.len() != num_classes || y >= num_classes {
            return Err(PatError::shape("psd_targets", &[s.probs.len()], &[num_classes]));
        }
        let h = smoothed_one_hot(y, num_classes, epsilon);
        data.extend(
            s.probs
                .iter()
                .zip(&h)
                .map(|(&a, &b)| T::of(lambda * a + (1.0 - lambda) * b)),
        );
    }
    Tensor::new(vec![soft.len(), num_classes], data)
}

/// Label-smoothed hard-label cross entropy, summed over rows.
pub fn smoothed_ce_tape<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
    let c = tape.value(logits).cols();
    if epsilon == 0.0 {
        return tape.cross_entropy(logits, labels);
    }
    let mut data = Vec::with_capacity(labels.len() * c);
    for &y in labels {
        if y >= c {
            return Err(PatError::Index {
                what: "label",
                index: y,
                len: c,
            });
        }
        data.extend(smoothed_one_hot(y, c, epsilon).into_iter().map(T::of));
    }
    let targets = Tensor::new(vec![labels.len(), c], data)?;
    tape.soft_cross_entropy(logits, &targets)
}

/// Distillation loss for a `B x C` logit block, summed over rows.
pub fn psd_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    soft: &[SoftLabel],
    hard: &[usize],
    lambda: f64,
    epsilon: f64,
) -> Result<Var> {
    let c = tape.value(logits).cols();
    let targets = psd_targets::<T>(soft, hard, lambda, epsilon, c)?;
    tape.soft_cross_entropy(logits, &targets)
}

/// `-lambda sum Y_s log P - (1 - lambda) sum smooth(y) log P` for one sample.
pub fn psd_loss(logits: &[f64], soft: &SoftLabel, hard: usize, lambda: f64, epsilon: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec())?);
    let v = psd_loss_tape(&mut tape, l, std::slice::from_ref(soft), &[hard], lambda, epsilon)?;
    Ok(tape.scalar(v))
}

/// Batch-hard soft-margin triplet loss on a `B x D` feature block.
pub fn soft_margin_triplet<T: Real>(features: &Tensor<T>, ids: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let v = tape.soft_margin_triplet(x, ids)?;
    Ok(tape.scalar(v))
}

/// Which optional terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub csl_on: bool,
    pub psd_on: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            csl_on: true,
            psd_on: true,
        }
    }
}

/// Scalar value of every term of the objective for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    /// Per part, summed over the batch.
    pub csl: Vec<f64>,
    /// Distillation term summed over the batch (zero when disabled).
    pub psd: f64,
    /// Smoothed hard-label cross entropy used in place of `psd` when
    /// distillation is off (zero otherwise).
    pub ce: f64,
    pub total: f64,
}

/// Component values feeding [`total_loss`].
#[derive(Clone, Debug, Default)]
pub struct LossInputs {
    pub triplet: f64,
    pub csl: Vec<f64>,
    pub psd: f64,
    pub ce: f64,
}

/// Whether distillation is actually used: it needs the positive sets that
/// only exist while cross-ID learning is on.
pub fn psd_active(flags: AblationFlags) -> bool {
    flags.csl_on && flags.psd_on
}

/// Combines components under the ablation flags: disabled terms are
/// identically zero, and without distillation the smoothed CE stands in.
pub fn total_loss(inputs: &LossInputs, flags: AblationFlags) -> LossBreakdown {
    let csl: Vec<f64> = if flags.csl_on {
        inputs.csl.clone()
    } else {
        vec![0.0; inputs.csl.len()]
    };
    let (psd, ce) = if psd_active(flags) {
        (inputs.psd, 0.0)
    } else {
        (0.0, inputs.ce)
    };
    let total = inputs.triplet + csl.iter().sum::<f64>() + psd + ce;
    LossBreakdown {
        triplet: inputs.triplet,
        csl,
        psd,
        ce,
        total,
    }
}
