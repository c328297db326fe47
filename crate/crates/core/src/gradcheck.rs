//! Central finite-difference verification of tape gradients (64-bit).

use crate::autodiff::{Tape, Var};
use crate::error::{PatError, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_relative_error: f64,
    /// `(input, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(op: &str, inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(PatError::NonFinite(format!("{op}: forward value {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar produced by `f` against central
/// differences over every coordinate of every input.
pub fn finite_diff_check<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_coordinates(op, inputs, epsilon, f, |_, len| (0..len).collect())
}

/// Like [`finite_diff_check`] but probes at most `per_input` coordinates of
/// each input, drawn without replacement from a generator keyed by `seed`.
pub fn finite_diff_check_sampled<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    per_input: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_coordinates(op, inputs, epsilon, f, |i, len| {
        let mut r = crate::rng::rng(seed, crate::rng::Stream::Oracle, 7, i as u64);
        let mut picked = rand::seq::index::sample(&mut r, len, per_input.min(len)).into_vec();
        picked.sort_unstable();
        picked
    })
}

fn check_coordinates<F, S>(op: &str, inputs: &[Tensor<f64>], epsilon: f64, f: F, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> Vec<usize>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(PatError::config(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).map_err(|e| match e {
        PatError::NonFinite(m) => PatError::NonFinite(format!("{op}: {m}")),
        other => other,
    })?;
    if tape.value(out).len() != 1 {
        return Err(PatError::shape("finite_diff_check", tape.dims(out), &[1]));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        op: op.to_string(),
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*var);
        for c in select(i, inputs[i].len()) {
            let x0 = inputs[i].data()[c];
            probe[i].data_mut()[c] = x0 + epsilon;
            let plus = eval(op, &probe, &f)?;
            probe[i].data_mut()[c] = x0 - epsilon;
            let minus = eval(op, &probe, &f)?;
            probe[i].data_mut()[c] = x0;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[c];
            if !a.is_finite() {
                return Err(PatError::NonFinite(format!("{op}: analytic gradient")));
            }
            let err = relative_error(a, numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (i, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Step used by [`run_suite`].
pub const SUITE_EPSILON: f64 = 1e-5;

fn random(seed: u64, tag: u64, dims: &[usize], scale: f64) -> Tensor<f64> {
    use rand::Rng;
    let mut r = crate::rng::rng(seed, crate::rng::Stream::Oracle, 100 + tag, 0);
    Tensor::from_fn(dims, |_| r.gen_range(-scale..scale))
}

/// Gradient checks for every differentiable primitive, each loss, and the
/// full training objective of a small encoder with respect to all of its
/// parameters. Non-scalar ops are reduced with fixed random weights.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    use std::sync::Arc;

    use crate::autodiff::{AttentionGroup, AttentionLayout};

    let eps = SUITE_EPSILON;
    let w = |tag: u64, n: usize| random(seed, 1000 + tag, &[n], 1.0).into_data();
    let mut out = Vec::new();

    let (a, b) = (random(seed, 1, &[3, 4], 1.0), random(seed, 2, &[4, 2], 1.0));
    let wm = w(1, 6);
    out.push(finite_diff_check("matmul", &[a.clone(), b], eps, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.weighted_sum(y, &wm)
    })?);

    let c = random(seed, 3, &[3, 4], 1.0);
    let w12 = w(2, 12);
    out.push(finite_diff_check("add", &[a.clone(), c.clone()], eps, |t, v| {
        let y = t.add(v[0], v[1])?;
        t.weighted_sum(y, &w12)
    })?);
    out.push(finite_diff_check("mul", &[a.clone(), c.clone()], eps, |t, v| {
        let y = t.mul(v[0], v[1])?;
        t.weighted_sum(y, &w12)
    })?);
    out.push(finite_diff_check("add_row", &[a.clone(), random(seed, 4, &[1, 4], 1.0)], eps, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        t.weighted_sum(y, &w12)
    })?);
    out.push(finite_diff_check("scale", std::slice::from_ref(&a), eps, |t, v| {
        let y = t.scale(v[0], -1.7);
        t.weighted_sum(y, &w12)
    })?);
    let gamma = random(seed, 5, &[1, 4], 1.0);
    let beta = random(seed, 6, &[1, 4], 1.0);
    out.push(finite_diff_check("layer_norm", &[a.clone(), gamma, beta], eps, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        t.weighted_sum(y, &w12)
    })?);
    out.push(finite_diff_check("gelu", &[random(seed, 7, &[3, 4], 3.0)], eps, |t, v| {
        let y = t.gelu(v[0]);
        t.weighted_sum(y, &w12)
    })?);
    out.push(finite_diff_check("l2_normalize", std::slice::from_ref(&a), eps, |t, v| {
        let y = t.l2_normalize(v[0]);
        t.weighted_sum(y, &w12)
    })?);
    out.push(finite_diff_check("softmax", &[random(seed, 8, &[3, 4], 2.0)], eps, |t, v| {
        let y = t.softmax(v[0]);
        t.weighted_sum(y, &w12)
    })?);
    let w20 = w(3, 20);
    out.push(finite_diff_check("concat_rows", &[a.clone(), random(seed, 9, &[2, 4], 1.0)], eps, |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        t.weighted_sum(y, &w20)
    })?);
    let w8 = w(4, 8);
    out.push(finite_diff_check("slice_rows", std::slice::from_ref(&a), eps, |t, v| {
        let y = t.slice_rows(v[0], 1, 3)?;
        t.weighted_sum(y, &w8)
    })?);
    out.push(finite_diff_check("transpose", std::slice::from_ref(&a), eps, |t, v| {
        let y = t.transpose(v[0])?;
        t.weighted_sum(y, &w12)
    })?);
    let w16 = w(5, 16);
    out.push(finite_diff_check("gather_rows", std::slice::from_ref(&a), eps, |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2, 1])?;
        t.weighted_sum(y, &w16)
    })?);
    out.push(finite_diff_check("sum_all", std::slice::from_ref(&a), eps, |t, v| Ok(t.sum_all(v[0])))?);

    let logits = random(seed, 10, &[3, 5], 2.0);
    out.push(finite_diff_check("cross_entropy", std::slice::from_ref(&logits), eps, |t, v| {
        t.cross_entropy(v[0], &[4, 0, 2])
    })?);
    out.push(finite_diff_check("softmax+cross_entropy", std::slice::from_ref(&logits), eps, |t, v| {
        let p = t.softmax(v[0]);
        let p = t.scale(p, 3.0);
        t.cross_entropy(p, &[1, 1, 3])
    })?);
    let targets = Tensor::from_fn(&[3, 5], |i| [0.1, 0.2, 0.3, 0.15, 0.25][i % 5]);
    out.push(finite_diff_check("soft_cross_entropy", std::slice::from_ref(&logits), eps, |t, v| {
        t.soft_cross_entropy(v[0], &targets)
    })?);
    out.push(finite_diff_check("subset_nll", std::slice::from_ref(&logits), eps, |t, v| {
        t.subset_nll(v[0], &[vec![0, 3], vec![1], vec![2, 4, 0]])
    })?);
    out.push(finite_diff_check("soft_margin_triplet", &[random(seed, 11, &[6, 3], 1.0)], eps, |t, v| {
        t.soft_margin_triplet(v[0], &[0, 0, 1, 1, 2, 2])
    })?);

    // grouped attention with overlapping key sets and two samples
    let layout = Arc::new(AttentionLayout {
        seq_len: 5,
        groups: vec![
            AttentionGroup {
                queries: vec![0, 3, 4],
                keys: vec![0, 3, 4],
            },
            AttentionGroup {
                queries: vec![1],
                keys: vec![1, 3],
            },
            AttentionGroup {
                queries: vec![2],
                keys: vec![2, 3, 4],
            },
        ],
    });
    let qkv: Vec<Tensor<f64>> = (0..3).map(|i| random(seed, 12 + i, &[10, 4], 1.0)).collect();
    let w40 = w(6, 40);
    out.push(finite_diff_check("attention", &qkv, eps, |t, v| {
        let y = t.attention(v[0], v[1], v[2], 2, &layout)?;
        t.weighted_sum(y, &w40)
    })?);

    // losses built from the public helpers
    let bank_rows = random(seed, 20, &[6, 4], 1.0);
    let bank = crate::csl::MemoryBank::from_features(vec![bank_rows], vec![0, 1, 2, 0, 1, 2], 0.2)?;
    let feats = random(seed, 21, &[2, 4], 1.0);
    let positives: Vec<_> = (0..2)
        .map(|r| crate::csl::select_positives(&bank, 0, feats.row(r), None, 2))
        .collect::<Result<_>>()?;
    out.push(finite_diff_check("csl_loss", &[feats], eps, |t, v| {
        crate::csl::csl_loss_tape(t, v[0], &bank, 0, &positives, 0.5)
    })?);
    let soft = vec![
        crate::objectives::build_soft_label(0, &[1, 1, 2], 0.5, 3)?,
        crate::objectives::build_soft_label(2, &[2, 0, 0], 0.5, 3)?,
    ];
    out.push(finite_diff_check("psd_loss", &[random(seed, 22, &[2, 3], 2.0)], eps, |t, v| {
        crate::objectives::psd_loss_tape(t, v[0], &soft, &[0, 2], 0.5, 0.1)
    })?);

    out.push(full_objective_check(seed, eps)?);
    Ok(out)
}

/// The complete training objective (triplet, part CSL, distillation) of the
/// small verification encoder, differentiated with respect to every
/// parameter. Positive sets are mined once at the base point.
pub fn full_objective_check(seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    objective_check(&crate::encoder::ModelConfig::gradcheck(), seed, epsilon, None)
}

/// The same objective on the toy geometry, probing `per_tensor` sampled
/// coordinates of every parameter tensor.
pub fn toy_objective_check(seed: u64, epsilon: f64, per_tensor: usize) -> Result<GradCheckReport> {
    let cfg = crate::encoder::ModelConfig::toy(4);
    objective_check(&cfg, seed, epsilon, Some(per_tensor))
}

fn objective_check(
    cfg: &crate::encoder::ModelConfig,
    seed: u64,
    epsilon: f64,
    per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    use crate::csl::{csl_loss_tape, select_positives, MemoryBank};
    use crate::encoder::{Encoder, EncoderParams};
    use crate::objectives::{build_soft_label, psd_loss_tape};

    let encoder = Encoder::with_default_regions(cfg.clone())?;
    let mut params = EncoderParams::<f64>::init(cfg, seed)?;
    // larger weights than the init so every path carries signal
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let noise = random(seed, 200 + i as u64, t.dims(), 0.3);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let images: Vec<Tensor<f64>> = (0..4)
        .map(|i| random(seed, 300 + i, &[cfg.channels, cfg.image_h, cfg.image_w], 1.0))
        .collect();
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let labels = [0usize, 0, 1, 1];
    let (k_bank, k) = (8usize, 3usize);
    let bank_ids: Vec<usize> = (0..k_bank).map(|i| i % cfg.num_classes).collect();
    let bank_parts: Vec<Tensor<f64>> = (0..cfg.num_parts)
        .map(|i| random(seed, 400 + i as u64, &[k_bank, cfg.embed_dim], 1.0))
        .collect();
    let bank = MemoryBank::from_features(bank_parts, bank_ids, 0.2)?;
    let base = encoder.forward(&params, &refs, false)?;
    let mut positives = Vec::new();
    let mut neighbours = vec![Vec::new(); labels.len()];
    for part in 0..cfg.num_parts {
        let sets = (0..labels.len())
            .map(|r| select_positives(&bank, part, base.locals[part].row(r), Some(r), k))
            .collect::<Result<Vec<_>>>()?;
        for (n, s) in neighbours.iter_mut().zip(&sets) {
            n.extend_from_slice(&s.ids);
        }
        positives.push(sets);
    }
    let soft = neighbours
        .iter()
        .zip(&labels)
        .map(|(n, &y)| build_soft_label(y, n, 0.5, cfg.num_classes))
        .collect::<Result<Vec<_>>>()?;

    let objective = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let out = encoder.forward_tape(t, &params, v, &refs)?;
        let mut total = t.soft_margin_triplet(out.global, &labels)?;
        for (part, sets) in positives.iter().enumerate() {
            // a moderate temperature keeps the check well conditioned
            let l = csl_loss_tape(t, out.locals[part], &bank, part, sets, 0.5)?;
            total = t.add(total, l)?;
        }
        let l = psd_loss_tape(t, out.logits, &soft, &labels, 0.5, 0.1)?;
        t.add(total, l)
    };
    match per_tensor {
        None => finite_diff_check("full_objective", params.tensors(), epsilon, objective),
        Some(n) => finite_diff_check_sampled("toy_objective", params.tensors(), epsilon, n, seed, objective),
    }
}
