//! Slow, direct reference implementations used to cross-check the fast
//! paths, plus randomized equivalence suites built on them.
//!
//! Everything here works on plain `f64` vectors and deliberately avoids the
//! crate's kernels: loops instead of GEMM, full sorts instead of heaps,
//! pairwise counting instead of ranked scans.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{AttentionLayout, Tape};
use crate::csl::{select_positives, MemoryBank};
use crate::error::Result;
use crate::eval::{compute_metrics, SampleMeta};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub type Matrix = Vec<Vec<f64>>;

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

/// `exp(x_i) / sum exp(x_j)` without max subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn norm(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top-`k` rows by cosine via a full sort; ties go to the lower index.
pub fn knn(rows: &Matrix, query: &[f64], exclude: Option<usize>, k: usize) -> Vec<usize> {
    let q = norm(query);
    let mut scored: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(i, r)| (i, dot(&norm(r), &q)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

/// mAP and the CMC curve by pairwise counting. For each valid positive the
/// rank is one plus the number of valid entries ordered before it.
pub fn ap_cmc(query: &Matrix, query_meta: &[SampleMeta], gallery: &Matrix, gallery_meta: &[SampleMeta]) -> Option<(f64, Vec<f64>)> {
    let g = gallery.len();
    let mut aps = Vec::new();
    let mut first_hit = Vec::new();
    for (q, qm) in query.iter().zip(query_meta) {
        let d: Vec<f64> = gallery
            .iter()
            .map(|r| r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let valid: Vec<usize> = (0..g)
            .filter(|&j| !(gallery_meta[j].id == qm.id && gallery_meta[j].camera == qm.camera))
            .collect();
        let before = |a: usize, b: usize| d[a] < d[b] || (d[a] == d[b] && a < b);
        let positives: Vec<usize> = valid.iter().copied().filter(|&j| gallery_meta[j].id == qm.id).collect();
        if positives.is_empty() {
            continue;
        }
        let mut ap = 0.0;
        let mut best = usize::MAX;
        for &p in &positives {
            let rank = 1 + valid.iter().filter(|&&j| before(j, p)).count();
            let hits = 1 + positives.iter().filter(|&&j| before(j, p)).count();
            ap += hits as f64 / rank as f64;
            best = best.min(rank);
        }
        aps.push(ap / positives.len() as f64);
        first_hit.push(best);
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    let cmc = (1..=g)
        .map(|r| first_hit.iter().filter(|&&h| h <= r).count() as f64 / n)
        .collect();
    Some((aps.iter().sum::<f64>() / n, cmc))
}

/// Replays `w <- normalize((1 - m) w + m normalize(f))` over `features`.
pub fn bank_recurrence(initial: &[f64], momentum: f64, features: &[Vec<f64>]) -> Vec<f64> {
    let mut w = initial.to_vec();
    for f in features {
        let f = norm(f);
        let blended: Vec<f64> = w.iter().zip(&f).map(|(a, b)| (1.0 - momentum) * a + momentum * b).collect();
        w = norm(&blended);
    }
    w
}

/// Multi-head attention over one sequence as a dense score matrix with
/// `-inf` at every disallowed position.
pub fn masked_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, layout: &AttentionLayout) -> Matrix {
    let s = q.len();
    let width = q[0].len();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; width]; s];
    for i in 0..s {
        let Some(group) = layout.groups.iter().find(|g| g.queries.contains(&i)) else {
            continue;
        };
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    if group.keys.contains(&j) {
                        dot(&q[i][cols.clone()], &k[j][cols.clone()]) * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..s {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * v[j][c];
                }
            }
        }
    }
    out
}

/// Batch-hard soft-margin triplet by scanning every (positive, negative)
/// pair per anchor: `softplus` is monotone, so the hardest pair maximizes it.
pub fn triplet(features: &Matrix, ids: &[usize]) -> Option<f64> {
    let d = |a: usize, b: usize| -> f64 {
        features[a].iter().zip(&features[b]).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let n = features.len();
    let mut losses = Vec::new();
    for a in 0..n {
        let mut worst: Option<f64> = None;
        for p in (0..n).filter(|&p| p != a && ids[p] == ids[a]) {
            for m in (0..n).filter(|&m| ids[m] != ids[a]) {
                let l = (1.0 + (d(a, p) - d(a, m)).exp()).ln();
                worst = Some(worst.map_or(l, |w| w.max(l)));
            }
        }
        losses.extend(worst);
    }
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `-log(sum_P exp(f.w/tau) / sum_all exp(f.w/tau))` on normalized vectors.
pub fn csl_loss(rows: &Matrix, feature: &[f64], positives: &[usize], tau: f64) -> f64 {
    let f = norm(feature);
    let e: Vec<f64> = rows.iter().map(|r| (dot(&f, &norm(r)) / tau).exp()).collect();
    let num: f64 = positives.iter().map(|&i| e[i]).sum();
    -(num / e.iter().sum::<f64>()).ln()
}

/// Soft label by counting: `1 - alpha` on the ground truth plus
/// `alpha / n` for every neighbour occurrence.
pub fn soft_label(ground_truth: usize, neighbors: &[usize], alpha: f64, num_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; num_classes];
    y[ground_truth] = 1.0 - alpha;
    for &i in neighbors {
        y[i] += alpha / neighbors.len() as f64;
    }
    y
}

/// `-lambda sum Y log P - (1 - lambda) sum smooth(y) log P`.
pub fn psd_loss(logits: &[f64], soft: &[f64], hard: usize, lambda: f64, epsilon: f64) -> f64 {
    let p = softmax(logits);
    let c = logits.len() as f64;
    let mut l = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        let smooth = epsilon / c + if i == hard { 1.0 - epsilon } else { 0.0 };
        l -= (lambda * soft[i] + (1.0 - lambda) * smooth) * pi.ln();
    }
    l
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    fn new(name: &'static str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            cases,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn tensor(m: &Matrix) -> Tensor<f64> {
    Tensor::from_rows(m).expect("rectangular")
}

/// Matrix products up to 16x16 against the triple loop.
pub fn matmul_suite(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut r = rng::rng(seed, Stream::Oracle, 1, c as u64);
        let (m, k, n) = (r.gen_range(1..=16), r.gen_range(1..=16), r.gen_range(1..=16));
        let (a, b) = (random_matrix(&mut r, m, k), random_matrix(&mut r, k, n));
        let fast = tensor(&a).matmul(&tensor(&b))?;
        worst = worst.max(fast.max_abs_diff(&tensor(&matmul(&a, &b))));
    }
    Ok(OracleReport::new("matmul", cases, worst, 1e-6))
}

pub fn softmax_suite(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut r = rng::rng(seed, Stream::Oracle, 2, c as u64);
        let n = r.gen_range(1..=12);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let fast = Tensor::new(vec![1, n], x.clone())?.softmax_last();
        let slow = softmax(&x);
        worst = fast.data().iter().zip(&slow).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    Ok(OracleReport::new("softmax", cases, worst, 1e-12))
}

/// Heap-based positive selection against the full sort. The error counts
/// instances whose index lists differ.
pub fn knn_suite(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut mismatches = 0usize;
    for c in 0..cases {
        let mut r = rng::rng(seed, Stream::Oracle, 3, c as u64);
        let (n, d) = (r.gen_range(2..=100), r.gen_range(1..=16));
        let rows = random_matrix(&mut r, n, d);
        let query: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let k = r.gen_range(1..n);
        let exclude = r.gen_bool(0.7).then(|| r.gen_range(0..n));
        let bank = MemoryBank::from_features(vec![tensor(&rows)], (0..n).collect(), 0.2)?;
        let got = select_positives(&bank, 0, &query, exclude, k)?.indices;
        let want = knn(&rows, &query, exclude, k);
        if got != want {
            mismatches += 1;
        }
    }
    Ok(OracleReport::new("select_positives", cases, mismatches as f64, 0.0))
}

pub fn metrics_suite(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    for c in 0..cases {
        let mut r = rng::rng(seed, Stream::Oracle, 4, c as u64);
        let (nq, ng, d) = (r.gen_range(1..=30), r.gen_range(2..=100), r.gen_range(1..=8));
        let ids = r.gen_range(2..=10);
        let mut meta = |n: usize| -> Vec<SampleMeta> {
            (0..n)
                .map(|_| SampleMeta {
                    id: r.gen_range(0..ids),
                    camera: r.gen_range(0..3),
                })
                .collect()
        };
        let (qm, gm) = (meta(nq), meta(ng));
        // coarse grid values so distance ties actually occur
        let mut grid = |n: usize| -> Matrix {
            (0..n)
                .map(|_| (0..d).map(|_| r.gen_range(-3i32..=3) as f64 * 0.5).collect())
                .collect()
        };
        let (q, g) = (grid(nq), grid(ng));
        let Some((map, cmc)) = ap_cmc(&q, &qm, &g, &gm) else {
            continue;
        };
        let fast = compute_metrics(&tensor(&q), &qm, &tensor(&g), &gm)?;
        worst = worst.max((fast.map - map).abs());
        worst = fast.cmc.iter().zip(&cmc).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        done += 1;
    }
    Ok(OracleReport::new("compute_metrics", done, worst, 1e-9))
}

/// Scripted update sequences against the recurrence.
pub fn bank_suite(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut r = rng::rng(seed, Stream::Oracle, 5, c as u64);
        let (n, d) = (r.gen_range(1..=6), r.gen_range(1..=8));
        let m = r.gen_range(0.05..=1.0);
        let rows = random_matrix(&mut r, n, d);
        let mut bank = MemoryBank::from_features(vec![tensor(&rows)], vec![0; n], m)?;
        let mut script: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
        for _ in 0..r.gen_range(1..=12) {
            let j = r.gen_range(0..n);
            let f: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            bank.update(j, 0, &f)?;
            script[j].push(f);
        }
        for j in 0..n {
            let want = bank_recurrence(&norm(&rows[j]), m, &script[j]);
            worst = bank.part(0).row(j).iter().zip(&want).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        }
    }
    Ok(OracleReport::new("bank_update", cases, worst, 1e-6))
}

/// Grouped attention on random layouts against dense masked attention.
pub fn attention_suite(seed: u64, cases: usize) -> Result<OracleReport> {
    use crate::autodiff::AttentionGroup;
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut r = rng::rng(seed, Stream::Oracle, 6, c as u64);
        let s = r.gen_range(2..=10);
        let heads = r.gen_range(1..=3);
        let width = heads * r.gen_range(1..=4);
        // split rows into random query groups, each with random keys
        let mut owner: Vec<usize> = (0..s).map(|_| r.gen_range(0..3)).collect();
        owner[0] = 0;
        let groups = (0..3)
            .filter_map(|g| {
                let queries: Vec<usize> = (0..s).filter(|&i| owner[i] == g).collect();
                let mut keys: Vec<usize> = (0..s).filter(|_| r.gen_bool(0.5)).collect();
                if keys.is_empty() {
                    keys.push(r.gen_range(0..s));
                }
                (!queries.is_empty()).then_some(AttentionGroup { queries, keys })
            })
            .collect();
        let layout = AttentionLayout { seq_len: s, groups };
        let (q, k, v) = (
            random_matrix(&mut r, s, width),
            random_matrix(&mut r, s, width),
            random_matrix(&mut r, s, width),
        );
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.constant(tensor(&q)), tape.constant(tensor(&k)), tape.constant(tensor(&v)));
        let out = tape.attention(qv, kv, vv, heads, &Arc::new(layout.clone()))?;
        let want = masked_attention(&q, &k, &v, heads, &layout);
        worst = worst.max(tape.value(out).max_abs_diff(&tensor(&want)));
    }
    Ok(OracleReport::new("masked_attention", cases, worst, 1e-10))
}

pub fn triplet_suite(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut r = rng::rng(seed, Stream::Oracle, 7, c as u64);
        let (p, k, d) = (r.gen_range(2..=4), r.gen_range(2..=4), r.gen_range(1..=6));
        let ids: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let x = random_matrix(&mut r, p * k, d);
        let fast = crate::objectives::soft_margin_triplet(&tensor(&x), &ids)?;
        let want = triplet(&x, &ids).expect("every anchor has a positive");
        worst = worst.max((fast - want).abs());
    }
    Ok(OracleReport::new("soft_margin_triplet", cases, worst, 1e-8))
}

/// Every equivalence suite with the case counts used by the acceptance run.
pub fn run_all(seed: u64) -> Result<Vec<OracleReport>> {
    Ok(vec![
        matmul_suite(seed, 100)?,
        softmax_suite(seed, 100)?,
        knn_suite(seed, 200)?,
        metrics_suite(seed, 50)?,
        bank_suite(seed, 100)?,
        attention_suite(seed, 50)?,
        triplet_suite(seed, 50)?,
    ])
}
