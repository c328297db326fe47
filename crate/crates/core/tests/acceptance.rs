//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `criterion N: PASS|FAIL ...` line; run with `--nocapture` to see
//! them.

use std::sync::OnceLock;
use std::time::Instant;

use pat_core::container::{decode, encode};
use pat_core::csl::{csl_loss, select_positives};
use pat_core::engine::RunConfig;
use pat_core::gradcheck::{run_suite, toy_objective_check, SUITE_EPSILON};
use pat_core::objectives::{build_soft_label, psd_loss, soft_margin_triplet};
use pat_core::{oracle, AblationFlags, Encoder, EncoderParams, MemoryBank, PositiveSet, Tensor, TrainState, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

// Written to the raw handle so the line survives libtest's output capture.
fn emit(line: String) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(n: u32, pass: bool, detail: impl std::fmt::Display) {
    emit(format!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" }));
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_01_gradients() {
    let t0 = Instant::now();
    let suite = run_suite(0).unwrap();
    let toy = toy_objective_check(0, SUITE_EPSILON, 16).unwrap();
    let worst = suite
        .iter()
        .chain(std::iter::once(&toy))
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst.max_relative_error <= 1e-4 && secs < 300.0;
    report(
        1,
        pass,
        format!(
            "{} checks, worst {} {:.2e}; toy objective {} coords {:.2e}; {secs:.0}s",
            suite.len() + 1,
            worst.op,
            worst.max_relative_error,
            toy.coordinates,
            toy.max_relative_error
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_masking() {
    let mut c = pat_core::ModelConfig::toy(5);
    c.init_std = 0.3;
    c.blocks = 1;
    let enc = Encoder::with_default_regions(c.clone()).unwrap();
    let params = EncoderParams::<f64>::init(&c, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let img = Tensor::from_fn(&[3, c.image_h, c.image_w], |_| r.gen::<f64>());
    let out = enc.forward(&params, &[&img], true).unwrap();
    let m = c.num_parts;

    let mut leaked = 0.0f64;
    for probs in out.attention.as_ref().unwrap() {
        for i in 0..m {
            let allowed: Vec<usize> = std::iter::once(1 + i)
                .chain(enc.regions().regions[i].iter().map(|t| 1 + m + t))
                .collect();
            let keys = &probs.layout.groups[1 + i].keys;
            for h in 0..c.heads {
                for (k, w) in keys.iter().zip(probs.group(0, 1 + i, h)) {
                    if !allowed.contains(k) {
                        leaked += w.abs();
                    }
                }
            }
        }
    }

    let (gh, gw) = c.grid();
    let mut unchanged = true;
    for (i, region) in enc.regions().regions.iter().enumerate() {
        let mut perturbed = img.clone();
        let (h, w, p) = (c.image_h, c.image_w, c.patch_size);
        for t in (0..gh * gw).filter(|t| !region.contains(t)) {
            let (gy, gx) = (t / gw, t % gw);
            for ch in 0..3 {
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        perturbed.data_mut()[ch * h * w + y * w + x] += 1.0 + r.gen::<f64>();
                    }
                }
            }
        }
        let after = enc.forward(&params, &[&perturbed], false).unwrap();
        unchanged &= after.locals[i].data() == out.locals[i].data();
    }
    let pass = leaked == 0.0 && unchanged;
    report(2, pass, format!("out-of-region mass {leaked}, part features bitwise unchanged: {unchanged}"));
    assert!(pass);
}

#[test]
fn criterion_03_oracles() {
    let reports = oracle::run_all(0).unwrap();
    let pass = reports.iter().all(|r| r.passed);
    let detail: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {}x {:.1e}", r.name, r.cases, r.max_error))
        .collect();
    report(3, pass, detail.join(", "));
    assert!(pass);
}

#[test]
fn criterion_04_fixtures() {
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let bank = MemoryBank::from_features(
        vec![Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap()],
        vec![0, 1, 2, 3],
        0.2,
    )
    .unwrap();
    let one = PositiveSet {
        indices: vec![0],
        scores: vec![0.0],
        ids: vec![0],
    };
    let l = csl_loss(&bank, 0, &[1.0, 0.0], &one, 0.02).unwrap();
    errors.push(("csl log 4", (l - 4f64.ln()).abs()));
    let all = PositiveSet {
        indices: vec![0, 1, 2, 3],
        scores: vec![0.0; 4],
        ids: vec![0, 1, 2, 3],
    };
    errors.push(("csl all positive", csl_loss(&bank, 0, &[0.6, 0.8], &all, 0.1).unwrap().abs()));
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.6, 0.8, 0.0], vec![0.0, 0.6, 0.8]];
    let b3 = MemoryBank::from_features(vec![Tensor::from_rows(&rows).unwrap()], vec![0, 1, 2], 0.2).unwrap();
    let pos = PositiveSet {
        indices: vec![1],
        scores: vec![0.0],
        ids: vec![1],
    };
    let f = [0.2, 0.5, -0.1];
    let got = csl_loss(&b3, 0, &f, &pos, 0.5).unwrap();
    errors.push(("csl tau 0.5", (got - oracle::csl_loss(&rows, &f, &[1], 0.5)).abs()));

    let y = build_soft_label(3, &[7; 30], 0.5, 10).unwrap();
    errors.push(("soft label one id", (y.probs[3] - 0.5).abs().max((y.probs[7] - 0.5).abs())));
    let y = build_soft_label(1, &[5, 5, 5, 9, 9, 2], 0.5, 10).unwrap();
    let want = [(1, 0.5), (5, 0.25), (9, 1.0 / 6.0), (2, 1.0 / 12.0)];
    errors.push((
        "soft label {5,5,5,9,9,2}",
        want.iter().map(|&(i, w)| (y.probs[i] - w).abs()).fold(0.0, f64::max),
    ));
    let y = build_soft_label(4, &[4; 6], 0.5, 6).unwrap();
    errors.push(("soft label folded", (y.probs[4] - 1.0).abs()));

    let logits = [1.5, -0.25, 0.75];
    let soft = build_soft_label(0, &[1, 2, 2], 0.5, 3).unwrap();
    let got = psd_loss(&logits, &soft, 0, 0.5, 0.1).unwrap();
    errors.push(("psd hand", (got - oracle::psd_loss(&logits, &soft.probs, 0, 0.5, 0.1)).abs()));
    let ce = psd_loss(&logits, &soft, 2, 0.0, 0.0).unwrap();
    errors.push(("psd as ce", (ce + oracle::softmax(&logits)[2].ln()).abs()));

    let same = Tensor::<f64>::full(&[4, 3], 0.25);
    let t = soft_margin_triplet(&same, &[0, 0, 1, 1]).unwrap();
    errors.push(("triplet log 2", (t - 2f64.ln()).abs()));
    let rows = vec![vec![0.0, 0.0], vec![0.3, -0.1], vec![1.0, 0.4], vec![0.7, 1.1]];
    let t = soft_margin_triplet(&Tensor::from_rows(&rows).unwrap(), &[0, 0, 1, 1]).unwrap();
    errors.push(("triplet hand", (t - oracle::triplet(&rows, &[0, 0, 1, 1]).unwrap()).abs()));

    let (name, worst) = errors.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let pass = worst <= 1e-8;
    report(4, pass, format!("{} fixtures, worst {name} {worst:.1e}", errors.len()));
    assert!(pass);
}

#[test]
fn criterion_05_soft_labels() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_sum, mut min_entry, mut gt_ok) = (0.0f64, f64::INFINITY, true);
    for _ in 0..1000 {
        let classes = r.gen_range(2..40);
        let n = r.gen_range(1..60);
        let neighbours: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let gt = r.gen_range(0..classes);
        let alpha = r.gen_range(0.0..1.0);
        let y = build_soft_label(gt, &neighbours, alpha, classes).unwrap();
        worst_sum = worst_sum.max((y.probs.iter().sum::<f64>() - 1.0).abs());
        min_entry = min_entry.min(y.probs.iter().copied().fold(f64::INFINITY, f64::min));
        gt_ok &= y.probs[gt] >= 1.0 - alpha;
    }
    let pass = worst_sum <= 1e-9 && min_entry >= 0.0 && gt_ok;
    report(5, pass, format!("1000 labels, |sum-1| <= {worst_sum:.1e}, min entry {min_entry}, gt >= 1-alpha: {gt_ok}"));
    assert!(pass);
}

#[test]
fn criterion_06_memory_bank() {
    let scripted = oracle::bank_suite(6, 100).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let init: Vec<Vec<f64>> = (0..16).map(|_| (0..8).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let mut bank =
        MemoryBank::<f32>::from_features(vec![Tensor::<f64>::from_rows(&init).unwrap().cast()], (0..16).collect(), 0.2)
            .unwrap();
    for _ in 0..10_000 {
        let f: Vec<f32> = (0..8).map(|_| r.gen_range(-5.0..5.0)).collect();
        bank.update(r.gen_range(0..16), 0, &f).unwrap();
    }
    let drift = (0..16)
        .map(|j| {
            let n: f64 = bank.part(0).row(j).iter().map(|&x| (x as f64).powi(2)).sum();
            (n.sqrt() - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let pass = scripted.passed && scripted.max_error <= 1e-6 && drift <= 1e-5;
    report(6, pass, format!("recurrence err {:.1e}, norm drift after 1e4 updates {drift:.1e}", scripted.max_error));
    assert!(pass);
}

#[test]
fn criterion_07_overfit() {
    let t0 = Instant::now();
    let mut cfg = RunConfig::from_scratch();
    cfg.train.ablation = AblationFlags {
        csl_on: false,
        psd_on: false,
    };
    let tr = Trainer::new(cfg).unwrap();
    let mut state = tr.init_state().unwrap();
    let logs = tr.run(&mut state, |_, _| Ok(())).unwrap();
    let r = tr.train_retrieval(&state.params).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (first, last) = (logs[0].loss.total, logs.last().unwrap().loss.total);
    let pass = r.rank(1) == 1.0 && r.map >= 0.99 && secs < 600.0 && last < 0.2 * first;
    report(
        7,
        pass,
        format!(
            "{} epochs: Rank-1 {:.3}, mAP {:.4}, loss {first:.3} -> {last:.4}, {secs:.0}s",
            logs.len(),
            r.rank(1),
            r.map
        ),
    );
    assert!(pass);
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SHIFT_EPOCHS: usize = 15;

#[derive(Clone, Debug, Serialize)]
struct ShiftRun {
    seed: u64,
    variant: &'static str,
    target_rank1: f64,
    target_map: f64,
    /// Share of cross-identity torso-part positives with a matching torso colour.
    torso_match: f64,
    /// Same share over all cross-identity pairs.
    torso_base: f64,
}

fn shift_run(seed: u64, variant: &'static str, flags: AblationFlags) -> ShiftRun {
    let mut cfg = RunConfig::from_scratch();
    cfg.train.epochs = SHIFT_EPOCHS;
    cfg.train.warmup_epochs = 5;
    cfg.train.seed = seed;
    cfg.train.ablation = flags;
    let k = cfg.csl.k;
    let tr = Trainer::new(cfg).unwrap();
    let mut state = tr.init_state().unwrap();
    tr.run(&mut state, |_, _| Ok(())).unwrap();
    let target = tr.evaluate_target(&state.params).unwrap();
    let (torso_match, torso_base) = torso_statistics(&tr, &state, k);
    ShiftRun {
        seed,
        variant,
        target_rank1: target.rank(1),
        target_map: target.map,
        torso_match,
        torso_base,
    }
}

fn torso_statistics(tr: &Trainer, state: &TrainState, k: usize) -> (f64, f64) {
    let ds = tr.source();
    let torso: Vec<usize> = ds.records.iter().map(|r| ds.identity(r.id).unwrap().torso_color).collect();
    let bank = &state.bank;
    let ids = bank.ids();
    // The middle window covers the torso band.
    let part = 1;
    let (mut cross, mut hit) = (0usize, 0usize);
    for i in 0..bank.len() {
        let pos = select_positives(bank, part, bank.part(part).row(i), Some(i), k).unwrap();
        for &j in &pos.indices {
            if ids[j] != ids[i] {
                cross += 1;
                hit += (torso[j] == torso[i]) as usize;
            }
        }
    }
    let (mut pairs, mut same) = (0usize, 0usize);
    for i in 0..ids.len() {
        for j in 0..ids.len() {
            if ids[i] != ids[j] {
                pairs += 1;
                same += (torso[i] == torso[j]) as usize;
            }
        }
    }
    (hit as f64 / cross.max(1) as f64, same as f64 / pairs as f64)
}

fn shift_runs() -> &'static Vec<ShiftRun> {
    static RUNS: OnceLock<Vec<ShiftRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let variants = [
            ("B", AblationFlags { csl_on: false, psd_on: false }),
            ("B+CSL", AblationFlags { csl_on: true, psd_on: false }),
            ("B+CSL+PSD", AblationFlags { csl_on: true, psd_on: true }),
        ];
        let mut out = Vec::new();
        for seed in SEEDS {
            for (name, flags) in variants {
                out.push(shift_run(seed, name, flags));
            }
        }
        let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation_metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&out).unwrap()).unwrap();
        out
    })
}

#[test]
fn criterion_08_cross_identity_part_similarity() {
    let runs: Vec<&ShiftRun> = shift_runs().iter().filter(|r| r.variant == "B+CSL+PSD").collect();
    let ratios: Vec<f64> = runs.iter().map(|r| r.torso_match / r.torso_base).collect();
    let med = median(ratios.clone());
    let pass = med >= 3.0;
    let per_seed: Vec<String> = runs.iter().zip(&ratios).map(|(r, x)| format!("s{} {x:.2}", r.seed)).collect();
    report(
        8,
        pass,
        format!("median torso match / base rate {med:.2}x (base {:.3}); {}", runs[0].torso_base, per_seed.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_09_ablation_direction() {
    let runs = shift_runs();
    let med = |v: &str| median(runs.iter().filter(|r| r.variant == v).map(|r| 100.0 * r.target_rank1).collect());
    let (b, c, f) = (med("B"), med("B+CSL"), med("B+CSL+PSD"));
    let holds = f >= c && c >= b - 2.0;
    let mut failing = Vec::new();
    for seed in SEEDS {
        let r1 = |v: &str| 100.0 * runs.iter().find(|r| r.seed == seed && r.variant == v).unwrap().target_rank1;
        let (b, c, f) = (r1("B"), r1("B+CSL"), r1("B+CSL+PSD"));
        if !(f >= c && c >= b - 2.0) {
            failing.push(format!("seed {seed} (B {b:.1}, B+CSL {c:.1}, B+CSL+PSD {f:.1})"));
        }
    }
    let summary = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation_summary.json");
    let json = serde_json::json!({
        "median_rank1": { "B": b, "B+CSL": c, "B+CSL+PSD": f },
        "ordering_holds": holds,
        "per_seed_violations": failing,
    });
    std::fs::write(&summary, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    // Reported, not gated.
    emit(format!(
        "criterion 9: {} median target Rank-1 B {b:.1}, B+CSL {c:.1}, B+CSL+PSD {f:.1}; per-seed violations: {}; log {}",
        if holds { "PASS" } else { "FAIL (soft)" },
        if failing.is_empty() { "none".to_string() } else { failing.join("; ") },
        summary.display()
    ));
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_scratch();
    cfg.train.epochs = 4;
    cfg.train.warmup_epochs = 1;
    let tr = Trainer::new(cfg).unwrap();
    let flat = |s: &TrainState| -> Vec<f32> { s.params.tensors().iter().flat_map(|t| t.data().to_vec()).collect() };
    let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);

    let mut a = tr.init_state().unwrap();
    let mut per_epoch = Vec::new();
    tr.run(&mut a, |_, s| {
        per_epoch.push(flat(s));
        Ok(())
    })
    .unwrap();
    let mut b = tr.init_state().unwrap();
    tr.run(&mut b, |_, _| Ok(())).unwrap();
    let rerun = diff(&flat(&a), &flat(&b));

    let named = a.to_named().unwrap();
    let bytes = encode(&named).unwrap();
    let back = decode(&bytes).unwrap();
    let bitwise = named.len() == back.len()
        && named.iter().zip(&back).all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.dims() == t2.dims()
                && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && encode(&back).unwrap() == bytes;

    let mut part = tr.init_state().unwrap();
    tr.run_epoch(&mut part).unwrap();
    tr.run_epoch(&mut part).unwrap();
    let path = dir.path().join("epoch2.patb");
    part.save(&path).unwrap();
    let mut resumed = TrainState::load(&tr.config().model, &path).unwrap();
    let mut resume_err = 0.0f32;
    let mut e = 2;
    tr.run(&mut resumed, |_, s| {
        resume_err = resume_err.max(diff(&flat(s), &per_epoch[e]));
        e += 1;
        Ok(())
    })
    .unwrap();

    let pass = rerun <= 1e-5 && bitwise && resume_err <= 1e-5;
    report(
        10,
        pass,
        format!("rerun max diff {rerun:.1e}, container bitwise {bitwise}, resume max diff {resume_err:.1e}"),
    );
    assert!(pass);
}
