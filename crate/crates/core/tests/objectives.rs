use pat_core::csl::{csl_loss, select_positives};
use pat_core::objectives::{build_soft_label, psd_loss, soft_margin_triplet, total_loss, AblationFlags, LossInputs};
use pat_core::{oracle, MemoryBank, PositiveSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bank(rows: Vec<Vec<f64>>) -> MemoryBank<f64> {
    let n = rows.len();
    MemoryBank::from_features(vec![Tensor::from_rows(&rows).unwrap()], (0..n).collect(), 0.2).unwrap()
}

fn positives(indices: Vec<usize>) -> PositiveSet<f64> {
    PositiveSet {
        ids: indices.clone(),
        scores: vec![0.0; indices.len()],
        indices,
    }
}

#[test]
fn csl_uniform_four_rows_is_log4() {
    let b = bank(vec![
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.0, -1.0, 0.0],
        vec![0.0, 0.0, -1.0],
    ]);
    let loss = csl_loss(&b, 0, &[1.0, 0.0, 0.0], &positives(vec![2]), 0.02).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn csl_all_rows_positive_is_zero() {
    let b = bank(vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![-1.0, 0.0]]);
    let loss = csl_loss(&b, 0, &[0.3, 0.4], &positives(vec![0, 1, 2]), 0.1).unwrap();
    assert!(loss.abs() < 1e-12);
}

#[test]
fn csl_hand_rows_match_direct_formula() {
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.6, 0.8, 0.0], vec![0.0, 0.6, 0.8]];
    let b = bank(rows.clone());
    let f = [0.2, 0.5, -0.1];
    let pos = select_positives(&b, 0, &f, None, 1).unwrap();
    assert_eq!(pos.indices, vec![1]);
    let got = csl_loss(&b, 0, &f, &pos, 0.5).unwrap();
    let want = oracle::csl_loss(&rows, &f, &[1], 0.5);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn soft_label_single_foreign_identity() {
    let y = build_soft_label(3, &[7; 30], 0.5, 10).unwrap();
    assert!((y.probs[3] - 0.5).abs() < 1e-15);
    assert!((y.probs[7] - 0.5).abs() < 1e-15);
    assert_eq!(y.neighbor_counts, vec![(7, 30)]);
}

#[test]
fn soft_label_mixed_neighbours() {
    let y = build_soft_label(1, &[5, 5, 5, 9, 9, 2], 0.5, 10).unwrap();
    let want = oracle::soft_label(1, &[5, 5, 5, 9, 9, 2], 0.5, 10);
    for (a, b) in y.probs.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((y.probs[1] - 0.5).abs() < 1e-12);
    assert!((y.probs[5] - 0.25).abs() < 1e-12);
    assert!((y.probs[9] - 1.0 / 6.0).abs() < 1e-12);
    assert!((y.probs[2] - 1.0 / 12.0).abs() < 1e-12);
}

#[test]
fn soft_label_folds_ground_truth_neighbours() {
    let y = build_soft_label(4, &[4; 6], 0.5, 6).unwrap();
    assert_eq!(y.probs, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn psd_reduces_to_cross_entropy() {
    let logits = [0.3, -1.2, 2.0];
    let soft = build_soft_label(0, &[1, 2], 0.5, 3).unwrap();
    let got = psd_loss(&logits, &soft, 2, 0.0, 0.0).unwrap();
    let p = oracle::softmax(&logits);
    assert!((got + p[2].ln()).abs() < 1e-12);
}

#[test]
fn psd_hand_instance_matches_direct_formula() {
    let logits = [1.5, -0.25, 0.75];
    let soft = build_soft_label(0, &[1, 2, 2], 0.5, 3).unwrap();
    let got = psd_loss(&logits, &soft, 0, 0.5, 0.1).unwrap();
    let want = oracle::psd_loss(&logits, &soft.probs, 0, 0.5, 0.1);
    assert!((got - want).abs() < 1e-10);
}

#[test]
fn psd_near_delta_is_near_zero() {
    let soft = build_soft_label(1, &[1], 0.5, 3).unwrap();
    let got = psd_loss(&[-30.0, 30.0, -30.0], &soft, 1, 1.0, 0.0).unwrap();
    assert!(got < 1e-20);
}

#[test]
fn triplet_fixtures() {
    let same = Tensor::<f64>::from_fn(&[4, 3], |i| [0.1, 0.2, 0.3][i % 3]);
    let v = soft_margin_triplet(&same, &[0, 0, 1, 1]).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-12);

    let rows = vec![
        vec![0.0, 0.0],
        vec![0.3, -0.1],
        vec![1.0, 0.4],
        vec![0.7, 1.1],
    ];
    let ids = [0, 0, 1, 1];
    let got = soft_margin_triplet(&Tensor::from_rows(&rows).unwrap(), &ids).unwrap();
    let want = oracle::triplet(&rows, &ids).unwrap();
    assert!((got - want).abs() < 1e-8);

    let far = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![100.0], vec![100.0]]).unwrap();
    assert!(soft_margin_triplet::<f64>(&far, &ids).unwrap() < 1e-100);
}

#[test]
fn total_is_the_sum_of_enabled_terms() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let inputs = LossInputs {
            triplet: r.gen_range(0.0..3.0),
            csl: (0..3).map(|_| r.gen_range(0.0..3.0)).collect(),
            psd: r.gen_range(0.0..3.0),
            ce: r.gen_range(0.0..3.0),
        };
        let full = total_loss(&inputs, AblationFlags::default());
        let want = inputs.triplet + inputs.csl.iter().sum::<f64>() + inputs.psd;
        assert!((full.total - want).abs() < 1e-12);
        assert_eq!(full.ce, 0.0);

        let base = total_loss(&inputs, AblationFlags { csl_on: false, psd_on: false });
        assert!(base.csl.iter().all(|&c| c == 0.0));
        assert_eq!(base.psd, 0.0);
        assert!((base.total - inputs.triplet - inputs.ce).abs() < 1e-12);

        let csl_only = total_loss(&inputs, AblationFlags { csl_on: true, psd_on: false });
        assert_eq!(csl_only.psd, 0.0);
        assert_eq!(csl_only.csl, inputs.csl);
    }
    let zero = total_loss(&LossInputs { csl: vec![0.0; 3], ..Default::default() }, AblationFlags::default());
    assert_eq!(zero.total, 0.0);
}
