use pat_core::engine::{lr_at, RunConfig};
use pat_core::objectives::AblationFlags;
use pat_core::{PatError, TrainState, Trainer};

fn small(csl_on: bool, psd_on: bool) -> RunConfig {
    let mut c = RunConfig::from_scratch();
    c.model.blocks = 1;
    c.data.source_ids = 4;
    c.data.target_ids = 4;
    c.data.images_per_id = 4;
    c.model.num_classes = 4;
    c.csl.k = 3;
    c.train.epochs = 4;
    c.train.warmup_epochs = 1;
    c.train.ablation = AblationFlags { csl_on, psd_on };
    c.validate().unwrap();
    c
}

fn params_of(s: &TrainState) -> Vec<f32> {
    s.params.tensors().iter().flat_map(|t| t.data().to_vec()).collect()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn same_seed_runs_agree() {
    let tr = Trainer::new(small(true, true)).unwrap();
    let mut a = tr.init_state().unwrap();
    let mut b = tr.init_state().unwrap();
    tr.run(&mut a, |_, _| Ok(())).unwrap();
    tr.run(&mut b, |_, _| Ok(())).unwrap();
    assert!(max_diff(&params_of(&a), &params_of(&b)) <= 1e-5);
    assert_eq!(a.bank, b.bank);

    let mut other = small(true, true);
    other.train.seed = 1;
    let tr2 = Trainer::new(other).unwrap();
    let mut c = tr2.init_state().unwrap();
    tr2.run(&mut c, |_, _| Ok(())).unwrap();
    assert!(max_diff(&params_of(&a), &params_of(&c)) > 1e-5);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::new(small(true, true)).unwrap();
    let mut full = tr.init_state().unwrap();
    let mut snapshots = Vec::new();
    tr.run(&mut full, |_, s| {
        snapshots.push(params_of(s));
        Ok(())
    })
    .unwrap();

    for stop in 1..3 {
        let mut part = tr.init_state().unwrap();
        for _ in 0..stop {
            tr.run_epoch(&mut part).unwrap();
        }
        let path = dir.path().join(format!("ckpt{stop}.patb"));
        part.save(&path).unwrap();
        let mut resumed = TrainState::load(&tr.config().model, &path).unwrap();
        assert_eq!(resumed.epoch, stop);
        assert_eq!(resumed.bank, part.bank);
        let mut e = stop;
        tr.run(&mut resumed, |_, s| {
            assert!(max_diff(&params_of(s), &snapshots[e]) <= 1e-5, "epoch {e}");
            e += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(e, 4);
    }
}

#[test]
fn first_epoch_is_baseline_then_bank_terms_start() {
    let tr = Trainer::new(small(true, true)).unwrap();
    let mut s = tr.init_state().unwrap();
    assert!(!s.bank.is_initialized());
    let logs = tr.run(&mut s, |_, _| Ok(())).unwrap();
    assert!(!logs[0].csl_active);
    assert!(logs[0].loss.ce > 0.0 && logs[0].loss.psd == 0.0);
    assert!(logs[0].loss.csl.iter().all(|&c| c == 0.0));
    for log in &logs[1..] {
        assert!(log.csl_active);
        assert!(log.loss.psd > 0.0 && log.loss.ce == 0.0);
        assert!(log.loss.csl.iter().all(|&c| c > 0.0));
    }
    assert!(s.bank.is_initialized());
    assert_eq!(s.bank.epoch, 4);
}

#[test]
fn ablations_zero_only_their_terms() {
    for (csl, psd) in [(false, false), (true, false), (false, true)] {
        let tr = Trainer::new(small(csl, psd)).unwrap();
        let mut s = tr.init_state().unwrap();
        let logs = tr.run(&mut s, |_, _| Ok(())).unwrap();
        let last = &logs.last().unwrap().loss;
        assert!(last.triplet > 0.0);
        // Distillation relies on positive sets, so it is off without them.
        assert_eq!(last.psd, 0.0);
        assert!(last.ce > 0.0);
        assert!(last.csl.iter().all(|&c| (c > 0.0) == csl));
        let sum = last.triplet + last.csl.iter().sum::<f64>() + last.ce;
        assert!((last.total - sum).abs() < 1e-9);
    }
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let tr = Trainer::new(small(false, false)).unwrap();
    let mut s = tr.init_state().unwrap();
    tr.run_epoch(&mut s).unwrap();
    let slot = s.params.slots().head_b;
    s.params.tensors_mut()[slot].data_mut()[0] = f32::NAN;
    let err = tr.run_epoch(&mut s).unwrap_err();
    match err {
        PatError::NonFinite(m) => assert!(m.contains("epoch 1 step"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn schedule_endpoints_for_the_reference_run() {
    let c = RunConfig::default().train;
    assert_eq!(lr_at(0, &c, 7), 0.0);
    assert!((lr_at(70, &c, 7) - 1e-3).abs() < 1e-15);
    assert!(lr_at(60 * 7 - 1, &c, 7) < 1e-6);
}
