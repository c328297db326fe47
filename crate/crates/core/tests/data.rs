use std::collections::BTreeMap;

use pat_core::data::{augment, generate_dataset, hflip, pk_sample};
use pat_core::DomainSpec;

#[test]
fn twenty_ids_eight_images_balanced_cameras() {
    for domain in [DomainSpec::source(), DomainSpec::target()] {
        let ds = generate_dataset(20, 8, &domain, 0, 64, 32).unwrap();
        assert_eq!(ds.records.len(), 160);
        let mut hist = vec![0usize; domain.cameras];
        for r in &ds.records {
            hist[r.camera] += 1;
        }
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1, "{hist:?}");
        // Every identity must be seen by at least two cameras for retrieval.
        for id in 0..20 {
            let cams: std::collections::BTreeSet<usize> =
                ds.records.iter().filter(|r| r.id == id).map(|r| r.camera).collect();
            assert!(cams.len() >= 2);
        }
    }
}

#[test]
fn small_pk_epoch_covers_everything() {
    let ids = [0, 0, 1, 1, 2, 2, 3, 3];
    let batches = pk_sample(&ids, 2, 2, 1, 0).unwrap();
    assert_eq!(batches.len(), 2);
    let mut all: Vec<usize> = batches.concat();
    all.sort();
    assert_eq!(all, (0..8).collect::<Vec<_>>());
}

#[test]
fn pk_batches_have_p_distinct_ids_and_no_repeats() {
    let ds = generate_dataset(20, 8, &DomainSpec::source(), 0, 64, 32).unwrap();
    let ids = ds.ids();
    for epoch in 0..5 {
        let batches = pk_sample(&ids, 4, 4, 9, epoch).unwrap();
        let mut count: BTreeMap<usize, usize> = BTreeMap::new();
        for b in &batches {
            assert_eq!(b.len(), 16);
            let mut per_id: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in b {
                *per_id.entry(ids[i]).or_default() += 1;
                *count.entry(i).or_default() += 1;
            }
            assert_eq!(per_id.len(), 4);
            assert!(per_id.values().all(|&k| k == 4));
        }
        // 8 images per id split into two groups of 4: nothing is left over.
        assert!(count.values().all(|&c| c == 1));
        assert_eq!(count.len(), 160);
    }
}

#[test]
fn flip_rate_is_half() {
    let ds = generate_dataset(2, 2, &DomainSpec::source(), 0, 64, 32).unwrap();
    let img = &ds.records[0].image;
    let flipped = hflip(img);
    assert_ne!(&flipped, img);
    let n = 10_000;
    let hits = (0..n).filter(|&i| augment(img, 0.5, 3, i as u64, 0) == flipped).count();
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.5).abs() < 0.02, "{rate}");
    assert!((0..100).all(|i| &augment(img, 0.0, 3, i, 0) == img));
}
