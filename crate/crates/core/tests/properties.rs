use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenematch::assignment::{extract_matches, partial_assignment};
use scenematch::eval::{f1_score, homography_auc, precision_recall_f1};
use scenematch::geometry::{apply_homography, compute_groundtruth, dlt_homography};
use scenematch::synth::{generate_pair, sample_homography, SynthConfig};
use scenematch::{GroundTruth, ImageSize, Tape, Tensor};

fn log_p(scores: &Tensor, z: f64, iters: usize) -> Tensor {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let z = tape.constant(Tensor::scalar(z));
    let lp = partial_assignment(&mut tape, s, z, iters).unwrap();
    tape.value(lp).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sinkhorn_columns_are_exact(m in 1usize..12, n in 1usize..12, seed in any::<u64>(), z in -2.0f64..2.0) {
        let scores = Tensor::randn(m, n, 1.5, &mut ChaCha8Rng::seed_from_u64(seed));
        let p = log_p(&scores, z, 30).map(f64::exp);
        for j in 0..n {
            let col: f64 = (0..=m).map(|i| p.get(i, j)).sum();
            prop_assert!((col - 1.0).abs() < 1e-9);
        }
        let dustbin_col: f64 = (0..=m).map(|i| p.get(i, n)).sum();
        prop_assert!((dustbin_col - m as f64).abs() < 1e-9);
    }

    #[test]
    fn sinkhorn_transpose_symmetry(m in 1usize..8, n in 1usize..8, seed in any::<u64>()) {
        // Swapping the images transposes the plan up to Sinkhorn's residual.
        let scores = Tensor::randn(m, n, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = log_p(&scores, 0.5, 200).map(f64::exp);
        let b = log_p(&scores.transpose(), 0.5, 200).map(f64::exp);
        prop_assert!(a.transpose().max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn matches_are_one_to_one(m in 1usize..10, n in 1usize..10, seed in any::<u64>(), thr in 0.0f64..0.9) {
        let scores = Tensor::randn(m, n, 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let lp = log_p(&scores, 0.0, 50);
        let found = extract_matches(&lp, thr);
        let mut rows: Vec<usize> = found.iter().map(|x| x.source).collect();
        let mut cols: Vec<usize> = found.iter().map(|x| x.target).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(rows.len(), found.len());
        prop_assert_eq!(cols.len(), found.len());
        prop_assert!(found.iter().all(|x| x.confidence >= thr && x.source < m && x.target < n));
    }

    #[test]
    fn f1_is_between_min_and_max(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f1_score(p, r);
        prop_assert!(f <= p.max(r) + 1e-12);
        prop_assert!(f >= 0.0);
        if p > 0.0 && r > 0.0 {
            prop_assert!(f >= p.min(r) - 1e-12);
        }
    }

    #[test]
    fn predicting_groundtruth_is_perfect(seed in 0u64..500) {
        let cfg = SynthConfig { source_count: 20, target_count: 20, ..SynthConfig::default() };
        let pair = generate_pair(&cfg, seed).unwrap();
        if let Some(pr) = precision_recall_f1(&pair.gt.matches, &pair.gt) {
            prop_assert_eq!((pr.precision, pr.recall, pr.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn auc_is_monotone_in_errors(errors in prop::collection::vec(0.0f64..20.0, 1..30), bump in 0.0f64..5.0, k in any::<prop::sample::Index>()) {
        let base = homography_auc(&errors, 10.0);
        let mut worse = errors.clone();
        worse[k.index(errors.len())] += bump;
        prop_assert!(homography_auc(&worse, 10.0) <= base + 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn dlt_recovers_sampled_homographies(seed in any::<u64>()) {
        let size = ImageSize::new(640.0, 480.0);
        let h = sample_homography(size, 0.25, seed).unwrap();
        let src: Vec<[f64; 2]> = (0..12).map(|k| [40.0 + 47.0 * (k % 4) as f64 + 3.0 * k as f64, 60.0 + 110.0 * (k / 4) as f64]).collect();
        let dst = apply_homography(&h, &src).unwrap();
        let est = dlt_homography(&src.iter().copied().zip(dst.iter().copied()).collect::<Vec<_>>()).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let w = est.apply(*s).unwrap();
            prop_assert!((w[0] - d[0]).hypot(w[1] - d[1]) < 1e-6);
        }
    }

    #[test]
    fn groundtruth_is_consistent(seed in 0u64..300) {
        let cfg = SynthConfig { source_count: 24, target_count: 24, ..SynthConfig::default() };
        let pair = generate_pair(&cfg, seed).unwrap();
        let gt = compute_groundtruth(&pair.source, &pair.target, &pair.homography, cfg.reproj_threshold).unwrap();
        prop_assert_eq!(&gt, &pair.gt);
        check_partition(&gt, pair.source.len(), pair.target.len())?;
    }
}

/// Matched sources are visible (a matched target may sit just outside the
/// source image) and matched indices are absent from the unmatched lists.
fn check_partition(gt: &GroundTruth, m: usize, n: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(gt.visible_source.len(), m);
    prop_assert_eq!(gt.visible_target.len(), n);
    for &(i, j) in &gt.matches {
        prop_assert!(gt.visible_source[i]);
        prop_assert!(!gt.unmatched_source.contains(&i));
        prop_assert!(!gt.unmatched_target.contains(&j));
    }
    Ok(())
}
