use proptest::prelude::*;

use stamp::analysis::{pca2, spearman};
use stamp::autograd::Tape;
use stamp::config::RunConfig;
use stamp::eval::{auroc, prauc};
use stamp::latentvar::{categorical, kl_weighted, one_hot_draw, LatentSpec};
use stamp::synthvol::{Dims, Volume};
use stamp::tensor::Mat;
use stamp::tokenizer::{mask_count, patchify, random_mask, unpatchify};
use stamp::trainer::{flip_w, smooth};

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (proptest::collection::vec(0u8..6, n), proptest::collection::vec(any::<bool>(), n))
            .prop_filter("both classes", |(_, y)| y.iter().any(|&v| v) && y.iter().any(|&v| !v))
            .prop_map(|(s, y)| (s.into_iter().map(f64::from).collect(), y))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trips(gd in 1usize..4, gh in 1usize..4, gw in 1usize..4,
                            pd in 1usize..4, ph in 1usize..4, pw in 1usize..4, seed in any::<u64>()) {
        let dims = Dims::new(gd * pd, gh * ph, gw * pw);
        let vox: Vec<f32> = (0..dims.voxels()).map(|i| ((i as u64).wrapping_mul(seed | 1) % 997) as f32 / 997.0).collect();
        let v = Volume::new(dims, vox).unwrap();
        let g = patchify(&v, Dims::new(pd, ph, pw)).unwrap();
        prop_assert_eq!(g.len(), gd * gh * gw);
        prop_assert_eq!(unpatchify(&g).unwrap(), v);
    }

    #[test]
    fn masks_partition_tokens(n in 1usize..500, ratio in 0.0f64..0.99, seed in any::<u64>()) {
        use rand::SeedableRng;
        let m = random_mask(n, ratio, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(m.len(), mask_count(n, ratio));
        prop_assert_eq!(m.len(), (ratio * n as f64).round() as usize);
        let vis = m.visible();
        prop_assert_eq!(vis.len() + m.len(), n);
        prop_assert!(vis.iter().all(|&i| !m.is_masked(i)));
    }

    #[test]
    fn auroc_is_label_antisymmetric((s, y) in labelled_scores()) {
        let a = auroc(&s, &y).unwrap();
        let flipped: Vec<bool> = y.iter().map(|v| !v).collect();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + auroc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
        let p = prauc(&s, &y).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn metrics_ignore_monotone_rescaling((s, y) in labelled_scores(), k in 0.1f64..10.0, c in -5.0f64..5.0) {
        let t: Vec<f64> = s.iter().map(|v| k * v + c).collect();
        prop_assert!((auroc(&s, &y).unwrap() - auroc(&t, &y).unwrap()).abs() < 1e-12);
        prop_assert!((prauc(&s, &y).unwrap() - prauc(&t, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn draws_are_one_hot(logits in proptest::collection::vec(-8.0f64..8.0, 64), u0 in 0.0f64..1.0, u1 in 0.0f64..1.0) {
        let spec = LatentSpec { groups: 2, bins: 32 };
        let mut t = Tape::new();
        let l = t.input(Mat::from_vec(2, 32, logits));
        let lat = categorical(&mut t, l, spec).unwrap();
        let hard = one_hot_draw(t.value(lat.probs), &[u0, u1]).unwrap();
        for row in hard.data.chunks(32) {
            prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
            prop_assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn balanced_kl_is_non_negative(q in proptest::collection::vec(-6.0f64..6.0, 64), p in proptest::collection::vec(-6.0f64..6.0, 64)) {
        let spec = LatentSpec { groups: 2, bins: 32 };
        let mut t = Tape::new();
        let qv = t.input(Mat::from_vec(2, 32, q.clone()));
        let pv = t.input(Mat::from_vec(2, 32, p));
        let (ql, pl) = (categorical(&mut t, qv, spec).unwrap(), categorical(&mut t, pv, spec).unwrap());
        let k = kl_weighted(&mut t, &ql, &pl).unwrap();
        prop_assert!(t.scalar(k) >= -1e-12);
        let qv2 = t.input(Mat::from_vec(2, 32, q));
        let ql2 = categorical(&mut t, qv2, spec).unwrap();
        let self_kl = kl_weighted(&mut t, &ql, &ql2).unwrap();
        prop_assert!(t.scalar(self_kl).abs() < 1e-12);
    }

    #[test]
    fn flip_is_an_involution(d in 1usize..4, h in 1usize..4, w in 1usize..6) {
        let dims = Dims::new(d, h, w);
        let v = Volume::new(dims, (0..dims.voxels()).map(|i| i as f32).collect()).unwrap();
        prop_assert_eq!(flip_w(&flip_w(&v)), v);
    }

    #[test]
    fn spearman_ignores_monotone_maps(xs in proptest::collection::vec(-100.0f64..100.0, 3..30)) {
        let ys: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0).collect();
        if let Ok(r) = spearman(&xs, &ys) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_ratios_are_ordered_fractions(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 3..20)) {
        if let Ok(p) = pca2(&rows) {
            prop_assert!(p.explained[0] >= p.explained[1] - 1e-12);
            prop_assert!(p.explained[0] + p.explained[1] <= 1.0 + 1e-9);
            prop_assert_eq!(p.projections.len(), rows.len());
        }
    }

    #[test]
    fn smoothing_stays_within_range(v in proptest::collection::vec(0.0f64..1.0, 1..50), w in 1usize..8) {
        let s = smooth(&v, w);
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(s.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }

    #[test]
    fn config_round_trips(mask in 0.0f64..0.99, epochs in 1usize..1000, seed in any::<u64>(), beta in 0.0f64..10.0, te in any::<bool>()) {
        let mut cfg = RunConfig::desk();
        cfg.train.mask_ratio = mask;
        cfg.train.epochs = epochs;
        cfg.train.seed = seed;
        cfg.train.beta = beta;
        cfg.probe.use_te = te;
        let back = RunConfig::parse(&cfg.emit()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }
}
