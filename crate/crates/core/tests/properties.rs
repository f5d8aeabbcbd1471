//! Randomized invariants over metrics, masks, pruning and augmentation caps.

use proptest::prelude::*;
use rand::Rng as _;

use aread_core::augment::copy_cap;
use aread_core::graph::Tape;
use aread_core::hei::{HeiConfig, HierMask};
use aread_core::hemp::{init_candidate, initial_keep_count, initial_selection, prune_count, prune_step, HempConfig};
use aread_core::metrics::{auc, overlap_ratio_all};
use aread_core::rng::substream;
use aread_core::Array2;

fn shapes() -> Vec<(usize, usize)> {
    HeiConfig::default().mask_shapes()
}

fn mask_from_bits(bits: &[bool]) -> HierMask {
    let mut m = HierMask::empty(&shapes());
    for (p, &b) in m.positions().into_iter().zip(bits) {
        m.set(p, b);
    }
    m
}

fn means_from(values: &[f64]) -> Vec<Array2> {
    let mut it = values.iter().copied();
    shapes()
        .iter()
        .map(|&(r, c)| Array2::from_vec(r, c, it.by_ref().take(r * c).collect()).unwrap())
        .collect()
}

proptest! {
    #[test]
    fn auc_ignores_strictly_increasing_maps(
        rows in proptest::collection::vec((0u8..20, any::<bool>()), 2..120),
    ) {
        let scores: Vec<f64> = rows.iter().map(|r| f64::from(r.0) / 20.0).collect();
        let labels: Vec<u8> = rows.iter().map(|r| u8::from(r.1)).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let base = auc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| 3.0 * s * s * s + 1.0).collect();
        let exped: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(auc(&cubed, &labels).unwrap(), base);
        prop_assert_eq!(auc(&exped, &labels).unwrap(), base);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn softmax_columns_are_distributions(
        r in 1usize..6, c in 1usize..6, seed in 0u64..500,
    ) {
        let mut rng = substream(seed, "softmax");
        let x = Array2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.softmax_columns(v);
        let y = tape.value(s);
        for j in 0..c {
            let col: f64 = (0..r).map(|i| y.get(i, j)).sum();
            prop_assert!((col - 1.0).abs() < 1e-9);
            prop_assert!((0..r).all(|i| y.get(i, j) >= 0.0));
        }
    }

    #[test]
    fn mask_text_round_trips(bits in proptest::collection::vec(any::<bool>(), 90), d in 0usize..40) {
        let m = mask_from_bits(&bits);
        let (dd, back) = HierMask::from_text(&m.to_text(d), &shapes()).unwrap();
        prop_assert_eq!(dd, d);
        prop_assert_eq!(back, m);
    }

    #[test]
    fn repair_is_consistent_and_idempotent(
        bits in proptest::collection::vec(any::<bool>(), 90),
        values in proptest::collection::vec(0.0f64..1.0, 90),
    ) {
        let means = means_from(&values);
        let mut m = mask_from_bits(&bits);
        let before = m.clone();
        m.repair(Some(&means));
        prop_assert!(m.is_path_consistent());
        let once = m.clone();
        prop_assert!(!m.repair(Some(&means)));
        prop_assert_eq!(&m, &once);
        // Without a restore, repair only ever removes positions.
        let mut cut = before.clone();
        cut.repair_without_restore();
        prop_assert!(cut.positions().into_iter().all(|p| !cut.get(p) || before.get(p)));
    }

    #[test]
    fn prune_step_shrinks_and_keeps_a_head(
        bits in proptest::collection::vec(any::<bool>(), 90),
        values in proptest::collection::vec(0.0f64..1.0, 90),
        alpha in 0.01f64..0.5,
    ) {
        let means = means_from(&values);
        let mut m = mask_from_bits(&bits);
        m.repair(Some(&means));
        let out = prune_step(&m, &means, alpha).unwrap();
        prop_assert!(out.mask.kept() <= m.kept());
        prop_assert!(out.removed <= prune_count(m.kept(), alpha));
        prop_assert!(!out.mask.active_set().is_empty());
        prop_assert!(out.mask.is_path_consistent());
        prop_assert!(out.mask.positions().into_iter().all(|p| !out.mask.get(p) || m.get(p)));
        if !out.stopped_short {
            prop_assert_eq!(out.removed, prune_count(m.kept(), alpha));
        }
    }

    #[test]
    fn overlap_ratio_is_symmetric_and_bounded(
        a in proptest::collection::vec(any::<bool>(), 90),
        b in proptest::collection::vec(any::<bool>(), 90),
    ) {
        prop_assume!(a.iter().chain(&b).any(|&x| x));
        let (ma, mb) = (mask_from_bits(&a), mask_from_bits(&b));
        let ab = overlap_ratio_all(&ma, &mb).unwrap();
        prop_assert_eq!(ab, overlap_ratio_all(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn copy_cap_is_integer_ceiling(n in 0usize..100_000, pct in 0usize..=100) {
        prop_assert_eq!(copy_cap(n, pct as f64 / 100.0), (n * pct).div_ceil(100));
    }
}

#[test]
fn count_rules_on_the_default_topology() {
    assert_eq!(initial_keep_count(90, 0.7), 63);
    assert_eq!(prune_count(90, 0.05), 5);
    assert_eq!(prune_count(63, 0.05), 3);
    assert_eq!(prune_count(10, 0.05), 1);
}

/// Flips remove about `flip_prob * S0` of the kept set and add about
/// `flip_prob * (1 - S0)` of the rest, so the mean lands near
/// `S0 - flip_prob * (2 * S0 - 1)`; surplus additions are cut back.
#[test]
fn initial_density_concentrates_below_s0() {
    let cfg = HempConfig::default();
    let total = 90.0;
    let sigma = (cfg.flip_prob * (1.0 - cfg.flip_prob) / total).sqrt();
    let mut rng = substream(9, "means");
    let means: Vec<Array2> = shapes()
        .iter()
        .map(|&(r, c)| Array2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let mut sum = 0.0;
    for seed in 0..200 {
        let raw = initial_selection(&means, cfg.s0, cfg.flip_prob, &mut substream(seed, "init"));
        assert!(raw.density() <= cfg.s0 + 1e-12, "seed {seed}: {}", raw.density());
        sum += raw.density();
        let repaired = init_candidate(&means, &cfg, &mut substream(seed, "init"));
        assert!(repaired.is_path_consistent());
        assert!(repaired.density() <= raw.density() + 3.0 / total);
    }
    let mean = sum / 200.0;
    let expected = cfg.s0 - cfg.flip_prob * (2.0 * cfg.s0 - 1.0);
    assert!(mean >= cfg.s0 - 3.0 * sigma, "mean initial density {mean}");
    assert!((mean - expected).abs() < sigma, "mean initial density {mean} vs {expected}");
}
