//! End-to-end training on a small synthetic set: data lineage, ablation
//! layouts, checkpoints and the augmented dump.

use std::collections::BTreeSet;

use aread_core::config::{Ablation, DataSource, RunConfig};
use aread_core::data::{load_csv, CsvSpec, SplitTag};
use aread_core::hei::HierMask;
use aread_core::metrics::{domain_auc, per_domain_auc, MetricsReport};
use aread_core::synth::SynthConfig;
use aread_core::train::{self, evaluate, load_checkpoint, read_masks, save_checkpoint, write_masks, Hooks};
use aread_core::Sample;

fn small(ablation: Ablation, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.ablation = ablation;
    cfg.data = DataSource::Synth(SynthConfig {
        clusters: vec![0, 1, 0, 1, 0],
        sizes: vec![500, 300, 120, 40, 30],
        users: 30,
        items: 30,
        seed,
        ..SynthConfig::default()
    });
    cfg.embed.dim = 4;
    cfg.mmoe.experts = 2;
    cfg.mmoe.hidden = (8, 6);
    cfg.hei.hidden = vec![(8, 6), (6, 4), (4, 4)];
    cfg.hemp.warmup_batches = 4;
    cfg.hemp.update_interval = 5;
    cfg.hemp.z = 2;
    cfg.hemp.k = 2;
    cfg.hemp.alpha = 0.2;
    cfg.hemp.eval_samples = 40;
    cfg.train.batch = 32;
    cfg.train.epochs = 3;
    cfg.minor_threshold = 0.1;
    cfg
}

#[test]
fn search_reads_only_training_data_and_copies_stay_out_of_mixed_training() {
    let cfg = small(Ablation::Full, 1);
    let (_, t) = train::run(&cfg).unwrap();
    let lin = &t.report.lineage;
    assert_eq!(lin.test_reads, 1);
    assert_eq!(lin.valid_reads, t.report.epochs.len());
    assert_eq!(lin.mixed_copy_rows, 0);
    assert!(lin.candidate_copy_rows > 0);
    assert_eq!(lin.search_splits, BTreeSet::from([SplitTag::Train]));
    assert!(t.report.augmented_copies > 0);
}

#[test]
fn ablation_layouts() {
    for ab in [Ablation::BaseOnly, Ablation::Hei, Ablation::Hemp, Ablation::Full] {
        let (_, t) = train::run(&small(ab, 2)).unwrap();
        assert_eq!(t.model.hei().is_some(), ab != Ablation::BaseOnly, "{ab}");
        assert_eq!(t.masks.is_some(), ab.uses_masks(), "{ab}");
        assert_eq!(t.report.rounds.is_empty(), !ab.uses_masks(), "{ab}");
        assert_eq!(t.report.augmented_copies > 0, ab == Ablation::Full, "{ab}");
        if let Some(masks) = &t.masks {
            assert!(masks.iter().all(HierMask::is_path_consistent));
        }
    }
}

#[test]
fn round_records_describe_the_chosen_candidate() {
    let cfg = small(Ablation::Hemp, 3);
    let splits = train::load_splits(&cfg).unwrap();
    let mut chosen = Vec::new();
    let hooks = Hooks {
        on_search: Some(Box::new(|d, o| chosen.push((d, o.best.as_ref().map(|b| (b.z, b.score, b.mask.clone())))))),
    };
    let t = train::train(&cfg, &splits, hooks).unwrap();
    let flat: Vec<_> = t.report.rounds.iter().flat_map(|r| &r.domains).collect();
    assert_eq!(flat.len(), chosen.len());
    for (rec, (d, best)) in flat.iter().zip(&chosen) {
        assert_eq!(rec.domain, *d);
        let (z, score, mask) = best.as_ref().unwrap();
        assert_eq!(rec.chosen, Some(*z));
        assert_eq!(rec.score, Some(*score));
        assert_eq!(rec.density, mask.density());
        assert_eq!(rec.active, mask.active_set().len());
        assert_eq!(rec.candidates.len(), cfg.hemp.z);
        let top = rec.candidates.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(*score, top);
    }
}

#[test]
fn identical_configs_give_identical_runs() {
    let cfg = small(Ablation::Full, 4);
    let (_, a) = train::run(&cfg).unwrap();
    let (_, b) = train::run(&cfg).unwrap();
    assert_eq!(a.test, b.test);
    assert_eq!(a.masks, b.masks);
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(a.store.fingerprint(), b.store.fingerprint());
}

#[test]
fn checkpoint_and_masks_reproduce_the_test_report() {
    let cfg = small(Ablation::Full, 5);
    let (splits, t) = train::run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&dir.path().join("ckpt"), &cfg, &t, &splits.train.schema).unwrap();
    write_masks(&dir.path().join("masks"), t.masks.as_ref().unwrap()).unwrap();

    let loaded = load_checkpoint(&dir.path().join("ckpt")).unwrap();
    let masks = read_masks(&dir.path().join("masks"), &cfg.hei.mask_shapes(), 5).unwrap();
    assert_eq!(&masks, t.masks.as_ref().unwrap());
    let (report, scores) = evaluate(&loaded, Some(&masks), None).unwrap();
    assert_eq!(report, t.test);
    assert_eq!(scores, t.test_scores);
    assert!(evaluate(&loaded, None, None).is_err());

    // Per-domain AUCs recomputed from the raw scores.
    let again = per_domain_auc(&scores, 5);
    assert_eq!(again, report.per_domain);
    assert_eq!(domain_auc(&scores).ok(), report.domain_auc);
    assert_eq!(MetricsReport::compute(&scores, &t.stats, cfg.minor_k), report);
}

#[test]
fn augmented_dump_holds_exactly_the_copies() {
    let cfg = small(Ablation::Full, 6);
    let (splits, t) = train::run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.augmented.dump(dir.path(), &splits.train.schema).unwrap();
    let mut rows = 0;
    for d in 0..5 {
        let copies: Vec<&Sample> = t.augmented.copies(d).map(|a| &a.sample).collect();
        let path = dir.path().join(format!("aug_d{d}.csv"));
        if copies.is_empty() {
            assert!(!path.exists());
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.ends_with("domain,label,source_domain"), "{header}");
        let back = load_csv(&path, &CsvSpec::frozen(splits.train.schema.clone())).unwrap();
        assert_eq!(back.samples.iter().collect::<Vec<_>>(), copies);
        assert!(back.samples.iter().all(|s| s.label == 1 && s.domain == d));
        rows += copies.len();
    }
    assert_eq!(rows, t.report.augmented_copies);
}
