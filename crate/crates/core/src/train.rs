//! Model assembly, the two-phase training driver, evaluation and run artifacts.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::augment::{build_augmented, compute_popularity, AugSample, Augmented};
use crate::base::{Embedding, Mmoe};
use crate::config::{Ablation, DataSource, RunConfig};
use crate::data::{compute_stats, load_csv, split, CsvSpec, Dataset, DomainStats, Sample, Schema, SplitTag, Splits};
use crate::error::{Error, Result};
use crate::graph::{bce_value, Tape, Var};
use crate::hei::{gate_batch_sums, loss_masked, loss_warmup, Hei, HierMask};
use crate::hemp::{search_domain_mask, BatchGates, CandidateTrainer, GateStatsAccumulator, SearchOutcome};
use crate::metrics::{auc, MetricsReport, ScoredSet};
use crate::nn::Linear;
use crate::params::{AdamConfig, ParameterStore};
use crate::rng::{substream, Rng};
use crate::synth;

/// Rows per inference chunk.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone)]
enum Top {
    Head(Linear),
    Hei(Hei),
}

/// Network layout. Parameter values live in a separate [`ParameterStore`] so
/// candidate searches can run on private copies.
#[derive(Debug, Clone)]
pub struct Model {
    embed: Embedding,
    mmoe: Mmoe,
    top: Top,
}

/// Heads and gate nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub heads: Vec<Var>,
    /// Gate nodes of the expert hierarchy; empty without it.
    pub gates: Vec<Vec<Var>>,
}

impl Model {
    /// Builds the layout for `cfg.ablation` and registers freshly initialized parameters.
    pub fn new(schema: &Schema, cfg: &RunConfig, store: &mut ParameterStore) -> Result<Model> {
        let mut rng = substream(cfg.seed, "init");
        let names: Vec<String> = schema.fields.iter().map(|f| f.name.clone()).collect();
        let embed = Embedding::new(store, &mut rng, &names, &schema.vocab_sizes(), schema.num_domains(), &cfg.embed)?;
        let mmoe = Mmoe::new(store, &mut rng, embed.output_width(), &cfg.mmoe)?;
        let top = if cfg.ablation.uses_hei() {
            Top::Hei(Hei::new(store, &mut rng, mmoe.output_width(), &cfg.hei)?)
        } else {
            Top::Head(Linear::new(store, &mut rng, "head", mmoe.output_width(), 1)?)
        };
        Ok(Model { embed, mmoe, top })
    }

    pub fn hei(&self) -> Option<&Hei> {
        match &self.top {
            Top::Hei(h) => Some(h),
            Top::Head(_) => None,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[&Sample],
        mask: Option<&HierMask>,
    ) -> Result<Forward> {
        let x = self.embed.forward(tape, store, batch)?;
        let (base, _) = self.mmoe.forward(tape, store, x)?;
        match &self.top {
            Top::Head(h) => Ok(Forward {
                heads: vec![h.forward(tape, store, base)?],
                gates: Vec::new(),
            }),
            Top::Hei(hei) => {
                let out = hei.forward(tape, store, base, mask)?;
                Ok(Forward {
                    heads: out.head_vars(),
                    gates: out.gates,
                })
            }
        }
    }

    /// Scores every sample: the mean head probability, using the sample's domain
    /// mask when `masks` is given.
    pub fn predict(&self, store: &ParameterStore, samples: &[&Sample], masks: Option<&[HierMask]>) -> Result<Vec<f64>> {
        let mut scores = vec![0.0; samples.len()];
        let groups: Vec<(Option<usize>, Vec<usize>)> = match masks {
            None => vec![(None, (0..samples.len()).collect())],
            Some(m) => {
                let mut by_domain = vec![Vec::new(); m.len()];
                for (i, s) in samples.iter().enumerate() {
                    by_domain
                        .get_mut(s.domain)
                        .ok_or_else(|| Error::Mask(format!("no mask for domain {}", s.domain)))?
                        .push(i);
                }
                by_domain.into_iter().enumerate().map(|(d, v)| (Some(d), v)).collect()
            }
        };
        for (d, idx) in groups {
            let mask = d.and_then(|d| masks.map(|m| &m[d]));
            for chunk in idx.chunks(EVAL_CHUNK) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
                let mut tape = Tape::new();
                let f = self.forward(&mut tape, store, &batch, mask)?;
                let probs: Vec<Var> = f.heads.iter().map(|&h| tape.sigmoid(h)).collect();
                let mean = tape.mean(&probs)?;
                for (r, &i) in chunk.iter().enumerate() {
                    scores[i] = tape.value(mean).get(r, 0);
                }
            }
        }
        Ok(scores)
    }

    pub fn score_set(&self, store: &ParameterStore, samples: &[&Sample], masks: Option<&[HierMask]>) -> Result<ScoredSet> {
        let scores = self.predict(store, samples, masks)?;
        let mut ss = ScoredSet::default();
        for (s, p) in samples.iter().zip(scores) {
            ss.push(p, s.label, s.domain);
        }
        Ok(ss)
    }
}

/// Which objective a training step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// BCE of the mean head probability.
    Averaged,
    /// Sum of per-head BCE terms under each sample's domain mask.
    Masked,
}

/// Forward, backward and one Adam step on `batch`. Returns the mean per-sample loss.
/// Under [`LossMode::Masked`] the batch is split by domain and each part uses its
/// domain's mask. Gate values are added to `stats` when given.
pub fn train_step(
    model: &Model,
    store: &mut ParameterStore,
    batch: &[&Sample],
    mode: LossMode,
    masks: Option<&[HierMask]>,
    adam: &AdamConfig,
    stats: Option<&mut GateStatsAccumulator>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut tape = Tape::new();
    let groups: Vec<(Option<&HierMask>, Vec<&Sample>)> = match (mode, masks) {
        (LossMode::Masked, Some(m)) => {
            let mut by_domain: Vec<Vec<&Sample>> = vec![Vec::new(); m.len()];
            for &s in batch {
                by_domain[s.domain].push(s);
            }
            by_domain
                .into_iter()
                .enumerate()
                .filter(|(_, v)| !v.is_empty())
                .map(|(d, v)| (Some(&m[d]), v))
                .collect()
        }
        _ => vec![(None, batch.to_vec())],
    };
    let mut totals = Vec::with_capacity(groups.len());
    let mut gate_obs = Vec::with_capacity(groups.len());
    for (mask, rows) in &groups {
        let f = model.forward(&mut tape, store, rows, *mask)?;
        let labels: Vec<f64> = rows.iter().map(|s| s.y()).collect();
        let per_sample = match mode {
            LossMode::Averaged => loss_warmup(&mut tape, &f.heads, &labels)?,
            LossMode::Masked => loss_masked(&mut tape, &f.heads, &labels)?,
        };
        totals.push(tape.sum_all(per_sample));
        gate_obs.push((f.gates, rows.iter().map(|s| s.domain).collect::<Vec<_>>()));
    }
    let total = tape.sum(&totals)?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let grads = tape.backward(loss)?;
    tape.accumulate_into(&grads, store)?;
    store.adam_step(adam)?;
    if let Some(stats) = stats {
        for (gates, domains) in &gate_obs {
            if !gates.is_empty() {
                stats.observe(&tape, gates, domains)?;
            }
        }
    }
    Ok(tape.value(loss).get(0, 0))
}

/// Counts of which data each stage touched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub test_reads: usize,
    pub valid_reads: usize,
    /// Augmented copies seen by mixed-data training (must stay zero).
    pub mixed_copy_rows: usize,
    /// Augmented copies seen by candidate fine-tuning.
    pub candidate_copy_rows: usize,
    /// Splits the mask search read from.
    pub search_splits: BTreeSet<SplitTag>,
}

/// Candidate fine-tuning on one domain's `A_d`, scored on a fixed training sample.
struct DomainTrainer<'a> {
    model: &'a Model,
    data: &'a [AugSample],
    eval: Vec<&'a Sample>,
    batch: usize,
    adam: AdamConfig,
    copy_rows: usize,
}

impl CandidateTrainer for DomainTrainer<'_> {
    fn train_batch(&mut self, store: &mut ParameterStore, mask: &HierMask, rng: &mut Rng) -> Result<BatchGates> {
        let n = self.batch.min(self.data.len());
        let picks = index::sample(rng, self.data.len(), n).into_vec();
        let rows: Vec<&Sample> = picks.iter().map(|&i| &self.data[i].sample).collect();
        self.copy_rows += picks.iter().filter(|&&i| self.data[i].source_domain.is_some()).count();
        let mut tape = Tape::new();
        let f = self.model.forward(&mut tape, store, &rows, Some(mask))?;
        let labels: Vec<f64> = rows.iter().map(|s| s.y()).collect();
        let per_sample = loss_masked(&mut tape, &f.heads, &labels)?;
        let total = tape.sum_all(per_sample);
        let loss = tape.scale(total, 1.0 / n as f64);
        let grads = tape.backward(loss)?;
        tape.accumulate_into(&grads, store)?;
        store.adam_step(&self.adam)?;
        Ok(BatchGates {
            loss: tape.value(loss).get(0, 0),
            sums: gate_batch_sums(&tape, &f.gates),
            rows: n,
        })
    }

    fn score(&mut self, store: &ParameterStore, mask: &HierMask) -> Result<Option<f64>> {
        if self.eval.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let f = self.model.forward(&mut tape, store, &self.eval, Some(mask))?;
        let probs: Vec<Var> = f.heads.iter().map(|&h| tape.sigmoid(h)).collect();
        let mean = tape.mean(&probs)?;
        let scores: Vec<f64> = (0..self.eval.len()).map(|r| tape.value(mean).get(r, 0)).collect();
        let labels: Vec<u8> = self.eval.iter().map(|s| s.label).collect();
        match auc(&scores, &labels) {
            Ok(a) => Ok(Some(a)),
            Err(Error::SingleClass) => {
                let bce: f64 = scores.iter().zip(&labels).map(|(&p, &y)| bce_value(p, f64::from(y))).sum();
                Ok(Some(-bce / scores.len() as f64))
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub z: usize,
    pub score: f64,
    pub density: f64,
    pub prune_iters: usize,
    pub start_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainUpdate {
    pub domain: usize,
    /// Chosen candidate, `None` when the previous mask was kept.
    pub chosen: Option<usize>,
    pub score: Option<f64>,
    pub density: f64,
    pub active: usize,
    pub prune_iters: usize,
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRound {
    pub round: usize,
    /// Global batch index at which the round ran.
    pub batch: usize,
    pub snapshot_hash: String,
    /// True when the live parameters hashed identically before and after the round.
    pub restored: bool,
    pub domains: Vec<DomainUpdate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub valid_domain_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: String,
    pub seed: u64,
    pub rounds: Vec<UpdateRound>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub augmented_copies: usize,
    pub lineage: Lineage,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub store: ParameterStore,
    pub masks: Option<Vec<HierMask>>,
    pub stats: DomainStats,
    pub augmented: Augmented,
    pub report: RunReport,
    pub test: MetricsReport,
    pub test_scores: ScoredSet,
}

/// Loads or generates the dataset named by the config and splits it.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let full = match &cfg.data {
        DataSource::Csv(p) => load_csv(p, &CsvSpec::infer())?,
        DataSource::Synth(s) => synth::generate(s)?,
    };
    split(&full, cfg.split, cfg.seed)
}

/// Optional observers for the training loop.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Called with each domain search result.
    #[allow(clippy::type_complexity)]
    pub on_search: Option<Box<dyn FnMut(usize, &SearchOutcome) + 'a>>,
}

/// Trains per `cfg.ablation` on `splits`, restores the best validation state and
/// evaluates the test split once.
pub fn train(cfg: &RunConfig, splits: &Splits, mut hooks: Hooks<'_>) -> Result<Trained> {
    cfg.validate()?;
    let train_ds = &splits.train;
    if train_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schema: &Arc<Schema> = &train_ds.schema;
    let nd = schema.num_domains();
    let stats = compute_stats(train_ds, cfg.minor_threshold)?;
    let mut store = ParameterStore::new();
    let model = Model::new(schema, cfg, &mut store)?;
    let adam = AdamConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        ..AdamConfig::default()
    };
    adam.validate()?;
    let adam_u = adam.with_lr(cfg.hemp.lr_u);

    let augmented = if cfg.ablation.uses_augmentation() {
        let pop = compute_popularity(train_ds, cfg.aug.rho_quantile)?;
        let aug_cfg = crate::augment::AugConfig {
            seed: cfg.seed,
            ..cfg.aug.clone()
        };
        build_augmented(train_ds, &stats, &pop, &aug_cfg)?
    } else {
        Augmented::unaugmented(train_ds)
    };

    let shapes = cfg.hei.mask_shapes();
    let mut gate_stats = GateStatsAccumulator::new(nd, &shapes);
    let mut masks: Option<Vec<HierMask>> = None;
    let mut lineage = Lineage::default();
    let mut rounds = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, ParameterStore, Option<Vec<HierMask>>, usize)> = None;
    let mut since_best = 0;
    let mut global_batch = 0usize;
    let mut phase2_batch = 0usize;
    let valid_refs: Vec<&Sample> = splits.valid.samples.iter().collect();
    let train_by_domain: Vec<Vec<&Sample>> = (0..nd).map(|d| train_ds.domain_samples(d).collect()).collect();

    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut substream(cfg.seed, &format!("epoch.{epoch}")));
        let (mut loss_sum, mut nb) = (0.0, 0usize);
        for chunk in order.chunks(cfg.train.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_ds.samples[i]).collect();
            let masked_phase = cfg.ablation.uses_masks() && global_batch >= cfg.hemp.warmup_batches;
            if masked_phase && phase2_batch.is_multiple_of(cfg.hemp.update_interval) {
                let round = rounds.len();
                let (new_masks, record) = mask_round(
                    cfg,
                    &model,
                    &store,
                    &augmented,
                    &train_by_domain,
                    &gate_stats,
                    masks.as_deref(),
                    round,
                    global_batch,
                    &adam_u,
                    &mut lineage,
                    &mut hooks,
                )?;
                masks = Some(new_masks);
                rounds.push(record);
                gate_stats.reset();
            }
            let loss = if masked_phase {
                phase2_batch += 1;
                train_step(&model, &mut store, &batch, LossMode::Masked, masks.as_deref(), &adam, Some(&mut gate_stats))?
            } else {
                train_step(&model, &mut store, &batch, LossMode::Averaged, None, &adam, Some(&mut gate_stats))?
            };
            loss_sum += loss;
            nb += 1;
            global_batch += 1;
        }
        lineage.valid_reads += 1;
        let valid = model.score_set(&store, &valid_refs, masks.as_deref())?;
        let vauc = crate::metrics::domain_auc(&valid).ok();
        info!(
            "epoch {epoch}: train loss {:.5}, valid DomainAUC {}",
            loss_sum / nb as f64,
            vauc.map_or("n/a".to_string(), |v| format!("{v:.5}"))
        );
        epochs.push(EpochRecord {
            epoch,
            batches: nb,
            train_loss: loss_sum / nb as f64,
            valid_domain_auc: vauc,
        });
        let score = vauc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, store.clone(), masks.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.train.patience {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (_, best_store, best_masks, best_epoch) = best.expect("at least one epoch");
    let store = best_store;
    let masks = best_masks;

    lineage.test_reads += 1;
    let test_refs: Vec<&Sample> = splits.test.samples.iter().collect();
    let test_scores = model.score_set(&store, &test_refs, masks.as_deref())?;
    let test = MetricsReport::compute(&test_scores, &stats, cfg.minor_k);
    let report = RunReport {
        ablation: cfg.ablation.to_string(),
        seed: cfg.seed,
        rounds,
        epochs,
        best_epoch,
        augmented_copies: augmented.num_copies(),
        lineage,
    };
    Ok(Trained {
        model,
        store,
        masks,
        stats,
        augmented,
        report,
        test,
        test_scores,
    })
}

/// One mask update round over every domain, starting all candidates from the current parameters.
#[allow(clippy::too_many_arguments)]
fn mask_round(
    cfg: &RunConfig,
    model: &Model,
    store: &ParameterStore,
    augmented: &Augmented,
    train_by_domain: &[Vec<&Sample>],
    gate_stats: &GateStatsAccumulator,
    previous: Option<&[HierMask]>,
    round: usize,
    batch: usize,
    adam_u: &AdamConfig,
    lineage: &mut Lineage,
    hooks: &mut Hooks<'_>,
) -> Result<(Vec<HierMask>, UpdateRound)> {
    let shapes = cfg.hei.mask_shapes();
    let snapshot = store.snapshot();
    let snapshot_hash = snapshot.fingerprint();
    let mut masks = Vec::with_capacity(train_by_domain.len());
    let mut domains = Vec::with_capacity(train_by_domain.len());
    for (d, train_d) in train_by_domain.iter().enumerate() {
        let fallback = previous.map_or_else(|| HierMask::full(&shapes), |p| p[d].clone());
        let data = &augmented.per_domain[d];
        if data.is_empty() {
            masks.push(fallback.clone());
            domains.push(DomainUpdate {
                domain: d,
                chosen: None,
                score: None,
                density: fallback.density(),
                active: fallback.active_set().len(),
                prune_iters: 0,
                candidates: Vec::new(),
            });
            continue;
        }
        lineage.search_splits.insert(SplitTag::Train);
        let mut rng = substream(cfg.seed, &format!("hemp.eval.r{round}.d{d}"));
        let n_eval = cfg.hemp.eval_samples.min(train_d.len());
        let eval: Vec<&Sample> = index::sample(&mut rng, train_d.len(), n_eval)
            .into_iter()
            .map(|i| train_d[i])
            .collect();
        let mut trainer = DomainTrainer {
            model,
            data,
            eval,
            batch: cfg.train.batch,
            adam: *adam_u,
            copy_rows: 0,
        };
        let init_means = gate_stats.means(d);
        let outcome = search_domain_mask(d, store, &snapshot, &init_means, &cfg.hemp, &mut trainer, |z| {
            substream(cfg.seed, &format!("hemp.r{round}.d{d}.z{z}"))
        })?;
        lineage.candidate_copy_rows += trainer.copy_rows;
        if let Some(f) = hooks.on_search.as_mut() {
            f(d, &outcome);
        }
        let candidates = outcome
            .candidates
            .iter()
            .map(|c| CandidateRecord {
                z: c.z,
                score: c.score,
                density: c.mask.density(),
                prune_iters: c.prune_iters,
                start_hash: format!("{:016x}", c.start_hash),
            })
            .collect();
        let (mask, chosen, score, iters) = match outcome.best {
            Some(b) => (b.mask, Some(b.z), Some(b.score), b.prune_iters),
            None => (fallback, None, None, 0),
        };
        debug!("round {round} domain {d}: density {:.3}, active {:?}", mask.density(), mask.active_set());
        domains.push(DomainUpdate {
            domain: d,
            chosen,
            score,
            density: mask.density(),
            active: mask.active_set().len(),
            prune_iters: iters,
            candidates,
        });
        masks.push(mask);
    }
    let restored = store.fingerprint() == snapshot_hash;
    Ok((
        masks,
        UpdateRound {
            round,
            batch,
            snapshot_hash: format!("{snapshot_hash:016x}"),
            restored,
            domains,
        },
    ))
}

/// [`load_splits`] followed by [`train`].
pub fn run(cfg: &RunConfig) -> Result<(Splits, Trained)> {
    let splits = load_splits(cfg)?;
    let trained = train(cfg, &splits, Hooks::default())?;
    Ok((splits, trained))
}

/// Writes `mask_d{d}.txt` for every domain.
pub fn write_masks(dir: &Path, masks: &[HierMask]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (d, m) in masks.iter().enumerate() {
        let p = dir.join(format!("mask_d{d}.txt"));
        fs::write(&p, m.to_text(d)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Reads `mask_d{d}.txt` for domains `0..num_domains`.
pub fn read_masks(dir: &Path, shapes: &[(usize, usize)], num_domains: usize) -> Result<Vec<HierMask>> {
    (0..num_domains)
        .map(|d| {
            let p = dir.join(format!("mask_d{d}.txt"));
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let (got, m) = HierMask::from_text(&text, shapes)?;
            if got != d {
                return Err(Error::Mask(format!("{} holds domain {got}", p.display())));
            }
            Ok(m)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointExtra {
    config: String,
    schema: Schema,
    train_counts: Vec<usize>,
}

/// Saves parameters together with the run config, schema and training-split domain counts.
pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, trained: &Trained, schema: &Schema) -> Result<()> {
    let extra = CheckpointExtra {
        config: cfg.to_kv(),
        schema: schema.clone(),
        train_counts: trained.stats.counts.clone(),
    };
    trained.store.save_checkpoint(dir, serde_json::to_value(extra)?)
}

/// A model restored from a checkpoint directory.
pub struct Loaded {
    pub cfg: RunConfig,
    pub schema: Arc<Schema>,
    pub model: Model,
    pub store: ParameterStore,
    pub stats: DomainStats,
}

pub fn load_checkpoint(dir: &Path) -> Result<Loaded> {
    let extra: CheckpointExtra = serde_json::from_value(crate::params::read_checkpoint_extra(dir)?)?;
    let cfg = RunConfig::from_kv(&extra.config)?;
    let schema = Arc::new(extra.schema);
    let mut store = ParameterStore::new();
    let model = Model::new(&schema, &cfg, &mut store)?;
    store.load_checkpoint(dir)?;
    let stats = DomainStats::from_counts(extra.train_counts, cfg.minor_threshold)?;
    Ok(Loaded {
        cfg,
        schema,
        model,
        store,
        stats,
    })
}

/// Scores `data` (default: the configured test split) with a loaded model.
/// Masks are required exactly when the checkpoint's ablation uses them.
pub fn evaluate(loaded: &Loaded, masks: Option<&[HierMask]>, data: Option<&Path>) -> Result<(MetricsReport, ScoredSet)> {
    if loaded.cfg.ablation.uses_masks() && masks.is_none() {
        return Err(Error::Mask(format!("ablation {} needs masks", loaded.cfg.ablation)));
    }
    let masks = if loaded.cfg.ablation == Ablation::BaseOnly { None } else { masks };
    let ds: Dataset = match data {
        Some(p) => load_csv(p, &CsvSpec::frozen(loaded.schema.clone()))?,
        None => load_splits(&loaded.cfg)?.test,
    };
    if ds.num_domains() != loaded.schema.num_domains() {
        return Err(Error::Schema("evaluation data has a different domain set".into()));
    }
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    let ss = loaded.model.score_set(&loaded.store, &refs, masks)?;
    Ok((MetricsReport::compute(&ss, &loaded.stats, loaded.cfg.minor_k), ss))
}

/// Writes `score,label,domain` rows.
pub fn write_scores(path: &Path, ss: &ScoredSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["score", "label", "domain"])?;
    for i in 0..ss.len() {
        w.write_record([format!("{:.17e}", ss.scores[i]), ss.labels[i].to_string(), ss.domains[i].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    fn tiny_cfg(ablation: Ablation) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.ablation = ablation;
        cfg.data = DataSource::Synth(SynthConfig {
            clusters: vec![0, 1, 0, 1],
            sizes: vec![300, 200, 60, 40],
            users: 20,
            items: 20,
            ..SynthConfig::default()
        });
        cfg.embed.dim = 4;
        cfg.mmoe.experts = 2;
        cfg.mmoe.hidden = (8, 6);
        cfg.hei.hidden = vec![(8, 6), (6, 4), (4, 4)];
        cfg.hemp.warmup_batches = 3;
        cfg.hemp.update_interval = 4;
        cfg.hemp.z = 2;
        cfg.hemp.k = 2;
        cfg.hemp.alpha = 0.2;
        cfg.hemp.eval_samples = 30;
        cfg.train.batch = 32;
        cfg.train.epochs = 2;
        cfg.minor_threshold = 0.1;
        cfg
    }

    #[test]
    fn every_ablation_runs() {
        for ab in [Ablation::BaseOnly, Ablation::Hei, Ablation::Hemp, Ablation::Full] {
            let cfg = tiny_cfg(ab);
            let (_, t) = run(&cfg).unwrap();
            assert_eq!(t.masks.is_some(), ab.uses_masks(), "{ab}");
            assert_eq!(t.report.lineage.test_reads, 1);
            assert_eq!(t.report.lineage.mixed_copy_rows, 0);
            if ab.uses_masks() {
                assert!(!t.report.rounds.is_empty());
                assert!(t.report.rounds.iter().all(|r| r.restored));
                for m in t.masks.as_ref().unwrap() {
                    assert!(m.density() <= cfg.hemp.s + cfg.hemp.alpha);
                }
            }
            if ab == Ablation::Full {
                assert!(t.report.augmented_copies > 0);
            }
        }
    }

    #[test]
    fn all_ones_masks_score_like_unmasked() {
        let cfg = tiny_cfg(Ablation::Hei);
        let (splits, t) = run(&cfg).unwrap();
        let refs: Vec<&Sample> = splits.test.samples.iter().collect();
        let ones = vec![HierMask::full(&cfg.hei.mask_shapes()); 4];
        let a = t.model.predict(&t.store, &refs, None).unwrap();
        let b = t.model.predict(&t.store, &refs, Some(&ones)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
