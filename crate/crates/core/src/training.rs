//! Training loop: epoch batches with strategy-driven mixup, Adam with
//! per-epoch exponential decay, validation and best-checkpoint selection.

use crate::autograd::{Graph, Matrix};
use crate::checkpoint::Checkpoint;
use crate::dataset::{infer_outputs, target_of, Dataset};
use crate::imaging::{Augment, Image};
use crate::inference::predict_levels;
use crate::kv::{KvDoc, KvError};
use crate::losses::{batch_objective, mixup_image, sample_lambda, select_mixup_pairs, ItemTarget, LossConfig, LossError, MixupStrategy};
use crate::metrics::macro_metrics;
use crate::model::{forward_vars, init_model, round_to_f32, BatchInput, ModelConfig, ModelError, ModelState};
use crate::seeds::derive_seed;
use crate::taxonomy::{Split, SubsetPartition, SubsetThresholds, Taxonomy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training split has no in-distribution records")]
    EmptyTrainSet,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    DivergedLoss { epoch: usize, step: usize, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    L3MacroF1,
    L3Accuracy,
}

impl SelectionMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMetric::L3MacroF1 => "l3_macro_f1",
            SelectionMetric::L3Accuracy => "l3_accuracy",
        }
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l3_macro_f1" => Ok(SelectionMetric::L3MacroF1),
            "l3_accuracy" => Ok(SelectionMetric::L3Accuracy),
            _ => Err(format!("unknown selection metric `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Multiplicative learning-rate factor per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub random_crop: bool,
    pub horizontal_flip: bool,
    pub augment: Augment,
    pub strategy: MixupStrategy,
    pub loss: LossConfig,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub ood_cutoff: u64,
    pub ood_percentile: f64,
    pub subset_thresholds: SubsetThresholds,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            initial_lr: 1e-4,
            lr_decay: 0.95,
            epochs: 15,
            random_crop: true,
            horizontal_flip: true,
            augment: Augment::default(),
            strategy: MixupStrategy::Mx5,
            loss: LossConfig::default(),
            seed: 0,
            selection_metric: SelectionMetric::L3MacroF1,
            ood_cutoff: 100,
            ood_percentile: 0.25,
            subset_thresholds: SubsetThresholds::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "initial_lr",
    "lr_decay",
    "epochs",
    "random_crop",
    "horizontal_flip",
    "crop_min_scale",
    "flip_probability",
    "strategy",
    "lambda_mse",
    "mixup_alpha",
    "p_mix",
    "w_dce",
    "seed",
    "selection_metric",
    "ood_cutoff",
    "ood_percentile",
    "subset_thresholds",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];

impl TrainConfig {
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        doc.check_keys(TRAIN_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            batch_size: doc.parse_or("batch_size", d.batch_size)?,
            initial_lr: doc.parse_or("initial_lr", d.initial_lr)?,
            lr_decay: doc.parse_or("lr_decay", d.lr_decay)?,
            epochs: doc.parse_or("epochs", d.epochs)?,
            random_crop: doc.parse_or("random_crop", d.random_crop)?,
            horizontal_flip: doc.parse_or("horizontal_flip", d.horizontal_flip)?,
            augment: Augment {
                crop_min_scale: doc.parse_or("crop_min_scale", d.augment.crop_min_scale)?,
                flip_probability: doc.parse_or("flip_probability", d.augment.flip_probability)?,
            },
            strategy: doc.parse_or("strategy", d.strategy)?,
            loss: LossConfig {
                lambda_mse: doc.parse_or("lambda_mse", d.loss.lambda_mse)?,
                gamma: d.loss.gamma,
                mixup_alpha: doc.parse_or("mixup_alpha", d.loss.mixup_alpha)?,
                p_mix: doc.parse_or("p_mix", d.loss.p_mix)?,
                w_dce: doc.parse_or("w_dce", d.loss.w_dce)?,
            },
            seed: doc.parse_or("seed", d.seed)?,
            selection_metric: doc.parse_or("selection_metric", d.selection_metric)?,
            ood_cutoff: doc.parse_or("ood_cutoff", d.ood_cutoff)?,
            ood_percentile: doc.parse_or("ood_percentile", d.ood_percentile)?,
            subset_thresholds: doc.parse_or("subset_thresholds", d.subset_thresholds)?,
            adam_beta1: doc.parse_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: doc.parse_or("adam_beta2", d.adam_beta2)?,
            adam_eps: doc.parse_or("adam_eps", d.adam_eps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("batch_size", self.batch_size);
        d.set("initial_lr", self.initial_lr);
        d.set("lr_decay", self.lr_decay);
        d.set("epochs", self.epochs);
        d.set("random_crop", self.random_crop);
        d.set("horizontal_flip", self.horizontal_flip);
        d.set("crop_min_scale", self.augment.crop_min_scale);
        d.set("flip_probability", self.augment.flip_probability);
        d.set("strategy", self.strategy);
        d.set("lambda_mse", self.loss.lambda_mse);
        d.set("mixup_alpha", self.loss.mixup_alpha);
        d.set("p_mix", self.loss.p_mix);
        d.set("w_dce", self.loss.w_dce);
        d.set("seed", self.seed);
        d.set("selection_metric", self.selection_metric);
        d.set("ood_cutoff", self.ood_cutoff);
        d.set("ood_percentile", self.ood_percentile);
        let t = self.subset_thresholds;
        d.set("subset_thresholds", format!("{},{},{}", t.head_min, t.middle_min, t.tail_min));
        d.set("adam_beta1", self.adam_beta1);
        d.set("adam_beta2", self.adam_beta2);
        d.set("adam_eps", self.adam_eps);
        d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || (self.strategy.is_active() && self.batch_size < 2) {
            return bad("batch_size must be >= 2 when mixup is active (and >= 1 otherwise)");
        }
        if !(self.initial_lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad("initial_lr and lr_decay must be positive");
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0 && self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps > 0");
        }
        if !(self.augment.crop_min_scale > 0.0 && self.augment.crop_min_scale <= 1.0) {
            return bad("crop_min_scale must lie in (0, 1]");
        }
        self.loss.validate()?;
        Ok(())
    }

    /// `initial_lr * lr_decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi(epoch as i32)
    }

    fn effective_augment(&self) -> Augment {
        Augment {
            crop_min_scale: if self.random_crop { self.augment.crop_min_scale } else { 1.0 },
            flip_probability: if self.horizontal_flip { self.augment.flip_probability } else { 0.0 },
        }
    }
}

/// One batch row: a record, or a mixup of two records weighted `lambda : 1 - lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchItem {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    pub mixed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Record indices drawn for this batch, in draw order.
    pub records: Vec<usize>,
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn mixup_count(&self) -> usize {
        self.items.iter().filter(|i| i.mixed).count()
    }
}

/// Shuffles `members` (record index, level-3 taxonomy index) with their
/// natural class frequencies and cuts `ceil(N / batch_size)` batches. Within
/// each batch, mixup pairs are chosen by `strategy`; each pair becomes one
/// mixed item.
pub fn make_epoch_batches<R: Rng>(
    members: &[(usize, usize)],
    partition: &SubsetPartition,
    strategy: MixupStrategy,
    batch_size: usize,
    loss: &LossConfig,
    rng: &mut R,
) -> Vec<Batch> {
    let mut order: Vec<(usize, usize)> = members.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let labels: Vec<usize> = chunk.iter().map(|m| m.1).collect();
            let sel = if strategy.is_active() {
                select_mixup_pairs(&labels, partition, strategy, loss.p_mix, rng)
            } else {
                crate::losses::MixupSelection {
                    pairs: Vec::new(),
                    singles: (0..chunk.len()).collect(),
                }
            };
            let mut items: Vec<BatchItem> = sel
                .singles
                .iter()
                .map(|&s| BatchItem {
                    i: chunk[s].0,
                    j: chunk[s].0,
                    lambda: 1.0,
                    mixed: false,
                })
                .collect();
            for &(a, b) in &sel.pairs {
                items.push(BatchItem {
                    i: chunk[a].0,
                    j: chunk[b].0,
                    lambda: sample_lambda(loss.mixup_alpha, rng),
                    mixed: true,
                });
            }
            Batch {
                records: chunk.iter().map(|m| m.0).collect(),
                items,
            }
        })
        .collect()
}

/// Adam with bias correction. Parameters are rounded to `f32` after each
/// update so saved checkpoints reproduce the in-memory model exactly.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Matrix], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| Matrix::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>], lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            ndarray::Zip::from(&mut *p)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            round_to_f32(p);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermRecord {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        items: usize,
        mixup_items: usize,
        breakdown: Vec<TermRecord>,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        mean_loss: f64,
        /// Validation accuracy at levels 1, 2, 3.
        val_accuracy: [f64; 3],
        val_macro_f1: [f64; 3],
        selection: f64,
        best: bool,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn epochs(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationScores {
    pub accuracy: [f64; 3],
    pub macro_f1: [f64; 3],
}

/// Per-level accuracy and macro-F1 of `model` on `indices`.
pub fn validate(model: &ModelState, taxonomy: &Taxonomy, ds: &Dataset, indices: &[usize]) -> Result<ValidationScores> {
    let outputs = infer_outputs(model, ds, indices)?;
    let mut truth: [Vec<usize>; 3] = Default::default();
    let mut pred: [Vec<usize>; 3] = Default::default();
    for (&i, out) in indices.iter().zip(&outputs) {
        let p = ds.records[i].label.known().expect("validation records are labelled");
        let lp = predict_levels(out, model, taxonomy)?;
        for (lvl, (t, q)) in [(p.l1, lp.l1), (p.l2, lp.l2), (p.l3, lp.l3)].into_iter().enumerate() {
            truth[lvl].push(t);
            pred[lvl].push(q);
        }
    }
    let mut accuracy = [0.0; 3];
    let mut macro_f1 = [0.0; 3];
    for lvl in 0..3 {
        let m = macro_metrics(&truth[lvl], &pred[lvl]);
        accuracy[lvl] = m.accuracy;
        macro_f1[lvl] = m.f1;
    }
    Ok(ValidationScores { accuracy, macro_f1 })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
}

/// Builds the model input and targets of one batch.
fn assemble(
    ds: &Dataset,
    taxonomy: &Taxonomy,
    cfg: &ModelConfig,
    batch: &Batch,
    augment: &Augment,
    rng: &mut ChaCha8Rng,
) -> Result<(BatchInput, Vec<ItemTarget>)> {
    let views = cfg.views();
    let mut samples: Vec<Vec<Image>> = Vec::with_capacity(batch.items.len());
    let mut targets = Vec::with_capacity(batch.items.len());
    for it in &batch.items {
        let ti = target_of(taxonomy, &ds.records[it.i].label).expect("ID record");
        let tj = target_of(taxonomy, &ds.records[it.j].label).expect("ID record");
        let mut imgs = Vec::with_capacity(views.len());
        for v in &views {
            let a = augment.apply(&ds.image(it.i, *v), rng);
            imgs.push(if it.mixed {
                let b = augment.apply(&ds.image(it.j, *v), rng);
                mixup_image(&a, &b, it.lambda)?
            } else {
                a
            });
        }
        samples.push(imgs);
        targets.push(if it.mixed {
            ItemTarget::mixup(ti, tj, it.lambda)
        } else {
            ItemTarget::plain(ti)
        });
    }
    let refs: Vec<Vec<&Image>> = samples.iter().map(|s| s.iter().collect()).collect();
    Ok((BatchInput::from_images(cfg, &refs)?, targets))
}

/// Trains `model_cfg` on the train split of `ds` and returns the checkpoint
/// with the best validation score. `taxonomy` must carry the ID flags.
pub fn train(
    ds: &Dataset,
    taxonomy: &Taxonomy,
    partition: &SubsetPartition,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(ds, taxonomy, partition, model_cfg, cfg, |_| {})
}

pub fn train_with_progress(
    ds: &Dataset,
    taxonomy: &Taxonomy,
    partition: &SubsetPartition,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.level_sizes = taxonomy.level_sizes();
    let mut model = init_model(&model_cfg, derive_seed(cfg.seed, "init", 0))?;
    let loss_cfg = LossConfig {
        gamma: model_cfg.gamma,
        ..cfg.loss
    };
    let members: Vec<(usize, usize)> = ds
        .id_indices(Split::Train, taxonomy)
        .into_iter()
        .map(|i| (i, ds.records[i].label.known().expect("ID").l3))
        .collect();
    if members.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let val = ds.id_indices(Split::Val, taxonomy);
    let augment = cfg.effective_augment();
    let mut adam = Adam::new(model.values(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, ModelState)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches", epoch as u64));
        let batches = make_epoch_batches(&members, partition, cfg.strategy, cfg.batch_size, &loss_cfg, &mut rng);
        let mut loss_sum = 0.0;
        for batch in &batches {
            for it in &batch.items {
                for r in [it.i, it.j] {
                    let rec = &ds.records[r];
                    assert!(
                        rec.split == Split::Train && rec.is_id(taxonomy),
                        "record `{}` is not an in-distribution training record",
                        rec.lesion_id
                    );
                }
            }
            let mut arng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "augment", step as u64));
            let (input, targets) = assemble(ds, taxonomy, &model_cfg, batch, &augment, &mut arng)?;
            let mut g = Graph::new();
            let (vars, objective) = {
                let b = crate::model::Bound::new(&mut g, &model, true);
                let fv = forward_vars(&mut g, &b, &input)?;
                let obj = batch_objective(&mut g, &fv, &targets, model_cfg.variant, &loss_cfg)?;
                (b.vars().to_vec(), obj)
            };
            let loss = g.scalar(objective.total);
            let breakdown: Vec<TermRecord> = objective
                .breakdown
                .iter()
                .map(|t| TermRecord {
                    name: t.name.clone(),
                    value: t.value,
                    weight: t.weight,
                })
                .collect();
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    step,
                    detail: serde_json::to_string(&breakdown).unwrap_or_default(),
                });
            }
            let mut grads = g.backward(objective.total);
            let grads: Vec<Option<Matrix>> = vars.iter().map(|v| grads.take(*v)).collect();
            drop(g);
            adam.step(model.values_mut(), &grads, lr);
            let rec = LogRecord::Step {
                epoch,
                step,
                lr,
                loss,
                items: batch.items.len(),
                mixup_items: batch.mixup_count(),
                breakdown,
            };
            progress(&rec);
            log.records.push(rec);
            loss_sum += loss;
            step += 1;
        }
        let scores = if val.is_empty() {
            ValidationScores {
                accuracy: [0.0; 3],
                macro_f1: [0.0; 3],
            }
        } else {
            validate(&model, taxonomy, ds, &val)?
        };
        let selection = match cfg.selection_metric {
            SelectionMetric::L3MacroF1 => scores.macro_f1[2],
            SelectionMetric::L3Accuracy => scores.accuracy[2],
        };
        let is_best = best.as_ref().is_none_or(|b| selection > b.1);
        if is_best {
            best = Some((epoch, selection, model.clone()));
        }
        let rec = LogRecord::Epoch {
            epoch,
            lr,
            mean_loss: loss_sum / batches.len().max(1) as f64,
            val_accuracy: scores.accuracy,
            val_macro_f1: scores.macro_f1,
            selection,
            best: is_best,
        };
        progress(&rec);
        log.records.push(rec);
    }
    let (best_epoch, best_score, state) = match best {
        Some((e, s, m)) => (Some(e), Some(s), m),
        None => (None, None, model),
    };
    let mut checkpoint = Checkpoint::new(state, taxonomy.clone());
    checkpoint.extra.set("selection_metric", cfg.selection_metric);
    if let (Some(e), Some(s)) = (best_epoch, best_score) {
        checkpoint.extra.set("best_epoch", e);
        checkpoint.extra.set("best_score", s);
    }
    checkpoint.extra.set("strategy", cfg.strategy);
    checkpoint.extra.set("seed", cfg.seed);
    Ok(TrainOutcome {
        checkpoint,
        log,
        best_epoch,
        best_score,
    })
}
