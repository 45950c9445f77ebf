//! Quantitative analyses: per-level metrics, OOD AUROC, intra/inter-class
//! distances, confidence histograms, triage effectiveness and focused
//! category reports.

use crate::calibration::{auroc, ood_calibration_slice, CalibrationError};
use crate::checkpoint::Checkpoint;
use crate::dataset::{infer_outputs, Dataset};
use crate::inference::{decide, predict_levels, Engine, InferenceError, LevelPrediction, ModalityUsed};
use crate::losses::MixupStrategy;
use crate::metrics::{macro_metrics, MacroMetrics};
use crate::model::{HierarchicalOutput, ModelConfig, ModelError};
use crate::taxonomy::{RecordLabel, Split, Subset, SubsetPartition, Taxonomy};
use crate::training::{train, TrainConfig, TrainError};
use serde::Serialize;

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation set `{0}` is empty")]
    EmptySet(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("engine has no {0} checkpoint")]
    MissingModel(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Predictions of a checkpoint on a record set, kept for reuse across reports.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub indices: Vec<usize>,
    pub outputs: Vec<HierarchicalOutput>,
    pub levels: Vec<LevelPrediction>,
}

pub fn predict(ck: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<Predictions> {
    let outputs = infer_outputs(&ck.model, ds, indices)?;
    let levels = outputs
        .iter()
        .map(|o| predict_levels(o, &ck.model, &ck.taxonomy))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Predictions {
        indices: indices.to_vec(),
        outputs,
        levels,
    })
}

impl Predictions {
    pub fn conf_l3(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.conf[2]).collect()
    }

    fn subset(&self, keep: &[bool]) -> Predictions {
        let pick = |i: usize| keep[i];
        Predictions {
            indices: (0..self.indices.len()).filter(|&i| pick(i)).map(|i| self.indices[i]).collect(),
            outputs: (0..self.indices.len()).filter(|&i| pick(i)).map(|i| self.outputs[i].clone()).collect(),
            levels: (0..self.indices.len()).filter(|&i| pick(i)).map(|i| self.levels[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelMetrics {
    /// Macro metrics at levels 1, 2, 3 (taxonomy indices as class ids).
    pub levels: Vec<MacroMetrics>,
}

pub fn level_metrics(ds: &Dataset, preds: &Predictions) -> LevelMetrics {
    let mut truth: [Vec<usize>; 3] = Default::default();
    let mut pred: [Vec<usize>; 3] = Default::default();
    for (&i, lp) in preds.indices.iter().zip(&preds.levels) {
        let p = ds.records[i].label.known().expect("labelled record");
        for (lvl, (t, q)) in [(p.l1, lp.l1), (p.l2, lp.l2), (p.l3, lp.l3)].into_iter().enumerate() {
            truth[lvl].push(t);
            pred[lvl].push(q);
        }
    }
    LevelMetrics {
        levels: (0..3).map(|l| macro_metrics(&truth[l], &pred[l])).collect(),
    }
}

/// Per-level macro metrics of `ck` on the ID records `indices`.
pub fn eval_levels(ck: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<LevelMetrics> {
    if indices.is_empty() {
        return Err(EvalError::EmptySet("id test".into()));
    }
    Ok(level_metrics(ds, &predict(ck, ds, indices)?))
}

/// Record sets of the standard evaluation protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSets {
    pub id_test: Vec<usize>,
    /// Held-out OOD categories.
    pub ood_categories: Vec<usize>,
    /// Corrupted "unknown" images.
    pub ood_unknown: Vec<usize>,
}

/// ID test records plus the OOD-test records outside the calibration slice
/// (all of them with `sweep_on_test`).
pub fn eval_sets(ds: &Dataset, taxonomy: &Taxonomy, sweep_on_test: bool) -> EvalSets {
    let (calib, rest) = ood_calibration_slice(ds, taxonomy);
    let mut ood: Vec<usize> = rest;
    if sweep_on_test {
        ood.extend(calib);
        ood.sort_unstable();
    }
    let (unk, cats): (Vec<usize>, Vec<usize>) = ood.into_iter().partition(|&i| ds.records[i].label == RecordLabel::Unknown);
    EvalSets {
        id_test: ds.id_indices(Split::Test, taxonomy),
        ood_categories: cats,
        ood_unknown: unk,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OodReport {
    pub auroc_categories: f64,
    pub auroc_unknown: f64,
    pub id_scores: Vec<f64>,
    pub category_scores: Vec<f64>,
    pub unknown_scores: Vec<f64>,
}

pub fn ood_report(id_scores: Vec<f64>, category_scores: Vec<f64>, unknown_scores: Vec<f64>) -> Result<OodReport> {
    for (name, s) in [("id", &id_scores), ("ood categories", &category_scores), ("ood unknown", &unknown_scores)] {
        if s.is_empty() {
            return Err(EvalError::EmptySet(name.into()));
        }
    }
    Ok(OodReport {
        auroc_categories: auroc(&id_scores, &category_scores)?,
        auroc_unknown: auroc(&id_scores, &unknown_scores)?,
        id_scores,
        category_scores,
        unknown_scores,
    })
}

/// AUROC of level-3 confidence, ID test against each OOD set.
pub fn eval_ood(ck: &Checkpoint, ds: &Dataset, sets: &EvalSets) -> Result<OodReport> {
    let score = |idx: &[usize]| -> Result<Vec<f64>> { Ok(predict(ck, ds, idx)?.conf_l3()) };
    ood_report(score(&sets.id_test)?, score(&sets.ood_categories)?, score(&sets.ood_unknown)?)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroids(embeddings: &[Vec<f64>], labels: &[usize], normalize: bool) -> Vec<(usize, Vec<f64>, Vec<Vec<f64>>)> {
    let mut groups: std::collections::BTreeMap<usize, Vec<Vec<f64>>> = Default::default();
    for (e, l) in embeddings.iter().zip(labels) {
        groups
            .entry(*l)
            .or_default()
            .push(if normalize { unit(e) } else { e.clone() });
    }
    groups
        .into_iter()
        .map(|(l, members)| {
            let d = members[0].len();
            let mut c = vec![0.0; d];
            for m in &members {
                for (s, v) in c.iter_mut().zip(m) {
                    *s += v / members.len() as f64;
                }
            }
            (l, c, members)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntraReport {
    /// `(category, mean distance to centroid)`.
    pub per_category: Vec<(usize, f64)>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Categories with fewer than two samples.
    pub skipped: Vec<usize>,
}

/// Mean distance of each category's embeddings to their centroid. With
/// `normalize`, embeddings are scaled to unit length first.
pub fn intra_class_from(embeddings: &[Vec<f64>], labels: &[usize], normalize: bool) -> IntraReport {
    let mut per_category = Vec::new();
    let mut skipped = Vec::new();
    for (l, c, members) in centroids(embeddings, labels, normalize) {
        if members.len() < 2 {
            skipped.push(l);
            continue;
        }
        let v = members.iter().map(|m| euclid(m, &c)).sum::<f64>() / members.len() as f64;
        per_category.push((l, v));
    }
    let vals: Vec<f64> = per_category.iter().map(|p| p.1).collect();
    let (min, max, mean) = if vals.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            vals.iter().copied().fold(f64::INFINITY, f64::min),
            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            vals.iter().sum::<f64>() / vals.len() as f64,
        )
    };
    IntraReport {
        per_category,
        min,
        max,
        mean,
        skipped,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceReport {
    pub categories: Vec<usize>,
    /// Symmetric with zero diagonal.
    pub matrix: Vec<Vec<f64>>,
    pub mean_off_diagonal: f64,
}

/// Pairwise distances between category centroids. With `normalize`,
/// embeddings and centroids are scaled to unit length.
pub fn inter_class_from(embeddings: &[Vec<f64>], labels: &[usize], normalize: bool) -> DistanceReport {
    let cs: Vec<(usize, Vec<f64>)> = centroids(embeddings, labels, normalize)
        .into_iter()
        .map(|(l, c, _)| (l, if normalize { unit(&c) } else { c }))
        .collect();
    let n = cs.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut sum = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let d = euclid(&cs[a].1, &cs[b].1);
            matrix[a][b] = d;
            matrix[b][a] = d;
            sum += 2.0 * d;
        }
    }
    DistanceReport {
        categories: cs.iter().map(|c| c.0).collect(),
        matrix,
        mean_off_diagonal: if n > 1 { sum / (n * (n - 1)) as f64 } else { 0.0 },
    }
}

/// Embeddings and true labels at `level` (1-3). Falls back to the level-3
/// latent for variants without level-1/2 queries.
pub fn level_embeddings(ds: &Dataset, preds: &Predictions, level: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut emb = Vec::new();
    let mut labels = Vec::new();
    for (&i, o) in preds.indices.iter().zip(&preds.outputs) {
        let p = ds.records[i].label.known().expect("labelled record");
        let (e, l) = match level {
            1 => (o.latent_l1.as_ref().unwrap_or(&o.latent_l3), p.l1),
            2 => (o.latent_l2.as_ref().unwrap_or(&o.latent_l3), p.l2),
            _ => (&o.latent_l3, p.l3),
        };
        emb.push(e.clone());
        labels.push(l);
    }
    (emb, labels)
}

pub fn intra_class(ck: &Checkpoint, ds: &Dataset, indices: &[usize], level: usize) -> Result<IntraReport> {
    let preds = predict(ck, ds, indices)?;
    let (e, l) = level_embeddings(ds, &preds, level);
    Ok(intra_class_from(&e, &l, true))
}

pub fn inter_class(ck: &Checkpoint, ds: &Dataset, indices: &[usize], level: usize) -> Result<DistanceReport> {
    let preds = predict(ck, ds, indices)?;
    let (e, l) = level_embeddings(ds, &preds, level);
    Ok(inter_class_from(&e, &l, true))
}

/// Normalized histogram of scores in [0, 1] over `bins` equal bins; the top
/// bin includes 1.0.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if scores.is_empty() {
        return h;
    }
    for s in scores {
        let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    for v in &mut h {
        *v /= scores.len() as f64;
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramRow {
    pub level: usize,
    pub set: String,
    /// `all`, or the ID subset (`head`, `middle`, `tail`).
    pub subset: String,
    pub count: usize,
    pub mean: f64,
    pub mass: Vec<f64>,
}

/// Confidence histograms per level for the ID set (overall and per
/// subset) and both OOD sets.
pub fn confidence_histograms(
    ck: &Checkpoint,
    ds: &Dataset,
    sets: &EvalSets,
    partition: &SubsetPartition,
) -> Result<Vec<HistogramRow>> {
    let mut rows = Vec::new();
    let groups: Vec<(&str, &Vec<usize>)> = vec![
        ("id", &sets.id_test),
        ("ood_categories", &sets.ood_categories),
        ("ood_unknown", &sets.ood_unknown),
    ];
    for (set, idx) in groups {
        if idx.is_empty() {
            return Err(EvalError::EmptySet(set.into()));
        }
        let preds = predict(ck, ds, idx)?;
        let mut subsets: Vec<(String, Vec<bool>)> = vec![("all".into(), vec![true; idx.len()])];
        if set == "id" {
            for (name, s) in [("head", Subset::Head), ("middle", Subset::Middle), ("tail", Subset::Tail)] {
                let keep = idx
                    .iter()
                    .map(|&i| ds.records[i].label.known().is_some_and(|p| partition.subset_of(p.l3) == s))
                    .collect();
                subsets.push((name.into(), keep));
            }
        }
        for (name, keep) in subsets {
            for level in 1..=3 {
                let scores: Vec<f64> = preds
                    .levels
                    .iter()
                    .zip(&keep)
                    .filter(|(_, k)| **k)
                    .map(|(l, _)| l.conf[level - 1])
                    .collect();
                rows.push(HistogramRow {
                    level,
                    set: set.into(),
                    subset: name.clone(),
                    count: scores.len(),
                    mean: if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 },
                    mass: histogram(&scores, HISTOGRAM_BINS),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn of(m: &MacroMetrics) -> Self {
        Self {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }

    fn minus(&self, o: &Prf) -> Prf {
        Prf {
            precision: self.precision - o.precision,
            recall: self.recall - o.recall,
            f1: self.f1 - o.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetTriage {
    pub count: usize,
    pub clinical: Option<Prf>,
    pub dermoscopic: Option<Prf>,
    pub combined: Option<Prf>,
    /// Combined minus clinical.
    pub combined_increment: Option<Prf>,
    pub dermoscopic_increment: Option<Prf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TriageReport {
    pub total: usize,
    pub fraction_triaged: f64,
    pub triaged: SubsetTriage,
    pub non_triaged: SubsetTriage,
}

fn l3_prf(ds: &Dataset, preds: &Predictions) -> Option<Prf> {
    if preds.indices.is_empty() {
        return None;
    }
    Some(Prf::of(&level_metrics(ds, preds).levels[2]))
}

/// Splits the ID test set by the clinical pass's triage recommendation and
/// compares level-3 macro metrics per modality on each part.
pub fn triage_effectiveness(engine: &Engine, ds: &Dataset, indices: &[usize]) -> Result<TriageReport> {
    if indices.is_empty() {
        return Err(EvalError::EmptySet("id test".into()));
    }
    let thresholds = engine.thresholds()?;
    let clinical = predict(&engine.clinical, ds, indices)?;
    let triaged: Vec<bool> = clinical
        .levels
        .iter()
        .map(|l| decide(l, engine.taxonomy(), thresholds, ModalityUsed::Clinical).triage_recommended)
        .collect();
    let combined = match engine.combined_checkpoint() {
        Some(c) => Some(predict(c, ds, indices)?),
        None => None,
    };
    let dermoscopic = match &engine.dermoscopic {
        Some(c) => Some(predict(c, ds, indices)?),
        None => None,
    };
    let part = |keep: &[bool]| {
        let c = l3_prf(ds, &clinical.subset(keep));
        let m = combined.as_ref().and_then(|p| l3_prf(ds, &p.subset(keep)));
        let d = dermoscopic.as_ref().and_then(|p| l3_prf(ds, &p.subset(keep)));
        SubsetTriage {
            count: keep.iter().filter(|k| **k).count(),
            clinical: c,
            dermoscopic: d,
            combined: m,
            combined_increment: m.zip(c).map(|(m, c)| m.minus(&c)),
            dermoscopic_increment: d.zip(c).map(|(d, c)| d.minus(&c)),
        }
    };
    let not: Vec<bool> = triaged.iter().map(|t| !t).collect();
    let n_t = triaged.iter().filter(|t| **t).count();
    Ok(TriageReport {
        total: indices.len(),
        fraction_triaged: n_t as f64 / indices.len() as f64,
        triaged: part(&triaged),
        non_triaged: part(&not),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: String,
    pub count: usize,
    /// Level-3 intra-class distance; absent with fewer than two images.
    pub intra: Option<f64>,
    /// Top-5 categories by mean predicted probability over this category's images.
    pub top5: Vec<String>,
    pub top5_inter: DistanceReport,
    pub triaged_fraction: f64,
    pub overall_triaged_fraction: f64,
}

/// Statistics restricted to one level-3 category of the ID test set.
pub fn category_report(engine: &Engine, ds: &Dataset, indices: &[usize], category: &str) -> Result<CategoryReport> {
    let tax = engine.taxonomy();
    let l3 = tax
        .level3_index(category)
        .filter(|&c| tax.id_flags[c])
        .ok_or_else(|| EvalError::UnknownCategory(category.to_string()))?;
    let mine: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| ds.records[i].label.known().map(|p| p.l3) == Some(l3))
        .collect();
    if mine.is_empty() {
        return Err(EvalError::UnknownCategory(category.to_string()));
    }
    let thresholds = engine.thresholds()?;
    let all = predict(&engine.clinical, ds, indices)?;
    let triaged: Vec<bool> = all
        .levels
        .iter()
        .map(|l| decide(l, tax, thresholds, ModalityUsed::Clinical).triage_recommended)
        .collect();
    let in_cat: Vec<bool> = indices.iter().map(|i| mine.contains(i)).collect();
    let cat_preds = all.subset(&in_cat);
    let ids = tax.id_level3();
    let mut mean_prob = vec![0.0; ids.len()];
    for l in &cat_preds.levels {
        for (m, p) in mean_prob.iter_mut().zip(&l.l3_probabilities) {
            *m += p / mine.len() as f64;
        }
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|a, b| mean_prob[*b].total_cmp(&mean_prob[*a]).then(a.cmp(b)));
    let top: Vec<usize> = order.into_iter().take(5).map(|p| ids[p]).collect();
    let (emb, labels) = level_embeddings(ds, &all, 3);
    let (e5, l5): (Vec<Vec<f64>>, Vec<usize>) = emb
        .into_iter()
        .zip(labels)
        .filter(|(_, l)| top.contains(l))
        .unzip();
    let (ce, cl) = level_embeddings(ds, &cat_preds, 3);
    let intra = intra_class_from(&ce, &cl, true).per_category.first().map(|p| p.1);
    let n_cat_t = triaged.iter().zip(&in_cat).filter(|(t, c)| **t && **c).count();
    Ok(CategoryReport {
        category: category.to_string(),
        count: mine.len(),
        intra,
        top5: top.iter().map(|&c| tax.level3[c].name.clone()).collect(),
        top5_inter: inter_class_from(&e5, &l5, true),
        triaged_fraction: n_cat_t as f64 / mine.len() as f64,
        overall_triaged_fraction: triaged.iter().filter(|t| **t).count() as f64 / indices.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub auroc_categories: Vec<f64>,
    pub auroc_unknown: Vec<f64>,
    pub median_auroc_categories: f64,
    pub median_auroc_unknown: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains one model per strategy and seed and reports OOD AUROC.
pub fn ablation_grid(
    ds: &Dataset,
    taxonomy: &Taxonomy,
    partition: &SubsetPartition,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    strategies: &[MixupStrategy],
    seeds: &[u64],
    mut progress: impl FnMut(MixupStrategy, u64, &OodReport),
) -> Result<Vec<AblationRow>> {
    let sets = eval_sets(ds, taxonomy, false);
    let mut rows = Vec::new();
    for &strategy in strategies {
        let mut cat = Vec::new();
        let mut unk = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                strategy,
                seed,
                ..base.clone()
            };
            let out = train(ds, taxonomy, partition, model_cfg, &cfg)?;
            let r = eval_ood(&out.checkpoint, ds, &sets)?;
            progress(strategy, seed, &r);
            cat.push(r.auroc_categories);
            unk.push(r.auroc_unknown);
        }
        rows.push(AblationRow {
            strategy: strategy.as_str().to_string(),
            seeds: seeds.to_vec(),
            median_auroc_categories: median(&cat),
            median_auroc_unknown: median(&unk),
            auroc_categories: cat,
            auroc_unknown: unk,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intra_two_points() {
        let r = intra_class_from(&[vec![0.0, 0.0], vec![2.0, 0.0]], &[0, 0], false);
        assert_eq!(r.per_category, vec![(0, 1.0)]);
        let r = intra_class_from(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[3, 3], true);
        assert!(r.mean.abs() < 1e-12);
        let r = intra_class_from(&[vec![1.0, 2.0]], &[3], true);
        assert_eq!(r.skipped, vec![3]);
    }

    #[test]
    fn inter_unit_distance() {
        let r = inter_class_from(&[vec![0.0], vec![1.0]], &[0, 1], false);
        assert_eq!(r.matrix, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(r.mean_off_diagonal, 1.0);
        let r = inter_class_from(&[vec![1.0, 1.0], vec![2.0, 2.0]], &[0, 1], true);
        assert!(r.matrix[0][1].abs() < 1e-12);
    }

    #[test]
    fn histogram_mass() {
        let h = histogram(&[0.5; 7], HISTOGRAM_BINS);
        assert_eq!(h.iter().filter(|v| **v > 0.0).count(), 1);
        let h = histogram(&[0.0, 0.13, 0.99, 1.0, 0.5], HISTOGRAM_BINS);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(h[49], 0.4);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
