//! Training objective: mixup pairing strategies, per-level cross entropy and
//! the prototype mixup loss (distance cross entropy plus weighted squared
//! distance to the source prototypes).

use crate::autograd::{Graph, Matrix, Var};
use crate::imaging::Image;
use crate::model::{ForwardVars, Variant};
use crate::taxonomy::{Subset, SubsetPartition};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("unknown mixup strategy `{0}`")]
    UnknownStrategy(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixupStrategy {
    None,
    Standard,
    /// Head-Head.
    Mx1,
    /// Middle-Middle.
    Mx2,
    /// Tail-Tail.
    Mx3,
    /// Head-Middle.
    Mx4,
    /// Middle-Tail.
    Mx5,
    /// Head-Tail.
    Mx6,
}

impl MixupStrategy {
    pub const ALL: [MixupStrategy; 8] = [
        MixupStrategy::None,
        MixupStrategy::Standard,
        MixupStrategy::Mx1,
        MixupStrategy::Mx2,
        MixupStrategy::Mx3,
        MixupStrategy::Mx4,
        MixupStrategy::Mx5,
        MixupStrategy::Mx6,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MixupStrategy::None => "none",
            MixupStrategy::Standard => "standard",
            MixupStrategy::Mx1 => "MX1",
            MixupStrategy::Mx2 => "MX2",
            MixupStrategy::Mx3 => "MX3",
            MixupStrategy::Mx4 => "MX4",
            MixupStrategy::Mx5 => "MX5",
            MixupStrategy::Mx6 => "MX6",
        }
    }

    /// The two subsets a pair must come from; `None` for unrestricted.
    fn subsets(&self) -> Option<(Subset, Subset)> {
        use Subset::*;
        match self {
            MixupStrategy::None | MixupStrategy::Standard => None,
            MixupStrategy::Mx1 => Some((Head, Head)),
            MixupStrategy::Mx2 => Some((Middle, Middle)),
            MixupStrategy::Mx3 => Some((Tail, Tail)),
            MixupStrategy::Mx4 => Some((Head, Middle)),
            MixupStrategy::Mx5 => Some((Middle, Tail)),
            MixupStrategy::Mx6 => Some((Head, Tail)),
        }
    }

    pub fn is_active(&self) -> bool {
        *self != MixupStrategy::None
    }

    fn member_eligible(&self, s: Subset) -> bool {
        if s == Subset::Ood {
            return false;
        }
        match self {
            MixupStrategy::None => false,
            MixupStrategy::Standard => true,
            _ => {
                let (a, b) = self.subsets().expect("restricted");
                s == a || s == b
            }
        }
    }

    fn pair_eligible(&self, a: Subset, b: Subset) -> bool {
        if !self.member_eligible(a) || !self.member_eligible(b) {
            return false;
        }
        match self.subsets() {
            None => true,
            Some((x, y)) => (a == x && b == y) || (a == y && b == x),
        }
    }
}

impl fmt::Display for MixupStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixupStrategy {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        MixupStrategy::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| LossError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_mse: f64,
    /// Distance-softmax temperature.
    pub gamma: f64,
    pub mixup_alpha: f64,
    pub p_mix: f64,
    /// Weight of the distance cross entropy in the prototype loss.
    pub w_dce: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 0.1,
            gamma: 1.0,
            mixup_alpha: 1.0,
            p_mix: 0.5,
            w_dce: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mse >= 0.0 && self.gamma > 0.0 && self.mixup_alpha > 0.0 && (0.0..=1.0).contains(&self.p_mix) && self.w_dce >= 0.0) {
            return Err(LossError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Draws the mixup weight from `Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    Beta::new(alpha, alpha)
        .expect("alpha > 0")
        .sample(rng)
        .clamp(0.0, 1.0)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MixupSelection {
    /// `(i, j)` batch positions; λ weights `i`.
    pub pairs: Vec<(usize, usize)>,
    /// Positions used as plain samples, ascending.
    pub singles: Vec<usize>,
}

/// Chooses mixup partners within a batch. `labels` holds each sample's
/// level-3 taxonomy index. Every eligible sample volunteers with probability
/// `p_mix`; volunteers are then paired greedily in random order with a
/// partner from the complementary subset and a different category.
pub fn select_mixup_pairs<R: Rng + ?Sized>(
    labels: &[usize],
    partition: &SubsetPartition,
    strategy: MixupStrategy,
    p_mix: f64,
    rng: &mut R,
) -> MixupSelection {
    let subsets: Vec<Subset> = labels.iter().map(|&l| partition.subset_of(l)).collect();
    let mut volunteers = Vec::new();
    for (i, s) in subsets.iter().enumerate() {
        if strategy.member_eligible(*s) && rng.random::<f64>() < p_mix {
            volunteers.push(i);
        }
    }
    volunteers.shuffle(rng);
    let mut used = vec![false; labels.len()];
    let mut pairs = Vec::new();
    for a in 0..volunteers.len() {
        let i = volunteers[a];
        if used[i] {
            continue;
        }
        let partner = volunteers[a + 1..].iter().copied().find(|&j| {
            !used[j] && labels[i] != labels[j] && strategy.pair_eligible(subsets[i], subsets[j])
        });
        if let Some(j) = partner {
            used[i] = true;
            used[j] = true;
            pairs.push(if subsets[j] < subsets[i] { (j, i) } else { (i, j) });
        }
    }
    let singles = (0..labels.len()).filter(|&i| !used[i]).collect();
    MixupSelection { pairs, singles }
}

/// `lambda * x_i + (1 - lambda) * x_j`, elementwise.
pub fn mixup_image(x_i: &Image, x_j: &Image, lambda: f64) -> Result<Image> {
    if x_i.size != x_j.size {
        return Err(LossError::ShapeMismatch(format!("{} vs {}", x_i.size, x_j.size)));
    }
    let data = x_i
        .data
        .iter()
        .zip(&x_j.data)
        .map(|(a, b)| (lambda * *a as f64 + (1.0 - lambda) * *b as f64) as f32)
        .collect();
    Ok(Image { size: x_i.size, data })
}

fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(LossError::BadLabel {
            label,
            classes: logits.len(),
        });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `lambda * CE(logits, y_i) + (1 - lambda) * CE(logits, y_j)` at one level.
pub fn mixup_ce_level(logits: &[f64], y_i: usize, y_j: usize, lambda: f64) -> Result<f64> {
    Ok(lambda * cross_entropy(logits, y_i)? + (1.0 - lambda) * cross_entropy(logits, y_j)?)
}

fn sq_dist(a: &[f64], b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `lambda * |z - p_i|^2 + (1 - lambda) * |z - p_j|^2`.
pub fn proto_mse_mixup(latent: &[f64], bank: &Matrix, i_cat: usize, j_cat: usize, lambda: f64) -> Result<f64> {
    if latent.len() != bank.ncols() {
        return Err(LossError::DimMismatch(format!("latent {} vs prototypes {}", latent.len(), bank.ncols())));
    }
    for c in [i_cat, j_cat] {
        if c >= bank.nrows() {
            return Err(LossError::BadLabel {
                label: c,
                classes: bank.nrows(),
            });
        }
    }
    Ok(lambda * sq_dist(latent, bank.row(i_cat)) + (1.0 - lambda) * sq_dist(latent, bank.row(j_cat)))
}

/// Cross entropy over the distance softmax (`logits = -gamma * d`), mixed by λ.
pub fn proto_dce_mixup(distances: &[f64], i_cat: usize, j_cat: usize, lambda: f64, gamma: f64) -> Result<f64> {
    let logits: Vec<f64> = distances.iter().map(|d| -gamma * d).collect();
    mixup_ce_level(&logits, i_cat, j_cat, lambda)
}

pub fn protmix_total(mse: f64, dce: f64, config: &LossConfig) -> f64 {
    config.w_dce * dce + config.lambda_mse * mse
}

/// Labels of one training item at every level. `l3` is the position among
/// in-distribution level-3 categories (the output index).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
}

/// One row of a training batch: a plain sample (`lambda = 1`, `j == i`) or
/// a mixup of two sources.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItemTarget {
    pub i: Target,
    pub j: Target,
    pub lambda: f64,
    pub mixed: bool,
}

impl ItemTarget {
    pub fn plain(t: Target) -> Self {
        Self {
            i: t,
            j: t,
            lambda: 1.0,
            mixed: false,
        }
    }

    pub fn mixup(i: Target, j: Target, lambda: f64) -> Self {
        Self {
            i,
            j,
            lambda,
            mixed: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BreakdownTerm {
    pub name: String,
    /// Batch-mean contribution before weighting.
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub total: Var,
    pub breakdown: Vec<BreakdownTerm>,
}

impl Objective {
    pub fn total_value(&self) -> f64 {
        self.breakdown.iter().map(|t| t.weight * t.value).sum()
    }
}

fn soft_targets(items: &[ItemTarget], classes: usize, level: impl Fn(&Target) -> usize) -> Result<Matrix> {
    let mut t = Matrix::zeros((items.len(), classes));
    for (r, it) in items.iter().enumerate() {
        let (a, b) = (level(&it.i), level(&it.j));
        for l in [a, b] {
            if l >= classes {
                return Err(LossError::BadLabel { label: l, classes });
            }
        }
        t[[r, a]] += it.lambda;
        t[[r, b]] += 1.0 - it.lambda;
    }
    Ok(t)
}

/// Mean batch loss with a per-term breakdown. Plain and mixup items are
/// reported under separate term names (`mixup_` prefix).
///
/// * `hierarchical_mpl`: CE at levels 1-2 plus `w_dce * DCE + lambda_mse * MSE` at level 3;
/// * `hierarchical`: CE at all three levels;
/// * `singular`: CE at level 3 only.
pub fn batch_objective(
    g: &mut Graph,
    outputs: &ForwardVars,
    items: &[ItemTarget],
    variant: Variant,
    config: &LossConfig,
) -> Result<Objective> {
    let n = items.len();
    if n == 0 {
        return Err(LossError::DimMismatch("empty batch".into()));
    }
    let consistent = match variant {
        Variant::Singular => outputs.logits_l3.is_some() && outputs.logits_l1.is_none(),
        Variant::Hierarchical => outputs.logits_l3.is_some() && outputs.logits_l1.is_some(),
        Variant::HierarchicalMpl => outputs.distances.is_some() && outputs.logits_l1.is_some(),
    };
    if !consistent {
        return Err(LossError::VariantMismatch(format!("outputs do not match variant {variant}")));
    }
    let groups: [(bool, &str); 2] = [(false, ""), (true, "mixup_")];
    let mut terms: Vec<(String, Var, f64)> = Vec::new();
    let mut add_term = |g: &mut Graph, name: &str, per_item: Var, weight: f64| {
        for (mixed, prefix) in groups {
            if !items.iter().any(|it| it.mixed == mixed) {
                continue;
            }
            let w: Vec<f64> = items
                .iter()
                .map(|it| if it.mixed == mixed { 1.0 / n as f64 } else { 0.0 })
                .collect();
            let s = g.weighted_sum(per_item, w);
            terms.push((format!("{prefix}{name}"), s, weight));
        }
    };
    if let (Some(l1), Some(l2)) = (outputs.logits_l1, outputs.logits_l2) {
        let t1 = soft_targets(items, g.value(l1).ncols(), |t| t.l1)?;
        let t2 = soft_targets(items, g.value(l2).ncols(), |t| t.l2)?;
        let ce1 = g.soft_cross_entropy(l1, t1);
        let ce2 = g.soft_cross_entropy(l2, t2);
        add_term(g, "ce_l1", ce1, 1.0);
        add_term(g, "ce_l2", ce2, 1.0);
    }
    match variant {
        Variant::HierarchicalMpl => {
            let d = outputs.distances.expect("checked");
            let t3 = soft_targets(items, g.value(d).ncols(), |t| t.l3)?;
            let logits = g.scale(d, -config.gamma);
            let dce = g.soft_cross_entropy(logits, t3.clone());
            let mse = g.row_dot(d, t3);
            add_term(g, "proto_dce", dce, config.w_dce);
            add_term(g, "proto_mse", mse, config.lambda_mse);
        }
        _ => {
            let l3 = outputs.logits_l3.expect("checked");
            let t3 = soft_targets(items, g.value(l3).ncols(), |t| t.l3)?;
            let ce3 = g.soft_cross_entropy(l3, t3);
            add_term(g, "ce_l3", ce3, 1.0);
        }
    }
    let mut total: Option<Var> = None;
    let mut breakdown = Vec::with_capacity(terms.len());
    for (name, v, w) in terms {
        breakdown.push(BreakdownTerm {
            name,
            value: g.scalar(v),
            weight: w,
        });
        let scaled = if w == 1.0 { v } else { g.scale(v, w) };
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled),
        });
    }
    Ok(Objective {
        total: total.expect("at least one term"),
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::SubsetThresholds;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn partition() -> SubsetPartition {
        // categories 0,1 head; 2,3 middle; 4,5 tail; 6 ood
        SubsetPartition {
            head: BTreeSet::from([0, 1]),
            middle: BTreeSet::from([2, 3]),
            tail: BTreeSet::from([4, 5]),
            ood: BTreeSet::from([6]),
            thresholds: SubsetThresholds::default(),
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in MixupStrategy::ALL {
            assert_eq!(s.as_str().parse::<MixupStrategy>().unwrap(), s);
        }
        assert_eq!("mx5".parse::<MixupStrategy>().unwrap(), MixupStrategy::Mx5);
        assert!("MX7".parse::<MixupStrategy>().is_err());
    }

    #[test]
    fn head_only_batch_has_no_mx5_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = select_mixup_pairs(&[0, 1, 0, 1], &partition(), MixupStrategy::Mx5, 1.0, &mut rng);
        assert!(sel.pairs.is_empty());
        assert_eq!(sel.singles, vec![0, 1, 2, 3]);
    }

    #[test]
    fn one_middle_one_tail_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = select_mixup_pairs(&[4, 2], &partition(), MixupStrategy::Mx5, 1.0, &mut rng);
        assert_eq!(sel.pairs, vec![(1, 0)]);
        assert!(sel.singles.is_empty());
    }

    #[test]
    fn same_category_never_paired() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = select_mixup_pairs(&[2, 2, 2], &partition(), MixupStrategy::Mx2, 1.0, &mut rng);
        assert!(sel.pairs.is_empty());
    }

    #[test]
    fn hand_values() {
        assert!((mixup_ce_level(&[0.0, 0.0], 0, 1, 0.5).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(mixup_ce_level(&[0.0, 0.0], 2, 1, 0.5), Err(LossError::BadLabel { .. })));
        assert_eq!(protmix_total(2.0, 3.0, &LossConfig { lambda_mse: 0.1, ..Default::default() }), 3.2);
        assert_eq!(protmix_total(2.0, 3.0, &LossConfig { lambda_mse: 0.0, ..Default::default() }), 3.0);
        let bank = Matrix::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(proto_mse_mixup(&[1.0, 0.0], &bank, 0, 1, 1.0).unwrap(), 0.0);
        assert!((proto_dce_mixup(&[0.7, 0.7], 0, 1, 0.3, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mixup_image_endpoints() {
        let a = Image::filled(4, [0.0; 3]);
        let b = Image::filled(4, [1.0; 3]);
        assert_eq!(mixup_image(&a, &b, 1.0).unwrap(), a);
        assert!(mixup_image(&a, &b, 0.5).unwrap().data.iter().all(|v| *v == 0.5));
        assert!(mixup_image(&a, &Image::filled(5, [0.0; 3]), 0.5).is_err());
    }
}
