//! Three-level label tree, ID/OOD category split, Head/Middle/Tail subset
//! partition and patient-grouped dataset splits.
//!
//! Taxonomy documents are line oriented, one category per line:
//!
//! ```text
//! level1<TAB>benign<TAB>-
//! level2<TAB>benign:melanocytic<TAB>benign
//! level3<TAB>atypical<TAB>benign:melanocytic<TAB>29039
//! ```
//!
//! The count column is optional. Blank lines and lines starting with `#` are
//! ignored.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Reserved level-3 token for unusual clinic images (blurred, occluded, ...).
pub const UNKNOWN_LABEL: &str = "__unknown__";

/// Reference-scale taxonomy (61 level-3 categories with image counts).
pub const REFERENCE_TAXONOMY: &str = include_str!("../data/reference.taxonomy");

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("malformed document at line {line}: {reason}")]
    MalformedDocument { line: usize, reason: String },
    #[error("category `{name}` references missing parent `{parent}`")]
    DanglingParent { name: String, parent: String },
    #[error("duplicate category name `{0}`")]
    DuplicateName(String),
    #[error("empty count list")]
    EmptyCounts,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("category `{name}` has {count} samples, below the tail minimum {tail_min}")]
    CountBelowTailMin {
        name: String,
        count: u64,
        tail_min: u64,
    },
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("malformed manifest at line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaxonomyError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Category {
    pub name: String,
    pub parent: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    pub level1: Vec<String>,
    pub level2: Vec<Category>,
    pub level3: Vec<Category>,
    pub counts: Vec<Option<u64>>,
    pub id_flags: Vec<bool>,
}

/// Indices of one label at every level of a [`Taxonomy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelPath {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
}

impl Taxonomy {
    pub fn parse(document: &str) -> Result<Self> {
        let mut level1: Vec<String> = Vec::new();
        let mut raw2: Vec<(String, String, usize)> = Vec::new();
        let mut raw3: Vec<(String, String, Option<u64>, usize)> = Vec::new();
        for (i, line) in document.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 || fields.len() > 4 {
                return Err(TaxonomyError::MalformedDocument {
                    line: lineno,
                    reason: format!("expected 3 or 4 tab-separated fields, got {}", fields.len()),
                });
            }
            let name = fields[1].trim().to_string();
            if name.is_empty() || name == UNKNOWN_LABEL {
                return Err(TaxonomyError::MalformedDocument {
                    line: lineno,
                    reason: "empty or reserved category name".into(),
                });
            }
            let parent = fields[2].trim().to_string();
            let count = match fields.get(3).map(|s| s.trim()) {
                None | Some("") | Some("-") => None,
                Some(s) => Some(s.parse::<u64>().map_err(|_| {
                    TaxonomyError::MalformedDocument {
                        line: lineno,
                        reason: format!("bad count `{s}`"),
                    }
                })?),
            };
            match fields[0].trim() {
                "level1" => {
                    if level1.contains(&name) {
                        return Err(TaxonomyError::DuplicateName(name));
                    }
                    level1.push(name);
                }
                "level2" => raw2.push((name, parent, lineno)),
                "level3" => raw3.push((name, parent, count, lineno)),
                other => {
                    return Err(TaxonomyError::MalformedDocument {
                        line: lineno,
                        reason: format!("unknown level tag `{other}`"),
                    })
                }
            }
        }
        if level1.len() != 2 {
            return Err(TaxonomyError::MalformedDocument {
                line: 0,
                reason: format!("expected exactly 2 level-1 categories, got {}", level1.len()),
            });
        }
        let mut level2 = Vec::with_capacity(raw2.len());
        let mut seen = BTreeSet::new();
        for (name, parent, _) in raw2 {
            if !seen.insert(name.clone()) {
                return Err(TaxonomyError::DuplicateName(name));
            }
            let p = level1
                .iter()
                .position(|n| *n == parent)
                .ok_or_else(|| TaxonomyError::DanglingParent {
                    name: name.clone(),
                    parent: parent.clone(),
                })?;
            level2.push(Category { name, parent: p });
        }
        let mut level3 = Vec::with_capacity(raw3.len());
        let mut counts = Vec::with_capacity(raw3.len());
        let mut seen = BTreeSet::new();
        for (name, parent, count, _) in raw3 {
            if !seen.insert(name.clone()) {
                return Err(TaxonomyError::DuplicateName(name));
            }
            let p = level2
                .iter()
                .position(|c| c.name == parent)
                .ok_or_else(|| TaxonomyError::DanglingParent {
                    name: name.clone(),
                    parent: parent.clone(),
                })?;
            level3.push(Category { name, parent: p });
            counts.push(count);
        }
        let id_flags = vec![true; level3.len()];
        Ok(Self {
            level1,
            level2,
            level3,
            counts,
            id_flags,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for n in &self.level1 {
            out.push_str(&format!("level1\t{n}\t-\n"));
        }
        for c in &self.level2 {
            out.push_str(&format!("level2\t{}\t{}\n", c.name, self.level1[c.parent]));
        }
        for (c, count) in self.level3.iter().zip(&self.counts) {
            match count {
                Some(n) => out.push_str(&format!(
                    "level3\t{}\t{}\t{n}\n",
                    c.name, self.level2[c.parent].name
                )),
                None => out.push_str(&format!(
                    "level3\t{}\t{}\n",
                    c.name, self.level2[c.parent].name
                )),
            }
        }
        out
    }

    /// SHA-256 of the canonical document plus the ID flags.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_document().as_bytes());
        for f in &self.id_flags {
            h.update([*f as u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn path_of(&self, l3: usize) -> LabelPath {
        let l2 = self.level3[l3].parent;
        LabelPath {
            l1: self.level2[l2].parent,
            l2,
            l3,
        }
    }

    pub fn level3_index(&self, name: &str) -> Option<usize> {
        self.level3.iter().position(|c| c.name == name)
    }

    pub fn level2_index(&self, name: &str) -> Option<usize> {
        self.level2.iter().position(|c| c.name == name)
    }

    pub fn level1_index(&self, name: &str) -> Option<usize> {
        self.level1.iter().position(|n| n == name)
    }

    /// Level-3 indices of the in-distribution categories, in taxonomy order.
    /// Model outputs at level 3 are indexed by position in this list.
    pub fn id_level3(&self) -> Vec<usize> {
        (0..self.level3.len()).filter(|&i| self.id_flags[i]).collect()
    }

    pub fn id_position(&self, l3: usize) -> Option<usize> {
        if !self.id_flags.get(l3).copied().unwrap_or(false) {
            return None;
        }
        Some(self.id_flags[..l3].iter().filter(|f| **f).count())
    }

    pub fn apply_id_set(&mut self, id: &BTreeSet<usize>) {
        for (i, f) in self.id_flags.iter_mut().enumerate() {
            *f = id.contains(&i);
        }
    }

    pub fn level_sizes(&self) -> (usize, usize, usize) {
        (
            self.level1.len(),
            self.level2.len(),
            self.id_flags.iter().filter(|f| **f).count(),
        )
    }

    /// Counts indexed by level-3 category, with missing counts read as zero.
    pub fn count_vector(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.unwrap_or(0)).collect()
    }

    pub fn full_name(&self, l3: usize) -> String {
        let p = self.path_of(l3);
        format!(
            "{}:{}:{}",
            self.level1[p.l1], self.level2[p.l2].name, self.level3[l3].name
        )
    }
}

pub fn load_taxonomy(document: &str) -> Result<Taxonomy> {
    Taxonomy::parse(document)
}

/// Splits level-3 categories into in-distribution and out-of-distribution.
///
/// A category is OOD when its count is below `cutoff` and it also falls in
/// the bottom `percentile` of the count scale, i.e. its count does not exceed
/// `min + percentile * (max - min)`.
pub fn split_id_ood(
    counts: &[u64],
    cutoff: u64,
    percentile: f64,
) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    if counts.is_empty() {
        return Err(TaxonomyError::EmptyCounts);
    }
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(TaxonomyError::InvalidParameter(format!(
            "percentile must lie in (0, 1), got {percentile}"
        )));
    }
    let min = *counts.iter().min().expect("non-empty") as f64;
    let max = *counts.iter().max().expect("non-empty") as f64;
    let scale_limit = min + percentile * (max - min);
    let mut id = BTreeSet::new();
    let mut ood = BTreeSet::new();
    for (i, &c) in counts.iter().enumerate() {
        if c < cutoff && (c as f64) <= scale_limit {
            ood.insert(i);
        } else {
            id.insert(i);
        }
    }
    Ok((id, ood))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subset {
    Head,
    Middle,
    Tail,
    Ood,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Head => "head",
            Subset::Middle => "middle",
            Subset::Tail => "tail",
            Subset::Ood => "ood",
        })
    }
}

/// Count cut-offs for the Head/Middle/Tail split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubsetThresholds {
    pub head_min: u64,
    pub middle_min: u64,
    pub tail_min: u64,
}

impl Default for SubsetThresholds {
    fn default() -> Self {
        Self {
            head_min: 10_000,
            middle_min: 500,
            tail_min: 100,
        }
    }
}

impl FromStr for SubsetThresholds {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u64> = s
            .split(',')
            .map(|p| p.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| TaxonomyError::InvalidParameter(format!("bad thresholds `{s}`")))?;
        if parts.len() != 3 {
            return Err(TaxonomyError::InvalidParameter(format!(
                "expected head,middle,tail thresholds, got `{s}`"
            )));
        }
        Ok(Self {
            head_min: parts[0],
            middle_min: parts[1],
            tail_min: parts[2],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPartition {
    pub head: BTreeSet<usize>,
    pub middle: BTreeSet<usize>,
    pub tail: BTreeSet<usize>,
    pub ood: BTreeSet<usize>,
    pub thresholds: SubsetThresholds,
}

impl SubsetPartition {
    pub fn subset_of(&self, l3: usize) -> Subset {
        if self.head.contains(&l3) {
            Subset::Head
        } else if self.middle.contains(&l3) {
            Subset::Middle
        } else if self.tail.contains(&l3) {
            Subset::Tail
        } else {
            Subset::Ood
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize, usize) {
        (
            self.head.len(),
            self.middle.len(),
            self.tail.len(),
            self.ood.len(),
        )
    }
}

/// Assigns every level-3 category to Head, Middle, Tail (ID) or OOD.
/// `counts` and `id_flags` are indexed by level-3 category.
pub fn partition_subsets(
    counts: &[u64],
    id_flags: &[bool],
    thresholds: SubsetThresholds,
) -> Result<SubsetPartition> {
    let SubsetThresholds {
        head_min,
        middle_min,
        tail_min,
    } = thresholds;
    if !(head_min > middle_min && middle_min > tail_min && tail_min >= 1) {
        return Err(TaxonomyError::InvalidParameter(format!(
            "thresholds must satisfy head > middle > tail >= 1, got {head_min},{middle_min},{tail_min}"
        )));
    }
    assert_eq!(counts.len(), id_flags.len(), "counts/id_flags length");
    let mut p = SubsetPartition {
        head: BTreeSet::new(),
        middle: BTreeSet::new(),
        tail: BTreeSet::new(),
        ood: BTreeSet::new(),
        thresholds,
    };
    for (i, (&c, &is_id)) in counts.iter().zip(id_flags).enumerate() {
        if !is_id {
            p.ood.insert(i);
        } else if c >= head_min {
            p.head.insert(i);
        } else if c >= middle_min {
            p.middle.insert(i);
        } else if c >= tail_min {
            p.tail.insert(i);
        } else {
            return Err(TaxonomyError::CountBelowTailMin {
                name: format!("#{i}"),
                count: c,
                tail_min,
            });
        }
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    OodTest,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::OodTest => "ood_test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "ood_test" => Ok(Split::OodTest),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecordLabel {
    Known(LabelPath),
    Unknown,
}

impl RecordLabel {
    pub fn known(&self) -> Option<LabelPath> {
        match self {
            RecordLabel::Known(p) => Some(*p),
            RecordLabel::Unknown => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub patient_id: String,
    pub clinical_ref: PathBuf,
    pub dermoscopic_ref: PathBuf,
    pub label: RecordLabel,
    pub split: Split,
}

impl LesionRecord {
    /// True for in-distribution labels under `taxonomy`.
    pub fn is_id(&self, taxonomy: &Taxonomy) -> bool {
        match self.label {
            RecordLabel::Known(p) => taxonomy.id_flags[p.l3],
            RecordLabel::Unknown => false,
        }
    }
}

pub const MANIFEST_HEADER: &str =
    "lesion_id\tpatient_id\tclinical_path\tdermoscopic_path\tlevel1\tlevel2\tlevel3\tsplit";

/// Serialises records as a tab-separated manifest with header.
pub fn write_manifest(records: &[LesionRecord], taxonomy: &Taxonomy) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        let (l1, l2, l3) = match r.label {
            RecordLabel::Known(p) => (
                taxonomy.level1[p.l1].as_str(),
                taxonomy.level2[p.l2].name.as_str(),
                taxonomy.level3[p.l3].name.as_str(),
            ),
            RecordLabel::Unknown => ("-", "-", UNKNOWN_LABEL),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{l1}\t{l2}\t{l3}\t{}\n",
            r.lesion_id,
            r.patient_id,
            r.clinical_ref.display(),
            r.dermoscopic_ref.display(),
            r.split.as_str()
        ));
    }
    out
}

/// Parses a manifest. Relative image paths are resolved against `base_dir`.
pub fn parse_manifest(
    document: &str,
    taxonomy: &Taxonomy,
    base_dir: Option<&Path>,
) -> Result<Vec<LesionRecord>> {
    let mut lines = document.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        _ => {
            return Err(TaxonomyError::MalformedManifest {
                line: 1,
                reason: "missing or wrong header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| TaxonomyError::MalformedManifest {
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", f.len())));
        }
        let label = if f[6] == UNKNOWN_LABEL {
            RecordLabel::Unknown
        } else {
            let l3 = taxonomy
                .level3_index(f[6])
                .ok_or_else(|| bad(format!("unknown level-3 `{}`", f[6])))?;
            let path = taxonomy.path_of(l3);
            if taxonomy.level2[path.l2].name != f[5] || taxonomy.level1[path.l1] != f[4] {
                return Err(bad(format!("label path `{}:{}:{}` disagrees with taxonomy", f[4], f[5], f[6])));
            }
            RecordLabel::Known(path)
        };
        let split: Split = f[7].parse().map_err(bad)?;
        let resolve = |p: &str| match base_dir {
            Some(b) if Path::new(p).is_relative() => b.join(p),
            _ => PathBuf::from(p),
        };
        out.push(LesionRecord {
            lesion_id: f[0].to_string(),
            patient_id: f[1].to_string(),
            clinical_ref: resolve(f[2]),
            dermoscopic_ref: resolve(f[3]),
            label,
            split,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Split by image instead of by patient, letting patients straddle
    /// train and test.
    pub allow_patient_overlap: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.15,
            val_fraction: 0.2,
            seed: 0,
            allow_patient_overlap: false,
        }
    }
}

/// Assigns `split` on every record. OOD and unknown records always go to
/// `ood_test`; ID records are split by patient. Returns warnings for
/// degenerate outcomes such as an empty validation split.
pub fn split_train_test(
    records: &mut [LesionRecord],
    taxonomy: &Taxonomy,
    config: SplitConfig,
) -> Result<Vec<String>> {
    for f in [config.test_fraction, config.val_fraction] {
        if !(f > 0.0 && f < 1.0) {
            return Err(TaxonomyError::InvalidParameter(format!(
                "split fractions must lie in (0, 1), got {f}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let id_indices: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].is_id(taxonomy))
        .collect();
    for r in records.iter_mut() {
        if !r.is_id(taxonomy) {
            r.split = Split::OodTest;
        }
    }
    // Units are patients (or single images when overlap is allowed).
    let mut units: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in &id_indices {
        let key = if config.allow_patient_overlap {
            records[i].lesion_id.clone()
        } else {
            records[i].patient_id.clone()
        };
        units.entry(key).or_default().push(i);
    }
    let mut keys: Vec<String> = units.keys().cloned().collect();
    keys.shuffle(&mut rng);
    let n = keys.len();
    let n_test = (config.test_fraction * n as f64).round() as usize;
    let n_rest = n - n_test;
    let n_val = (config.val_fraction * n_rest as f64).round() as usize;
    let mut assignment: HashMap<&str, Split> = HashMap::new();
    for (k, key) in keys.iter().enumerate() {
        let s = if k < n_test {
            Split::Test
        } else if k < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
        assignment.insert(key.as_str(), s);
    }
    for (key, idxs) in &units {
        for &i in idxs {
            records[i].split = assignment[key.as_str()];
        }
    }
    let mut warnings = Vec::new();
    for (s, count) in [(Split::Train, n - n_test - n_val), (Split::Val, n_val), (Split::Test, n_test)] {
        if count == 0 {
            warnings.push(format!("split `{}` is empty", s.as_str()));
        }
    }
    Ok(warnings)
}
