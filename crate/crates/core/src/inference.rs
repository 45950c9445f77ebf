//! HOT decisions: hierarchical prediction, OOD alert and triage recommendation,
//! plus two-step triage sessions.

use crate::checkpoint::{Checkpoint, CheckpointError, Thresholds};
use crate::imaging::Image;
use crate::model::{argmax, forward, softmax, HierarchicalOutput, Modality, ModelError, ModelState, Variant};
use crate::taxonomy::Taxonomy;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub const COMBINED_DIR: &str = "combined";
pub const DERMOSCOPIC_DIR: &str = "dermoscopic";

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("checkpoint has no calibrated thresholds")]
    MissingThresholds,
    #[error("modality mismatch: {0}")]
    ModalityMismatch(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already has a dermoscopic decision")]
    DuplicateDermoscopic(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("session store: {0}")]
    Store(String),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// Per-level prediction of one output. `l1`, `l2`, `l3` are taxonomy indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrediction {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    pub conf: [f64; 3],
    /// Level-3 probabilities over in-distribution positions.
    pub l3_probabilities: Vec<f64>,
    pub min_distance: Option<f64>,
}

/// Level 1-2 come from their softmax heads; level 3 from the head or the
/// nearest prototype. The singular variant derives levels 1-2 from the
/// predicted level-3 ancestors, with the ancestor's summed probability as
/// confidence.
pub fn predict_levels(output: &HierarchicalOutput, model: &ModelState, taxonomy: &Taxonomy) -> Result<LevelPrediction> {
    let cfg = &model.config;
    let l3c = crate::model::level3_confidence(output, model.prototypes(), cfg.variant, cfg.gamma)?;
    let ids = taxonomy.id_level3();
    let l3 = ids[l3c.predicted];
    let path = taxonomy.path_of(l3);
    let (l1, l2, c1, c2) = match (&output.logits_l1, &output.logits_l2) {
        (Some(a), Some(b)) => {
            let (p1, p2) = (softmax(a), softmax(b));
            let (i1, i2) = (argmax(&p1), argmax(&p2));
            (i1, i2, p1[i1], p2[i2])
        }
        _ => {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for (pos, &t) in ids.iter().enumerate() {
                let p = taxonomy.path_of(t);
                if p.l1 == path.l1 {
                    m1 += l3c.probabilities[pos];
                }
                if p.l2 == path.l2 {
                    m2 += l3c.probabilities[pos];
                }
            }
            (path.l1, path.l2, m1, m2)
        }
    };
    let min_distance = output
        .distances
        .as_ref()
        .map(|d| d.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(LevelPrediction {
        l1,
        l2,
        l3,
        conf: [c1, c2, l3c.confidence],
        l3_probabilities: l3c.probabilities,
        min_distance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityUsed {
    Clinical,
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsUsed {
    pub t_ood: f64,
    pub t_triage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotDecision {
    pub pred_l1: String,
    pub pred_l2: String,
    pub pred_l3: String,
    pub conf_l1: f64,
    pub conf_l2: f64,
    pub conf_l3: f64,
    pub ood_alert: bool,
    pub triage_recommended: bool,
    pub min_proto_distance: Option<f64>,
    pub thresholds_used: ThresholdsUsed,
    pub modality_used: ModalityUsed,
    pub hierarchy_consistent: bool,
}

/// Applies the decision rules to one prediction:
/// `ood_alert = conf_l3 < t_ood`,
/// `triage = ood_alert || min_distance > t_triage`.
pub fn decide(pred: &LevelPrediction, taxonomy: &Taxonomy, thresholds: Thresholds, modality: ModalityUsed) -> HotDecision {
    let ood_alert = pred.conf[2] < thresholds.t_ood;
    let far = match (pred.min_distance, thresholds.t_triage) {
        (Some(d), Some(t)) => d > t,
        _ => false,
    };
    let anc = taxonomy.path_of(pred.l3);
    HotDecision {
        pred_l1: taxonomy.level1[pred.l1].clone(),
        pred_l2: taxonomy.level2[pred.l2].name.clone(),
        pred_l3: taxonomy.level3[pred.l3].name.clone(),
        conf_l1: pred.conf[0],
        conf_l2: pred.conf[1],
        conf_l3: pred.conf[2],
        ood_alert,
        triage_recommended: ood_alert || far,
        min_proto_distance: pred.min_distance,
        thresholds_used: ThresholdsUsed {
            t_ood: thresholds.t_ood,
            t_triage: thresholds.t_triage,
        },
        modality_used: modality,
        hierarchy_consistent: anc.l1 == pred.l1 && anc.l2 == pred.l2,
    }
}

/// A loaded engine: a clinical checkpoint plus optional combined and
/// dermoscopic checkpoints stored in sub-directories.
#[derive(Clone, Debug)]
pub struct Engine {
    pub clinical: Checkpoint,
    pub combined: Option<Checkpoint>,
    pub dermoscopic: Option<Checkpoint>,
    pub root: PathBuf,
}

impl Engine {
    pub fn new(clinical: Checkpoint, combined: Option<Checkpoint>) -> Self {
        Self {
            clinical,
            combined,
            dermoscopic: None,
            root: PathBuf::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sub = |name: &str| -> Result<Option<Checkpoint>> {
            let p = dir.join(name);
            if p.join(crate::checkpoint::META_FILE).exists() {
                Ok(Some(Checkpoint::load(&p)?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            clinical: Checkpoint::load(dir)?,
            combined: sub(COMBINED_DIR)?,
            dermoscopic: sub(DERMOSCOPIC_DIR)?,
            root: dir.to_path_buf(),
        })
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        self.clinical.thresholds.ok_or(InferenceError::MissingThresholds)
    }

    /// The checkpoint serving the combined pass.
    pub fn combined_checkpoint(&self) -> Option<&Checkpoint> {
        match &self.combined {
            Some(c) => Some(c),
            None if self.clinical.model.config.modality == Modality::Multimodal => Some(&self.clinical),
            None => None,
        }
    }

    /// Thresholds of the combined pass: the clinical `t_ood`, and the
    /// combined model's own `t_triage` when it was calibrated.
    pub fn combined_thresholds(&self) -> Result<Thresholds> {
        let base = self.thresholds()?;
        let own = self.combined_checkpoint().and_then(|c| c.thresholds);
        Ok(Thresholds {
            t_ood: base.t_ood,
            t_triage: own.and_then(|t| t.t_triage).or(base.t_triage),
        })
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.clinical.taxonomy
    }
}

pub fn diagnose_clinical(engine: &Engine, clinical: &Image) -> Result<HotDecision> {
    let ck = &engine.clinical;
    let thresholds = engine.thresholds()?;
    if ck.model.config.modality == Modality::Multimodal {
        return Err(InferenceError::ModalityMismatch(
            "the clinical pass needs a single-image checkpoint".into(),
        ));
    }
    let out = forward(&ck.model, &[clinical])?;
    let pred = predict_levels(&out, &ck.model, &ck.taxonomy)?;
    Ok(decide(&pred, &ck.taxonomy, thresholds, ModalityUsed::Clinical))
}

pub fn diagnose_combined(engine: &Engine, clinical: &Image, dermoscopic: &Image) -> Result<HotDecision> {
    let thresholds = engine.combined_thresholds()?;
    let ck = engine
        .combined_checkpoint()
        .ok_or_else(|| InferenceError::ModalityMismatch("engine has no multimodal checkpoint".into()))?;
    let out = forward(&ck.model, &[clinical, dermoscopic])?;
    let pred = predict_levels(&out, &ck.model, &ck.taxonomy)?;
    Ok(decide(&pred, &ck.taxonomy, thresholds, ModalityUsed::Combined))
}

/// Whether a variant produces prototype distances (and therefore a triage distance).
pub fn variant_has_triage(variant: Variant) -> bool {
    variant == Variant::HierarchicalMpl
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriageSession {
    pub session_id: String,
    pub clinical: HotDecision,
    pub combined: Option<HotDecision>,
    pub created_ms: u64,
    pub updated_ms: u64,
    /// The clinical image, kept for the combined pass.
    #[serde(skip)]
    pub clinical_image: Option<Image>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Runs the clinical pass and returns a new session.
pub fn open_session(engine: &Engine, clinical: &Image, session_id: String) -> Result<TriageSession> {
    let decision = diagnose_clinical(engine, clinical)?;
    let t = now_ms();
    Ok(TriageSession {
        session_id,
        clinical: decision,
        combined: None,
        created_ms: t,
        updated_ms: t,
        clinical_image: Some(clinical.clone()),
    })
}

/// Runs the combined pass on a session. Allowed whether or not triage was
/// recommended.
pub fn submit_dermoscopic(engine: &Engine, session: &mut TriageSession, dermoscopic: &Image) -> Result<()> {
    if session.combined.is_some() {
        return Err(InferenceError::DuplicateDermoscopic(session.session_id.clone()));
    }
    let clinical = session
        .clinical_image
        .as_ref()
        .ok_or_else(|| InferenceError::Store("clinical image not retained".into()))?;
    session.combined = Some(diagnose_combined(engine, clinical, dermoscopic)?);
    session.updated_ms = now_ms();
    Ok(())
}

/// In-process session store with TTL eviction and per-session locking.
/// With a directory configured, sessions are also persisted as JSON files
/// (plus the clinical image as PNG) and reloaded on lookup.
pub struct SessionStore {
    ttl: Duration,
    dir: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Arc<Mutex<TriageSession>>>>,
    counter: Mutex<u64>,
}

impl SessionStore {
    pub fn new(ttl: Duration, dir: Option<PathBuf>) -> Self {
        Self {
            ttl,
            dir,
            sessions: Mutex::new(HashMap::new()),
            counter: Mutex::new(0),
        }
    }

    fn next_id(&self) -> String {
        let mut c = self.counter.lock().expect("counter lock");
        *c += 1;
        format!("{:016x}{:08x}", rand::random::<u64>(), *c)
    }

    fn evict(&self, map: &mut HashMap<String, Arc<Mutex<TriageSession>>>) {
        let now = now_ms();
        let ttl = self.ttl.as_millis() as u64;
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => s.updated_ms + ttl > now,
            Err(_) => true,
        });
    }

    fn persist(&self, s: &TriageSession) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let err = |e: std::io::Error| InferenceError::Store(e.to_string());
        std::fs::create_dir_all(dir).map_err(err)?;
        let json = serde_json::to_vec_pretty(s).map_err(|e| InferenceError::Store(e.to_string()))?;
        std::fs::write(dir.join(format!("{}.json", s.session_id)), json).map_err(err)?;
        if let Some(img) = &s.clinical_image {
            img.save_png(&dir.join(format!("{}.png", s.session_id)))
                .map_err(|e| InferenceError::Store(e.to_string()))?;
        }
        Ok(())
    }

    fn restore(&self, id: &str, image_size: usize) -> Option<TriageSession> {
        let dir = self.dir.as_ref()?;
        if !id.chars().all(|c| c.is_ascii_alphanumeric()) {
            return None;
        }
        let text = std::fs::read(dir.join(format!("{id}.json"))).ok()?;
        let mut s: TriageSession = serde_json::from_slice(&text).ok()?;
        s.clinical_image = Image::load(&dir.join(format!("{id}.png")), image_size).ok();
        if s.updated_ms + self.ttl.as_millis() as u64 <= now_ms() {
            return None;
        }
        Some(s)
    }

    pub fn open(&self, engine: &Engine, clinical: &Image) -> Result<TriageSession> {
        let s = open_session(engine, clinical, self.next_id())?;
        self.persist(&s)?;
        let mut map = self.sessions.lock().expect("store lock");
        self.evict(&mut map);
        map.insert(s.session_id.clone(), Arc::new(Mutex::new(s.clone())));
        Ok(s)
    }

    fn entry(&self, id: &str, image_size: usize) -> Result<Arc<Mutex<TriageSession>>> {
        let mut map = self.sessions.lock().expect("store lock");
        self.evict(&mut map);
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        let s = self
            .restore(id, image_size)
            .ok_or_else(|| InferenceError::UnknownSession(id.to_string()))?;
        let arc = Arc::new(Mutex::new(s));
        map.insert(id.to_string(), arc.clone());
        Ok(arc)
    }

    pub fn get(&self, id: &str, image_size: usize) -> Result<TriageSession> {
        let e = self.entry(id, image_size)?;
        let s = e.lock().expect("session lock").clone();
        Ok(s)
    }

    pub fn submit_dermoscopic(&self, engine: &Engine, id: &str, dermoscopic: &Image) -> Result<TriageSession> {
        let e = self.entry(id, engine.clinical.model.config.image_size)?;
        let mut s = e.lock().expect("session lock");
        submit_dermoscopic(engine, &mut s, dermoscopic)?;
        self.persist(&s)?;
        Ok(s.clone())
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
