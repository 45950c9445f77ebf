use crate::report::{decision_kv, write_evaluation};
use crate::{config_digest, AblateArgs, CalibrateArgs, Cli, Command, DirLock, EvaluateArgs, GenerateArgs, InferArgs, ServeArgs, TrainArgs};
use anyhow::{bail, Context, Result};
use hot_core::calibration::{calibrate, ThresholdPolicy};
use hot_core::checkpoint::Checkpoint;
use hot_core::dataset::{prepare_taxonomy, Dataset};
use hot_core::evaluation::ablation_grid;
use hot_core::imaging::Image;
use hot_core::inference::{diagnose_clinical, diagnose_combined, Engine, COMBINED_DIR, DERMOSCOPIC_DIR};
use hot_core::kv::KvDoc;
use hot_core::model::{Modality, ModelConfig};
use hot_core::synthgen::{generate_dataset, GenSpec};
use hot_core::taxonomy::{SubsetPartition, Taxonomy};
use hot_core::training::{train_with_progress, LogRecord, TrainConfig, TrainLog};
use std::path::{Path, PathBuf};

pub const TRAIN_CFG: &str = "train.cfg";
pub const MODEL_CFG: &str = "model.cfg";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CALIBRATION_REPORT: &str = "calibration.json";

/// Learning rate written into generated train configs; the per-image
/// gradient signal of the desk-scale model is too weak for 1e-4.
pub const DESK_LR: f64 = 1e-3;

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData(a) => generate(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a, cli.seed),
        Command::Infer(a) => infer(a),
        Command::Serve(a) => serve(a),
    }
}

fn read_kv(path: &Path) -> Result<KvDoc> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KvDoc::parse(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn generate(a: &GenerateArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = if a.spec == "mini" {
        GenSpec::mini()
    } else {
        let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec))?;
        GenSpec::parse(&text)?
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let _lock = DirLock::acquire(&a.out)?;
    let summary = generate_dataset(&spec, &a.out)?;
    for w in &summary.warnings {
        log::warn!("{w}");
    }
    let tc = TrainConfig {
        initial_lr: DESK_LR,
        ood_cutoff: spec.ood_cutoff,
        ood_percentile: spec.ood_percentile,
        subset_thresholds: spec.subset_thresholds,
        ..TrainConfig::default()
    };
    let mc = ModelConfig {
        image_size: spec.image_size,
        level_sizes: summary.taxonomy.level_sizes(),
        ..ModelConfig::default()
    };
    std::fs::write(a.out.join(TRAIN_CFG), tc.to_kv().render())?;
    std::fs::write(a.out.join(MODEL_CFG), mc.to_kv().render())?;
    println!("manifest\t{}", summary.manifest_path.display());
    println!("taxonomy\t{}", summary.taxonomy_path.display());
    println!("records\t{}", summary.records.len());
    Ok(())
}

/// Everything a training run needs, with config files already resolved.
pub struct TrainRequest {
    pub manifest: PathBuf,
    pub taxonomy: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub companions: Vec<Modality>,
}

impl TrainRequest {
    /// Resolves config files: explicit paths first, then `train.cfg` /
    /// `model.cfg` next to the manifest, then defaults.
    pub fn resolve(
        manifest: &Path,
        taxonomy: &Path,
        model_config: Option<&Path>,
        train_config: Option<&Path>,
        seed: Option<u64>,
        epochs: Option<usize>,
    ) -> Result<Self> {
        let beside = |name: &str| manifest.parent().map(|d| d.join(name)).filter(|p| p.exists());
        let train = match train_config.map(Path::to_path_buf).or_else(|| beside(TRAIN_CFG)) {
            Some(p) => TrainConfig::from_kv(&read_kv(&p)?)?,
            None => TrainConfig::default(),
        };
        let model = match model_config.map(Path::to_path_buf).or_else(|| beside(MODEL_CFG)) {
            Some(p) => ModelConfig::from_kv(&read_kv(&p)?)?,
            None => ModelConfig::default(),
        };
        let mut train = train;
        if let Some(s) = seed {
            train.seed = s;
        }
        if let Some(e) = epochs {
            train.epochs = e;
        }
        Ok(Self {
            manifest: manifest.to_path_buf(),
            taxonomy: taxonomy.to_path_buf(),
            model,
            train,
            companions: Vec::new(),
        })
    }

    fn split(&self) -> Result<(Taxonomy, SubsetPartition)> {
        let tax = Taxonomy::load(&self.taxonomy)?;
        let t = &self.train;
        Ok(prepare_taxonomy(&tax, t.ood_cutoff, t.ood_percentile, t.subset_thresholds)?)
    }

    /// Resolved configuration text hashed into `config_digest`.
    pub fn resolved(&self) -> String {
        format!("{}--\n{}", self.model.to_kv().render(), self.train.to_kv().render())
    }
}

fn train_one(ds: &Dataset, tax: &Taxonomy, part: &SubsetPartition, mc: &ModelConfig, tc: &TrainConfig, out: &Path) -> Result<()> {
    let label = mc.modality;
    let out_run = train_with_progress(ds, tax, part, mc, tc, |r| {
        if let LogRecord::Epoch { .. } = r {
            log::info!("{label}: {}", serde_json::to_string(r).unwrap_or_default());
        }
    })?;
    let mut ck = out_run.checkpoint;
    let t = tc.subset_thresholds;
    ck.extra.set("subset_thresholds", format!("{},{},{}", t.head_min, t.middle_min, t.tail_min));
    ck.save(out)?;
    write_log(&out_run.log, out)?;
    std::fs::write(out.join(TRAIN_CFG), tc.to_kv().render())?;
    std::fs::write(out.join(MODEL_CFG), mc.to_kv().render())?;
    Ok(())
}

fn write_log(log: &TrainLog, dir: &Path) -> Result<()> {
    std::fs::write(dir.join(TRAIN_LOG), log.to_jsonl())?;
    Ok(())
}

/// Trains the primary model into `out` and each companion into its
/// sub-directory. Returns the config digest.
pub fn train_dir(req: &TrainRequest, out: &Path) -> Result<String> {
    let (tax, part) = req.split()?;
    let ds = Dataset::from_manifest(&req.manifest, &tax, req.model.image_size)?;
    let digest = config_digest(&req.resolved());
    let _lock = DirLock::acquire(out)?;
    train_one(&ds, &tax, &part, &req.model, &req.train, out)?;
    for &m in &req.companions {
        let sub = match m {
            Modality::Multimodal => COMBINED_DIR,
            Modality::Dermoscopic => DERMOSCOPIC_DIR,
            Modality::Clinical => bail!("the clinical model is the primary one, not a companion"),
        };
        let mc = ModelConfig {
            modality: m,
            ..req.model.clone()
        };
        train_one(&ds, &tax, &part, &mc, &req.train, &out.join(sub))?;
    }
    Ok(digest)
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut req = TrainRequest::resolve(
        &a.manifest,
        &a.taxonomy,
        a.model_config.as_deref(),
        a.train_config.as_deref(),
        seed,
        a.epochs,
    )?;
    req.companions = a.companions.clone();
    println!("config_digest\t{}", config_digest(&req.resolved()));
    train_dir(&req, &a.out)?;
    println!("checkpoint\t{}", a.out.display());
    println!("checkpoint_digest\t{}", Checkpoint::digest(&a.out)?);
    Ok(())
}

fn load_dataset(ck: &Checkpoint, manifest: &Path) -> Result<Dataset> {
    Ok(Dataset::from_manifest(manifest, &ck.taxonomy, ck.model.config.image_size)?)
}

/// Calibrates the checkpoint in `dir` and any companion sub-directories,
/// writing thresholds into their metadata.
pub fn calibrate_dir(dir: &Path, manifest: &Path, policy: ThresholdPolicy, sweep_on_test: bool) -> Result<Vec<(String, serde_json::Value)>> {
    let _lock = DirLock::acquire(dir)?;
    let mut done = Vec::new();
    let mut ds: Option<Dataset> = None;
    for sub in ["", COMBINED_DIR, DERMOSCOPIC_DIR] {
        let d = dir.join(sub);
        if !d.join(hot_core::checkpoint::META_FILE).exists() {
            if sub.is_empty() {
                bail!("no checkpoint in {}", dir.display());
            }
            continue;
        }
        let mut ck = Checkpoint::load(&d).with_context(|| format!("loading checkpoint {}", d.display()))?;
        if ds.is_none() {
            ds = Some(load_dataset(&ck, manifest)?);
        }
        let report = calibrate(&ck, ds.as_ref().expect("loaded"), policy, sweep_on_test)?;
        ck.thresholds = Some(report.thresholds);
        ck.save_meta(&d)?;
        let json = serde_json::to_value(&report)?;
        std::fs::write(d.join(CALIBRATION_REPORT), serde_json::to_string_pretty(&json)?)?;
        done.push((if sub.is_empty() { "clinical".to_string() } else { sub.to_string() }, json));
    }
    Ok(done)
}

fn calibrate_cmd(a: &CalibrateArgs) -> Result<()> {
    let done = calibrate_dir(&a.ckpt, &a.manifest, a.policy, a.sweep_on_test)?;
    for (name, r) in done {
        println!(
            "{name}\tt_ood\t{}\tt_triage\t{}\tauroc\t{}",
            r["thresholds"]["t_ood"], r["thresholds"]["t_triage"], r["auroc"]
        );
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let engine = Engine::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let ds = load_dataset(&engine.clinical, &a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let _lock = DirLock::acquire(&a.report_dir)?;
    let files = write_evaluation(&engine, &ds, &a.report_dir, a.sweep_on_test, &a.category)?;
    for f in files {
        println!("wrote\t{}", f.display());
    }
    Ok(())
}

fn ablate(a: &AblateArgs, seed: Option<u64>) -> Result<()> {
    let req = TrainRequest::resolve(
        &a.manifest,
        &a.taxonomy,
        a.model_config.as_deref(),
        a.train_config.as_deref(),
        seed,
        a.epochs,
    )?;
    let seeds = if a.seeds.is_empty() { vec![req.train.seed] } else { a.seeds.clone() };
    println!("config_digest\t{}", config_digest(&req.resolved()));
    let (tax, part) = req.split()?;
    let ds = Dataset::from_manifest(&req.manifest, &tax, req.model.image_size)?;
    let rows = ablation_grid(&ds, &tax, &part, &req.model, &req.train, &a.strategies, &seeds, |s, seed, r| {
        log::info!("{s} seed {seed}: auroc categories {:.4} unknown {:.4}", r.auroc_categories, r.auroc_unknown)
    })?;
    let mut table = String::from("strategy\tseeds\tmedian_auroc_categories\tmedian_auroc_unknown\n");
    for r in &rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        table.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\n",
            r.strategy,
            seeds.join(","),
            r.median_auroc_categories,
            r.median_auroc_unknown
        ));
    }
    print!("{table}");
    if let Some(p) = &a.out {
        std::fs::write(p, table)?;
    }
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let engine = Engine::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let size = engine.clinical.model.config.image_size;
    let clinical = Image::load(&a.clinical, size).with_context(|| format!("loading {}", a.clinical.display()))?;
    let mut doc = KvDoc::new();
    doc.set("checkpoint_digest", Checkpoint::digest(&a.ckpt)?);
    decision_kv(&mut doc, "clinical", &diagnose_clinical(&engine, &clinical)?)?;
    if let Some(p) = &a.dermoscopic {
        let derm = Image::load(p, size).with_context(|| format!("loading {}", p.display()))?;
        decision_kv(&mut doc, "combined", &diagnose_combined(&engine, &clinical, &derm)?)?;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, doc.render())?;
    print!("{}", doc.render());
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let mut cfg = hot_service::ApiConfig::new(a.ckpt.clone(), a.bind).with_env()?;
    if let Some(m) = a.max_upload_bytes {
        cfg.max_upload_bytes = m;
    }
    cfg.session_ttl = std::time::Duration::from_secs(a.session_ttl_secs);
    cfg.session_dir = a.session_dir.clone();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(hot_service::run(cfg))?;
    Ok(())
}
