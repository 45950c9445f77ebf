use anyhow::{Context, Result};
use hot_core::dataset::Dataset;
use hot_core::evaluation::{
    category_report, confidence_histograms, eval_levels, eval_ood, eval_sets, inter_class, intra_class, triage_effectiveness, Prf,
    SubsetTriage,
};
use hot_core::inference::{Engine, HotDecision};
use hot_core::kv::KvDoc;
use hot_core::taxonomy::{partition_subsets, SubsetThresholds};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Flattens a decision into `prefix.field = value` entries.
pub fn decision_kv(doc: &mut KvDoc, prefix: &str, d: &HotDecision) -> Result<()> {
    let v = serde_json::to_value(d)?;
    flatten(doc, prefix, &v);
    Ok(())
}

fn flatten(doc: &mut KvDoc, prefix: &str, v: &serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                flatten(doc, &format!("{prefix}.{k}"), x);
            }
        }
        serde_json::Value::String(s) => doc.set(prefix, s),
        serde_json::Value::Null => doc.set(prefix, "none"),
        other => doc.set(prefix, other),
    }
}

fn prf_cells(p: &Option<Prf>) -> String {
    match p {
        Some(p) => format!("{:.6}\t{:.6}\t{:.6}", p.precision, p.recall, p.f1),
        None => "NA\tNA\tNA".into(),
    }
}

fn triage_row(out: &mut String, name: &str, s: &SubsetTriage) {
    for (modality, p) in [
        ("clinical", &s.clinical),
        ("dermoscopic", &s.dermoscopic),
        ("combined", &s.combined),
        ("combined_increment", &s.combined_increment),
        ("dermoscopic_increment", &s.dermoscopic_increment),
    ] {
        let _ = writeln!(out, "{name}\t{}\t{modality}\t{}", s.count, prf_cells(p));
    }
}

/// Writes the evaluation tables for `engine` into `dir`; returns the files.
pub fn write_evaluation(engine: &Engine, ds: &Dataset, dir: &Path, sweep_on_test: bool, category: &str) -> Result<Vec<PathBuf>> {
    let ck = &engine.clinical;
    let tax = &ck.taxonomy;
    let sets = eval_sets(ds, tax, sweep_on_test);
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text)?;
        files.push(p);
        Ok(())
    };

    let lm = eval_levels(ck, ds, &sets.id_test)?;
    let mut t = String::from("level\taccuracy\tprecision\trecall\tf1\n");
    for (i, m) in lm.levels.iter().enumerate() {
        let _ = writeln!(t, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", i + 1, m.accuracy, m.precision, m.recall, m.f1);
    }
    put("levels.tsv", t)?;

    let ood = eval_ood(ck, ds, &sets)?;
    let mut t = String::from("set\tcount\tauroc\n");
    let _ = writeln!(t, "ood_categories\t{}\t{:.6}", ood.category_scores.len(), ood.auroc_categories);
    let _ = writeln!(t, "ood_unknown\t{}\t{:.6}", ood.unknown_scores.len(), ood.auroc_unknown);
    put("ood.tsv", t)?;

    let mut t = String::from("level\tcategory\tintra_distance\n");
    let mut inter = String::from("level\tcategory_a\tcategory_b\tdistance\n");
    let mut summary = String::from("level\tintra_mean\tinter_mean\n");
    for level in 1..=3 {
        let name = |c: usize| match level {
            1 => tax.level1[c].clone(),
            2 => tax.level2[c].name.clone(),
            _ => tax.level3[c].name.clone(),
        };
        let intra = intra_class(ck, ds, &sets.id_test, level)?;
        for (c, v) in &intra.per_category {
            let _ = writeln!(t, "{level}\t{}\t{v:.6}", name(*c));
        }
        let d = inter_class(ck, ds, &sets.id_test, level)?;
        for (a, ca) in d.categories.iter().enumerate() {
            for (b, cb) in d.categories.iter().enumerate().skip(a + 1) {
                let _ = writeln!(inter, "{level}\t{}\t{}\t{:.6}", name(*ca), name(*cb), d.matrix[a][b]);
            }
        }
        let _ = writeln!(summary, "{level}\t{:.6}\t{:.6}", intra.mean, d.mean_off_diagonal);
    }
    put("intra.tsv", t)?;
    put("inter.tsv", inter)?;
    put("distances.tsv", summary)?;

    let thresholds: SubsetThresholds = ck
        .extra
        .get("subset_thresholds")
        .context("checkpoint lacks extra.subset_thresholds")?
        .parse()
        .map_err(|e| anyhow::anyhow!("bad subset_thresholds: {e}"))?;
    let partition = partition_subsets(&tax.count_vector(), &tax.id_flags, thresholds)?;
    let rows = confidence_histograms(ck, ds, &sets, &partition)?;
    let mut t = String::from("level\tset\tsubset\tcount\tmean\tmass\n");
    for r in rows {
        let mass: Vec<String> = r.mass.iter().map(|m| format!("{m:.6}")).collect();
        let _ = writeln!(t, "{}\t{}\t{}\t{}\t{:.6}\t{}", r.level, r.set, r.subset, r.count, r.mean, mass.join(","));
    }
    put("histograms.tsv", t)?;

    if ck.thresholds.is_none() {
        log::warn!("checkpoint is not calibrated; skipping triage and category reports");
        return Ok(files);
    }
    let tr = triage_effectiveness(engine, ds, &sets.id_test)?;
    let mut t = format!("# total {} fraction_triaged {:.6}\n", tr.total, tr.fraction_triaged);
    t.push_str("subset\tcount\tmodality\tprecision\trecall\tf1\n");
    triage_row(&mut t, "triaged", &tr.triaged);
    triage_row(&mut t, "non_triaged", &tr.non_triaged);
    put("triage.tsv", t)?;

    match category_report(engine, ds, &sets.id_test, category) {
        Ok(c) => {
            let mut t = String::from("key\tvalue\n");
            let _ = writeln!(t, "category\t{}", c.category);
            let _ = writeln!(t, "count\t{}", c.count);
            let _ = writeln!(t, "intra\t{}", c.intra.map_or("NA".into(), |v| format!("{v:.6}")));
            let _ = writeln!(t, "top5\t{}", c.top5.join(","));
            let _ = writeln!(t, "top5_inter_mean\t{:.6}", c.top5_inter.mean_off_diagonal);
            let _ = writeln!(t, "triaged_fraction\t{:.6}", c.triaged_fraction);
            let _ = writeln!(t, "overall_triaged_fraction\t{:.6}", c.overall_triaged_fraction);
            put("category.tsv", t)?;
        }
        Err(e) => log::warn!("category report skipped: {e}"),
    }
    Ok(files)
}
