use hot_core::imaging::Image;
use hot_core::synthgen::{generate_dataset, render_lesion_pair, CategoryParams, GenSpec, ImagePair};
use hot_core::taxonomy::{parse_manifest, RecordLabel, Split, Taxonomy};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.data.len() as f64
}

fn ambiguous_params(spec: &GenSpec) -> Vec<(CategoryParams, CategoryParams)> {
    spec.ambiguous
        .iter()
        .map(|(a, b)| {
            let p = |n: &str| spec.categories.iter().find(|c| c.name == n).unwrap().params;
            (p(a), p(b))
        })
        .collect()
}

#[test]
fn fine_texture_gap_is_at_least_tenfold() {
    let spec = GenSpec::mini();
    for (a, b) in ambiguous_params(&spec) {
        let (mut derm, mut clin) = (0.0, 0.0);
        for seed in 0..50 {
            let ra = render_lesion_pair(&a, 64, seed);
            let rb = render_lesion_pair(&b, 64, seed);
            derm += mean_abs_diff(&ra.dermoscopic, &rb.dermoscopic);
            clin += mean_abs_diff(&ra.clinical, &rb.clinical);
        }
        assert!(derm >= 10.0 * clin, "dermoscopic {derm} vs clinical {clin}");
    }
}

fn nearest_centroid_accuracy(view: impl Fn(&ImagePair) -> &Image, pairs: &[(CategoryParams, CategoryParams)]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for (a, b) in pairs {
        let centroid = |p: &CategoryParams| {
            let mut acc = vec![0.0f64; 64 * 64 * 3];
            for seed in 0..60 {
                let r = render_lesion_pair(p, 64, 10_000 + seed);
                for (s, v) in acc.iter_mut().zip(&view(&r).data) {
                    *s += *v as f64 / 60.0;
                }
            }
            acc
        };
        let (ca, cb) = (centroid(a), centroid(b));
        let dist = |c: &[f64], img: &Image| -> f64 {
            c.iter().zip(&img.data).map(|(x, y)| (x - *y as f64).powi(2)).sum()
        };
        for (truth, p) in [(0, a), (1, b)] {
            for seed in 0..40 {
                let r = render_lesion_pair(p, 64, 20_000 + seed);
                let img = view(&r);
                let pred = if dist(&ca, img) <= dist(&cb, img) { 0 } else { 1 };
                correct += (pred == truth) as usize;
                total += 1;
            }
        }
    }
    correct as f64 / total as f64
}

#[test]
fn ambiguous_pairs_are_separable_only_dermoscopically() {
    let pairs = ambiguous_params(&GenSpec::mini());
    let derm = nearest_centroid_accuracy(|p| &p.dermoscopic, &pairs);
    let clin = nearest_centroid_accuracy(|p| &p.clinical, &pairs);
    eprintln!("nearest-centroid accuracy: dermoscopic {derm:.3}, clinical {clin:.3}");
    assert!(derm > clin);
}

fn small_spec(seed: u64) -> GenSpec {
    let mut spec = GenSpec::mini();
    spec.seed = seed;
    spec.image_size = 16;
    spec.patients = 40;
    for c in &mut spec.categories {
        c.count = (c.count / 30).max(1);
    }
    spec.ood_cutoff = 2;
    spec.subset_thresholds = "50,5,1".parse().unwrap();
    spec.unknown_per_kind = 2;
    spec
}

fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_for_equal_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small_spec(3), a.path()).unwrap();
    generate_dataset(&small_spec(3), b.path()).unwrap();
    generate_dataset(&small_spec(4), c.path()).unwrap();
    let (da, db, dc) = (tree_digest(a.path()), tree_digest(b.path()), tree_digest(c.path()));
    assert_eq!(da, db);
    assert_ne!(da, dc);
}

#[test]
fn manifest_counts_and_ood_routing() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(5);
    let summary = generate_dataset(&spec, dir.path()).unwrap();
    let total: u64 = spec.categories.iter().map(|c| c.count).sum();
    let taxonomy = Taxonomy::load(&summary.taxonomy_path).unwrap();
    let text = std::fs::read_to_string(&summary.manifest_path).unwrap();
    let records = parse_manifest(&text, &spec.taxonomy().unwrap(), Some(dir.path())).unwrap();
    assert_eq!(records.len() as u64, total + 6);
    assert_eq!(taxonomy.level3.len(), spec.categories.len());
    let spec_tax = spec.taxonomy().unwrap();
    for r in &records {
        assert!(r.clinical_ref.exists() && r.dermoscopic_ref.exists());
        let id = r.is_id(&spec_tax);
        assert_eq!(id, r.split != Split::OodTest);
        if r.label == RecordLabel::Unknown {
            assert_eq!(r.split, Split::OodTest);
        }
    }
    assert_eq!(records.iter().filter(|r| r.label == RecordLabel::Unknown).count(), 6);
}

#[test]
fn single_category_single_lesion() {
    let mut spec = small_spec(1);
    spec.categories.truncate(1);
    spec.categories[0].count = 1;
    spec.ambiguous.clear();
    spec.unknown_per_kind = 0;
    spec.ood_cutoff = 1;
    spec.subset_thresholds = "3,2,1".parse().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = generate_dataset(&spec, dir.path()).unwrap();
    assert_eq!(s.records.len(), 1);
    let text = std::fs::read_to_string(&s.manifest_path).unwrap();
    assert_eq!(text.lines().count(), 2);
}
