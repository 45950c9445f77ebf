use hot_core::checkpoint::{Checkpoint, Thresholds};
use hot_core::dataset::{infer_outputs, Dataset};
use hot_core::kv::KvDoc;
use hot_core::losses::{LossConfig, MixupStrategy};
use hot_core::model::{init_model, Modality, ModelConfig, Variant};
use hot_core::seeds::derive_seed;
use hot_core::synthgen::{generate_dataset, GenSpec};
use hot_core::taxonomy::{Split, Subset, SubsetPartition, Taxonomy};
use hot_core::training::{make_epoch_batches, train, LogRecord, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

struct Fixture {
    _dir: tempfile::TempDir,
    ds: Dataset,
    taxonomy: Taxonomy,
    partition: SubsetPartition,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let mut spec = GenSpec::mini();
        spec.image_size = 16;
        spec.patients = 60;
        for c in &mut spec.categories {
            c.count = (c.count / 40).max(1);
        }
        spec.ood_cutoff = 2;
        spec.subset_thresholds = "30,5,1".parse().unwrap();
        spec.unknown_per_kind = 1;
        let dir = tempfile::tempdir().unwrap();
        let s = generate_dataset(&spec, dir.path()).unwrap();
        let taxonomy = spec.taxonomy().unwrap();
        let ds = Dataset::from_manifest(&s.manifest_path, &taxonomy, 16).unwrap();
        Fixture {
            _dir: dir,
            ds,
            partition: spec.partition().unwrap(),
            taxonomy,
        }
    })
}

fn tiny(variant: Variant, modality: Modality) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        d: 8,
        heads: 2,
        ffn_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        tiny_channels: [4, 4, 8, 8],
        variant,
        modality,
        ..ModelConfig::default()
    }
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        initial_lr: 1e-3,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initial_model() {
    let f = fixture();
    let cfg = tiny(Variant::HierarchicalMpl, Modality::Clinical);
    let out = train(&f.ds, &f.taxonomy, &f.partition, &cfg, &quick(0, 4)).unwrap();
    let expect = init_model(
        &ModelConfig {
            level_sizes: f.taxonomy.level_sizes(),
            ..cfg
        },
        derive_seed(4, "init", 0),
    )
    .unwrap();
    assert_eq!(out.checkpoint.model.param_bytes(), expect.param_bytes());
    assert_eq!(out.log.epochs().count(), 0);
    assert!(out.log.step_losses().is_empty());
}

#[test]
fn equal_seeds_give_identical_trajectories() {
    let f = fixture();
    let cfg = tiny(Variant::HierarchicalMpl, Modality::Clinical);
    let a = train(&f.ds, &f.taxonomy, &f.partition, &cfg, &quick(2, 9)).unwrap();
    let b = train(&f.ds, &f.taxonomy, &f.partition, &cfg, &quick(2, 9)).unwrap();
    let c = train(&f.ds, &f.taxonomy, &f.partition, &cfg, &quick(2, 10)).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.log.step_losses()), bits(b.log.step_losses()));
    assert_eq!(a.checkpoint.model.param_bytes(), b.checkpoint.model.param_bytes());
    assert_ne!(bits(a.log.step_losses()), bits(c.log.step_losses()));
    assert!(a.log.step_losses().iter().all(|l| l.is_finite()));
}

#[test]
fn learning_rate_decays_per_epoch() {
    let f = fixture();
    let tc = TrainConfig {
        lr_decay: 0.5,
        ..quick(3, 1)
    };
    let out = train(&f.ds, &f.taxonomy, &f.partition, &tiny(Variant::Hierarchical, Modality::Clinical), &tc).unwrap();
    let lrs: Vec<f64> = out
        .log
        .epochs()
        .map(|r| match r {
            LogRecord::Epoch { lr, .. } => *lr,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(lrs, vec![1e-3, 5e-4, 2.5e-4]);
    for r in &out.log.records {
        if let LogRecord::Step { epoch, lr, .. } = r {
            assert_eq!(*lr, tc.lr_at(*epoch));
        }
    }
    assert_eq!(TrainConfig::default().lr_at(2), 1e-4 * 0.95 * 0.95);
}

#[test]
fn checkpoint_round_trip_gives_bit_identical_outputs() {
    let f = fixture();
    let idx: Vec<usize> = (0..f.ds.len()).take(20).collect();
    for (variant, modality) in [
        (Variant::Singular, Modality::Clinical),
        (Variant::Hierarchical, Modality::Dermoscopic),
        (Variant::HierarchicalMpl, Modality::Multimodal),
    ] {
        let out = train(&f.ds, &f.taxonomy, &f.partition, &tiny(variant, modality), &quick(1, 2)).unwrap();
        let mut ck = out.checkpoint;
        ck.thresholds = Some(Thresholds {
            t_ood: 0.37,
            t_triage: Some(1.25),
        });
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.model.param_bytes(), ck.model.param_bytes());
        assert_eq!(back.thresholds, ck.thresholds);
        assert_eq!(back.taxonomy, ck.taxonomy);
        assert_eq!(
            infer_outputs(&back.model, &f.ds, &idx).unwrap(),
            infer_outputs(&ck.model, &f.ds, &idx).unwrap()
        );
        assert_eq!(Checkpoint::digest(dir.path()).unwrap(), Checkpoint::digest(dir.path()).unwrap());
    }
}

#[test]
fn train_config_round_trips_through_kv() {
    let tc = TrainConfig {
        strategy: MixupStrategy::Mx1,
        epochs: 7,
        loss: LossConfig {
            lambda_mse: 0.25,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let text = tc.to_kv().render();
    let back = TrainConfig::from_kv(&KvDoc::parse(&text).unwrap()).unwrap();
    assert_eq!(back.to_kv().render(), text);
}

fn mini_members() -> (Vec<(usize, usize)>, SubsetPartition) {
    let spec = GenSpec::mini();
    let tax = spec.taxonomy().unwrap();
    let mut members = Vec::new();
    for l3 in tax.id_level3() {
        let n = spec.categories[l3].count as f64 * 0.7;
        for _ in 0..n as usize {
            members.push((members.len(), l3));
        }
    }
    (members, spec.partition().unwrap())
}

#[test]
fn mx5_pairs_are_middle_tail_over_100_epochs() {
    let (members, partition) = mini_members();
    let label = |r: usize| members[r].1;
    let loss = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pairs = 0;
    for _ in 0..100 {
        let batches = make_epoch_batches(&members, &partition, MixupStrategy::Mx5, 32, &loss, &mut rng);
        assert_eq!(batches.len(), members.len().div_ceil(32));
        for b in &batches {
            for it in b.items.iter().filter(|it| it.mixed) {
                let s = (partition.subset_of(label(it.i)), partition.subset_of(label(it.j)));
                assert_eq!(s, (Subset::Middle, Subset::Tail));
                assert!((0.0..=1.0).contains(&it.lambda));
                pairs += 1;
            }
        }
    }
    assert!(pairs > 0);
}

#[test]
fn batches_cover_every_record_once() {
    let (members, partition) = mini_members();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (strategy, bs) in [(MixupStrategy::None, 32), (MixupStrategy::Mx5, 7), (MixupStrategy::Standard, 1000)] {
        let batches = make_epoch_batches(&members, &partition, strategy, bs, &LossConfig::default(), &mut rng);
        assert_eq!(batches.len(), members.len().div_ceil(bs));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.records.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..members.len()).collect::<Vec<_>>());
        if strategy == MixupStrategy::None {
            assert!(batches.iter().all(|b| b.mixup_count() == 0));
        }
    }
}

#[test]
fn ood_records_never_reach_training() {
    let f = fixture();
    let ood = f.ds.split_indices(Split::OodTest);
    assert!(!ood.is_empty());
    assert!(f.ds.id_indices(Split::Train, &f.taxonomy).iter().all(|i| !ood.contains(i)));
}
