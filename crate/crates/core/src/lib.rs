//! Hierarchical skin-lesion classification with out-of-distribution alerting
//! and clinical triage.

pub mod autograd;
pub mod imaging;
pub mod kv;
pub mod taxonomy;
pub mod seeds;
pub mod synthgen;
pub mod model;
pub mod losses;
pub mod metrics;
pub mod checkpoint;
pub mod dataset;
pub mod inference;
pub mod training;
pub mod calibration;
pub mod evaluation;

pub use calibration::{auroc, calibrate, tpr_fpr_sweep, CalibrationReport, ThresholdPolicy};
pub use checkpoint::{Checkpoint, Thresholds};
pub use dataset::Dataset;
pub use imaging::Image;
pub use inference::{diagnose_clinical, diagnose_combined, Engine, HotDecision, ModalityUsed, TriageSession};
pub use losses::{LossConfig, MixupStrategy};
pub use model::{Modality, ModelConfig, Variant};
pub use synthgen::GenSpec;
pub use taxonomy::{LesionRecord, RecordLabel, Split, Subset, SubsetPartition, SubsetThresholds, Taxonomy};
pub use training::{train, TrainConfig, TrainOutcome};
