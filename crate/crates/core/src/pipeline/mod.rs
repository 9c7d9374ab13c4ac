//! Datasets, the seeded split, training with validation-based model
//! selection, checkpoints, and evaluation.
//!
//! MOS values are regressed raw, so RMSE is reported in MOS units.

mod checkpoint;
mod config;
mod data;
mod manifest;
mod model;
mod split;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{QualitySource, TrainConfig};
pub use data::{
    feature_dims, generate_synthetic, resolve, FeatureDims, FeatureSources, Sample, SynthDataset,
    SynthSpec, SYNTH_MOS_RANGE,
};
pub use manifest::{DatasetManifest, Record, Source, MANIFEST_HEADER};
pub use model::FusionNet;
pub use split::{split, split_sizes, SplitAssignment, SplitMix64, SplitPart, MIN_SPLIT_SIZE};
pub use train::{
    ablate, ablation_configs, cross_evaluate, evaluate, evaluate_samples, prepare, train,
    train_prepared, AblationRow, EpochLog, FusionKind, PreparedData, RunRecord, TrainedRun,
};
