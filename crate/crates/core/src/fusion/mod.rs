//! Two-branch image + clinical classifier, its training loop and file format.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;

pub use checkpoint::{read_checkpoint_meta, Checkpoint, CheckpointMeta};
pub use config::{
    BackboneProfile, BackboneStyle, FusionConfig, ImageFeatDim, ModelKind, TrainSpec, CLINICAL_FEAT_DIM, NUM_CLASSES,
};
pub use model::{Forward, FusionModel, ImageInput, BACKBONE_PREFIX};
pub use train::{
    class_weights, label_counts, run_stage, train_single, train_stage1, train_stage2, validation_loss, EarlyStopping,
    EpochRecord, Sample, Stage, StageHistory, StopDecision,
};
