//! Synthetic data, dataset format, training loop, checkpoints and fine-tuning.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod train;

pub use checkpoint::{Checkpoint, EpochRecord, FORMAT_VERSION};
pub use config::{LrSchedule, OptimizerKind, TrainConfig};
pub use dataset::{format_labels, load_dataset, parse_labels, Dataset, Manifest, Sample};
pub use model::{Detector, ModelConfig};
pub use optim::Optimizer;
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec};
pub use train::{
    evaluate_checkpoint, evaluate_model, finetune, fuse_checkpoint, levels_for, load_matching, no_enhancement,
    predict_dataset, train, Enhancement, FinetuneOutcome, Trainer, EVAL_NMS, EVAL_SCORE_THR,
};
