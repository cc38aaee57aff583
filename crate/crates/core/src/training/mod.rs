//! Desk-scale training: datasets, AdamW with a warmup-cosine schedule and
//! clipping, and a loop that reports divergence and loss spikes.

pub mod data;
pub mod optim;
pub mod run;

pub use data::{
    make_copy_dataset, make_modular_addition_dataset, make_text_dataset, modular_answer, Dataset, DatasetConfig, Example,
};
pub use optim::{clip_global_norm, cosine_lr, AdamW, AdamWHyper};
pub use run::{
    constant_predictor_loss, evaluate, metrics_to_csv, prepare_dataset, train, MetricsRecord, RunOutcome, RunStatus, SpikeDetector, TrainConfig,
    METRICS_HEADER,
};
