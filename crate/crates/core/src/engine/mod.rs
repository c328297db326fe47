//! Training orchestration: run configuration, learning-rate schedule,
//! optimizer, the training loop over the full objective, checkpoints and
//! batched inference.

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod optim;
pub mod schedule;
pub mod train;

pub use checkpoint::{load_params, TrainState};
pub use config::{CslConfig, DataConfig, PsdConfig, RunConfig, TrainConfig};
pub use embed::{embed_images, Embeddings};
pub use optim::Sgd;
pub use schedule::lr_at;
pub use train::{evaluate_split, query_gallery_split, sample_meta, split_by_meta, EpochLog, StepOutcome, Trainer};
