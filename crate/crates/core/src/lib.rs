//! Part-aware transformer for generalizable person re-identification.
//!
//! A small dense tensor library with a reverse-mode tape, the part-masked
//! encoder, the memory-bank similarity objective, soft-label distillation,
//! a synthetic multi-camera data generator, retrieval metrics and the
//! training engine that ties them together.

// `!(x > 0.0)` is used on purpose so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod container;
pub mod csl;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use container::{load_container, save_container};
pub use csl::{MemoryBank, PositiveSet};
pub use data::{DomainSpec, SampleRecord};
pub use encoder::{Encoder, EncoderOutput, EncoderParams, ModelConfig, PartRegionSpec, TokenRef};
pub use engine::{RunConfig, TrainState, Trainer};
pub use error::{PatError, Result};
pub use eval::{MetricsJson, RetrievalResult, SampleMeta};
pub use objectives::{AblationFlags, LossBreakdown, SoftLabel};
pub use tensor::{Real, Tensor};
