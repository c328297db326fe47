//! The part-aware encoder.
//!
//! Sequence layout is `[class, part_1..part_M, image_1..image_N] + pos`.
//! Each block layer-norms the sequence, computes one shared Q/K/V
//! projection, and then runs two attention patterns side by side on it:
//! class and image tokens attend among themselves, and every part token
//! attends only to itself and the image tokens of its region. Part
//! attention writes back only the part-token row, so image tokens follow
//! the plain ViT pathway.

mod config;
mod forward;
mod params;

pub use config::{default_part_regions, ModelConfig, PartRegionSpec};
pub use forward::{Encoder, EncoderOutput, TapeOutput, TokenRef};
pub use params::{BlockSlots, EncoderParams, ParamSlots};
