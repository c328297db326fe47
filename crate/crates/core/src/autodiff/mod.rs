//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor) values.
//!
//! Every operation records its forward value on a [`Tape`] together with
//! whatever it needs for its hand-written backward rule. [`Tape::backward`]
//! replays the records in reverse.

mod attention;
mod tape;

pub use attention::{AttentionGroup, AttentionLayout, AttentionProbs};
pub use tape::{Gradients, Tape, Var};
