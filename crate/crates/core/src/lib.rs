//! Reverse-curriculum generative recommendation.
//!
//! Items are tokenized into short semantic-ID sequences by residual k-means.
//! An encoder–decoder transformer generates the token sequence of a user's
//! next conversion. During fine-tuning, a pay-conditioned query scores the
//! user's history, a straight-through top-k picks the most relevant events,
//! and their tokens are teacher-forced as a decoder prefix ahead of the
//! target. A hinge on the conversion-token likelihood gain over a frozen
//! pretrained baseline keeps the selected prefixes useful.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
