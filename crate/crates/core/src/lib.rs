//! Personalized token-image generation from user interaction histories.
//!
//! The pipeline has two training stages over a small autoregressive policy
//! that emits grids of visual tokens:
//!
//! 1. supervised fine-tuning on the next item's image tokens given the
//!    previous five items ([`train_sft`]);
//! 2. group-relative policy optimization against a composite
//!    relevance/aesthetics reward ([`train_grpo`]).
//!
//! [`evalsuite`] scores any generator with the same metric cells used for
//! the reward, and [`cli`] wires the stages into the `persogen` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evalsuite;
pub mod policy;
pub mod rewards;
pub mod train_grpo;
pub mod train_sft;
pub mod util;

pub use error::{Error, Result};
