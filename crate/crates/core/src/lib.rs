// SPDX-License-Identifier: MIT OR Apache-2.0

//! # ctxprobe
//!
//! An instrumented decoder-only transformer plus the experiment toolkit for
//! studying how irrelevant context changes factual answers:
//!
//! - [`behavior`]: Q-only vs context+query prompt sets, candidate
//!   classification, answer change rate, accuracy, copy detection.
//! - [`stats`]: context/candidate PMI and the one-sample t-test.
//! - [`lens`]: logit attribution along the residual stream.
//! - [`patching`]: noise-and-restore activation patching grids.
//! - [`knockout`]: last-token attention knockout.
//!
//! Everything runs on CPU in f32 with fixed reduction order, so identical
//! inputs and seeds give bit-identical outputs. Data-parallel loops go
//! through [`exec`], which uses rayon when the `parallel` feature is on.

pub mod archive;
pub mod behavior;
pub mod error;
pub mod exec;
pub mod knockout;
pub mod lens;
pub mod model;
pub mod patching;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{
    ActivationTrace, Condition, Intervention, Model, ModelConfig, Site, TokenizedPrompt,
};
pub use tensor::Tensor;
pub use tokenizer::{TokenId, Tokenizer};
