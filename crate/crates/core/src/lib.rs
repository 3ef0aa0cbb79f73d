//! Speech-only adaptation of a miniature wav2vec-style speech model.
//!
//! The crate synthesizes formant-based source, target and noisy speech
//! domains, pretrains a small contrastive model, finetunes it with CTC on
//! the source domain, continually pretrains the feature encoder on mixed
//! source and target audio, and recombines the adapted feature encoder with
//! the source-finetuned contextual encoder.

// `!(x > 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod digest;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod surgery;
pub mod synthdata;
pub mod training;

pub use error::{Result, SoaError};
