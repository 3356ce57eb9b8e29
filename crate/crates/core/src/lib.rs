//! Multilingual CTC speech recognition with language conditioning.
//!
//! The crate bundles a small reverse-mode autodiff engine, a byte-level BPE
//! tokenizer, a synthetic multilingual corpus generator, a Transformer-CTC
//! acoustic model with seven language-conditioning mechanisms, the CTC and
//! frame-level language-identification objectives, and an Adam/Noam trainer
//! with parameter freezing for parameter-efficient fine-tuning.

pub mod autodiff;
pub mod bpe;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod trainer;

mod error;

pub use error::{Error, Result};
