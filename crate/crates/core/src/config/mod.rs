//! Configuration files.

pub mod ini;
mod run;

pub use run::{PeftSettings, RunConfig, TrainSettings};
