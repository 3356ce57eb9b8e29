//! Training objectives, decoding and scoring.

pub mod ctc;
mod decode;
mod lid;
mod loss;
mod wer;

pub use ctc::ctc_loss;
pub use decode::greedy_decode;
pub use lid::{expand_lid_labels, frame_ce_loss, LidLoss};
pub use loss::{combined_loss, LossBundle};
pub use wer::{macro_average, word_error_rate, WerStats};

use crate::autodiff::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("infeasible alignment: {frames} frames cannot emit {labels} labels (needs {needed})")]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        needed: usize,
    },
    #[error("label {label} invalid for {classes} classes with blank {blank}")]
    InvalidLabel {
        label: usize,
        classes: usize,
        blank: usize,
    },
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    EmptyTarget(&'static str),
    #[error("word error rate is undefined for an empty reference")]
    EmptyReference,
    #[error("loss weight alpha must be a finite value >= 0, got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
