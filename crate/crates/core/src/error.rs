use crate::autodiff::TensorError;
use crate::bpe::BpeError;
use crate::config::ini::IniError;
use crate::dataset::DatasetError;
use crate::eval::EvalError;
use crate::model::ModelError;
use crate::objectives::ObjectiveError;
use crate::trainer::TrainError;

/// Any failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Config(#[from] IniError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
