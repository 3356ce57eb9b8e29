//! Synthetic multilingual corpora, their on-disk format, and batching.

mod batch;
mod io;
mod spec;
mod synth;

pub use batch::{make_batches, Batch};
pub use io::{read_dataset, read_transcripts, write_dataset, FEAT_MAGIC};
pub use spec::{CorpusSpec, LangDef, SEVEN_LANG_SPEC, THREE_LANG_SPEC};
pub use synth::{generate_corpus, LangSpec, MAX_WORDS, MIN_WORDS};

use crate::config::ini::IniError;

/// Default feature width, matching 80-dim log-Mel filterbanks.
pub const DEFAULT_FEAT_DIM: usize = 80;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("corpus generation needs at least two language specs, got {0}")]
    TooFewLanguages(usize),
    #[error("language {lang} has an empty alphabet")]
    EmptyAlphabet { lang: usize },
    #[error("language {lang}: {msg}")]
    InvalidSpec { lang: usize, msg: String },
    #[error("utterance count for language {lang} must be >= 1")]
    ZeroCount { lang: usize },
    #[error("{path}: malformed header: {msg}")]
    Header { path: String, msg: String },
    #[error("{path}: truncated payload in utterance `{utt}`")]
    Truncated { path: String, utt: String },
    #[error("{path}:{line}: {msg}")]
    Tsv {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("transcript/feature mismatch: {0}")]
    Mismatch(String),
    #[error("utterance `{utt}` is invalid: {msg}")]
    InvalidUtterance { utt: String, msg: String },
    #[error("utterance `{utt}` has {frames} frames, above the batch budget of {budget}")]
    UtteranceTooLong {
        utt: String,
        frames: usize,
        budget: usize,
    },
    #[error(transparent)]
    Spec(#[from] IniError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One utterance: a `T×F` feature matrix (binary32, row-major), its
/// transcript, and its language.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub lang: usize,
    pub num_frames: usize,
    pub feat_dim: usize,
    pub features: Vec<f32>,
    pub transcript: String,
}

impl Utterance {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.feat_dim..(t + 1) * self.feat_dim]
    }

    pub fn validate(&self, num_langs: Option<usize>) -> Result<(), DatasetError> {
        let bad = |msg: String| DatasetError::InvalidUtterance {
            utt: self.id.clone(),
            msg,
        };
        if self.num_frames == 0 {
            return Err(bad("no frames".into()));
        }
        if self.features.len() != self.num_frames * self.feat_dim {
            return Err(bad(format!(
                "{} values for {}x{} features",
                self.features.len(),
                self.num_frames,
                self.feat_dim
            )));
        }
        if let Some(k) = num_langs {
            if self.lang >= k {
                return Err(bad(format!("language {} outside 0..{k}", self.lang)));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature".into()));
        }
        if self.transcript.trim().is_empty() {
            return Err(bad("empty transcript".into()));
        }
        if self.transcript.contains(['\t', '\n', '\r']) || self.id.contains(['\t', '\n', '\r']) {
            return Err(bad("id or transcript contains tab/newline".into()));
        }
        Ok(())
    }
}
