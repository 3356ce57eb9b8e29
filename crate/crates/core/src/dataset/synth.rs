use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetError, Utterance};

pub const MIN_WORDS: usize = 3;
pub const MAX_WORDS: usize = 12;

/// A synthetic language: surface words, one acoustic prototype per word,
/// and how each word is rendered into frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LangSpec {
    pub id: usize,
    pub name: String,
    pub words: Vec<String>,
    /// `prototypes[i]` is the mean frame of `words[i]`.
    pub prototypes: Vec<Vec<f64>>,
    /// Inclusive range of frames emitted per word.
    pub frames_per_word: (usize, usize),
    /// Standard deviation of per-dimension Gaussian frame noise.
    pub noise: f64,
}

impl LangSpec {
    fn validate(&self, feat_dim: usize) -> Result<(), DatasetError> {
        let bad = |msg: String| DatasetError::InvalidSpec { lang: self.id, msg };
        if self.words.is_empty() {
            return Err(DatasetError::EmptyAlphabet { lang: self.id });
        }
        if self.prototypes.len() != self.words.len() {
            return Err(bad(format!(
                "{} prototypes for {} words",
                self.prototypes.len(),
                self.words.len()
            )));
        }
        if self.prototypes.iter().any(|p| p.len() != feat_dim) {
            return Err(bad(format!("prototype width differs from {feat_dim}")));
        }
        if self.words.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(bad("words must be non-empty and whitespace-free".into()));
        }
        let (lo, hi) = self.frames_per_word;
        if lo == 0 || lo > hi {
            return Err(bad(format!("bad frames-per-word range {lo}..={hi}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(bad(format!("bad noise scale {}", self.noise)));
        }
        Ok(())
    }
}

/// Generates `counts[i]` utterances for `specs[i]`.
///
/// Utterance `n` (global index across languages) draws from its own ChaCha
/// stream `(seed, n)`, so output is a pure function of the inputs.
pub fn generate_corpus(
    specs: &[LangSpec],
    counts: &[usize],
    seed: u64,
) -> Result<Vec<Utterance>, DatasetError> {
    if specs.len() < 2 {
        return Err(DatasetError::TooFewLanguages(specs.len()));
    }
    if counts.len() != specs.len() {
        return Err(DatasetError::Mismatch(format!(
            "{} counts for {} language specs",
            counts.len(),
            specs.len()
        )));
    }
    let feat_dim = specs[0].prototypes.first().map_or(0, Vec::len);
    for (spec, &count) in specs.iter().zip(counts) {
        spec.validate(feat_dim)?;
        if count == 0 {
            return Err(DatasetError::ZeroCount { lang: spec.id });
        }
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    let mut index = 0u64;
    for (spec, &count) in specs.iter().zip(counts) {
        let noise = Normal::new(0.0, spec.noise).expect("validated noise scale");
        for local in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index);
            index += 1;
            let n_words = rng.gen_range(MIN_WORDS..=MAX_WORDS);
            let mut words = Vec::with_capacity(n_words);
            let mut features = Vec::new();
            let mut num_frames = 0;
            let mut prev = None;
            for _ in 0..n_words {
                // adjacent repeats would merge into one indistinguishable frame run
                let mut w = rng.gen_range(0..spec.words.len());
                while spec.words.len() > 1 && Some(w) == prev {
                    w = rng.gen_range(0..spec.words.len());
                }
                prev = Some(w);
                words.push(spec.words[w].as_str());
                let frames = rng.gen_range(spec.frames_per_word.0..=spec.frames_per_word.1);
                for _ in 0..frames {
                    for &m in &spec.prototypes[w] {
                        let v = if spec.noise > 0.0 {
                            m + noise.sample(&mut rng)
                        } else {
                            m
                        };
                        features.push(v as f32);
                    }
                }
                num_frames += frames;
            }
            out.push(Utterance {
                id: format!("{}-{local:06}", spec.name),
                lang: spec.id,
                num_frames,
                feat_dim,
                features,
                transcript: words.join(" "),
            });
        }
    }
    Ok(out)
}
