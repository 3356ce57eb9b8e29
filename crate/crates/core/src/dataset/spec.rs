//! Corpus description files.
//!
//! A `[corpus]` section fixes the feature width and a shared inventory of
//! random "sound" vectors; each `[lang.<name>]` section lists its words, the
//! sound each word is pronounced with, and a per-language accent offset
//! added to every prototype.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{generate_corpus, DatasetError, LangSpec, Utterance, DEFAULT_FEAT_DIM};

const DEV_SEED_MASK: u64 = 0x9e37_79b9_7f4a_7c15;
use crate::config::ini::Ini;

pub const THREE_LANG_SPEC: &str = include_str!("../../specs/three_lang.cfg");
pub const SEVEN_LANG_SPEC: &str = include_str!("../../specs/seven_lang.cfg");

#[derive(Clone, Debug, PartialEq)]
pub struct LangDef {
    pub name: String,
    pub id: usize,
    pub words: Vec<String>,
    pub sounds: Vec<usize>,
    pub accent: f64,
    pub noise: f64,
    pub frames: (usize, usize),
    pub train: usize,
    pub dev: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub feat_dim: usize,
    pub num_sounds: usize,
    pub sound_scale: f64,
    pub prototype_seed: u64,
    /// Sorted by language id.
    pub langs: Vec<LangDef>,
}

impl CorpusSpec {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let ini = Ini::parse(text)?;
        let corpus = ini.section_or_empty("corpus");
        corpus.only(&["feat_dim", "sounds", "sound_scale", "prototype_seed"])?;
        let feat_dim = corpus.get_or("feat_dim", DEFAULT_FEAT_DIM)?;
        let num_sounds: usize = corpus.require("sounds")?;
        let sound_scale = corpus.get_or("sound_scale", 1.0)?;
        let prototype_seed = corpus.get_or("prototype_seed", 0u64)?;
        if feat_dim == 0 || num_sounds == 0 {
            return Err(corpus.invalid("sounds", "feat_dim and sounds must be positive").into());
        }

        let mut langs = Vec::new();
        for sec in &ini.sections {
            let Some(name) = sec.name.strip_prefix("lang.") else {
                if sec.name != "corpus" {
                    return Err(DatasetError::Mismatch(format!("unknown section [{}]", sec.name)));
                }
                continue;
            };
            sec.only(&["id", "words", "sounds", "accent", "noise", "frames", "train", "dev"])?;
            let words: Vec<String> = sec.list("words")?.unwrap_or_default();
            let sounds: Vec<usize> = sec.list("sounds")?.unwrap_or_default();
            let id: usize = sec.require("id")?;
            if words.is_empty() {
                return Err(DatasetError::EmptyAlphabet { lang: id });
            }
            if sounds.len() != words.len() {
                return Err(sec.invalid("sounds", "need exactly one sound per word").into());
            }
            if let Some(&s) = sounds.iter().find(|&&s| s >= num_sounds) {
                return Err(sec.invalid("sounds", format!("sound {s} outside inventory of {num_sounds}")).into());
            }
            let frames: Vec<usize> = sec.list("frames")?.unwrap_or_default();
            let frames = match frames[..] {
                [lo, hi] if lo >= 1 && lo <= hi => (lo, hi),
                _ => return Err(sec.invalid("frames", "expected `<min> <max>` with 1 <= min <= max").into()),
            };
            langs.push(LangDef {
                name: name.to_string(),
                id,
                words,
                sounds,
                accent: sec.get_or("accent", 0.0)?,
                noise: sec.require("noise")?,
                frames,
                train: sec.require("train")?,
                dev: sec.get_or("dev", 0)?,
            });
        }
        langs.sort_by_key(|l| l.id);
        for (i, l) in langs.iter().enumerate() {
            if l.id != i {
                return Err(DatasetError::InvalidSpec {
                    lang: l.id,
                    msg: format!("language ids must be dense 0..{}", langs.len()),
                });
            }
        }
        if langs.len() < 2 {
            return Err(DatasetError::TooFewLanguages(langs.len()));
        }
        Ok(Self {
            feat_dim,
            num_sounds,
            sound_scale,
            prototype_seed,
            langs,
        })
    }

    pub fn num_langs(&self) -> usize {
        self.langs.len()
    }

    pub fn lang_names(&self) -> Vec<String> {
        self.langs.iter().map(|l| l.name.clone()).collect()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.langs.iter().map(|l| l.train).collect()
    }

    pub fn dev_counts(&self) -> Vec<usize> {
        self.langs.iter().map(|l| l.dev).collect()
    }

    /// Train and dev sets. The dev set draws from a seed derived from
    /// `seed`, so the two never share utterance streams.
    pub fn generate_splits(&self, seed: u64) -> Result<(Vec<Utterance>, Vec<Utterance>), DatasetError> {
        let specs = self.lang_specs()?;
        let train = generate_corpus(&specs, &self.train_counts(), seed)?;
        let dev = generate_corpus(&specs, &self.dev_counts(), seed ^ DEV_SEED_MASK)?;
        Ok((train, dev))
    }

    /// Resolves the sound inventory and accents into per-word prototypes.
    pub fn lang_specs(&self) -> Result<Vec<LangSpec>, DatasetError> {
        let gaussian = |stream: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
            rng.set_stream(stream);
            (0..self.feat_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        };
        let sounds: Vec<Vec<f64>> = (0..self.num_sounds as u64)
            .map(|s| gaussian(s).into_iter().map(|v| v * self.sound_scale).collect())
            .collect();
        self.langs
            .iter()
            .map(|l| {
                let dir = gaussian(1_000_000 + l.id as u64);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let accent: Vec<f64> = dir.iter().map(|v| v / norm * l.accent).collect();
                let prototypes = l
                    .sounds
                    .iter()
                    .map(|&s| sounds[s].iter().zip(&accent).map(|(a, b)| a + b).collect())
                    .collect();
                Ok(LangSpec {
                    id: l.id,
                    name: l.name.clone(),
                    words: l.words.clone(),
                    prototypes,
                    frames_per_word: l.frames,
                    noise: l.noise,
                })
            })
            .collect()
    }
}
