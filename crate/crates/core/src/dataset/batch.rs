use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, Utterance};
use crate::autodiff::Tensor;
use crate::bpe::{TokenId, Vocabulary};

/// Padded mini-batch. `mask[b * max_frames + t]` is true exactly on real
/// frames.
#[derive(Clone, Debug)]
pub struct Batch {
    pub utt_ids: Vec<String>,
    /// `[B, T_max, F]`, zero on padded frames.
    pub features: Tensor,
    pub frame_lengths: Vec<usize>,
    pub labels: Vec<Vec<TokenId>>,
    pub label_lengths: Vec<usize>,
    pub langs: Vec<usize>,
    pub mask: Vec<bool>,
    pub transcripts: Vec<String>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.frame_lengths.len()
    }

    pub fn max_frames(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn from_utterances(utts: &[&Utterance], vocab: &Vocabulary) -> Batch {
        assert!(!utts.is_empty(), "batch needs at least one utterance");
        let t_max = utts.iter().map(|u| u.num_frames).max().unwrap();
        let f = utts[0].feat_dim;
        let b = utts.len();
        let mut data = vec![0.0; b * t_max * f];
        let mut mask = vec![false; b * t_max];
        for (i, u) in utts.iter().enumerate() {
            assert_eq!(u.feat_dim, f, "mixed feature widths in one batch");
            for (dst, src) in data[i * t_max * f..].iter_mut().zip(&u.features) {
                *dst = f64::from(*src);
            }
            mask[i * t_max..i * t_max + u.num_frames].fill(true);
        }
        let labels: Vec<Vec<TokenId>> = utts.iter().map(|u| vocab.encode(&u.transcript)).collect();
        Batch {
            utt_ids: utts.iter().map(|u| u.id.clone()).collect(),
            features: Tensor::new(vec![b, t_max, f], data).expect("consistent batch shape"),
            frame_lengths: utts.iter().map(|u| u.num_frames).collect(),
            label_lengths: labels.iter().map(Vec::len).collect(),
            labels,
            langs: utts.iter().map(|u| u.lang).collect(),
            mask,
            transcripts: utts.iter().map(|u| u.transcript.clone()).collect(),
        }
    }
}

/// Shuffles by `seed`, then packs greedily so every batch satisfies
/// `B × T_max ≤ max_frames_per_batch`.
pub fn make_batches(
    utts: &[Utterance],
    max_frames_per_batch: usize,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<Batch>, DatasetError> {
    if let Some(u) = utts.iter().find(|u| u.num_frames > max_frames_per_batch) {
        return Err(DatasetError::UtteranceTooLong {
            utt: u.id.clone(),
            frames: u.num_frames,
            budget: max_frames_per_batch,
        });
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut current: Vec<&Utterance> = Vec::new();
    let mut t_max = 0;
    for i in order {
        let u = &utts[i];
        let grown = t_max.max(u.num_frames);
        if !current.is_empty() && (current.len() + 1) * grown > max_frames_per_batch {
            batches.push(Batch::from_utterances(&current, vocab));
            current.clear();
            t_max = 0;
        }
        t_max = t_max.max(u.num_frames);
        current.push(u);
    }
    if !current.is_empty() {
        batches.push(Batch::from_utterances(&current, vocab));
    }
    Ok(batches)
}
