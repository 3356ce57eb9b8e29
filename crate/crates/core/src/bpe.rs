//! Byte-level BPE shared across languages.
//!
//! Ids `0..256` are the raw bytes; each merge appends one id. Pair counting
//! works on whitespace-split words, so no merged token ever contains
//! whitespace.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

#[derive(Debug, thiserror::Error)]
pub enum BpeError {
    #[error("target vocabulary size {0} is below the 256 byte tokens")]
    TargetTooSmall(usize),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("decoded bytes are not valid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("vocabulary file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type TokenId = u32;

const BYTE_TOKENS: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(TokenId, TokenId)>,
    tokens: Vec<Vec<u8>>,
    ranks: HashMap<(TokenId, TokenId), usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::bytes_only()
    }
}

impl Vocabulary {
    /// The 256 single-byte tokens and no merges.
    pub fn bytes_only() -> Self {
        Self {
            merges: Vec::new(),
            tokens: (0..=255u8).map(|b| vec![b]).collect(),
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, pair: (TokenId, TokenId)) {
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        self.ranks.insert(pair, self.merges.len());
        self.merges.push(pair);
        self.tokens.push(bytes);
    }

    pub fn from_merges(merges: &[(TokenId, TokenId)]) -> Result<Self, BpeError> {
        let mut v = Self::bytes_only();
        for (i, &(l, r)) in merges.iter().enumerate() {
            let size = v.size();
            for id in [l, r] {
                if id as usize >= size {
                    return Err(BpeError::Parse {
                        line: i + 2,
                        msg: format!("merge refers to unknown token {id}"),
                    });
                }
            }
            v.push_merge((l, r));
        }
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
        // Merging the lowest-ranked present pair first is equivalent to
        // replaying the merge list in training order.
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank];
            let new_id = (BYTE_TOKENS + rank) as TokenId;
            ids = merge_pair(&ids, pair, new_id);
        }
        ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, BpeError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_bytes(id).ok_or(BpeError::IdOutOfRange {
                id,
                size: self.size(),
            })?;
            bytes.extend_from_slice(tok);
        }
        String::from_utf8(bytes).map_err(|e| BpeError::InvalidUtf8 {
            offset: e.utf8_error().valid_up_to(),
        })
    }

    /// `bpe-v1 <size>` followed by one `<left> <right>` line per merge.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("bpe-v1 {}\n", self.size());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self, BpeError> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(BpeError::Parse {
            line: 1,
            msg: "missing header".into(),
        })??;
        let size: usize = header
            .strip_prefix("bpe-v1 ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| BpeError::Parse {
                line: 1,
                msg: format!("expected `bpe-v1 <size>`, got `{header}`"),
            })?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace().map(str::parse::<TokenId>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(l)), Some(Ok(r)), None) => merges.push((l, r)),
                _ => {
                    return Err(BpeError::Parse {
                        line: i + 2,
                        msg: format!("expected `<left-id> <right-id>`, got `{line}`"),
                    })
                }
            }
        }
        let vocab = Self::from_merges(&merges)?;
        if vocab.size() != size {
            return Err(BpeError::Parse {
                line: 1,
                msg: format!("header declares {size} tokens but merges give {}", vocab.size()),
            });
        }
        Ok(vocab)
    }
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
fn merge_pair(ids: &[TokenId], pair: (TokenId, TokenId), new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Adds non-overlapping left-to-right pair counts of one word, weighted by
/// the word's corpus frequency.
fn count_pairs(word: &[TokenId], freq: usize, counts: &mut BTreeMap<(TokenId, TokenId), usize>) {
    let mut prev: Option<((TokenId, TokenId), bool)> = None;
    for w in word.windows(2) {
        let pair = (w[0], w[1]);
        let counted = match prev {
            Some((p, true)) if p == pair => false,
            _ => true,
        };
        if counted {
            *counts.entry(pair).or_default() += freq;
        }
        prev = Some((pair, counted));
    }
}

/// Greedy BPE training: merge the most frequent pair until `target_size`
/// tokens exist or no pair occurs at least twice. Ties go to the smallest
/// `(left, right)` pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocabulary, BpeError> {
    if target_size < BYTE_TOKENS {
        return Err(BpeError::TargetTooSmall(target_size));
    }
    if corpus.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let mut word_freq: BTreeMap<Vec<TokenId>, usize> = BTreeMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            *word_freq
                .entry(w.bytes().map(TokenId::from).collect())
                .or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<TokenId>, usize)> = word_freq.into_iter().collect();
    let mut vocab = Vocabulary::bytes_only();
    while vocab.size() < target_size {
        let mut counts = BTreeMap::new();
        for (w, f) in &words {
            count_pairs(w, *f, &mut counts);
        }
        // BTreeMap iterates in ascending pair order, so the first maximum
        // found is the tie-break winner.
        let mut best: Option<((TokenId, TokenId), usize)> = None;
        for (&pair, &c) in &counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        match best {
            Some((pair, c)) if c >= 2 => {
                let new_id = vocab.size() as TokenId;
                vocab.push_merge(pair);
                for (w, _) in words.iter_mut() {
                    *w = merge_pair(w, pair, new_id);
                }
            }
            _ => break,
        }
    }
    Ok(vocab)
}
