//! Word-level edit distance and error-rate aggregation.

use std::ops::AddAssign;

use super::ObjectiveError;

/// Edit operation counts of one (or an aggregate of) reference/hypothesis
/// pair(s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerStats {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N_ref · 100`.
    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            return f64::NAN;
        }
        self.errors() as f64 / self.ref_words as f64 * 100.0
    }
}

impl AddAssign for WerStats {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

/// Unit-cost Levenshtein alignment over whitespace-split words.
///
/// Among equal-cost alignments the backtrace prefers match/substitution,
/// then deletion, then insertion.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<WerStats, ObjectiveError> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(ObjectiveError::EmptyReference);
    }
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut stats = WerStats {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(r[i - 1] != h[j - 1]);
            if cur == d[(i - 1) * w + j - 1] + diff {
                stats.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == d[(i - 1) * w + j] + 1 {
            stats.deletions += 1;
            i -= 1;
        } else {
            stats.insertions += 1;
            j -= 1;
        }
    }
    Ok(stats)
}

/// Unweighted mean of per-language WERs.
pub fn macro_average(wers: &[f64]) -> Result<f64, ObjectiveError> {
    if wers.is_empty() {
        return Err(ObjectiveError::EmptyTarget("macro average over zero languages"));
    }
    Ok(wers.iter().sum::<f64>() / wers.len() as f64)
}
