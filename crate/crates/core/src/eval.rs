//! Greedy-decoding evaluation and per-language WER reports.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::autodiff::Graph;
use crate::bpe::{TokenId, Vocabulary};
use crate::dataset::{Batch, Utterance};
use crate::model::{AcousticModel, ForwardOptions, ModelError, ParamStore};
use crate::objectives::{greedy_decode, macro_average, word_error_rate, ObjectiveError, WerStats};

/// Frame budget of one decoding batch.
pub const EVAL_BATCH_FRAMES: usize = 4000;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "LINGUA_CTC_THREADS";

/// Which language id the model receives at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LangSupply {
    /// Language-agnostic: no id is passed.
    Agnostic,
    /// Each utterance gets its own reference language.
    Reference,
    /// Every utterance gets this id.
    Fixed(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("no utterances to evaluate")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Corpus-level statistics per language id, ascending.
    pub per_lang: Vec<(usize, WerStats)>,
    /// Unweighted mean of the per-language WERs.
    pub macro_wer: f64,
    pub hypotheses: Vec<String>,
}

pub const CSV_HEADER: &str = "lang,wer,subs,dels,ins,num_ref_words";

impl EvalReport {
    /// One row per language, then an `avg` row holding the macro WER and
    /// summed counts. Languages are labelled by `names[id]`, or by the id
    /// when no name is given.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        let mut total = WerStats::default();
        for (lang, st) in &self.per_lang {
            total += *st;
            let label = names.get(*lang).cloned().unwrap_or_else(|| lang.to_string());
            out.push_str(&csv_row(&label, st.wer(), st));
        }
        out.push_str(&csv_row("avg", self.macro_wer, &total));
        out
    }
}

fn csv_row(lang: &str, wer: f64, st: &WerStats) -> String {
    format!(
        "{lang},{wer:.2},{},{},{},{}\n",
        st.substitutions, st.deletions, st.insertions, st.ref_words
    )
}

/// `(lang, wer)` pairs of a report written by [`EvalReport::to_csv`],
/// including the trailing `avg` row.
pub fn parse_csv(text: &str) -> Result<Vec<(String, f64)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(format!("expected header `{CSV_HEADER}`"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            let wer = fields
                .get(1)
                .filter(|_| fields.len() == 6)
                .and_then(|w| w.parse::<f64>().ok())
                .ok_or_else(|| format!("line {}: malformed row `{l}`", i + 2))?;
            Ok((fields[0].to_string(), wer))
        })
        .collect()
}

/// Thread count from `LINGUA_CTC_THREADS`, defaulting to the available
/// parallelism.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Token ids to text; byte sequences that are not valid UTF-8 are replaced
/// rather than rejected, since a hypothesis may split a character.
pub fn hypothesis_text(vocab: &Vocabulary, ids: &[usize]) -> String {
    let mut bytes = Vec::new();
    for &id in ids {
        if let Some(b) = vocab.token_bytes(id as TokenId) {
            bytes.extend_from_slice(b);
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Decodes one batch and returns the hypothesis texts in batch order.
pub fn decode_batch(
    model: &AcousticModel,
    params: &ParamStore,
    batch: &Batch,
    vocab: &Vocabulary,
    supply: LangSupply,
) -> Result<Vec<String>, EvalError> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let x = g.constant(batch.features.clone());
    let fixed;
    let langs = match supply {
        LangSupply::Agnostic => None,
        LangSupply::Reference => Some(&batch.langs[..]),
        LangSupply::Fixed(l) => {
            fixed = vec![l; batch.size()];
            Some(&fixed[..])
        }
    };
    let out = model.forward(&mut g, &p, x, &batch.frame_lengths, langs, ForwardOptions::default())?;
    let lp = g.value(out.log_probs);
    let (t_max, classes) = (lp.shape()[1], lp.shape()[2]);
    let blank = model.config().blank();
    Ok(out
        .lengths
        .iter()
        .enumerate()
        .map(|(b, &n)| {
            let rows = &lp.data()[b * t_max * classes..(b * t_max + n) * classes];
            hypothesis_text(vocab, &greedy_decode(rows, classes, blank))
        })
        .collect())
}

/// Length-sorted batches of utterance indices under the frame budget.
fn eval_chunks(utts: &[Utterance]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| (utts[i].num_frames, i));
    let mut chunks = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let t = utts[i].num_frames;
        if !current.is_empty() && (current.len() + 1) * t > EVAL_BATCH_FRAMES {
            chunks.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Greedy-decodes every utterance and scores it against its transcript.
/// Batches are fixed in advance, so results do not depend on `threads`.
pub fn evaluate(
    model: &AcousticModel,
    params: &ParamStore,
    utts: &[Utterance],
    vocab: &Vocabulary,
    supply: LangSupply,
    threads: usize,
) -> Result<EvalReport, EvalError> {
    if utts.is_empty() {
        return Err(EvalError::Empty);
    }
    let chunks = eval_chunks(utts);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<String>>> = Mutex::new(vec![None; utts.len()]);
    let failure: Mutex<Option<EvalError>> = Mutex::new(None);
    let work = || loop {
        let c = next.fetch_add(1, Ordering::Relaxed);
        if c >= chunks.len() || failure.lock().unwrap().is_some() {
            return;
        }
        let members: Vec<&Utterance> = chunks[c].iter().map(|&i| &utts[i]).collect();
        let batch = Batch::from_utterances(&members, vocab);
        match decode_batch(model, params, &batch, vocab, supply) {
            Ok(hyps) => {
                let mut r = results.lock().unwrap();
                for (&i, h) in chunks[c].iter().zip(hyps) {
                    r[i] = Some(h);
                }
            }
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                return;
            }
        }
    };
    let threads = threads.clamp(1, chunks.len());
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let hypotheses: Vec<String> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|h| h.expect("every chunk decoded"))
        .collect();
    let mut per_lang: BTreeMap<usize, WerStats> = BTreeMap::new();
    for (u, h) in utts.iter().zip(&hypotheses) {
        *per_lang.entry(u.lang).or_default() += word_error_rate(&u.transcript, h)?;
    }
    let per_lang: Vec<(usize, WerStats)> = per_lang.into_iter().collect();
    let wers: Vec<f64> = per_lang.iter().map(|(_, s)| s.wer()).collect();
    Ok(EvalReport {
        macro_wer: macro_average(&wers)?,
        per_lang,
        hypotheses,
    })
}
