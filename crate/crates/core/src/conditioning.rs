//! Ways of injecting a language id into the acoustic encoder, plus the
//! residual adapter used for parameter-efficient fine-tuning.
//!
//! Every operation works on padded batches: `[B, T, d]` activations with one
//! language id per utterance.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, TensorError, Var};
use crate::objectives::LidLoss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptPosition {
    Prefix,
    Suffix,
    Both,
}

impl PromptPosition {
    /// Number of prompt blocks inserted into the sequence.
    pub fn copies(self) -> usize {
        match self {
            PromptPosition::Both => 2,
            _ => 1,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            PromptPosition::Prefix => "prefix",
            PromptPosition::Suffix => "suffix",
            PromptPosition::Both => "both",
        }
    }
}

/// Trainable component added on top of a frozen FL-Adapter base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tuner {
    Prompt(PromptPosition),
    Prefix,
}

impl fmt::Display for Tuner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tuner::Prompt(p) => write!(f, "prompt-{}", p.as_str()),
            Tuner::Prefix => f.write_str("prefix-tuning"),
        }
    }
}

impl FromStr for Tuner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prompt-prefix" => Ok(Tuner::Prompt(PromptPosition::Prefix)),
            "prompt-suffix" => Ok(Tuner::Prompt(PromptPosition::Suffix)),
            "prompt-both" => Ok(Tuner::Prompt(PromptPosition::Both)),
            "prefix-tuning" => Ok(Tuner::Prefix),
            _ => Err(format!(
                "unknown tuner `{s}` (expected prompt-prefix, prompt-suffix, prompt-both or prefix-tuning)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditioningMode {
    None,
    Add,
    Attention,
    ConcatOneHot,
    ConcatEmbedding,
    Prompt(PromptPosition),
    PrefixTuning,
    FlAdapter(LidLoss),
    /// Frozen FL-Adapter base trained with `lid`, plus a trainable tuner.
    Peft { lid: LidLoss, tuner: Tuner },
}

impl ConditioningMode {
    /// Whether a language id must be supplied at train and test time.
    pub fn requires_language(self) -> bool {
        !matches!(self, ConditioningMode::None | ConditioningMode::FlAdapter(_))
    }

    pub fn uses_fl_adapter(self) -> bool {
        matches!(self, ConditioningMode::FlAdapter(_) | ConditioningMode::Peft { .. })
    }

    pub fn lid_loss(self) -> Option<LidLoss> {
        match self {
            ConditioningMode::FlAdapter(l) | ConditioningMode::Peft { lid: l, .. } => Some(l),
            _ => None,
        }
    }

    pub fn prompt_position(self) -> Option<PromptPosition> {
        match self {
            ConditioningMode::Prompt(p)
            | ConditioningMode::Peft {
                tuner: Tuner::Prompt(p),
                ..
            } => Some(p),
            _ => None,
        }
    }

    pub fn uses_prefix(self) -> bool {
        matches!(
            self,
            ConditioningMode::PrefixTuning
                | ConditioningMode::Peft {
                    tuner: Tuner::Prefix,
                    ..
                }
        )
    }

    pub fn uses_prompts(self) -> bool {
        self.prompt_position().is_some() || self.uses_prefix()
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditioningMode::None => f.write_str("none"),
            ConditioningMode::Add => f.write_str("add"),
            ConditioningMode::Attention => f.write_str("attention"),
            ConditioningMode::ConcatOneHot => f.write_str("concat-onehot"),
            ConditioningMode::ConcatEmbedding => f.write_str("concat-emb"),
            ConditioningMode::Prompt(p) => write!(f, "prompt-{}", p.as_str()),
            ConditioningMode::PrefixTuning => f.write_str("prefix-tuning"),
            ConditioningMode::FlAdapter(l) => write!(f, "fl-adapter-{}", l.as_str()),
            ConditioningMode::Peft { lid, tuner } => write!(f, "peft-{}-{tuner}", lid.as_str()),
        }
    }
}

fn parse_lid(s: &str) -> Option<LidLoss> {
    match s {
        "ce" => Some(LidLoss::CrossEntropy),
        "ctc" => Some(LidLoss::Ctc),
        _ => None,
    }
}

impl FromStr for ConditioningMode {
    type Err = String;

    /// Accepts the strings produced by `Display`; `baseline` is an alias for
    /// `none`.
    fn from_str(s: &str) -> Result<Self, String> {
        let mode = match s {
            "none" | "baseline" => ConditioningMode::None,
            "add" => ConditioningMode::Add,
            "attention" => ConditioningMode::Attention,
            "concat-onehot" => ConditioningMode::ConcatOneHot,
            "concat-emb" => ConditioningMode::ConcatEmbedding,
            "prefix-tuning" => ConditioningMode::PrefixTuning,
            _ => {
                if let Some(rest) = s.strip_prefix("fl-adapter-") {
                    parse_lid(rest)
                        .map(ConditioningMode::FlAdapter)
                        .ok_or_else(|| format!("unknown LID loss in `{s}` (expected ce or ctc)"))?
                } else if let Some(rest) = s.strip_prefix("peft-") {
                    let (lid, tuner) = rest
                        .split_once('-')
                        .and_then(|(l, t)| Some((parse_lid(l)?, t.parse::<Tuner>().ok()?)))
                        .ok_or_else(|| {
                            format!("malformed peft mode `{s}` (expected peft-<ce|ctc>-<tuner>)")
                        })?;
                    ConditioningMode::Peft { lid, tuner }
                } else if let Ok(Tuner::Prompt(p)) = s.parse::<Tuner>() {
                    ConditioningMode::Prompt(p)
                } else {
                    return Err(format!("unknown conditioning mode `{s}`"));
                }
            }
        };
        Ok(mode)
    }
}

/// Broadcasts `rows` (`[B, w]`) over `t` positions to `[B, t, w]`.
pub fn broadcast_rows(g: &mut Graph, rows: Var, t: usize) -> Result<Var, TensorError> {
    let s = g.shape(rows).to_vec();
    if s.len() != 2 {
        return Err(TensorError::InvalidShape(s));
    }
    let (b, w) = (s[0], s[1]);
    let mut index = Vec::with_capacity(b * t * w);
    for bi in 0..b {
        for _ in 0..t {
            index.extend((0..w).map(|j| Some(bi * w + j)));
        }
    }
    g.gather(rows, &index, &[b, t, w])
}

/// `x @ w + b` over the last axis.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn batch_dims(g: &Graph, x: Var, langs: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != langs.len() {
        return Err(TensorError::InvalidShape(s.to_vec()));
    }
    Ok((s[0], s[1], s[2]))
}

/// Adds `emb[lang]` to every frame of each utterance.
pub fn condition_add(g: &mut Graph, frames: Var, langs: &[usize], emb: Var) -> Result<Var, TensorError> {
    let (_, t, _) = batch_dims(g, frames, langs)?;
    let rows = g.embedding(emb, langs)?;
    let e = broadcast_rows(g, rows, t)?;
    g.add(frames, e)
}

/// Score-weighted mix of each frame with the language embedding:
/// `s = v·tanh(W x)`, weights are the softmax of the frame and language
/// scores.
pub fn condition_attention(
    g: &mut Graph,
    frames: Var,
    langs: &[usize],
    emb: Var,
    w: Var,
    v: Var,
) -> Result<Var, TensorError> {
    let (b, t, d) = batch_dims(g, frames, langs)?;
    let score = |g: &mut Graph, x: Var| -> Result<Var, TensorError> {
        let h = g.matmul(x, w)?;
        let h = g.tanh(h);
        g.matmul(h, v)
    };
    let rows = g.embedding(emb, langs)?;
    let s_frame = score(g, frames)?;
    let s_lang = score(g, rows)?;
    let s_lang = broadcast_rows(g, s_lang, t)?;
    let scores = g.concat(&[s_frame, s_lang], 2)?;
    let weights = g.softmax(scores)?;
    let spread = |g: &mut Graph, col: usize| {
        let index: Vec<Option<usize>> = (0..b * t)
            .flat_map(|bt| std::iter::repeat_n(Some(bt * 2 + col), d))
            .collect();
        g.gather(weights, &index, &[b, t, d])
    };
    let w_frame = spread(g, 0)?;
    let w_lang = spread(g, 1)?;
    let e = broadcast_rows(g, rows, t)?;
    let a = g.mul(w_frame, frames)?;
    let c = g.mul(w_lang, e)?;
    g.add(a, c)
}

/// The per-frame language code appended by the concatenation method.
pub enum LanguageCode {
    OneHot { num_langs: usize },
    Embedding(Var),
}

/// Appends the language code to every input frame: `[B, T, F]` becomes
/// `[B, T, F + K]` or `[B, T, F + e]`.
pub fn condition_concat(
    g: &mut Graph,
    features: Var,
    langs: &[usize],
    code: &LanguageCode,
) -> Result<Var, TensorError> {
    let (b, t, _) = batch_dims(g, features, langs)?;
    let rows = match *code {
        LanguageCode::OneHot { num_langs } => {
            let mut data = vec![0.0; b * num_langs];
            for (i, &l) in langs.iter().enumerate() {
                if l >= num_langs {
                    return Err(TensorError::IndexOutOfRange {
                        index: l,
                        len: num_langs,
                    });
                }
                data[i * num_langs + l] = 1.0;
            }
            g.constant(crate::autodiff::Tensor::new(vec![b, num_langs], data)?)
        }
        LanguageCode::Embedding(table) => g.embedding(table, langs)?,
    };
    let suffix = broadcast_rows(g, rows, t)?;
    g.concat(&[features, suffix], 2)
}

/// A sequence with prompt tokens spliced in around the acoustic frames.
pub struct PromptedSequence {
    /// `[B, S, d]`.
    pub seq: Var,
    /// `[B, S]`, true on prompt tokens and real acoustic frames.
    pub mask: Vec<bool>,
    /// For each `(b, t)` with `t < T'_max`, the flat sequence row holding
    /// acoustic frame `t`; `None` on padding.
    pub acoustic_rows: Vec<Option<usize>>,
    pub seq_len: usize,
}

impl PromptedSequence {
    /// Selects acoustic positions from a `[B, S, w]` tensor laid out like
    /// `seq`, giving `[B, T'_max, w]` with zeros on padded frames.
    pub fn acoustic(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.seq_len {
            return Err(TensorError::InvalidShape(s));
        }
        let (b, w) = (s[0], s[2]);
        let t = self.acoustic_rows.len() / b;
        let index: Vec<Option<usize>> = self
            .acoustic_rows
            .iter()
            .flat_map(|r| (0..w).map(move |j| r.map(|r| r * w + j)))
            .collect();
        g.gather(x, &index, &[b, t, w])
    }
}

/// Splices `num_prompt` language-specific tokens (rows of `prompt_emb`
/// reshaped to `[num_prompt · copies, d]`) before and/or right after the real
/// frames of each utterance. Padding moves to the end of the sequence.
pub fn condition_prompt(
    g: &mut Graph,
    frames: Var,
    lengths: &[usize],
    langs: &[usize],
    prompt_emb: Var,
    num_prompt: usize,
    position: PromptPosition,
) -> Result<PromptedSequence, TensorError> {
    let (b, t, d) = batch_dims(g, frames, langs)?;
    let np = num_prompt * position.copies();
    let width = g.shape(prompt_emb)[1];
    if width != np * d {
        return Err(TensorError::ShapeMismatch {
            op: "condition_prompt",
            left: g.shape(prompt_emb).to_vec(),
            right: vec![np, d],
        });
    }
    let rows = g.embedding(prompt_emb, langs)?;
    let prompts = g.reshape(rows, &[b, np, d])?;
    // one source tensor [B, np + T, d]: prompts first, then the frames
    let src = g.concat(&[prompts, frames], 1)?;
    let src_len = np + t;
    let s_len = t + np;
    let (head, tail) = match position {
        PromptPosition::Prefix => (num_prompt, 0),
        PromptPosition::Suffix => (0, num_prompt),
        PromptPosition::Both => (num_prompt, num_prompt),
    };
    let mut row_src: Vec<Option<usize>> = vec![None; b * s_len];
    let mut mask = vec![false; b * s_len];
    let mut acoustic_rows = vec![None; b * t];
    for bi in 0..b {
        let n = lengths[bi];
        let mut pos = 0;
        let mut put = |pos: &mut usize, src_row: usize| {
            row_src[bi * s_len + *pos] = Some(bi * src_len + src_row);
            mask[bi * s_len + *pos] = true;
            *pos += 1;
        };
        for p in 0..head {
            put(&mut pos, p);
        }
        for ti in 0..n {
            acoustic_rows[bi * t + ti] = Some(bi * s_len + pos);
            put(&mut pos, np + ti);
        }
        for p in 0..tail {
            put(&mut pos, head + p);
        }
    }
    let index: Vec<Option<usize>> = row_src
        .iter()
        .flat_map(|r| (0..d).map(move |j| r.map(|r| r * d + j)))
        .collect();
    let seq = g.gather(src, &index, &[b, s_len, d])?;
    Ok(PromptedSequence {
        seq,
        mask,
        acoustic_rows,
        seq_len: s_len,
    })
}

/// Per-language key/value prompts for every layer, produced by one
/// embedding and one linear map to `num_layers · 2 · num_prompt · d`.
pub struct PrefixPrompts {
    /// `[B, num_layers · 2 · num_prompt · d]`, laid out
    /// `[layer][key, value][token][d]`.
    out: Var,
    batch: usize,
    num_layers: usize,
    num_prompt: usize,
    d: usize,
}

impl PrefixPrompts {
    pub fn new(
        g: &mut Graph,
        langs: &[usize],
        emb: Var,
        proj_w: Var,
        proj_b: Var,
        num_layers: usize,
        num_prompt: usize,
        d: usize,
    ) -> Result<Self, TensorError> {
        let rows = g.embedding(emb, langs)?;
        let out = linear(g, rows, proj_w, proj_b)?;
        let width = g.shape(out)[1];
        if width != num_layers * 2 * num_prompt * d {
            return Err(TensorError::ShapeMismatch {
                op: "prefix_kv",
                left: g.shape(out).to_vec(),
                right: vec![num_layers, 2, num_prompt, d],
            });
        }
        Ok(Self {
            out,
            batch: langs.len(),
            num_layers,
            num_prompt,
            d,
        })
    }

    /// Key and value prompts for `layer`, each `[B, num_prompt, d]`.
    pub fn layer(&self, g: &mut Graph, layer: usize) -> Result<(Var, Var), TensorError> {
        if layer >= self.num_layers {
            return Err(TensorError::IndexOutOfRange {
                index: layer,
                len: self.num_layers,
            });
        }
        let block = self.num_prompt * self.d;
        let mut kv = [None, None];
        for (which, slot) in kv.iter_mut().enumerate() {
            let start = (layer * 2 + which) * block;
            let part = g.slice(self.out, 1, start, block)?;
            *slot = Some(g.reshape(part, &[self.batch, self.num_prompt, self.d])?);
        }
        Ok((kv[0].unwrap(), kv[1].unwrap()))
    }
}

pub struct AdapterParams {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

/// `z = down(h)` are the per-frame LID logits; returns `(h + up(z), z)`.
pub fn fl_adapter(g: &mut Graph, hidden: Var, p: &AdapterParams) -> Result<(Var, Var), TensorError> {
    let z = linear(g, hidden, p.down_w, p.down_b)?;
    let bias = linear(g, z, p.up_w, p.up_b)?;
    let out = g.add(hidden, bias)?;
    Ok((out, z))
}

/// `x + up(relu(down(x)))`.
pub fn residual_adapter(g: &mut Graph, x: Var, p: &AdapterParams) -> Result<Var, TensorError> {
    let h = linear(g, x, p.down_w, p.down_b)?;
    let h = g.relu(h);
    let h = linear(g, h, p.up_w, p.up_b)?;
    g.add(x, h)
}
