//! Transformer-CTC acoustic model: convolutional subsampling, sinusoidal
//! positions, pre-LN encoder layers with conditioning hooks, CTC head.

mod config;
mod encoder;
mod frontend;
mod params;

pub use config::{ModelConfig, FRONTEND_KERNEL, FRONTEND_STRIDES};
pub use encoder::{encoder_layer, positional_encoding, self_attention, LayerParams, PrefixKv, LN_EPS};
pub use frontend::{conv_frontend, padding_fill, FrontendParams};
pub use params::{is_tuner_param, param_specs, Bound, Init, ParamSpec, ParamStore};

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::conditioning::{
    condition_add, condition_attention, condition_concat, condition_prompt, fl_adapter, linear,
    AdapterParams, ConditioningMode, LanguageCode, PrefixPrompts, PromptedSequence,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("utterance {index} has {frames} frames, fewer than the subsampling factor {min}")]
    TooShort {
        index: usize,
        frames: usize,
        min: usize,
    },
    #[error("mode {0} requires language id")]
    LanguageRequired(ConditioningMode),
    #[error("mode {0} takes no language id")]
    LanguageNotAccepted(ConditioningMode),
    #[error("language id {lang} out of range for {num_langs} languages")]
    BadLanguage { lang: usize, num_langs: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Knobs that only matter for controlled comparisons.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Give prefix-tuning key prompts zero attention weight.
    pub mask_prefix_keys: bool,
}

pub struct ModelOutput {
    /// `[B, T', V+1]` CTC log-probabilities at acoustic positions only.
    pub log_probs: Var,
    /// `[B, T', K+1]` FL-Adapter LID logits at acoustic positions.
    pub lid_logits: Option<Var>,
    /// `[B, T', d]` last encoder layer output (before the final norm) at
    /// acoustic positions.
    pub hidden: Var,
    /// Real encoded length of each utterance.
    pub lengths: Vec<usize>,
}

impl ModelOutput {
    pub fn max_len(&self, g: &Graph) -> usize {
        g.shape(self.log_probs)[1]
    }
}

/// `x[b, 0..len, :]` of a `[B, T, w]` tensor as `[len, w]`.
pub fn utterance_rows(g: &mut Graph, x: Var, b: usize, len: usize) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || b >= s[0] || len == 0 || len > s[1] {
        return Err(TensorError::InvalidArgument("utterance rows out of range"));
    }
    let base = b * s[1] * s[2];
    let index: Vec<Option<usize>> = (base..base + len * s[2]).map(Some).collect();
    g.gather(x, &index, &[len, s[2]])
}

/// Linear map to `V + 1` classes followed by log-softmax; class `V` is blank.
pub fn ctc_head(g: &mut Graph, hidden: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let logits = linear(g, hidden, w, b)?;
    g.log_softmax(logits)
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    cfg: ModelConfig,
}

fn pair(p: &Bound, prefix: &str, a: &str, b: &str) -> Result<(Var, Var), ModelError> {
    Ok((p.var(&format!("{prefix}.{a}"))?, p.var(&format!("{prefix}.{b}"))?))
}

fn adapter(p: &Bound, prefix: &str) -> Result<AdapterParams, ModelError> {
    let (down_w, down_b) = pair(p, &format!("{prefix}.down"), "w", "b")?;
    let (up_w, up_b) = pair(p, &format!("{prefix}.up"), "w", "b")?;
    Ok(AdapterParams {
        down_w,
        down_b,
        up_w,
        up_b,
    })
}

impl AcousticModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn layer_params(&self, p: &Bound, i: usize) -> Result<LayerParams, ModelError> {
        let pre = format!("encoder.layer{i}");
        let attn = format!("{pre}.attn");
        Ok(LayerParams {
            ln1: pair(p, &format!("{pre}.ln1"), "g", "b")?,
            q: pair(p, &attn, "wq", "bq")?,
            k: pair(p, &attn, "wk", "bk")?,
            v: pair(p, &attn, "wv", "bv")?,
            o: pair(p, &attn, "wo", "bo")?,
            ln2: pair(p, &format!("{pre}.ln2"), "g", "b")?,
            ffn1: pair(p, &format!("{pre}.ffn"), "w1", "b1")?,
            ffn2: pair(p, &format!("{pre}.ffn"), "w2", "b2")?,
            adapter: if self.cfg.adapter_dim > 0 {
                Some(adapter(p, &format!("{pre}.adapter"))?)
            } else {
                None
            },
        })
    }

    fn check_langs<'a>(&self, langs: Option<&'a [usize]>, batch: usize) -> Result<&'a [usize], ModelError> {
        let mode = self.cfg.mode;
        match (mode.requires_language(), langs) {
            (true, None) => Err(ModelError::LanguageRequired(mode)),
            (false, Some(_)) => Err(ModelError::LanguageNotAccepted(mode)),
            (false, None) => Ok(&[]),
            (true, Some(l)) => {
                if l.len() != batch {
                    return Err(ModelError::Config(format!(
                        "{} language ids for a batch of {batch}",
                        l.len()
                    )));
                }
                if let Some(&lang) = l.iter().find(|&&x| x >= self.cfg.num_langs) {
                    return Err(ModelError::BadLanguage {
                        lang,
                        num_langs: self.cfg.num_langs,
                    });
                }
                Ok(l)
            }
        }
    }

    /// Full forward pass over a padded `[B, T, F]` batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        features: Var,
        lengths: &[usize],
        langs: Option<&[usize]>,
        opts: ForwardOptions,
    ) -> Result<ModelOutput, ModelError> {
        let cfg = &self.cfg;
        let batch = lengths.len();
        let langs = self.check_langs(langs, batch)?;
        let d = cfg.d_model;

        let mut input = features;
        match cfg.mode {
            ConditioningMode::ConcatOneHot => {
                let code = LanguageCode::OneHot {
                    num_langs: cfg.num_langs,
                };
                input = condition_concat(g, input, langs, &code)?;
            }
            ConditioningMode::ConcatEmbedding => {
                let code = LanguageCode::Embedding(p.var("cond.concat.emb")?);
                input = condition_concat(g, input, langs, &code)?;
            }
            _ => {}
        }
        let fp = FrontendParams {
            conv: [
                pair(p, "frontend.conv1", "w", "b")?,
                pair(p, "frontend.conv2", "w", "b")?,
            ],
            proj: pair(p, "frontend.proj", "w", "b")?,
        };
        let (mut x, enc_lengths) = conv_frontend(g, input, lengths, &fp)?;
        let t_enc = g.shape(x)[1];

        match cfg.mode {
            ConditioningMode::Add => x = condition_add(g, x, langs, p.var("cond.add.emb")?)?,
            ConditioningMode::Attention => {
                x = condition_attention(
                    g,
                    x,
                    langs,
                    p.var("cond.attn.emb")?,
                    p.var("cond.attn.w")?,
                    p.var("cond.attn.v")?,
                )?
            }
            _ => {}
        }

        let prompted: Option<PromptedSequence> = match cfg.mode.prompt_position() {
            Some(pos) => Some(condition_prompt(
                g,
                x,
                &enc_lengths,
                langs,
                p.var("prompt.emb")?,
                cfg.num_prompt_tokens,
                pos,
            )?),
            None => None,
        };
        let (seq, valid) = match &prompted {
            Some(ps) => (ps.seq, ps.mask.clone()),
            None => (x, padding_fill(&enc_lengths, t_enc, 1).iter().map(|f| !f).collect()),
        };
        let s_len = g.shape(seq)[1];
        let pe_rows = positional_encoding(s_len, d);
        let mut pe = Vec::with_capacity(batch * s_len * d);
        for _ in 0..batch {
            pe.extend_from_slice(pe_rows.data());
        }
        let pe = g.constant(Tensor::new(vec![batch, s_len, d], pe)?);
        let mut h = g.add(seq, pe)?;

        let prefix = if cfg.mode.uses_prefix() {
            let (w, b) = pair(p, "prefix.proj", "w", "b")?;
            Some(PrefixPrompts::new(
                g,
                langs,
                p.var("prefix.emb")?,
                w,
                b,
                cfg.num_layers,
                cfg.num_prompt_tokens,
                d,
            )?)
        } else {
            None
        };

        let mut lid_logits = None;
        for i in 0..cfg.num_layers {
            let lp = self.layer_params(p, i)?;
            let kv = match &prefix {
                Some(pp) => {
                    let (keys, values) = pp.layer(g, i)?;
                    Some(PrefixKv {
                        keys,
                        values,
                        mask_keys: opts.mask_prefix_keys,
                    })
                }
                None => None,
            };
            h = encoder_layer(g, h, &valid, &lp, cfg.n_head, kv.as_ref())?;
            if cfg.mode.uses_fl_adapter() && i + 1 == cfg.fl_adapter_layer {
                let (out, z) = fl_adapter(g, h, &adapter(p, "fl_adapter")?)?;
                h = out;
                lid_logits = Some(z);
            }
        }

        let acoustic = |g: &mut Graph, v: Var| -> Result<Var, TensorError> {
            match &prompted {
                Some(ps) => ps.acoustic(g, v),
                None => Ok(v),
            }
        };
        let hidden = acoustic(g, h)?;
        let lid_logits = match lid_logits {
            Some(z) => Some(acoustic(g, z)?),
            None => None,
        };
        let normed = g.layer_norm(hidden, p.var("encoder.ln_final.g")?, p.var("encoder.ln_final.b")?, LN_EPS)?;
        let (hw, hb) = pair(p, "head", "w", "b")?;
        let log_probs = ctc_head(g, normed, hw, hb)?;
        Ok(ModelOutput {
            log_probs,
            lid_logits,
            hidden,
            lengths: enc_lengths,
        })
    }
}
