use crate::conditioning::{ConditioningMode, PromptPosition, Tuner};
use crate::config::ini::{IniError, Section};

use super::ModelError;

/// Strides of the two front-end convolutions; their product is the
/// subsampling factor.
pub const FRONTEND_STRIDES: [usize; 2] = [2, 3];
pub const FRONTEND_KERNEL: usize = 3;

/// Architecture and conditioning description; fully determines every
/// parameter shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_head: usize,
    pub feat_dim: usize,
    /// Token vocabulary size `V`; the CTC head has `V + 1` outputs, blank = `V`.
    pub vocab_size: usize,
    pub num_langs: usize,
    pub conv_channels: usize,
    pub subsample_factor: usize,
    pub mode: ConditioningMode,
    /// The FL-Adapter hook runs after this many encoder layers.
    pub fl_adapter_layer: usize,
    /// Residual adapter bottleneck width; 0 disables the adapters.
    pub adapter_dim: usize,
    pub num_prompt_tokens: usize,
    /// Width of language embeddings for `concat-emb` and the prefix encoder.
    pub lang_emb_dim: usize,
    pub alpha: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, d_model 64, d_ffn 128, 4 heads.
    pub fn desk(feat_dim: usize, vocab_size: usize, num_langs: usize) -> Self {
        Self {
            num_layers: 4,
            d_model: 64,
            d_ffn: 128,
            n_head: 4,
            feat_dim,
            vocab_size,
            num_langs,
            conv_channels: 64,
            subsample_factor: 6,
            mode: ConditioningMode::None,
            fl_adapter_layer: 2,
            adapter_dim: 0,
            num_prompt_tokens: 1,
            lang_emb_dim: 16,
            alpha: 0.5,
        }
    }

    /// The published full-scale architecture: 12 layers, d_model 768,
    /// d_ffn 3072, 12 heads, 6000-token vocabulary, 7 languages.
    pub fn paper_scale() -> Self {
        Self {
            num_layers: 12,
            d_model: 768,
            d_ffn: 3072,
            n_head: 12,
            feat_dim: 80,
            vocab_size: 6000,
            num_langs: 7,
            conv_channels: 768,
            subsample_factor: 6,
            mode: ConditioningMode::None,
            fl_adapter_layer: 6,
            adapter_dim: 0,
            num_prompt_tokens: 1,
            lang_emb_dim: 768,
            alpha: 0.5,
        }
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    /// Input width of the front-end after any concatenated language code.
    pub fn frontend_input_dim(&self) -> usize {
        match self.mode {
            ConditioningMode::ConcatOneHot => self.feat_dim + self.num_langs,
            ConditioningMode::ConcatEmbedding => self.feat_dim + self.lang_emb_dim,
            _ => self.feat_dim,
        }
    }

    /// Encoded length for `frames` input frames: `⌈frames / 6⌉`.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        FRONTEND_STRIDES.iter().fold(frames, |t, s| t.div_ceil(*s))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_head == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_head {}",
                self.d_model, self.n_head
            ));
        }
        if self.d_ffn == 0 || self.feat_dim == 0 || self.conv_channels == 0 {
            return fail("d_ffn, feat_dim and conv_channels must be positive".into());
        }
        if self.vocab_size == 0 || self.num_langs == 0 {
            return fail("vocab_size and num_langs must be positive".into());
        }
        let product: usize = FRONTEND_STRIDES.iter().product();
        if self.subsample_factor != product {
            return fail(format!(
                "subsample_factor {} must equal the front-end stride product {product}",
                self.subsample_factor
            ));
        }
        if self.mode.uses_fl_adapter()
            && (self.fl_adapter_layer == 0 || self.fl_adapter_layer >= self.num_layers)
        {
            return fail(format!(
                "fl_adapter_layer {} must lie in [1, {}]",
                self.fl_adapter_layer,
                self.num_layers.saturating_sub(1)
            ));
        }
        if self.mode.uses_prompts() && self.num_prompt_tokens == 0 {
            return fail("prompt and prefix tuning need num_prompt_tokens >= 1".into());
        }
        if (matches!(self.mode, ConditioningMode::ConcatEmbedding) || self.mode.uses_prefix())
            && self.lang_emb_dim == 0 {
                return fail("lang_emb_dim must be positive".into());
            }
        if self.adapter_dim > 0 && !matches!(self.mode, ConditioningMode::Peft { .. }) {
            return fail("residual adapters are only used in peft modes".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        Ok(())
    }

    /// Closed-form parameter count, written out independently of the
    /// parameter listing used for initialisation.
    pub fn param_count(&self) -> usize {
        let (d, f, c, k, v) = (
            self.d_model,
            self.d_ffn,
            self.conv_channels,
            self.num_langs,
            self.vocab_size,
        );
        let kw = FRONTEND_KERNEL;
        let frontend = (kw * self.frontend_input_dim() * c + c) + (kw * c * c + c) + (c * d + d);
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let layer = 2 * d + attention + 2 * d + ffn;
        let head = 2 * d + d * (v + 1) + (v + 1);
        let mut total = frontend + self.num_layers * layer + head;
        total += self.conditioning_param_count();
        let _ = k;
        total
    }

    /// Parameters added on top of the unconditioned backbone.
    pub fn conditioning_param_count(&self) -> usize {
        let (d, k, e, np, l) = (
            self.d_model,
            self.num_langs,
            self.lang_emb_dim,
            self.num_prompt_tokens,
            self.num_layers,
        );
        let prompt = |pos: PromptPosition| k * np * d * pos.copies();
        let prefix = k * e + e * (l * d * 2 * np) + l * d * 2 * np;
        let fl = (d * (k + 1) + k + 1) + ((k + 1) * d + d);
        let adapters = l * (2 * d * self.adapter_dim + self.adapter_dim + d);
        match self.mode {
            ConditioningMode::None => 0,
            ConditioningMode::Add => k * d,
            ConditioningMode::Attention => k * d + d * d + d,
            ConditioningMode::ConcatOneHot => 0,
            ConditioningMode::ConcatEmbedding => k * e,
            ConditioningMode::Prompt(pos) => prompt(pos),
            ConditioningMode::PrefixTuning => prefix,
            ConditioningMode::FlAdapter(_) => fl,
            ConditioningMode::Peft { tuner, .. } => {
                let t = match tuner {
                    Tuner::Prompt(pos) => prompt(pos),
                    Tuner::Prefix => prefix,
                };
                fl + t + if self.adapter_dim > 0 { adapters } else { 0 }
            }
        }
    }

    const KEYS: [&'static str; 15] = [
        "num_layers",
        "d_model",
        "d_ffn",
        "n_head",
        "feat_dim",
        "vocab_size",
        "num_langs",
        "conv_channels",
        "subsample_factor",
        "mode",
        "fl_adapter_layer",
        "adapter_dim",
        "num_prompt_tokens",
        "lang_emb_dim",
        "alpha",
    ];

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("model");
        s.set("num_layers", self.num_layers)
            .set("d_model", self.d_model)
            .set("d_ffn", self.d_ffn)
            .set("n_head", self.n_head)
            .set("feat_dim", self.feat_dim)
            .set("vocab_size", self.vocab_size)
            .set("num_langs", self.num_langs)
            .set("conv_channels", self.conv_channels)
            .set("subsample_factor", self.subsample_factor)
            .set("mode", self.mode)
            .set("fl_adapter_layer", self.fl_adapter_layer)
            .set("adapter_dim", self.adapter_dim)
            .set("num_prompt_tokens", self.num_prompt_tokens)
            .set("lang_emb_dim", self.lang_emb_dim)
            .set("alpha", format!("{:?}", self.alpha));
        s
    }

    /// Reads a `[model]` section; unspecified keys fall back to `defaults`,
    /// except that overriding `num_layers` moves the default
    /// `fl_adapter_layer` to the middle layer.
    pub fn from_section(s: &Section, defaults: &ModelConfig) -> Result<Self, IniError> {
        s.only(&Self::KEYS)?;
        let d = defaults;
        let num_layers = s.get_or("num_layers", d.num_layers)?;
        Ok(Self {
            num_layers,
            d_model: s.get_or("d_model", d.d_model)?,
            d_ffn: s.get_or("d_ffn", d.d_ffn)?,
            n_head: s.get_or("n_head", d.n_head)?,
            feat_dim: s.get_or("feat_dim", d.feat_dim)?,
            vocab_size: s.get_or("vocab_size", d.vocab_size)?,
            num_langs: s.get_or("num_langs", d.num_langs)?,
            conv_channels: s.get_or("conv_channels", d.conv_channels)?,
            subsample_factor: s.get_or("subsample_factor", d.subsample_factor)?,
            mode: s.get_or("mode", d.mode)?,
            fl_adapter_layer: s.get_or(
                "fl_adapter_layer",
                if s.raw("num_layers").is_some() {
                    num_layers / 2
                } else {
                    d.fl_adapter_layer
                },
            )?,
            adapter_dim: s.get_or("adapter_dim", d.adapter_dim)?,
            num_prompt_tokens: s.get_or("num_prompt_tokens", d.num_prompt_tokens)?,
            lang_emb_dim: s.get_or("lang_emb_dim", d.lang_emb_dim)?,
            alpha: s.get_or("alpha", d.alpha)?,
        })
    }
}
