use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{ModelConfig, FRONTEND_KERNEL};
use super::ModelError;
use crate::autodiff::{Graph, Tensor, Var};
use crate::conditioning::{ConditioningMode, Tuner};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` from the first two dims.
    Xavier,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, n_in: usize, n_out: usize, zero: bool) {
    let init = if zero { Init::Zeros } else { Init::Xavier };
    out.push(spec(format!("{prefix}.w"), &[n_in, n_out], init));
    out.push(spec(format!("{prefix}.b"), &[n_out], Init::Zeros));
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(spec(format!("{prefix}.g"), &[d], Init::Ones));
    out.push(spec(format!("{prefix}.b"), &[d], Init::Zeros));
}

/// Whether `name` belongs to a PEFT tuner (trainable on a frozen base).
pub fn is_tuner_param(name: &str) -> bool {
    name.starts_with("prompt.") || name.starts_with("prefix.") || name.contains(".adapter.")
}

/// Every parameter the configuration implies, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, k, e, np, l) = (
        cfg.d_model,
        cfg.num_langs,
        cfg.lang_emb_dim,
        cfg.num_prompt_tokens,
        cfg.num_layers,
    );
    let c = cfg.conv_channels;
    let emb = Init::Normal(0.5);
    let mut out = Vec::new();
    linear_specs(&mut out, "frontend.conv1", FRONTEND_KERNEL * cfg.frontend_input_dim(), c, false);
    linear_specs(&mut out, "frontend.conv2", FRONTEND_KERNEL * c, c, false);
    linear_specs(&mut out, "frontend.proj", c, d, false);
    for i in 0..l {
        let p = format!("encoder.layer{i}");
        norm_specs(&mut out, &format!("{p}.ln1"), d);
        for m in ["q", "k", "v", "o"] {
            out.push(spec(format!("{p}.attn.w{m}"), &[d, d], Init::Xavier));
            out.push(spec(format!("{p}.attn.b{m}"), &[d], Init::Zeros));
        }
        norm_specs(&mut out, &format!("{p}.ln2"), d);
        out.push(spec(format!("{p}.ffn.w1"), &[d, cfg.d_ffn], Init::Xavier));
        out.push(spec(format!("{p}.ffn.b1"), &[cfg.d_ffn], Init::Zeros));
        out.push(spec(format!("{p}.ffn.w2"), &[cfg.d_ffn, d], Init::Xavier));
        out.push(spec(format!("{p}.ffn.b2"), &[d], Init::Zeros));
        if cfg.adapter_dim > 0 {
            linear_specs(&mut out, &format!("{p}.adapter.down"), d, cfg.adapter_dim, false);
            linear_specs(&mut out, &format!("{p}.adapter.up"), cfg.adapter_dim, d, true);
        }
    }
    norm_specs(&mut out, "encoder.ln_final", d);
    linear_specs(&mut out, "head", d, cfg.vocab_size + 1, false);

    let prompt = |out: &mut Vec<ParamSpec>, copies: usize| {
        out.push(spec("prompt.emb", &[k, np * copies * d], emb));
    };
    let prefix = |out: &mut Vec<ParamSpec>| {
        out.push(spec("prefix.emb", &[k, e], emb));
        linear_specs(out, "prefix.proj", e, l * 2 * np * d, false);
    };
    match cfg.mode {
        ConditioningMode::None | ConditioningMode::ConcatOneHot => {}
        ConditioningMode::Add => out.push(spec("cond.add.emb", &[k, d], emb)),
        ConditioningMode::Attention => {
            out.push(spec("cond.attn.emb", &[k, d], emb));
            out.push(spec("cond.attn.w", &[d, d], Init::Xavier));
            out.push(spec("cond.attn.v", &[d, 1], Init::Xavier));
        }
        ConditioningMode::ConcatEmbedding => out.push(spec("cond.concat.emb", &[k, e], emb)),
        ConditioningMode::Prompt(pos) => prompt(&mut out, pos.copies()),
        ConditioningMode::PrefixTuning => prefix(&mut out),
        ConditioningMode::FlAdapter(_) | ConditioningMode::Peft { .. } => {
            linear_specs(&mut out, "fl_adapter.down", d, k + 1, false);
            linear_specs(&mut out, "fl_adapter.up", k + 1, d, true);
            match cfg.mode {
                ConditioningMode::Peft {
                    tuner: Tuner::Prompt(pos),
                    ..
                } => prompt(&mut out, pos.copies()),
                ConditioningMode::Peft {
                    tuner: Tuner::Prefix,
                    ..
                } => prefix(&mut out),
                _ => {}
            }
        }
    }
    out
}

/// FNV-1a, used to give every parameter its own RNG stream keyed by name so
/// a backbone initialises identically whatever conditioning is added.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn init_tensor(s: &ParamSpec, seed: u64) -> Tensor {
    let n: usize = s.shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(&s.name));
    let data = match s.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Xavier => {
            let fan_out = s.shape.get(1).copied().unwrap_or(1);
            let a = (6.0 / (s.shape[0] + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a);
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    Tensor::new(s.shape.clone(), data).expect("spec shapes are non-empty")
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let t = init_tensor(&s, seed);
                (s.name, t)
            })
            .collect();
        Self { tensors }
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        Self {
            tensors: named.into_iter().collect(),
        }
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name, t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against what `cfg` implies.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let specs = param_specs(cfg);
        for s in &specs {
            match self.tensors.get(&s.name) {
                None => return Err(ModelError::MissingParam(s.name.clone())),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(ModelError::Config(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self.names().find(|n| !known.contains(n)).unwrap_or_default();
            return Err(ModelError::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Registers every tensor in `g`: names accepted by `trainable` become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters registered in one graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Wraps variables that were registered by other means.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
