use std::path::PathBuf;

use super::ini::{Ini, IniError, Section};
use crate::conditioning::Tuner;
use crate::model::ModelConfig;
use crate::trainer::{Schedule, TrainOptions};

/// Step budget and cadences of one training or fine-tuning run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_frames: usize,
    pub clip_norm: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_frames: 2000,
            clip_norm: 5.0,
            eval_every: 500,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeftSettings {
    pub tuner: Tuner,
    pub num_prompt_tokens: usize,
    pub adapter_dim: usize,
}

impl Default for PeftSettings {
    fn default() -> Self {
        Self {
            tuner: Tuner::Prefix,
            num_prompt_tokens: 5,
            adapter_dim: 8,
        }
    }
}

/// Everything a `train` or `finetune` invocation needs.
///
/// ```text
/// [run]       seed, out_dir
/// [data]      dir, train, dev, vocab
/// [model]     see ModelConfig
/// [schedule]  d_model, warmup_steps, factor
/// [train]     steps, batch_frames, clip_norm, eval_every, checkpoint_every
/// [peft]      tuner, num_prompt_tokens, adapter_dim   (optional)
/// ```
///
/// `[model]` must name `feat_dim`, `vocab_size` and `num_langs`; every other
/// key falls back to the desk-scale preset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub train_set: String,
    pub dev_set: String,
    pub vocab: PathBuf,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub train: TrainSettings,
    pub peft: Option<PeftSettings>,
}

const SECTIONS: [&str; 7] = ["", "run", "data", "model", "schedule", "train", "peft"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, IniError> {
        Self::parse_inner(text, None)
    }

    /// Like [`RunConfig::parse`], but `[model]` keys default to `base`, so
    /// a fine-tuning config may omit the section entirely.
    pub fn parse_with_model(text: &str, base: &ModelConfig) -> Result<Self, IniError> {
        Self::parse_inner(text, Some(base))
    }

    fn parse_inner(text: &str, base: Option<&ModelConfig>) -> Result<Self, IniError> {
        let ini = Ini::parse(text)?;
        for s in &ini.sections {
            if !SECTIONS.contains(&s.name.as_str()) {
                return Err(IniError::Syntax {
                    line: 0,
                    msg: format!("unknown section [{}]", s.name),
                });
            }
        }
        if let Some(top) = ini.section("") {
            top.only(&[])?;
        }

        let run = ini.section_or_empty("run");
        run.only(&["seed", "out_dir"])?;
        let data = ini.section_or_empty("data");
        data.only(&["dir", "train", "dev", "vocab"])?;

        let m = ini.section_or_empty("model");
        let defaults = match base {
            Some(b) => b.clone(),
            None => ModelConfig::desk(m.require("feat_dim")?, m.require("vocab_size")?, m.require("num_langs")?),
        };
        let model = ModelConfig::from_section(&m, &defaults)?;
        if let Err(e) = model.validate() {
            return Err(m.invalid("mode", e.to_string()));
        }
        let schedule = Schedule::from_section(&ini.section_or_empty("schedule"), Schedule::desk(model.d_model))?;

        let t = ini.section_or_empty("train");
        t.only(&["steps", "batch_frames", "clip_norm", "eval_every", "checkpoint_every"])?;
        let d = TrainSettings::default();
        let train = TrainSettings {
            steps: t.get_or("steps", d.steps)?,
            batch_frames: t.get_or("batch_frames", d.batch_frames)?,
            clip_norm: t.get_or("clip_norm", d.clip_norm)?,
            eval_every: t.get_or("eval_every", d.eval_every)?,
            checkpoint_every: t.get_or("checkpoint_every", d.checkpoint_every)?,
        };
        if train.batch_frames == 0 || !(train.clip_norm > 0.0) {
            return Err(t.invalid("batch_frames", "batch_frames and clip_norm must be positive"));
        }

        let peft = match ini.section("peft") {
            None => None,
            Some(p) => {
                p.only(&["tuner", "num_prompt_tokens", "adapter_dim"])?;
                let d = PeftSettings::default();
                Some(PeftSettings {
                    tuner: p.get_or("tuner", d.tuner)?,
                    num_prompt_tokens: p.get_or("num_prompt_tokens", d.num_prompt_tokens)?,
                    adapter_dim: p.get_or("adapter_dim", d.adapter_dim)?,
                })
            }
        };

        Ok(Self {
            seed: run.get_or("seed", 1)?,
            out_dir: run.get_or("out_dir", PathBuf::from("run"))?,
            data_dir: data.get_or("dir", PathBuf::from("data"))?,
            train_set: data.get_or("train", "train".to_string())?,
            dev_set: data.get_or("dev", "dev".to_string())?,
            vocab: data.get_or("vocab", PathBuf::from("vocab.bpe"))?,
            model,
            schedule,
            train,
            peft,
        })
    }

    /// Complete rendering; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut ini = Ini::default();
        let mut run = Section::new("run");
        run.set("seed", self.seed).set("out_dir", self.out_dir.display());
        ini.push(run);
        let mut data = Section::new("data");
        data.set("dir", self.data_dir.display())
            .set("train", &self.train_set)
            .set("dev", &self.dev_set)
            .set("vocab", self.vocab.display());
        ini.push(data);
        ini.push(self.model.to_section());
        ini.push(self.schedule.to_section());
        let mut t = Section::new("train");
        t.set("steps", self.train.steps)
            .set("batch_frames", self.train.batch_frames)
            .set("clip_norm", format!("{:?}", self.train.clip_norm))
            .set("eval_every", self.train.eval_every)
            .set("checkpoint_every", self.train.checkpoint_every);
        ini.push(t);
        if let Some(p) = &self.peft {
            let mut s = Section::new("peft");
            s.set("tuner", p.tuner)
                .set("num_prompt_tokens", p.num_prompt_tokens)
                .set("adapter_dim", p.adapter_dim);
            ini.push(s);
        }
        ini.render()
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.train.steps,
            schedule: self.schedule,
            max_frames_per_batch: self.train.batch_frames,
            clip_norm: self.train.clip_norm,
            eval_every: self.train.eval_every,
            checkpoint_every: self.train.checkpoint_every,
            run_dir: Some(self.out_dir.clone()),
        }
    }
}
