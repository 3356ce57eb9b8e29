//! Adam/Noam training, parameter freezing for PEFT, and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::Checkpoint;
pub use optim::{adam_step, clip_global_norm, noam_lr, Schedule, TrainState, BETA1, BETA2, EPS};

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use crate::autodiff::{Graph, TensorError, Var};
use crate::bpe::Vocabulary;
use crate::config::ini::IniError;
use crate::conditioning::{ConditioningMode, Tuner};
use crate::dataset::{make_batches, Batch, DatasetError, Utterance};
use crate::eval::{evaluate, EvalError, LangSupply};
use crate::model::{
    is_tuner_param, utterance_rows, AcousticModel, Bound, ForwardOptions, ModelConfig, ModelError, ParamStore,
};
use crate::objectives::{
    combined_loss, ctc_loss, expand_lid_labels, frame_ce_loss, LidLoss, LossBundle, ObjectiveError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("the learning-rate schedule starts at step 1")]
    StepZero,
    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("loss became non-finite at step {step}; last good checkpoint: {checkpoint}")]
    Diverged { step: u64, checkpoint: String },
    #[error("utterance `{utt}`: {source}")]
    Utterance {
        utt: String,
        #[source]
        source: ObjectiveError,
    },
    #[error("base checkpoint has mode {0}; fine-tuning needs an fl-adapter base")]
    NotFlAdapterBase(ConditioningMode),
    #[error("tuner parameter `{0}` collides with a base parameter")]
    NameCollision(String),
    #[error("training data is empty")]
    NoData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] IniError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    pub schedule: Schedule,
    pub max_frames_per_batch: usize,
    pub clip_norm: f64,
    /// Dev-set WER cadence in steps; 0 disables it.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; the final step is always saved.
    pub checkpoint_every: u64,
    /// Where metrics and checkpoints go; `None` keeps everything in memory.
    pub run_dir: Option<PathBuf>,
}

impl TrainOptions {
    pub fn desk(d_model: usize, steps: u64) -> Self {
        Self {
            steps,
            schedule: Schedule::desk(d_model),
            max_frames_per_batch: 2000,
            clip_norm: 5.0,
            eval_every: 500,
            checkpoint_every: 500,
            run_dir: None,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBundle,
}

impl StepRecord {
    /// `step<TAB>lr<TAB>ctc<TAB>lid<TAB>total`; `lid` is `-` when absent.
    pub fn to_line(&self) -> String {
        let lid = self.loss.lid.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6e}\t{:.6}\t{}\t{:.6}",
            self.step, self.lr, self.loss.ctc, lid, self.loss.total
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DevRecord {
    pub step: u64,
    pub macro_wer: f64,
    pub per_lang: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub dev: Vec<DevRecord>,
}

/// Batch-mean CTC loss plus, for FL-Adapter models, the weighted LID loss.
pub fn batch_loss(
    g: &mut Graph,
    model: &AcousticModel,
    params: &Bound,
    batch: &Batch,
) -> Result<(Var, LossBundle), TrainError> {
    let cfg = model.config();
    let x = g.constant(batch.features.clone());
    let langs = cfg.mode.requires_language().then_some(&batch.langs[..]);
    let out = model.forward(g, params, x, &batch.frame_lengths, langs, ForwardOptions::default())?;
    let blank = cfg.blank();
    let scale = 1.0 / batch.size() as f64;
    let lid_log_probs = match (cfg.mode.lid_loss(), out.lid_logits) {
        (Some(LidLoss::Ctc), Some(z)) => Some(g.log_softmax(z)?),
        (_, z) => z,
    };
    let mut ctc_terms = Vec::with_capacity(batch.size());
    let mut lid_terms = Vec::with_capacity(batch.size());
    for (b, &n) in out.lengths.iter().enumerate() {
        let tag = |source: ObjectiveError| TrainError::Utterance {
            utt: batch.utt_ids[b].clone(),
            source,
        };
        let labels: Vec<usize> = batch.labels[b].iter().map(|&t| t as usize).collect();
        let lp = utterance_rows(g, out.log_probs, b, n)?;
        ctc_terms.push(ctc_loss(g, lp, &labels, blank).map_err(tag)?);
        if let (Some(kind), Some(z)) = (cfg.mode.lid_loss(), lid_log_probs) {
            let rows = utterance_rows(g, z, b, n)?;
            let target = expand_lid_labels(batch.langs[b], kind, n, labels.len()).map_err(tag)?;
            let term = match kind {
                LidLoss::Ctc => ctc_loss(g, rows, &target, cfg.num_langs),
                LidLoss::CrossEntropy => frame_ce_loss(g, rows, &target, &vec![true; n]),
            };
            lid_terms.push(term.map_err(tag)?);
        }
    }
    let mean = |g: &mut Graph, terms: &[Var]| -> Result<Var, TensorError> {
        let stacked = g.concat(terms, 0)?;
        let s = g.sum(stacked);
        Ok(g.scale(s, scale))
    };
    let ctc = mean(g, &ctc_terms)?;
    let lid = if lid_terms.is_empty() {
        None
    } else {
        Some(mean(g, &lid_terms)?)
    };
    Ok(combined_loss(g, ctc, lid, cfg.alpha)?)
}

/// Fresh state for `cfg`: initialised parameters, nothing frozen.
pub fn init_state(cfg: &ModelConfig, seed: u64) -> TrainState {
    TrainState::new(ParamStore::init(cfg, seed), BTreeSet::new(), seed)
}

/// State for parameter-efficient fine-tuning on top of a FL-Adapter base:
/// every base parameter is frozen, the tuner (prompt or prefix encoder,
/// plus residual adapters when `adapter_dim > 0`) is freshly initialised.
pub fn peft_state(
    base: &Checkpoint,
    tuner: Tuner,
    num_prompt_tokens: usize,
    adapter_dim: usize,
    seed: u64,
) -> Result<(ModelConfig, TrainState), TrainError> {
    let ConditioningMode::FlAdapter(lid) = base.model.mode else {
        return Err(TrainError::NotFlAdapterBase(base.model.mode));
    };
    let mut cfg = base.model.clone();
    cfg.mode = ConditioningMode::Peft { lid, tuner };
    cfg.num_prompt_tokens = num_prompt_tokens;
    cfg.adapter_dim = adapter_dim;
    cfg.validate()?;
    let mut params = ParamStore::init(&cfg, seed);
    let frozen: BTreeSet<String> = base.state.params.names().map(String::from).collect();
    for name in &frozen {
        if is_tuner_param(name) {
            return Err(TrainError::NameCollision(name.clone()));
        }
    }
    for (name, t) in base.state.params.iter() {
        if params.insert(name.to_string(), t.clone()).is_none() {
            return Err(TrainError::Checkpoint(format!("base parameter `{name}` is not part of the PEFT model")));
        }
    }
    params.check_against(&cfg)?;
    Ok((cfg, TrainState::new(params, frozen, seed)))
}

fn dev_eval(
    model: &AcousticModel,
    state: &TrainState,
    dev: &[Utterance],
    vocab: &Vocabulary,
) -> Result<DevRecord, TrainError> {
    let supply = if model.config().mode.requires_language() {
        LangSupply::Reference
    } else {
        LangSupply::Agnostic
    };
    let report = evaluate(model, &state.params, dev, vocab, supply, crate::eval::eval_threads())?;
    Ok(DevRecord {
        step: state.step,
        macro_wer: report.macro_wer,
        per_lang: report.per_lang.iter().map(|(l, s)| (*l, s.wer())).collect(),
    })
}

/// Runs `opts.steps` optimizer steps. Batches come from reshuffling the
/// training set each epoch with `state.seed + epoch`, so a run is fully
/// determined by its inputs.
pub fn train(
    state: &mut TrainState,
    model: &AcousticModel,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    vocab: &Vocabulary,
    opts: &TrainOptions,
) -> Result<TrainLog, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::NoData);
    }
    state.params.check_against(model.config())?;
    let mut metrics: Option<BufWriter<File>> = None;
    let mut dev_log: Option<BufWriter<File>> = None;
    let ckpt_dir = opts.run_dir.as_ref().map(|d| d.join("checkpoint"));
    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> std::io::Result<BufWriter<File>> {
            Ok(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(dir.join(name))?,
            ))
        };
        metrics = Some(open("metrics.log")?);
        dev_log = Some(open("dev.log")?);
    }
    let save = |state: &TrainState| -> Result<(), TrainError> {
        if let Some(dir) = &ckpt_dir {
            Checkpoint {
                model: model.config().clone(),
                state: state.clone(),
            }
            .save(dir)?;
        }
        Ok(())
    };

    let mut log = TrainLog::default();
    let mut epoch = 0u64;
    let mut batches = make_batches(train_set, opts.max_frames_per_batch, vocab, state.seed)?;
    let mut cursor = 0;
    // A resumed state continues the batch stream where it stopped.
    for _ in 0..state.step {
        if cursor == batches.len() {
            epoch += 1;
            batches = make_batches(train_set, opts.max_frames_per_batch, vocab, state.seed.wrapping_add(epoch))?;
            cursor = 0;
        }
        cursor += 1;
    }
    let final_step = state.step + opts.steps;
    for _ in 0..opts.steps {
        if cursor == batches.len() {
            epoch += 1;
            batches = make_batches(train_set, opts.max_frames_per_batch, vocab, state.seed.wrapping_add(epoch))?;
            cursor = 0;
        }
        let batch = &batches[cursor];
        cursor += 1;
        let step = state.step + 1;
        let lr = noam_lr(step, &opts.schedule)?;

        let mut g = Graph::new();
        let bound = state.params.bind(&mut g, |n| state.is_trainable(n));
        let (total, bundle) = batch_loss(&mut g, model, &bound, batch)?;
        if !bundle.total.is_finite() {
            let checkpoint = ckpt_dir
                .as_ref()
                .filter(|d| d.exists())
                .map_or_else(|| "none".to_string(), |d| d.display().to_string());
            return Err(TrainError::Diverged { step, checkpoint });
        }
        g.backward(total)?;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, v) in bound.iter() {
            if state.is_trainable(name) {
                let grad = g.grad(v).ok_or_else(|| TrainError::MissingGradient(name.to_string()))?;
                grads.insert(name.to_string(), grad.to_vec());
            }
        }
        clip_global_norm(grads.values_mut(), opts.clip_norm);
        adam_step(state, &grads, lr)?;

        let record = StepRecord { step, lr, loss: bundle };
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", record.to_line())?;
        }
        log.steps.push(record);

        let last = step == final_step;
        if opts.eval_every > 0 && step.is_multiple_of(opts.eval_every) && !dev_set.is_empty() {
            let rec = dev_eval(model, state, dev_set, vocab)?;
            if let Some(w) = dev_log.as_mut() {
                let langs: Vec<String> = rec.per_lang.iter().map(|(l, w)| format!("{l}:{w:.2}")).collect();
                writeln!(w, "{}\t{:.2}\t{}", rec.step, rec.macro_wer, langs.join(" "))?;
            }
            log.dev.push(rec);
        }
        if (opts.checkpoint_every > 0 && step.is_multiple_of(opts.checkpoint_every)) || last {
            if let Some(w) = metrics.as_mut() {
                w.flush()?;
            }
            save(state)?;
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    if let Some(w) = dev_log.as_mut() {
        w.flush()?;
    }
    if opts.steps == 0 {
        save(state)?;
    }
    Ok(log)
}
