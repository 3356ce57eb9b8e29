use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use lingua_ctc::bpe::{train_bpe, Vocabulary};
use lingua_ctc::conditioning::{ConditioningMode, Tuner};
use lingua_ctc::config::RunConfig;
use lingua_ctc::dataset::{read_dataset, read_transcripts, write_dataset, CorpusSpec, Utterance};
use lingua_ctc::dataset::{SEVEN_LANG_SPEC, THREE_LANG_SPEC};
use lingua_ctc::eval::{eval_threads, evaluate, parse_csv, LangSupply};
use lingua_ctc::model::{AcousticModel, ModelConfig, ModelError};
use lingua_ctc::objectives::LidLoss;
use lingua_ctc::trainer::{init_state, peft_state, train as run_training, Checkpoint, TrainError, TrainState};

use crate::Preset;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config files, or inputs that contradict each other.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Run(#[from] lingua_ctc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

macro_rules! impl_from_lib {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Run(e.into())
            }
        }
    )*};
}
impl_from_lib!(
    lingua_ctc::bpe::BpeError,
    lingua_ctc::dataset::DatasetError,
    lingua_ctc::eval::EvalError,
    ModelError,
    TrainError
);

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::File {
        path: path.display().to_string(),
        source,
    }
}

fn read_config_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(file_err(path))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let file = fs::File::open(path).map_err(file_err(path))?;
    Vocabulary::parse(BufReader::new(file)).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn build_vocab(corpus: &[PathBuf], size: usize, out: &Path) -> Result<()> {
    if size < 256 {
        return Err(usage(format!("--size {size} is below the 256 byte tokens")));
    }
    let mut texts = Vec::new();
    for path in corpus {
        if !path.is_file() {
            return Err(usage(format!("{}: no such corpus file", path.display())));
        }
        texts.extend(read_transcripts(path)?);
    }
    let vocab = train_bpe(&texts, size)?;
    write_file(out, &vocab.to_file_string())?;
    println!("wrote {} ({} tokens, {} merges)", out.display(), vocab.size(), vocab.merges().len());
    Ok(())
}

pub fn gen_data(spec: Option<&Path>, preset: Preset, seed: u64, out: &Path) -> Result<()> {
    let text = match spec {
        Some(path) => read_config_text(path)?,
        None => match preset {
            Preset::ThreeLang => THREE_LANG_SPEC.to_string(),
            Preset::SevenLang => SEVEN_LANG_SPEC.to_string(),
        },
    };
    let corpus = CorpusSpec::parse(&text).map_err(usage)?;
    let (train, dev) = corpus.generate_splits(seed).map_err(usage)?;
    fs::create_dir_all(out).map_err(file_err(out))?;
    write_dataset(out, "train", &train)?;
    write_dataset(out, "dev", &dev)?;
    write_file(&out.join("corpus.cfg"), &text)?;
    println!(
        "wrote {} train / {} dev utterances over {} languages to {}",
        train.len(),
        dev.len(),
        corpus.num_langs(),
        out.display()
    );
    Ok(())
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(file_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(usage(format!(
                "{} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(file_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(file_err(dir))
}

fn check_data(utts: &[Utterance], model: &ModelConfig, name: &str) -> Result<()> {
    for u in utts {
        if u.feat_dim != model.feat_dim {
            return Err(usage(format!(
                "{name}: utterance `{}` has {} features, the model expects {}",
                u.id, u.feat_dim, model.feat_dim
            )));
        }
        if u.lang >= model.num_langs {
            return Err(usage(format!(
                "{name}: utterance `{}` has language {}, the model has {}",
                u.id, u.lang, model.num_langs
            )));
        }
    }
    Ok(())
}

/// Language names from the `corpus.cfg` that gen-data leaves next to the
/// data; empty when there is none.
fn lang_names(data_dir: &Path) -> Vec<String> {
    fs::read_to_string(data_dir.join("corpus.cfg"))
        .ok()
        .and_then(|text| CorpusSpec::parse(&text).ok())
        .map(|spec| spec.lang_names())
        .unwrap_or_default()
}

struct RunData {
    vocab: Vocabulary,
    names: Vec<String>,
    train: Vec<Utterance>,
    dev: Vec<Utterance>,
}

fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let vocab = load_vocab(&cfg.vocab)?;
    if vocab.size() != cfg.model.vocab_size {
        return Err(usage(format!(
            "{} holds {} tokens but the model expects vocab_size = {}",
            cfg.vocab.display(),
            vocab.size(),
            cfg.model.vocab_size
        )));
    }
    let train = read_dataset(&cfg.data_dir, &cfg.train_set)?;
    let dev = read_dataset(&cfg.data_dir, &cfg.dev_set)?;
    check_data(&train, &cfg.model, &cfg.train_set)?;
    check_data(&dev, &cfg.model, &cfg.dev_set)?;
    let names = lang_names(&cfg.data_dir);
    Ok(RunData { vocab, names, train, dev })
}

fn supply_for(mode: ConditioningMode) -> LangSupply {
    if mode.requires_language() {
        LangSupply::Reference
    } else {
        LangSupply::Agnostic
    }
}

/// Trains, then scores the final parameters on the dev set into `eval.csv`.
fn run(cfg: &RunConfig, mut state: TrainState, data: &RunData) -> Result<()> {
    write_file(&cfg.out_dir.join("run.cfg"), &cfg.render())?;
    write_file(&cfg.out_dir.join("vocab.bpe"), &data.vocab.to_file_string())?;
    let model = AcousticModel::new(cfg.model.clone())?;
    let log = run_training(&mut state, &model, &data.train, &data.dev, &data.vocab, &cfg.train_options())?;
    let report = evaluate(
        &model,
        &state.params,
        &data.dev,
        &data.vocab,
        supply_for(cfg.model.mode),
        eval_threads(),
    )?;
    write_file(&cfg.out_dir.join("eval.csv"), &report.to_csv(&data.names))?;
    let last = log.steps.last().map_or(f64::NAN, |r| r.loss.total);
    println!(
        "{}: {} steps, final loss {last:.4}, dev macro WER {:.2}",
        cfg.out_dir.display(),
        state.step,
        report.macro_wer
    );
    Ok(())
}

pub fn train(
    config: &Path,
    mode: Option<ConditioningMode>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let mut cfg = RunConfig::parse(&read_config_text(config)?).map_err(|e| usage(format!("{}: {e}", config.display())))?;
    if let Some(m) = mode {
        cfg.model.mode = m;
        cfg.model.validate().map_err(usage)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let data = load_run_data(&cfg)?;
    prepare_run_dir(&cfg.out_dir, force)?;
    let state = init_state(&cfg.model, cfg.seed);
    run(&cfg, state, &data)
}

/// Checkpoint directory of a run directory, or `path` itself.
fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if nested.join("model.cfg").is_file() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Tuner named by a `finetune --mode` value. A LID loss in the string must
/// agree with the base model's.
fn parse_tuner(mode: &str, base_lid: LidLoss) -> Result<Tuner> {
    let rest = mode.strip_prefix("peft-").unwrap_or(mode);
    let rest = match rest.split_once('-') {
        Some((lid @ ("ce" | "ctc"), tail)) => {
            if lid != base_lid.as_str() {
                return Err(usage(format!(
                    "--mode {mode} asks for {lid} LID loss but the base was trained with {}",
                    base_lid.as_str()
                )));
            }
            tail
        }
        _ => rest,
    };
    rest.parse::<Tuner>()
        .map_err(|e| usage(format!("--mode {mode}: {e}")))
}

pub fn finetune(
    base: &Path,
    config: &Path,
    mode: Option<&str>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let base = Checkpoint::load(&checkpoint_dir(base))?;
    let ConditioningMode::FlAdapter(lid) = base.model.mode else {
        return Err(usage(TrainError::NotFlAdapterBase(base.model.mode)));
    };
    let mut cfg = RunConfig::parse_with_model(&read_config_text(config)?, &base.model)
        .map_err(|e| usage(format!("{}: {e}", config.display())))?;
    if cfg.model != base.model {
        return Err(usage(format!(
            "{}: [model] must match the base checkpoint (mode {})",
            config.display(),
            base.model.mode
        )));
    }
    let mut peft = cfg.peft.unwrap_or_default();
    if let Some(m) = mode {
        peft.tuner = parse_tuner(m, lid)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let mut candidate = base.model.clone();
    candidate.mode = ConditioningMode::Peft { lid, tuner: peft.tuner };
    candidate.num_prompt_tokens = peft.num_prompt_tokens;
    candidate.adapter_dim = peft.adapter_dim;
    candidate.validate().map_err(usage)?;

    let data = load_run_data(&cfg)?;
    let (model, state) = peft_state(&base, peft.tuner, peft.num_prompt_tokens, peft.adapter_dim, cfg.seed)?;
    cfg.model = model;
    cfg.peft = Some(peft);
    prepare_run_dir(&cfg.out_dir, force)?;
    run(&cfg, state, &data)
}

pub fn eval(
    ckpt: &Path,
    data: &Path,
    set: &str,
    lang: Option<&str>,
    vocab: Option<PathBuf>,
    report: Option<&Path>,
) -> Result<()> {
    let dir = checkpoint_dir(ckpt);
    let ck = Checkpoint::load(&dir)?;
    let mode = ck.model.mode;
    let vocab_path = vocab.unwrap_or_else(|| {
        let run_dir = if dir == ckpt { dir.parent().unwrap_or(&dir) } else { ckpt };
        run_dir.join("vocab.bpe")
    });
    let vocab = load_vocab(&vocab_path)?;
    if vocab.size() != ck.model.vocab_size {
        return Err(usage(format!(
            "{} holds {} tokens but the checkpoint expects {}",
            vocab_path.display(),
            vocab.size(),
            ck.model.vocab_size
        )));
    }
    let mut utts = read_dataset(data, set)?;
    check_data(&utts, &ck.model, set)?;
    let supply = match (mode.requires_language(), lang) {
        (true, None) => return Err(usage(ModelError::LanguageRequired(mode))),
        (false, Some(_)) => return Err(usage(ModelError::LanguageNotAccepted(mode))),
        (false, None) => LangSupply::Agnostic,
        (true, Some("all")) => LangSupply::Reference,
        (true, Some(id)) => {
            let id: usize = id
                .parse()
                .map_err(|_| usage(format!("--lang expects a language id or `all`, got `{id}`")))?;
            if id >= ck.model.num_langs {
                return Err(usage(ModelError::BadLanguage {
                    lang: id,
                    num_langs: ck.model.num_langs,
                }));
            }
            utts.retain(|u| u.lang == id);
            if utts.is_empty() {
                return Err(usage(format!("{set} has no utterances of language {id}")));
            }
            LangSupply::Fixed(id)
        }
    };
    let model = AcousticModel::new(ck.model.clone())?;
    let result = evaluate(&model, &ck.state.params, &utts, &vocab, supply, eval_threads())?;
    let csv = result.to_csv(&lang_names(data));
    match report {
        Some(path) => {
            write_file(path, &csv)?;
            println!("{}: macro WER {:.2}", path.display(), result.macro_wer);
        }
        None => print!("{csv}"),
    }
    Ok(())
}

struct ReportRow {
    name: String,
    total: usize,
    trainable: usize,
    wers: Vec<(String, f64)>,
}

fn model_label(cfg: &ModelConfig) -> String {
    let mut label = cfg.mode.to_string();
    if cfg.mode.uses_prompts() || cfg.mode.uses_prefix() {
        let n = cfg.num_prompt_tokens;
        let _ = write!(label, " ({n} token{})", if n == 1 { "" } else { "s" });
    }
    if matches!(cfg.mode, ConditioningMode::Peft { .. }) && cfg.adapter_dim > 0 {
        let _ = write!(label, " + adapter {}", cfg.adapter_dim);
    }
    label
}

/// Params are printed in millions with two decimals, as in the paper's
/// table, plus the exact counts.
fn fmt_params(n: usize) -> String {
    format!("{:.2}M ({n})", n as f64 / 1e6)
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for run_dir in runs {
        let ck = Checkpoint::load(&checkpoint_dir(run_dir))?;
        let csv_path = run_dir.join("eval.csv");
        let text = fs::read_to_string(&csv_path).map_err(file_err(&csv_path))?;
        let wers = parse_csv(&text).map_err(|e| usage(format!("{}: {e}", csv_path.display())))?;
        let name = run_dir
            .file_name()
            .map_or_else(|| run_dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push(ReportRow {
            name: format!("{} [{name}]", model_label(&ck.model)),
            total: ck.total_count(),
            trainable: ck.trainable_count(),
            wers,
        });
    }
    let langs: BTreeSet<&str> = rows
        .iter()
        .flat_map(|r| r.wers.iter().map(|(l, _)| l.as_str()))
        .filter(|l| *l != "avg")
        .collect();
    let mut md = String::from("| Model | Params | Trainable |");
    for l in &langs {
        let _ = write!(md, " {l} |");
    }
    md.push_str(" Avg |\n|---|---:|---:|");
    for _ in &langs {
        md.push_str("---:|");
    }
    md.push_str("---:|\n");
    for r in &rows {
        let _ = write!(md, "| {} | {} | {} |", r.name, fmt_params(r.total), fmt_params(r.trainable));
        for l in langs.iter().copied().chain(["avg"]) {
            match r.wers.iter().find(|(x, _)| x == l) {
                Some((_, w)) => {
                    let _ = write!(md, " {w:.2} |");
                }
                None => md.push_str(" - |"),
            }
        }
        md.push('\n');
    }
    write_file(out, &md)?;
    println!("wrote {} ({} runs)", out.display(), rows.len());
    Ok(())
}
