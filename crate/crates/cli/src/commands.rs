//! The four commands. Each is a pure function of config, inputs and seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use focusdec_core::data::{
    check_vocab, gen_copy_corpus, gen_copy_corpus_with, gen_passkey_doc, gen_repeat_doc, segment_len, read_corpus, write_corpus, FillerModel,
};
use focusdec_core::eval::{
    corpus_perplexity, passkey_accuracy, profile_run, sweep_chunk_size, sweep_local_context,
    Decoder, EvalRecord, FocusSettings, Metric, ProfileReport,
};
use focusdec_core::focus::{plan_chunks, FocusParams};
use focusdec_core::model::BaseParams;
use focusdec_core::optim::AdamW;
use focusdec_core::train::{base_digest, BaseTrainer, FocusTrainer, StepReport};
use focusdec_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{model_digest, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("usage: {0}")]
    Usage(String),
}

impl CliError {
    /// 0 success, 1 contract or configuration error, 2 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Io { .. } | Error::Corpus { .. }) => 2,
            CliError::Checkpoint(CheckpointError::Content(_)) => 1,
            CliError::Checkpoint(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EVAL_TASKS: [&str; 7] = [
    "ppl",
    "ppl-truncated",
    "passkey",
    "passkey-truncated",
    "sweep-chunk",
    "sweep-local",
    "profile",
];

/// Command-line overrides shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub task: Option<String>,
    pub parallel: Option<bool>,
}

impl Options {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out <path> is required".into()))
    }
}

fn log_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths.log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut impl Write, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(Error::from)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_corpora(paths: &[PathBuf], vocab: usize) -> Result<Vec<Vec<u32>>> {
    if paths.is_empty() {
        return Err(Error::config("no corpus files configured").into());
    }
    let mut docs = Vec::new();
    for p in paths {
        docs.extend(read_corpus(p)?);
    }
    check_vocab(&docs, vocab)?;
    Ok(docs)
}

/// Runs base pretraining, writing one log line per step through `log`.
pub fn pretrain(
    cfg: &RunConfig,
    init: Option<BaseParams>,
    corpus: &[Vec<u32>],
    mut log: impl FnMut(&StepReport) -> Result<()>,
) -> Result<BaseParams> {
    let mut trainer = match init {
        Some(b) => BaseTrainer::from_base(b, cfg.pretrain.clone())?,
        None => BaseTrainer::new(&cfg.model, cfg.pretrain.clone())?,
    };
    while trainer.step < cfg.pretrain.steps {
        let r = trainer.train_step(corpus)?;
        log(&r)?;
    }
    Ok(trainer.base)
}

pub fn cmd_pretrain(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.pretrain.seed = s;
    }
    let out = opts.out()?;
    let corpus = read_corpora(&cfg.paths.pretrain_corpus, cfg.model.vocab_size)?;
    let init = match &cfg.paths.pretrain_init {
        Some(p) => Some(load_base(&cfg, p)?.1),
        None => None,
    };
    let lp = log_path(&cfg, out);
    let mut w = create(&lp)?;
    let base = pretrain(&cfg, init, &corpus, |r| write_line(&mut w, &lp, r))?;
    flush(w, &lp)?;
    let mut ck = Checkpoint {
        model: cfg.model.clone(),
        train_digest: focusdec_core::tensor::digest_bytes(
            &serde_json::to_vec(&cfg.pretrain).map_err(Error::from)?,
        ),
        step: cfg.pretrain.steps,
        tensors: Vec::new(),
    };
    ck.push_params(base.named_tensors());
    ck.save(out)?;
    Ok(())
}

/// Frozen base loaded from `path`, checked against the configured architecture.
pub fn load_base(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, BaseParams)> {
    let ck = Checkpoint::load(path)?;
    if ck.model != cfg.model {
        return Err(Error::config(format!(
            "config model {} does not match checkpoint model {} in {}",
            model_digest(&cfg.model),
            model_digest(&ck.model),
            path.display()
        ))
        .into());
    }
    let base = ck.base()?;
    Ok((ck, base))
}

fn focus_names(cfg: &RunConfig) -> Vec<(String, Vec<usize>)> {
    FocusParams::expected_shapes(&cfg.model)
}

/// Focus training from scratch or from `resume`; stops at `stop_after` or `train.steps`.
pub fn train_focus(
    cfg: &RunConfig,
    base: &BaseParams,
    corpus: &[Vec<u32>],
    resume: Option<(FocusParams, AdamW, usize)>,
    mut log: impl FnMut(&StepReport) -> Result<()>,
) -> Result<(FocusParams, AdamW, usize)> {
    let mut trainer = match resume {
        None => FocusTrainer::new(base, cfg.train.clone())?,
        Some((f, o, s)) => FocusTrainer::resume(base, cfg.train.clone(), f, Some(o), s)?,
    };
    let end = cfg.stop_after.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    while trainer.step < end {
        let r = trainer.train_step(corpus)?;
        log(&r)?;
    }
    Ok((trainer.focus, trainer.optimizer, trainer.step))
}

pub fn cmd_train_focus(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.train.seed = s;
    }
    let out = opts.out()?;
    let base_path = cfg
        .paths
        .base_checkpoint
        .clone()
        .ok_or_else(|| Error::config("paths.base_checkpoint is required"))?;
    let (base_ck, base) = load_base(&cfg, &base_path)?;
    let corpus = read_corpora(&cfg.paths.focus_corpus, cfg.model.vocab_size)?;
    let train_digest = cfg.train.digest();

    let resume = match &cfg.paths.resume {
        None => None,
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.train_digest != train_digest {
                return Err(Error::config(format!(
                    "resume checkpoint {} was trained with config {}, current is {}",
                    p.display(),
                    &ck.train_digest[..16.min(ck.train_digest.len())],
                    &train_digest[..16]
                ))
                .into());
            }
            if base_digest(&ck.base()?) != base_digest(&base) {
                return Err(Error::config("resume checkpoint holds a different base model").into());
            }
            let focus = ck
                .focus()?
                .ok_or_else(|| Error::config("resume checkpoint has no focus tensors"))?;
            let opt = ck
                .optimizer(&cfg.train.optimizer, &focus_names(&cfg))?
                .ok_or_else(|| Error::config("resume checkpoint has no optimizer state"))?;
            Some((focus, opt, ck.step))
        }
    };

    let lp = log_path(&cfg, out);
    let mut w = create(&lp)?;
    let (focus, opt, step) = train_focus(&cfg, &base, &corpus, resume, |r| write_line(&mut w, &lp, r))?;
    flush(w, &lp)?;

    let mut ck = Checkpoint {
        model: cfg.model.clone(),
        train_digest,
        step,
        tensors: Vec::new(),
    };
    // Base tensors are copied from the input checkpoint untouched.
    ck.tensors.extend(
        base_ck
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("focus.") && !n.starts_with("optim."))
            .cloned(),
    );
    ck.push_params(focus.named_tensors());
    ck.push_optimizer(&opt, &focus_names(&cfg));
    ck.save(out)?;
    Ok(())
}

fn doc_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Evaluation documents grouped by total length.
fn eval_docs(cfg: &RunConfig, lengths: &[usize], n: usize) -> Result<Vec<(usize, Vec<Vec<u32>>)>> {
    if let Some(p) = &cfg.paths.eval_corpus {
        let docs = read_corpora(std::slice::from_ref(p), cfg.model.vocab_size)?;
        let mut groups: Vec<(usize, Vec<Vec<u32>>)> = Vec::new();
        for d in docs {
            match groups.iter_mut().find(|(l, _)| *l == d.len()) {
                Some((_, g)) => g.push(d),
                None => groups.push((d.len(), vec![d])),
            }
        }
        return Ok(groups);
    }
    let filler = FillerModel::new(cfg.model.vocab_size)?;
    lengths
        .iter()
        .map(|&len| {
            let mut rng = doc_rng(cfg.eval.seed, len as u64);
            Ok((len, gen_copy_corpus(&filler, &mut rng, n, len)?))
        })
        .collect()
}

#[derive(Serialize)]
struct ProfileLine<'a> {
    task: &'a str,
    length: usize,
    seed: u64,
    config_digest: &'a str,
    #[serde(flatten)]
    report: ProfileReport,
}

/// Loads the evaluated model: base plus focus projections.
pub fn load_model(cfg: &RunConfig) -> Result<(BaseParams, Option<FocusParams>)> {
    let path = cfg
        .paths
        .checkpoint
        .clone()
        .ok_or_else(|| Error::config("paths.checkpoint is required"))?;
    let (ck, base) = load_base(cfg, &path)?;
    Ok((base, ck.focus()?))
}

/// Runs one evaluation task and returns its report lines as JSON values.
pub fn evaluate(
    cfg: &RunConfig,
    task: &str,
    base: &BaseParams,
    focus: Option<&FocusParams>,
) -> Result<Vec<serde_json::Value>> {
    let e = &cfg.eval;
    let digest = cfg.digest();
    let settings = FocusSettings {
        local_len: e.local_len,
        chunk_size: e.chunk_size,
        prompt_len: e.prompt_len,
    };
    let need_focus = || {
        focus.ok_or_else(|| CliError::from(Error::config(format!("task {task} needs focus tensors in the checkpoint"))))
    };
    let record = |length: usize, metric: Metric, value: f64| {
        serde_json::to_value(EvalRecord {
            task: task.to_string(),
            length,
            metric,
            value,
            seed: e.seed,
            config_digest: digest.clone(),
        })
        .expect("record serializes")
    };
    let truncated = Decoder::Truncated {
        base,
        window: e.truncated_window,
    };
    let mut out = Vec::new();
    match task {
        "ppl" | "ppl-truncated" => {
            let decoder = if task == "ppl" {
                Decoder::Focus {
                    base,
                    focus: need_focus()?,
                    settings,
                }
            } else {
                truncated
            };
            for (len, docs) in eval_docs(cfg, &e.ppl_lengths, e.ppl_docs)? {
                let ppl = corpus_perplexity(&decoder, &docs, e.n_score)?;
                out.push(record(len, Metric::Perplexity, ppl));
            }
        }
        "passkey" | "passkey-truncated" => {
            let decoder = if task == "passkey" {
                Decoder::Focus {
                    base,
                    focus: need_focus()?,
                    settings,
                }
            } else {
                truncated
            };
            for (len, acc) in passkey_accuracy(&decoder, &e.passkey_lengths, e.passkey_trials, e.key_digits, e.seed)? {
                out.push(record(len, Metric::Accuracy, acc));
            }
        }
        "sweep-chunk" => {
            let (_, docs) = eval_docs(cfg, &[e.sweep_length], e.sweep_docs)?.remove(0);
            for (c, ppl) in sweep_chunk_size(
                base,
                need_focus()?,
                &docs,
                &e.sweep_chunk_sizes,
                e.local_len,
                e.prompt_len,
                e.n_score,
            )? {
                out.push(record(c, Metric::Perplexity, ppl));
            }
        }
        "sweep-local" => {
            let (_, docs) = eval_docs(cfg, &[e.sweep_length], e.sweep_docs)?.remove(0);
            for (l, ppl) in sweep_local_context(
                base,
                need_focus()?,
                &docs,
                &e.sweep_local_lens,
                e.chunk_size,
                e.prompt_len,
                e.n_score,
            )? {
                out.push(record(l, Metric::Perplexity, ppl));
            }
        }
        "profile" => {
            let focus = need_focus()?;
            for (len, docs) in eval_docs(cfg, &e.profile_lengths, 1)? {
                let plan = plan_chunks(&docs[0], e.local_len, e.chunk_size, e.prompt_len, cfg.model.context_len)?;
                let report = profile_run(&plan, base, focus, e.parallel)?;
                let line = ProfileLine {
                    task,
                    length: len,
                    seed: e.seed,
                    config_digest: &digest,
                    report,
                };
                out.push(serde_json::to_value(line).expect("profile serializes"));
            }
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown task {other:?}; valid tasks: {}",
                EVAL_TASKS.join(", ")
            )))
        }
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.eval.seed = s;
    }
    if let Some(p) = opts.parallel {
        cfg.eval.parallel = p;
    }
    let task = opts.task.as_deref().ok_or_else(|| {
        CliError::Usage(format!("--task is required; valid tasks: {}", EVAL_TASKS.join(", ")))
    })?;
    if !EVAL_TASKS.contains(&task) {
        return Err(CliError::Usage(format!(
            "unknown task {task:?}; valid tasks: {}",
            EVAL_TASKS.join(", ")
        )));
    }
    let out = opts.out()?;
    let (base, focus) = load_model(&cfg)?;
    let lines = evaluate(&cfg, task, &base, focus.as_ref())?;
    let mut w = create(out)?;
    for l in &lines {
        write_line(&mut w, out, l)?;
    }
    flush(w, out)
}

pub fn cmd_gen_data(cfg: &RunConfig, opts: &Options) -> Result<()> {
    let mut d = cfg.data.clone();
    if let Some(s) = opts.seed {
        d.seed = s;
    }
    let out = opts.out()?;
    let kind = opts
        .task
        .as_deref()
        .ok_or_else(|| CliError::Usage("--task copy|repeat|passkey is required".into()))?;
    if out.exists() && !d.overwrite {
        return Err(Error::io(
            out,
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "output exists; set data.overwrite to replace it",
            ),
        )
        .into());
    }
    let filler = FillerModel::new(cfg.model.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let docs = match kind {
        "copy" => {
            let seg = d.segment_len.unwrap_or_else(|| segment_len(d.doc_len));
            gen_copy_corpus_with(&filler, &mut rng, d.n_docs, d.doc_len, seg)?
        }
        "repeat" => (0..d.n_docs)
            .map(|_| gen_repeat_doc(&filler, d.doc_len, &mut rng))
            .collect::<std::result::Result<_, Error>>()?,
        "passkey" => (0..d.n_docs)
            .map(|_| {
                let p = gen_passkey_doc(&filler, &mut rng, d.doc_len, d.key_digits)?;
                let mut t = p.tokens;
                if d.with_answer {
                    t.extend(p.answer);
                }
                Ok(t)
            })
            .collect::<std::result::Result<_, Error>>()?,
        other => {
            return Err(CliError::Usage(format!(
                "unknown data kind {other:?}; valid kinds: copy, repeat, passkey"
            )))
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_corpus(out, &docs)?;
    Ok(())
}
