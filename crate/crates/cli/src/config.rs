//! Run configuration: one JSON file drives every command.

use std::fs;
use std::path::{Path, PathBuf};

use focusdec_core::model::ModelConfig;
use focusdec_core::tensor::digest_bytes;
use focusdec_core::train::{PretrainConfig, TrainConfig};
use focusdec_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_score: usize,
    pub local_len: usize,
    pub chunk_size: usize,
    pub prompt_len: usize,
    /// Window of the truncated-context baseline.
    pub truncated_window: usize,
    /// Total document lengths for perplexity.
    pub ppl_lengths: Vec<usize>,
    pub ppl_docs: usize,
    pub passkey_lengths: Vec<usize>,
    pub passkey_trials: usize,
    pub key_digits: usize,
    pub sweep_chunk_sizes: Vec<usize>,
    pub sweep_local_lens: Vec<usize>,
    /// Total length of documents used by the sweeps.
    pub sweep_length: usize,
    pub sweep_docs: usize,
    pub profile_lengths: Vec<usize>,
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_score: 32,
            local_len: 64,
            chunk_size: 64,
            prompt_len: 16,
            truncated_window: 128,
            ppl_lengths: vec![1024],
            ppl_docs: 100,
            passkey_lengths: vec![1024],
            passkey_trials: 100,
            key_digits: 5,
            sweep_chunk_sizes: vec![8, 16, 32, 64],
            sweep_local_lens: vec![32, 64],
            sweep_length: 1024,
            sweep_docs: 20,
            profile_lengths: vec![1024],
            parallel: false,
        }
    }
}

/// Corpus generation for `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub doc_len: usize,
    pub key_digits: usize,
    /// Planted segment length for copy documents; defaults to `doc_len / 8` capped at 32.
    pub segment_len: Option<usize>,
    /// Append the answer to passkey documents (training text rather than queries).
    pub with_answer: bool,
    pub overwrite: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_docs: 1000,
            doc_len: 256,
            key_digits: 5,
            segment_len: None,
            with_answer: true,
            overwrite: false,
        }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub pretrain_corpus: Vec<PathBuf>,
    pub focus_corpus: Vec<PathBuf>,
    /// Base checkpoint that `pretrain` continues from instead of a fresh init.
    pub pretrain_init: Option<PathBuf>,
    /// Frozen base for `train-focus`.
    pub base_checkpoint: Option<PathBuf>,
    /// Partially trained focus checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Model evaluated by `eval`.
    pub checkpoint: Option<PathBuf>,
    /// Documents for `eval`; generated from the eval seed when absent.
    pub eval_corpus: Option<PathBuf>,
    /// Training log; defaults to the output path with `.log` appended.
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Stop focus training after this many completed steps (the schedule still spans `train.steps`).
    pub stop_after: Option<usize>,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.resolve(dir);
        }
        Ok(cfg)
    }

    /// Digest of every setting except file locations, so moving a run does not change it.
    pub fn digest(&self) -> String {
        let settings = RunConfig {
            paths: PathsConfig::default(),
            ..self.clone()
        };
        digest_bytes(&serde_json::to_vec(&settings).expect("config serializes"))
    }
}

impl PathsConfig {
    fn resolve(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        self.pretrain_corpus.iter_mut().for_each(fix);
        self.focus_corpus.iter_mut().for_each(fix);
        for p in [
            &mut self.pretrain_init,
            &mut self.base_checkpoint,
            &mut self.resume,
            &mut self.checkpoint,
            &mut self.eval_corpus,
            &mut self.log,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

/// Digest of a model configuration, used in mismatch messages.
pub fn model_digest(m: &ModelConfig) -> String {
    digest_bytes(&serde_json::to_vec(m).expect("config serializes"))[..16].to_string()
}
