//! Perplexity, passkey retrieval, sweeps and profiling.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_passkey_doc, FillerModel};
use crate::error::{Error, Result};
use crate::focus::{
    aggregate_memory, compute_memory, decode_candidate_profiled, forward_local, plan_or_local, ChunkPlan,
    DecodeStats, FocusParams,
};
use crate::model::{forward, positions_from, BaseParams};
use crate::tensor::{argmax, nll_of_row, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Perplexity,
    Accuracy,
}

/// One report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub length: usize,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
    pub config_digest: String,
}

/// Inference-time split of long inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusSettings {
    pub local_len: usize,
    pub chunk_size: usize,
    pub prompt_len: usize,
}

/// A way of predicting the next token of a long sequence.
#[derive(Clone, Copy)]
pub enum Decoder<'a> {
    /// Candidate memory from every chunk plus the frozen forward over the local tokens.
    Focus {
        base: &'a BaseParams,
        focus: &'a FocusParams,
        settings: FocusSettings,
    },
    /// The frozen decoder alone, fed only the last `window` tokens.
    Truncated { base: &'a BaseParams, window: usize },
}

impl<'a> Decoder<'a> {
    fn base(&self) -> &'a BaseParams {
        match *self {
            Decoder::Focus { base, .. } | Decoder::Truncated { base, .. } => base,
        }
    }

    /// Logits over the tokens this decoder actually sees (a suffix of `seq`).
    pub fn visible_logits(&self, seq: &[u32]) -> Result<Tensor> {
        if seq.is_empty() {
            return Err(Error::contract("empty sequence"));
        }
        match *self {
            Decoder::Focus {
                base,
                focus,
                settings,
            } => {
                let plan = plan_or_local(
                    seq,
                    settings.local_len,
                    settings.chunk_size,
                    settings.prompt_len,
                    base.config.context_len,
                )?;
                let memory = compute_memory(&plan, base, focus, false)?;
                forward_local(base, &plan.local, memory.as_ref())
            }
            Decoder::Truncated { base, window } => {
                let w = &seq[seq.len().saturating_sub(window)..];
                Ok(forward(base, w, None, &positions_from(0, w.len()))?.0)
            }
        }
    }

    /// Sum of NLLs of the last `n_score` tokens of `doc` under teacher forcing.
    pub fn window_nll(&self, doc: &[u32], n_score: usize) -> Result<f64> {
        let logits = self.visible_logits(doc)?;
        let seen = logits.rows();
        if n_score == 0 || n_score >= seen {
            return Err(Error::contract(format!(
                "scored window of {n_score} must be shorter than the {seen} visible tokens"
            )));
        }
        let tail = &doc[doc.len() - seen..];
        let mut total = 0.0f64;
        for i in seen - 1 - n_score..seen - 1 {
            total += nll_of_row(logits.row(i), tail[i + 1] as usize) as f64;
        }
        Ok(total)
    }

    /// Greedy continuation of `prompt` by `n` tokens.
    pub fn greedy(&self, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let logits = self.visible_logits(&seq)?;
            let next = argmax(logits.row(logits.rows() - 1)) as u32;
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    }
}

/// Perplexity over the final `n_score` tokens with memory chunks and candidates.
#[allow(clippy::too_many_arguments)]
pub fn perplexity_last_n(
    doc: &[u32],
    n_score: usize,
    local_len: usize,
    chunk_size: usize,
    prompt_len: usize,
    base: &BaseParams,
    focus: &FocusParams,
) -> Result<f64> {
    if n_score >= local_len {
        return Err(Error::contract(format!(
            "scored window {n_score} must fit inside local_len {local_len}"
        )));
    }
    let d = Decoder::Focus {
        base,
        focus,
        settings: FocusSettings {
            local_len,
            chunk_size,
            prompt_len,
        },
    };
    Ok((d.window_nll(doc, n_score)? / n_score as f64).exp())
}

/// Corpus perplexity: exp of the mean NLL over every scored token of every document.
pub fn corpus_perplexity(decoder: &Decoder, docs: &[Vec<u32>], n_score: usize) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::contract("no documents to score"));
    }
    let mut total = 0.0;
    for d in docs {
        total += decoder.window_nll(d, n_score)?;
    }
    Ok((total / (docs.len() * n_score) as f64).exp())
}

/// Exact-match accuracy of greedy key decoding over seeded trials per length.
pub fn passkey_accuracy(
    decoder: &Decoder,
    lengths: &[usize],
    trials: usize,
    key_digits: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let filler = FillerModel::new(decoder.base().config.vocab_size)?;
    lengths
        .iter()
        .map(|&len| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(len as u64);
            let mut hits = 0;
            for _ in 0..trials {
                let trial = gen_passkey_doc(&filler, &mut rng, len, key_digits)?;
                if decoder.greedy(&trial.tokens, key_digits)? == trial.answer {
                    hits += 1;
                }
            }
            Ok((len, hits as f64 / trials.max(1) as f64))
        })
        .collect()
}

/// Corpus perplexity for each chunk size at fixed documents.
pub fn sweep_chunk_size(
    base: &BaseParams,
    focus: &FocusParams,
    docs: &[Vec<u32>],
    sizes: &[usize],
    local_len: usize,
    prompt_len: usize,
    n_score: usize,
) -> Result<Vec<(usize, f64)>> {
    sizes
        .iter()
        .map(|&c| {
            if c == 0 || c > base.config.context_len {
                return Err(Error::contract(format!(
                    "chunk size {c} outside 1..={}",
                    base.config.context_len
                )));
            }
            let d = Decoder::Focus {
                base,
                focus,
                settings: FocusSettings {
                    local_len,
                    chunk_size: c,
                    prompt_len,
                },
            };
            Ok((c, corpus_perplexity(&d, docs, n_score)?))
        })
        .collect()
}

/// Corpus perplexity for each local window length at fixed documents.
pub fn sweep_local_context(
    base: &BaseParams,
    focus: &FocusParams,
    docs: &[Vec<u32>],
    local_lens: &[usize],
    chunk_size: usize,
    prompt_len: usize,
    n_score: usize,
) -> Result<Vec<(usize, f64)>> {
    local_lens
        .iter()
        .map(|&l| {
            let d = Decoder::Focus {
                base,
                focus,
                settings: FocusSettings {
                    local_len: l,
                    chunk_size,
                    prompt_len,
                },
            };
            Ok((l, corpus_perplexity(&d, docs, n_score)?))
        })
        .collect()
}

/// Instrumented focus forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub chunks: usize,
    pub total_len: usize,
    pub memory_len: usize,
    pub local_len: usize,
    pub prompt_len: usize,
    /// Query×key elements of each chunk's attention map (chunk plus prompt).
    pub chunk_score_elements: Vec<u64>,
    /// The same maps restricted to memory tokens (prompt overhead excluded).
    pub memory_score_elements: Vec<u64>,
    /// Local queries × (candidates + local keys) in the final forward.
    pub final_score_elements: u64,
    pub total_score_elements: u64,
    /// Largest single-chunk activation footprint: chunks decoded one at a time.
    pub peak_live_serial: u64,
    /// All chunk footprints held at once: chunks decoded concurrently.
    pub peak_live_parallel: u64,
    pub parallel: bool,
    pub decode_ms: f64,
    pub final_ms: f64,
}

impl ProfileReport {
    pub fn memory_score_total(&self) -> u64 {
        self.memory_score_elements.iter().sum()
    }
}

pub fn profile_run(
    plan: &ChunkPlan,
    base: &BaseParams,
    focus: &FocusParams,
    parallel: bool,
) -> Result<ProfileReport> {
    plan.validate(base.config.context_len)?;
    let k = plan.num_chunks();
    let t0 = Instant::now();
    let decode = |i: usize| -> Result<_> {
        decode_candidate_profiled(&plan.augmented(i)?, base, focus)
    };
    let decoded: Vec<_> = if parallel {
        (0..k).into_par_iter().map(decode).collect::<Result<_>>()?
    } else {
        (0..k).map(decode).collect::<Result<_>>()?
    };
    let decode_ms = t0.elapsed().as_secs_f64() * 1e3;
    let (cands, stats): (Vec<_>, Vec<DecodeStats>) = decoded.into_iter().unzip();
    let memory = if k > 0 { Some(aggregate_memory(&cands)?) } else { None };

    let t1 = Instant::now();
    forward_local(base, &plan.local, memory.as_ref())?;
    let final_ms = t1.elapsed().as_secs_f64() * 1e3;

    let chunk_score_elements: Vec<u64> = stats.iter().map(|s| s.score_elements()).collect();
    let memory_score_elements: Vec<u64> = plan
        .chunks
        .iter()
        .map(|c| (c.len() as u64) * (c.len() as u64))
        .collect();
    let n_local = plan.local.len() as u64;
    let final_score_elements = n_local * (n_local + k as u64);
    let total_score_elements = chunk_score_elements.iter().sum::<u64>() + final_score_elements;
    let lives: Vec<u64> = stats.iter().map(|s| s.live_elements as u64).collect();
    Ok(ProfileReport {
        chunks: k,
        total_len: plan.memory.len() + plan.local.len(),
        memory_len: plan.memory.len(),
        local_len: plan.local.len(),
        prompt_len: plan.prompt_len,
        chunk_score_elements,
        memory_score_elements,
        final_score_elements,
        total_score_elements,
        peak_live_serial: lives.iter().copied().max().unwrap_or(0),
        peak_live_parallel: lives.iter().sum(),
        parallel,
        decode_ms,
        final_ms,
    })
}
