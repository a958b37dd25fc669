//! Chunk planning, prompt injection, candidate decoding and memory
//! aggregation.
//!
//! A long sequence is split into memory chunks and local tokens. Each
//! chunk, extended with the trailing local tokens, runs through the frozen
//! decoder; at its final position the attention projections are replaced
//! by [`FocusParams`], producing one candidate key/value pair per layer.
//! The candidates of all chunks form a prefix cache for the frozen forward
//! over the local tokens.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    feed_forward, forward_on_tape, forward_with, BaseParams, BaseVars, ForwardOptions, KvVars,
    LayerKV, ModelConfig,
};
use crate::tensor::{Mask, Tensor};

/// A sequence split into memory chunks and local tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub memory: Vec<u32>,
    /// Disjoint, ordered ranges covering `memory`.
    pub chunks: Vec<Range<usize>>,
    pub local: Vec<u32>,
    /// Trailing local tokens appended to every chunk.
    pub prompt_len: usize,
}

impl ChunkPlan {
    /// A plan without memory; the focus forward reduces to the plain decoder.
    pub fn local_only(local: Vec<u32>) -> Self {
        Self {
            memory: Vec::new(),
            chunks: Vec::new(),
            local,
            prompt_len: 0,
        }
    }

    /// Chunks `memory` into pieces of `chunk_size` (last one possibly shorter).
    pub fn new(
        memory: Vec<u32>,
        local: Vec<u32>,
        chunk_size: usize,
        prompt_len: usize,
        context_len: usize,
    ) -> Result<Self> {
        if chunk_size == 0 || chunk_size > context_len {
            return Err(Error::contract(format!(
                "chunk size {chunk_size} must be in 1..={context_len}"
            )));
        }
        if local.is_empty() || local.len() > context_len {
            return Err(Error::contract(format!(
                "local length {} must be in 1..={context_len}",
                local.len()
            )));
        }
        if prompt_len == 0 {
            return Err(Error::contract("prompt length must be at least 1"));
        }
        let chunks = (0..memory.len())
            .step_by(chunk_size)
            .map(|s| s..(s + chunk_size).min(memory.len()))
            .collect();
        let prompt_len = prompt_len.min(chunk_size).min(local.len());
        Ok(Self {
            memory,
            chunks,
            local,
            prompt_len,
        })
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk(&self, i: usize) -> &[u32] {
        &self.memory[self.chunks[i].clone()]
    }

    /// Chunk `i` followed by the injected prompt.
    pub fn augmented(&self, i: usize) -> Result<Vec<u32>> {
        inject_prompt(self.chunk(i), &self.local, self.prompt_len)
    }

    /// Checks the structural invariants.
    pub fn validate(&self, context_len: usize) -> Result<()> {
        let mut cursor = 0;
        for c in &self.chunks {
            if c.start != cursor || c.end <= c.start || c.len() > context_len {
                return Err(Error::contract(format!("malformed chunk {c:?}")));
            }
            cursor = c.end;
        }
        if cursor != self.memory.len() {
            return Err(Error::contract("chunks do not cover memory"));
        }
        if self.local.is_empty() || self.local.len() > context_len {
            return Err(Error::contract("local length out of range"));
        }
        if !self.chunks.is_empty() {
            let min_chunk = self.chunks.iter().map(|c| c.len()).max().unwrap_or(0);
            if self.prompt_len == 0 || self.prompt_len > self.local.len() || self.prompt_len > min_chunk {
                return Err(Error::contract("prompt length out of range"));
            }
        }
        Ok(())
    }
}

/// Splits `sequence` into memory and its last `local_len` tokens, then chunks the memory.
///
/// Returns [`Error::NoMemory`] when the whole sequence fits in the local window.
pub fn plan_chunks(
    sequence: &[u32],
    local_len: usize,
    chunk_size: usize,
    prompt_len: usize,
    context_len: usize,
) -> Result<ChunkPlan> {
    if local_len == 0 || local_len > context_len {
        return Err(Error::contract(format!(
            "local length {local_len} must be in 1..={context_len}"
        )));
    }
    if sequence.len() <= local_len {
        return Err(Error::NoMemory {
            len: sequence.len(),
            local_len,
        });
    }
    let m = sequence.len() - local_len;
    ChunkPlan::new(
        sequence[..m].to_vec(),
        sequence[m..].to_vec(),
        chunk_size,
        prompt_len,
        context_len,
    )
}

/// Like [`plan_chunks`], falling back to a memory-free plan over the last `local_len` tokens.
pub fn plan_or_local(
    sequence: &[u32],
    local_len: usize,
    chunk_size: usize,
    prompt_len: usize,
    context_len: usize,
) -> Result<ChunkPlan> {
    match plan_chunks(sequence, local_len, chunk_size, prompt_len, context_len) {
        Err(Error::NoMemory { .. }) => Ok(ChunkPlan::local_only(sequence.to_vec())),
        other => other,
    }
}

/// `chunk` followed by the last `prompt_len` local tokens. The final
/// position hosts the candidate token.
pub fn inject_prompt(chunk: &[u32], local: &[u32], prompt_len: usize) -> Result<Vec<u32>> {
    if chunk.is_empty() {
        return Err(Error::contract("cannot inject a prompt into an empty chunk"));
    }
    if prompt_len == 0 || prompt_len > local.len() {
        return Err(Error::contract(format!(
            "prompt length {prompt_len} must be in 1..={}",
            local.len()
        )));
    }
    let mut out = Vec::with_capacity(chunk.len() + prompt_len);
    out.extend_from_slice(chunk);
    out.extend_from_slice(&local[local.len() - prompt_len..]);
    Ok(out)
}

/// Trainable attention projections used only at candidate positions.
#[derive(Clone, Debug)]
pub struct FocusLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug)]
pub struct FocusParams {
    pub layers: Vec<FocusLayer>,
}

#[derive(Clone, Copy, Debug)]
pub struct FocusLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

const FOCUS_TENSORS: [&str; 4] = ["wq", "wk", "wv", "wo"];

impl FocusParams {
    /// Copies of the frozen projections plus Gaussian noise of std `noise`.
    pub fn init_from_base(base: &BaseParams, noise: f32, rng: &mut impl Rng) -> Self {
        let perturb = |t: &Tensor, rng: &mut dyn rand::RngCore| {
            if noise == 0.0 {
                return t.clone();
            }
            let d: Vec<f32> = t
                .data()
                .iter()
                .map(|v| v + crate::tensor::standard_normal(rng) * noise)
                .collect();
            Tensor::from_vec(t.shape().to_vec(), d)
        };
        let layers = base
            .layers
            .iter()
            .map(|l| FocusLayer {
                wq: perturb(&l.wq, rng),
                wk: perturb(&l.wk, rng),
                wv: perturb(&l.wv, rng),
                wo: perturb(&l.wo, rng),
            })
            .collect();
        Self { layers }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in FOCUS_TENSORS.iter().zip([&l.wq, &l.wk, &l.wv, &l.wo]) {
                out.push((format!("focus.layers.{i}.{name}"), t));
            }
        }
        out
    }

    /// Mutable tensors in the order of [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo])
            .collect()
    }

    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        (0..config.n_layers)
            .flat_map(|i| {
                FOCUS_TENSORS
                    .iter()
                    .map(move |n| (format!("focus.layers.{i}.{n}"), vec![d, d]))
            })
            .collect()
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 4 * config.n_layers {
            return Err(Error::config(format!(
                "expected {} focus tensors, got {}",
                4 * config.n_layers,
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let layers = (0..config.n_layers)
            .map(|_| FocusLayer {
                wq: it.next().unwrap(),
                wk: it.next().unwrap(),
                wv: it.next().unwrap(),
                wo: it.next().unwrap(),
            })
            .collect();
        let out = Self { layers };
        out.check_compatible(config)?;
        Ok(out)
    }

    /// Exactly one `[d_model × d_model]` quadruple per base layer.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::config(format!(
                "focus params have {} layers, base has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        let d = config.d_model;
        for (name, t) in self.named_tensors() {
            if t.shape() != [d, d] {
                return Err(Error::config(format!(
                    "{name}: expected [{d}, {d}], got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<FocusLayerVars> {
        self.layers
            .iter()
            .map(|l| FocusLayerVars {
                wq: tape.leaf(l.wq.clone(), trainable),
                wk: tape.leaf(l.wk.clone(), trainable),
                wv: tape.leaf(l.wv.clone(), trainable),
                wo: tape.leaf(l.wo.clone(), trainable),
            })
            .collect()
    }

    pub fn num_matrices(&self) -> usize {
        4 * self.layers.len()
    }
}

/// Per-layer candidate key (rotated) and value, each `[1 × d_model]`.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Candidate {
    pub fn bit_eq(&self, other: &Candidate) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((ka, va), (kb, vb))| ka.bit_eq(kb) && va.bit_eq(vb))
    }
}

/// Stacked candidate keys and values, one row per chunk, per layer.
#[derive(Clone, Debug)]
pub struct CandidateMemory {
    pub layers: Vec<LayerKV>,
}

impl CandidateMemory {
    pub fn len(&self) -> usize {
        self.layers.first().map(|l| l.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row `i` of every layer.
    pub fn candidate(&self, i: usize) -> Result<Candidate> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((l.keys.slice_rows(i, i + 1)?, l.values.slice_rows(i, i + 1)?)))
            .collect::<Result<_>>()?;
        Ok(Candidate { layers })
    }
}

/// Stacks candidates in the given (chunk) order.
pub fn aggregate_memory(candidates: &[Candidate]) -> Result<CandidateMemory> {
    let Some(first) = candidates.first() else {
        return Err(Error::contract("cannot aggregate zero candidates"));
    };
    let n_layers = first.layers.len();
    for c in candidates {
        if c.layers.len() != n_layers
            || c.layers
                .iter()
                .zip(&first.layers)
                .any(|((k, v), (k0, v0))| k.shape() != k0.shape() || v.shape() != v0.shape())
        {
            return Err(Error::contract("candidates have heterogeneous shapes"));
        }
    }
    let layers = (0..n_layers)
        .map(|l| {
            let keys: Vec<&Tensor> = candidates.iter().map(|c| &c.layers[l].0).collect();
            let values: Vec<&Tensor> = candidates.iter().map(|c| &c.layers[l].1).collect();
            Ok(LayerKV {
                keys: Tensor::concat_rows(&keys)?,
                values: Tensor::concat_rows(&values)?,
                start_pos: 0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CandidateMemory { layers })
}

fn check_augmented(config: &ModelConfig, augmented: &[u32]) -> Result<()> {
    if augmented.len() < 2 {
        return Err(Error::contract("augmented chunk needs a chunk token and a prompt token"));
    }
    if augmented.len() > 2 * config.context_len {
        return Err(Error::contract(format!(
            "augmented length {} exceeds cap {}",
            augmented.len(),
            2 * config.context_len
        )));
    }
    Ok(())
}

/// Frozen keys/values of every augmented position except the candidate.
pub fn ordinary_cache(base: &BaseParams, augmented: &[u32]) -> Result<Vec<LayerKV>> {
    check_augmented(&base.config, augmented)?;
    let n = augmented.len();
    let opts = ForwardOptions {
        logits: false,
        hidden: false,
        prefix_visible: true,
    };
    let positions: Vec<usize> = (0..n - 1).collect();
    Ok(forward_with(base, &augmented[..n - 1], None, &positions, opts)?.cache)
}

/// Candidate path on a tape.
pub struct CandidateVars {
    pub kv: Vec<KvVars>,
    /// Candidate residual stream after each layer (only when requested).
    pub hidden: Vec<Var>,
}

/// Recomputes the final augmented position with the focus projections.
///
/// At every layer the candidate's normalized input `H` yields
/// `Q_e = H·W'_Q`, `K_e = H·W'_K`, `V_e = H·W'_V`; it attends over the
/// chunk's frozen keys plus its own key, and the head-concatenated mix is
/// projected by `W'_O`. Normalization and feed-forward stay frozen.
#[allow(clippy::too_many_arguments)]
pub fn candidate_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    base: &BaseVars,
    focus: &[FocusLayerVars],
    ordinary: &[LayerKV],
    last_token: u32,
    position: usize,
    with_hidden: bool,
) -> Result<CandidateVars> {
    if focus.len() != config.n_layers || ordinary.len() != config.n_layers {
        return Err(Error::config("focus/base layer count mismatch"));
    }
    let hd = config.head_dim();
    let mut x = tape.embedding(base.tok_embed, &[last_token])?;
    let mut kv = Vec::with_capacity(config.n_layers);
    let mut hidden = Vec::new();
    for (l, (lv, fv)) in base.layers.iter().zip(focus).enumerate() {
        let h = tape.rmsnorm(x, lv.attn_norm)?;
        let q = tape.matmul(h, fv.wq)?;
        let k = tape.matmul(h, fv.wk)?;
        let v = tape.matmul(h, fv.wv)?;
        let q = tape.rope(q, &[position], config.rope_theta, hd)?;
        let k = tape.rope(k, &[position], config.rope_theta, hd)?;
        kv.push(KvVars { keys: k, values: v });
        let prev = ordinary[l].len();
        let (keys, values) = if prev > 0 {
            let ok = tape.constant(ordinary[l].keys.clone());
            let ov = tape.constant(ordinary[l].values.clone());
            (tape.concat_rows(&[ok, k])?, tape.concat_rows(&[ov, v])?)
        } else {
            (k, v)
        };
        let mixed = tape.attention(q, keys, values, config.n_heads, Mask::causal(prev))?;
        let o = tape.matmul(mixed, fv.wo)?;
        x = tape.add(x, o)?;
        let last = l + 1 == config.n_layers;
        if with_hidden || !last {
            x = feed_forward(tape, lv, x)?;
        }
        if with_hidden {
            hidden.push(x);
        }
    }
    Ok(CandidateVars { kv, hidden })
}

/// Size bookkeeping for one decoded chunk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Query rows of the chunk's attention map (ordinary positions plus the candidate).
    pub queries: usize,
    /// Key columns of the chunk's attention map.
    pub keys: usize,
    /// Elements held by the chunk's activations at peak.
    pub live_elements: usize,
}

impl DecodeStats {
    pub fn score_elements(&self) -> u64 {
        self.queries as u64 * self.keys as u64
    }
}

fn decode_impl(
    augmented: &[u32],
    base: &BaseParams,
    focus: &FocusParams,
    with_hidden: bool,
) -> Result<(Candidate, Vec<Tensor>, DecodeStats)> {
    focus.check_compatible(&base.config)?;
    check_augmented(&base.config, augmented)?;
    let n = augmented.len();
    let mut tape = Tape::new();
    let base_vars = base.bind(&mut tape, false);
    let opts = ForwardOptions {
        logits: false,
        hidden: false,
        prefix_visible: true,
    };
    let positions: Vec<usize> = (0..n - 1).collect();
    let ord = forward_on_tape(
        &mut tape,
        &base.config,
        &base_vars,
        &augmented[..n - 1],
        &positions,
        None,
        opts,
    )?;
    let ordinary: Vec<LayerKV> = ord
        .kv
        .iter()
        .map(|kv| LayerKV {
            keys: tape.value(kv.keys).clone(),
            values: tape.value(kv.values).clone(),
            start_pos: 0,
        })
        .collect();
    let focus_vars = focus.bind(&mut tape, false);
    let cand = candidate_on_tape(
        &mut tape,
        &base.config,
        &base_vars,
        &focus_vars,
        &ordinary,
        augmented[n - 1],
        n - 1,
        with_hidden,
    )?;
    let stats = DecodeStats {
        queries: n,
        keys: n,
        live_elements: tape.live_elements(),
    };
    let candidate = Candidate {
        layers: cand
            .kv
            .iter()
            .map(|kv| (tape.value(kv.keys).clone(), tape.value(kv.values).clone()))
            .collect(),
    };
    let hidden = cand.hidden.iter().map(|&h| tape.value(h).clone()).collect();
    Ok((candidate, hidden, stats))
}

/// Candidate key/value states of one augmented chunk.
pub fn decode_candidate(augmented: &[u32], base: &BaseParams, focus: &FocusParams) -> Result<Candidate> {
    Ok(decode_impl(augmented, base, focus, false)?.0)
}

/// Candidate plus its residual stream after every layer.
pub fn decode_candidate_traced(
    augmented: &[u32],
    base: &BaseParams,
    focus: &FocusParams,
) -> Result<(Candidate, Vec<Tensor>)> {
    let (c, h, _) = decode_impl(augmented, base, focus, true)?;
    Ok((c, h))
}

pub fn decode_candidate_profiled(
    augmented: &[u32],
    base: &BaseParams,
    focus: &FocusParams,
) -> Result<(Candidate, DecodeStats)> {
    let (c, _, s) = decode_impl(augmented, base, focus, false)?;
    Ok((c, s))
}

/// Decodes chunks in the order given by `order` and stacks them in chunk order.
pub fn compute_memory_in_order(
    plan: &ChunkPlan,
    base: &BaseParams,
    focus: &FocusParams,
    order: &[usize],
) -> Result<Option<CandidateMemory>> {
    let k = plan.num_chunks();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..k).collect::<Vec<_>>() {
        return Err(Error::contract("processing order must be a permutation of the chunks"));
    }
    if k == 0 {
        return Ok(None);
    }
    let mut slots: Vec<Option<Candidate>> = vec![None; k];
    for &i in order {
        slots[i] = Some(decode_candidate(&plan.augmented(i)?, base, focus)?);
    }
    let cands: Vec<Candidate> = slots.into_iter().map(|c| c.expect("filled")).collect();
    aggregate_memory(&cands).map(Some)
}

/// Candidate memory of every chunk; `parallel` decodes chunks concurrently.
pub fn compute_memory(
    plan: &ChunkPlan,
    base: &BaseParams,
    focus: &FocusParams,
    parallel: bool,
) -> Result<Option<CandidateMemory>> {
    let k = plan.num_chunks();
    if k == 0 {
        return Ok(None);
    }
    let decode = |i: usize| decode_candidate(&plan.augmented(i)?, base, focus);
    let cands: Vec<Candidate> = if parallel {
        (0..k).into_par_iter().map(decode).collect::<Result<_>>()?
    } else {
        (0..k).map(decode).collect::<Result<_>>()?
    };
    aggregate_memory(&cands).map(Some)
}

/// Frozen forward over `local` (positions `0..len`) with the candidate memory as prefix.
pub fn forward_local(base: &BaseParams, local: &[u32], memory: Option<&CandidateMemory>) -> Result<Tensor> {
    let positions: Vec<usize> = (0..local.len()).collect();
    let out = forward_with(
        base,
        local,
        memory.map(|m| m.layers.as_slice()),
        &positions,
        ForwardOptions::default(),
    )?;
    Ok(out.logits.expect("logits requested"))
}

/// Logits over the local tokens conditioned on every chunk's candidate.
pub fn focus_forward(plan: &ChunkPlan, base: &BaseParams, focus: &FocusParams) -> Result<Tensor> {
    let memory = compute_memory(plan, base, focus, false)?;
    forward_local(base, &plan.local, memory.as_ref())
}

/// Local logits on `tape`, differentiable with respect to the focus projections.
pub fn focus_logits_on_tape(
    tape: &mut Tape,
    base: &BaseParams,
    base_vars: &BaseVars,
    focus_vars: &[FocusLayerVars],
    plan: &ChunkPlan,
) -> Result<Var> {
    let config = &base.config;
    let mut per_chunk = Vec::with_capacity(plan.num_chunks());
    for i in 0..plan.num_chunks() {
        let aug = plan.augmented(i)?;
        let ordinary = ordinary_cache(base, &aug)?;
        let cand = candidate_on_tape(
            tape,
            config,
            base_vars,
            focus_vars,
            &ordinary,
            aug[aug.len() - 1],
            aug.len() - 1,
            false,
        )?;
        per_chunk.push(cand.kv);
    }
    let prefix: Option<Vec<KvVars>> = if per_chunk.is_empty() {
        None
    } else {
        Some(
            (0..config.n_layers)
                .map(|l| {
                    let keys: Vec<Var> = per_chunk.iter().map(|c| c[l].keys).collect();
                    let values: Vec<Var> = per_chunk.iter().map(|c| c[l].values).collect();
                    Ok(KvVars {
                        keys: tape.concat_rows(&keys)?,
                        values: tape.concat_rows(&values)?,
                    })
                })
                .collect::<Result<_>>()?,
        )
    };
    let positions: Vec<usize> = (0..plan.local.len()).collect();
    let out = forward_on_tape(
        tape,
        config,
        base_vars,
        &plan.local,
        &positions,
        prefix.as_deref(),
        ForwardOptions::default(),
    )?;
    Ok(out.logits.expect("logits requested"))
}
