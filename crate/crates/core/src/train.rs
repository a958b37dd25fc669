//! Base-model pretraining and dual-loss training of the focus projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::focus::{focus_logits_on_tape, plan_chunks, ChunkPlan, FocusParams};
use crate::model::{forward_on_tape, BaseParams, ForwardOptions, ModelConfig};
use crate::optim::{scheduled_lr, AdamW, AdamWConfig};
use crate::tensor::{digest_bytes, digest_tensors, Tensor};

/// Settings for training the focus projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub linear_decay: bool,
    pub warmup_steps: usize,
    /// Chunk size is drawn from this set for every example.
    pub chunk_sizes: Vec<usize>,
    pub local_len: usize,
    /// Injected local tokens per chunk (clamped to the chunk size).
    pub prompt_len: usize,
    /// Probability that a batch uses the repetition loss.
    pub loss_mix: f64,
    pub seed: u64,
    /// Std of the noise added to the copied projections at initialization.
    pub init_noise: f32,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-4,
            linear_decay: true,
            warmup_steps: 0,
            chunk_sizes: vec![8, 16, 32, 64],
            local_len: 64,
            prompt_len: 16,
            loss_mix: 0.5,
            seed: 0,
            init_noise: 0.01,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let l = model.context_len;
        if self.chunk_sizes.is_empty() {
            return Err(Error::config("chunk_sizes must not be empty"));
        }
        if let Some(&c) = self.chunk_sizes.iter().find(|&&c| c == 0 || c > l) {
            return Err(Error::config(format!("chunk size {c} outside 1..={l}")));
        }
        if self.local_len < 2 || self.local_len > l {
            return Err(Error::config(format!("local_len {} outside 2..={l}", self.local_len)));
        }
        if self.prompt_len == 0 {
            return Err(Error::config("prompt_len must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return Err(Error::config(format!("loss_mix {} outside [0, 1]", self.loss_mix)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Settings for next-token pretraining of the base decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub linear_decay: bool,
    /// Training window; documents longer than this are cropped at random.
    pub seq_len: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            learning_rate: 2e-3,
            warmup_steps: 100,
            linear_decay: true,
            seq_len: 128,
            seed: 0,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.seq_len < 2 || self.seq_len > model.context_len {
            return Err(Error::config(format!(
                "seq_len {} outside 2..={}",
                self.seq_len, model.context_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Continuation,
    Repetition,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<LossKind>,
    pub lr: f32,
    pub grad_norm: f32,
}

/// Independent random stream for one training step, so runs can resume at any step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Local tokens are the document's last `local_len` tokens; the rest is memory.
pub fn make_continuation_example(
    doc: &[u32],
    local_len: usize,
    chunk_size: usize,
    prompt_len: usize,
    context_len: usize,
) -> Result<ChunkPlan> {
    plan_chunks(doc, local_len, chunk_size, prompt_len, context_len)
}

/// The whole document is memory; local tokens are a random contiguous span of it.
pub fn make_repetition_example(
    doc: &[u32],
    local_len: usize,
    chunk_size: usize,
    prompt_len: usize,
    context_len: usize,
    rng: &mut impl Rng,
) -> Result<ChunkPlan> {
    if doc.len() < local_len {
        return Err(Error::NoMemory {
            len: doc.len(),
            local_len,
        });
    }
    let start = rng.gen_range(0..=doc.len() - local_len);
    let local = doc[start..start + local_len].to_vec();
    let plan = ChunkPlan::new(doc.to_vec(), local, chunk_size, prompt_len, context_len)?;
    plan.validate(context_len)?;
    Ok(plan)
}

/// Mean next-token loss over the local tokens on `tape`.
pub fn focus_loss_on_tape(
    tape: &mut Tape,
    base: &BaseParams,
    base_vars: &crate::model::BaseVars,
    focus_vars: &[crate::focus::FocusLayerVars],
    plan: &ChunkPlan,
) -> Result<Var> {
    let n = plan.local.len();
    if n < 2 {
        return Err(Error::contract("loss needs at least two local tokens"));
    }
    let logits = focus_logits_on_tape(tape, base, base_vars, focus_vars, plan)?;
    let head = tape.slice_rows(logits, 0, n - 1)?;
    tape.cross_entropy(head, &plan.local[1..])
}

/// Value of the focus loss without gradients.
pub fn focus_loss(plan: &ChunkPlan, base: &BaseParams, focus: &FocusParams) -> Result<f32> {
    let mut tape = Tape::new();
    let bv = base.bind(&mut tape, false);
    let fv = focus.bind(&mut tape, false);
    let l = focus_loss_on_tape(&mut tape, base, &bv, &fv, plan)?;
    Ok(tape.value(l).item())
}

/// Focus loss and its gradient for every focus tensor, in canonical order.
pub fn focus_loss_and_grads(
    plan: &ChunkPlan,
    base: &BaseParams,
    focus: &FocusParams,
) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let bv = base.bind(&mut tape, false);
    let fv = focus.bind(&mut tape, true);
    let l = focus_loss_on_tape(&mut tape, base, &bv, &fv, plan)?;
    tape.backward(l)?;
    let grads = fv
        .iter()
        .flat_map(|v| [v.wq, v.wk, v.wv, v.wo])
        .map(|v| grad_or_zero(&tape, v))
        .collect();
    Ok((tape.value(l).item(), grads))
}

fn grad_or_zero(tape: &Tape, v: Var) -> Vec<f32> {
    tape.grad(v)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
}

fn accumulate(total: &mut [Vec<f32>], grads: &[Vec<f32>]) {
    for (t, g) in total.iter_mut().zip(grads) {
        t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

fn scale_all(grads: &mut [Vec<f32>], s: f32) {
    grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
}

/// Digest of the frozen decoder's weights.
pub fn base_digest(base: &BaseParams) -> String {
    let named = base.named_tensors();
    digest_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)))
}

pub fn focus_digest(focus: &FocusParams) -> String {
    let named = focus.named_tensors();
    digest_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// A sampled batch: one loss kind, one plan per example.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub kind: LossKind,
    pub plans: Vec<ChunkPlan>,
}

/// Draws the batch for `step`; a pure function of the config, corpus and step.
pub fn sample_batch(
    config: &TrainConfig,
    model: &ModelConfig,
    corpus: &[Vec<u32>],
    step: usize,
) -> Result<TrainBatch> {
    let mut rng = step_rng(config.seed, step);
    let kind = if rng.gen_bool(config.loss_mix) {
        LossKind::Repetition
    } else {
        LossKind::Continuation
    };
    let mut plans = Vec::with_capacity(config.batch_size);
    let mut attempts = 0;
    while plans.len() < config.batch_size {
        attempts += 1;
        if corpus.is_empty() || attempts > 100 * config.batch_size {
            return Err(Error::contract(format!(
                "corpus has no document longer than local_len {}",
                config.local_len
            )));
        }
        let doc = &corpus[rng.gen_range(0..corpus.len())];
        let chunk = config.chunk_sizes[rng.gen_range(0..config.chunk_sizes.len())];
        let plan = match kind {
            LossKind::Continuation => make_continuation_example(
                doc,
                config.local_len,
                chunk,
                config.prompt_len,
                model.context_len,
            ),
            LossKind::Repetition => make_repetition_example(
                doc,
                config.local_len,
                chunk,
                config.prompt_len,
                model.context_len,
                &mut rng,
            ),
        };
        match plan {
            Ok(p) => plans.push(p),
            Err(Error::NoMemory { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(TrainBatch { kind, plans })
}

/// Optimizer state and step counter for focus training over a fixed base.
pub struct FocusTrainer<'a> {
    pub base: &'a BaseParams,
    pub focus: FocusParams,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: usize,
}

impl<'a> FocusTrainer<'a> {
    /// Fresh focus parameters initialized from the base projections.
    pub fn new(base: &'a BaseParams, config: TrainConfig) -> Result<Self> {
        config.validate(&base.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let focus = FocusParams::init_from_base(base, config.init_noise, &mut rng);
        Self::resume(base, config, focus, None, 0)
    }

    /// Continues from saved focus parameters and optimizer moments.
    pub fn resume(
        base: &'a BaseParams,
        config: TrainConfig,
        focus: FocusParams,
        optimizer: Option<AdamW>,
        step: usize,
    ) -> Result<Self> {
        config.validate(&base.config)?;
        focus.check_compatible(&base.config)?;
        let optimizer = match optimizer {
            Some(o) => o,
            None => {
                let named = focus.named_tensors();
                let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
                AdamW::new(config.optimizer.clone(), &refs)
            }
        };
        Ok(Self {
            base,
            focus,
            optimizer,
            config,
            step,
        })
    }

    pub fn train_step(&mut self, corpus: &[Vec<u32>]) -> Result<StepReport> {
        let batch = sample_batch(&self.config, &self.base.config, corpus, self.step)?;
        let mut total: Vec<Vec<f32>> = self
            .focus
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        let mut loss_sum = 0.0f32;
        for (i, plan) in batch.plans.iter().enumerate() {
            let (loss, grads) = focus_loss_and_grads(plan, self.base, &self.focus)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    example: i,
                    value: loss,
                });
            }
            loss_sum += loss;
            accumulate(&mut total, &grads);
        }
        let b = batch.plans.len() as f32;
        scale_all(&mut total, 1.0 / b);
        let lr = scheduled_lr(
            self.config.learning_rate,
            self.step,
            self.config.steps,
            self.config.warmup_steps,
            self.config.linear_decay,
        );
        let grad_norm = self
            .optimizer
            .update(&mut self.focus.tensors_mut(), &mut total, lr)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: loss_sum / b,
            kind: Some(batch.kind),
            lr,
            grad_norm,
        })
    }
}

/// Next-token loss of the base decoder over `tokens` on a tape.
pub fn lm_loss_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &crate::model::BaseVars,
    tokens: &[u32],
) -> Result<Var> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::contract("loss needs at least two tokens"));
    }
    let positions: Vec<usize> = (0..n - 1).collect();
    let out = forward_on_tape(
        tape,
        config,
        vars,
        &tokens[..n - 1],
        &positions,
        None,
        ForwardOptions::default(),
    )?;
    tape.cross_entropy(out.logits.expect("logits requested"), &tokens[1..])
}

/// Optimizer state for plain next-token training of the base decoder.
pub struct BaseTrainer {
    pub base: BaseParams,
    pub optimizer: AdamW,
    pub config: PretrainConfig,
    pub step: usize,
}

impl BaseTrainer {
    pub fn new(model: &ModelConfig, config: PretrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = BaseParams::init(model, &mut rng)?;
        Self::from_base(base, config)
    }

    /// Continues training existing weights with fresh optimizer state.
    pub fn from_base(base: BaseParams, config: PretrainConfig) -> Result<Self> {
        config.validate(&base.config)?;
        let named = base.named_tensors();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        let optimizer = AdamW::new(config.optimizer.clone(), &refs);
        drop(named);
        Ok(Self {
            base,
            optimizer,
            config,
            step: 0,
        })
    }

    fn sample_windows(&self, corpus: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
        let usable: Vec<&Vec<u32>> = corpus.iter().filter(|d| d.len() >= 2).collect();
        if usable.is_empty() {
            return Err(Error::contract("corpus has no document with two or more tokens"));
        }
        let mut rng = step_rng(self.config.seed, self.step);
        let len = self.config.seq_len;
        Ok((0..self.config.batch_size)
            .map(|_| {
                let doc = usable[rng.gen_range(0..usable.len())];
                if doc.len() <= len {
                    doc.clone()
                } else {
                    let s = rng.gen_range(0..=doc.len() - len);
                    doc[s..s + len].to_vec()
                }
            })
            .collect())
    }

    pub fn train_step(&mut self, corpus: &[Vec<u32>]) -> Result<StepReport> {
        let windows = self.sample_windows(corpus)?;
        let mut total: Vec<Vec<f32>> = self
            .base
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        let mut loss_sum = 0.0f32;
        for (i, w) in windows.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = self.base.bind(&mut tape, true);
            let loss = lm_loss_on_tape(&mut tape, &self.base.config, &vars, w)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    example: i,
                    value,
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars.all().into_iter().map(|v| grad_or_zero(&tape, v)).collect();
            accumulate(&mut total, &grads);
            loss_sum += value;
        }
        let b = windows.len() as f32;
        scale_all(&mut total, 1.0 / b);
        let lr = scheduled_lr(
            self.config.learning_rate,
            self.step,
            self.config.steps,
            self.config.warmup_steps,
            self.config.linear_decay,
        );
        let grad_norm = self
            .optimizer
            .update(&mut self.base.tensors_mut(), &mut total, lr)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: loss_sum / b,
            kind: None,
            lr,
            grad_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuation_partition() {
        let doc: Vec<u32> = (0..256).collect();
        let p = make_continuation_example(&doc, 64, 64, 16, 128).unwrap();
        assert_eq!(p.memory.len(), 192);
        assert_eq!(p.num_chunks(), 3);
        let mut joined = p.memory.clone();
        joined.extend(&p.local);
        assert_eq!(joined, doc);
    }

    #[test]
    fn repetition_forced_span() {
        let doc: Vec<u32> = (0..64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_repetition_example(&doc, 64, 16, 16, 128, &mut rng).unwrap();
        assert_eq!(p.local, doc);
        assert_eq!(p.memory, doc);
        assert!(make_repetition_example(&doc[..10], 64, 16, 16, 128, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let m = ModelConfig::default();
        assert!(TrainConfig::default().validate(&m).is_ok());
        let bad = TrainConfig {
            chunk_sizes: vec![8, 256],
            ..Default::default()
        };
        assert!(bad.validate(&m).is_err());
        let bad = TrainConfig {
            loss_mix: 1.5,
            ..Default::default()
        };
        assert!(bad.validate(&m).is_err());
    }
}
