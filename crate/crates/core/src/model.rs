//! The frozen base decoder: a small pre-norm transformer with rotary
//! positions, causal attention and per-layer key/value caches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{rope_inplace, Mask, Tensor};

/// Hard cap on `prefix + new tokens` in a single forward call.
pub const MAX_FORWARD_TOKENS: usize = 16_384;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Default context length of the base model.
    pub context_len: usize,
    pub rope_theta: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 512,
            context_len: 128,
            rope_theta: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config("head width must be even for rotary embedding"));
        }
        if self.context_len < 2 {
            return Err(Error::config("context_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

const LAYER_TENSORS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

impl LayerWeights {
    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }
}

/// Weights of the base decoder. The output head is tied to `tok_embed`.
#[derive(Clone, Debug)]
pub struct BaseParams {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
}

impl BaseParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        // Inputs to every projection are RMS-normalized, so 1/sqrt(fan_in) keeps
        // activations and attention logits near unit scale from the first step.
        let std = 1.0 / (d as f32).sqrt();
        let depth = (2.0 * config.n_layers as f32).sqrt();
        let tok_embed = Tensor::randn(&[config.vocab_size, d], 0.02, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::from_fn(&[d], |_| 1.0),
                wq: Tensor::randn(&[d, d], std, rng),
                wk: Tensor::randn(&[d, d], std, rng),
                wv: Tensor::randn(&[d, d], std, rng),
                wo: Tensor::randn(&[d, d], 0.02 / depth, rng),
                ffn_norm: Tensor::from_fn(&[d], |_| 1.0),
                w_gate: Tensor::randn(&[d, ff], std, rng),
                w_up: Tensor::randn(&[d, ff], std, rng),
                w_down: Tensor::randn(&[ff, d], 0.02 / depth, rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_embed,
            layers,
            final_norm: Tensor::from_fn(&[d], |_| 1.0),
        })
    }

    /// Tensors in canonical checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_embed".to_string(), &self.tok_embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    /// Mutable tensors in the order of [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embed];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (config.d_model, config.d_ff);
        let mut out = vec![("tok_embed".to_string(), vec![config.vocab_size, d])];
        for i in 0..config.n_layers {
            let shapes = [
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d, ff],
                vec![d, ff],
                vec![ff, d],
            ];
            for (name, s) in LAYER_TENSORS.iter().zip(shapes) {
                out.push((format!("layers.{i}.{name}"), s));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out
    }

    /// Rebuilds parameters from tensors listed in canonical order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(config);
        if tensors.len() != expected.len() {
            return Err(Error::config(format!(
                "expected {} base tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let tok_embed = it.next().unwrap();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: it.next().unwrap(),
                wq: it.next().unwrap(),
                wk: it.next().unwrap(),
                wv: it.next().unwrap(),
                wo: it.next().unwrap(),
                ffn_norm: it.next().unwrap(),
                w_gate: it.next().unwrap(),
                w_up: it.next().unwrap(),
                w_down: it.next().unwrap(),
            })
            .collect();
        let final_norm = it.next().unwrap();
        Ok(Self {
            config: config.clone(),
            tok_embed,
            layers,
            final_norm,
        })
    }

    /// Places every weight on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BaseVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let tok_embed = leaf(&self.tok_embed);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: leaf(&l.attn_norm),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                ffn_norm: leaf(&l.ffn_norm),
                w_gate: leaf(&l.w_gate),
                w_up: leaf(&l.w_up),
                w_down: leaf(&l.w_down),
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        BaseVars {
            tok_embed,
            layers,
            final_norm,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl LayerVars {
    pub fn all(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Base weights as tape variables, in canonical order.
#[derive(Clone, Debug)]
pub struct BaseVars {
    pub tok_embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
}

impl BaseVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embed];
        for l in &self.layers {
            out.extend(l.all());
        }
        out.push(self.final_norm);
        out
    }
}

/// Cached keys (already rotated) and values for one layer.
#[derive(Clone, Debug)]
pub struct LayerKV {
    pub keys: Tensor,
    pub values: Tensor,
    /// Position of the first cached entry.
    pub start_pos: usize,
}

impl LayerKV {
    pub fn len(&self) -> usize {
        if self.keys.numel() == 0 {
            0
        } else {
            self.keys.rows()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Key/value pair on a tape.
#[derive(Clone, Copy, Debug)]
pub struct KvVars {
    pub keys: Var,
    pub values: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub logits: bool,
    pub hidden: bool,
    /// When false, prefix entries are masked out of every attention row.
    pub prefix_visible: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            logits: true,
            hidden: false,
            prefix_visible: true,
        }
    }
}

pub struct TapeForward {
    pub logits: Option<Var>,
    /// Rotated keys and values of the new tokens, per layer.
    pub kv: Vec<KvVars>,
    /// Residual stream after each layer.
    pub hidden: Vec<Var>,
}

fn check_positions(positions: &[usize], len: usize) -> Result<()> {
    if positions.len() != len {
        return Err(Error::contract(format!(
            "{} positions for {len} tokens",
            positions.len()
        )));
    }
    if positions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("positions must be strictly increasing"));
    }
    Ok(())
}

/// Runs the decoder over `tokens` on `tape`.
///
/// Each query attends to every prefix entry and causally to the new tokens.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &BaseVars,
    tokens: &[u32],
    positions: &[usize],
    prefix: Option<&[KvVars]>,
    opts: ForwardOptions,
) -> Result<TapeForward> {
    if tokens.is_empty() {
        return Err(Error::contract("forward needs at least one token"));
    }
    check_positions(positions, tokens.len())?;
    if let Some(p) = prefix {
        if p.len() != config.n_layers {
            return Err(Error::contract(format!(
                "prefix has {} layers, model has {}",
                p.len(),
                config.n_layers
            )));
        }
    }
    let prefix_len = prefix
        .and_then(|p| p.first())
        .map(|kv| tape.value(kv.keys).numel() / config.d_model)
        .unwrap_or(0);
    if prefix_len + tokens.len() > MAX_FORWARD_TOKENS {
        return Err(Error::contract(format!(
            "{} prefix + {} tokens exceeds cap {MAX_FORWARD_TOKENS}",
            prefix_len,
            tokens.len()
        )));
    }
    let hd = config.head_dim();
    let mask = Mask::Causal {
        prefix: prefix_len,
        prefix_visible: opts.prefix_visible,
        offset: 0,
    };
    let mut x = tape.embedding(vars.tok_embed, tokens)?;
    let mut kv = Vec::with_capacity(config.n_layers);
    let mut hidden = Vec::new();
    for (l, lv) in vars.layers.iter().enumerate() {
        let h = tape.rmsnorm(x, lv.attn_norm)?;
        let q = tape.matmul(h, lv.wq)?;
        let k = tape.matmul(h, lv.wk)?;
        let v = tape.matmul(h, lv.wv)?;
        let q = tape.rope(q, positions, config.rope_theta, hd)?;
        let k = tape.rope(k, positions, config.rope_theta, hd)?;
        kv.push(KvVars { keys: k, values: v });
        let (keys, values) = match prefix {
            Some(p) if prefix_len > 0 => (
                tape.concat_rows(&[p[l].keys, k])?,
                tape.concat_rows(&[p[l].values, v])?,
            ),
            _ => (k, v),
        };
        let a = tape.attention(q, keys, values, config.n_heads, mask)?;
        let o = tape.matmul(a, lv.wo)?;
        x = tape.add(x, o)?;
        x = feed_forward(tape, lv, x)?;
        if opts.hidden {
            hidden.push(x);
        }
    }
    let logits = if opts.logits {
        let h = tape.rmsnorm(x, vars.final_norm)?;
        Some(tape.matmul_nt(h, vars.tok_embed)?)
    } else {
        None
    };
    Ok(TapeForward { logits, kv, hidden })
}

/// Pre-norm SwiGLU block with residual connection.
pub(crate) fn feed_forward(tape: &mut Tape, lv: &LayerVars, x: Var) -> Result<Var> {
    let h = tape.rmsnorm(x, lv.ffn_norm)?;
    let gate = tape.matmul(h, lv.w_gate)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(h, lv.w_up)?;
    let act = tape.mul(gate, up)?;
    let down = tape.matmul(act, lv.w_down)?;
    tape.add(x, down)
}

/// Output of a gradient-free forward pass.
pub struct ForwardResult {
    pub logits: Option<Tensor>,
    pub cache: Vec<LayerKV>,
    pub hidden: Vec<Tensor>,
}

/// Gradient-free forward with explicit options.
pub fn forward_with(
    base: &BaseParams,
    tokens: &[u32],
    prefix: Option<&[LayerKV]>,
    positions: &[usize],
    opts: ForwardOptions,
) -> Result<ForwardResult> {
    let mut tape = Tape::new();
    let vars = base.bind(&mut tape, false);
    let prefix_vars: Option<Vec<KvVars>> = prefix.map(|p| {
        p.iter()
            .map(|kv| KvVars {
                keys: tape.constant(kv.keys.clone()),
                values: tape.constant(kv.values.clone()),
            })
            .collect()
    });
    let out = forward_on_tape(
        &mut tape,
        &base.config,
        &vars,
        tokens,
        positions,
        prefix_vars.as_deref(),
        opts,
    )?;
    let start_pos = positions[0];
    Ok(ForwardResult {
        logits: out.logits.map(|v| tape.value(v).clone()),
        cache: out
            .kv
            .iter()
            .map(|kv| LayerKV {
                keys: tape.value(kv.keys).clone(),
                values: tape.value(kv.values).clone(),
                start_pos,
            })
            .collect(),
        hidden: out.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
    })
}

/// Logits for every input position plus the per-layer KV of the new tokens.
pub fn forward(
    base: &BaseParams,
    tokens: &[u32],
    prefix: Option<&[LayerKV]>,
    positions: &[usize],
) -> Result<(Tensor, Vec<LayerKV>)> {
    let out = forward_with(base, tokens, prefix, positions, ForwardOptions::default())?;
    Ok((out.logits.expect("logits requested"), out.cache))
}

/// Appends `next` to `cache` layer by layer.
pub fn extend_cache(cache: &[LayerKV], next: &[LayerKV]) -> Result<Vec<LayerKV>> {
    cache
        .iter()
        .zip(next)
        .map(|(a, b)| {
            Ok(LayerKV {
                keys: Tensor::concat_rows(&[&a.keys, &b.keys])?,
                values: Tensor::concat_rows(&[&a.values, &b.values])?,
                start_pos: a.start_pos,
            })
        })
        .collect()
}

/// Rotary embedding of a single head's queries or keys (`[t × d_head]`).
pub fn apply_rope(x: &Tensor, positions: &[usize], theta: f32) -> Result<Tensor> {
    let d = x.cols();
    if d % 2 != 0 {
        return Err(Error::contract(format!("rotary embedding needs an even width, got {d}")));
    }
    if positions.len() != x.rows() {
        return Err(Error::Dimension {
            op: "apply_rope",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len()],
        });
    }
    let mut out = x.to_vec();
    rope_inplace(&mut out, d, positions, theta, d, 1.0);
    Tensor::new(x.shape(), out)
}

/// `0..len` as position ids.
pub fn positions_from(start: usize, len: usize) -> Vec<usize> {
    (start..start + len).collect()
}
