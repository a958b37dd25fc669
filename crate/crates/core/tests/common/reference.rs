//! Independent f64 reference implementations used as finite-difference
//! oracles. Nothing here calls into the tape.
#![allow(dead_code)]

use focusdec_core::focus::{ChunkPlan, FocusParams};
use focusdec_core::model::BaseParams;
use focusdec_core::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(r * c, d.len());
        Self { r, c, d }
    }

    pub fn zeros(r: usize, c: usize) -> Self {
        Self::new(r, c, vec![0.0; r * c])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.rows(), t.cols(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }

    pub fn t(&self) -> M {
        let mut out = M::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[j * self.r + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn cols(&self, start: usize, end: usize) -> M {
        let mut d = Vec::new();
        for i in 0..self.r {
            d.extend_from_slice(&self.row(i)[start..end]);
        }
        M::new(self.r, end - start, d)
    }

    pub fn vstack(parts: &[&M]) -> M {
        let c = parts[0].c;
        let mut d = Vec::new();
        let mut r = 0;
        for p in parts {
            assert_eq!(p.c, c);
            d.extend_from_slice(&p.d);
            r += p.r;
        }
        M::new(r, c, d)
    }

    pub fn hstack(parts: &[&M]) -> M {
        let r = parts[0].r;
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                d.extend_from_slice(p.row(i));
            }
        }
        M::new(r, c, d)
    }

    pub fn add(&self, o: &M) -> M {
        M::new(self.r, self.c, self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect())
    }

    pub fn mul(&self, o: &M) -> M {
        M::new(self.r, self.c, self.d.iter().zip(&o.d).map(|(a, b)| a * b).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M::new(self.r, self.c, self.d.iter().map(|&v| f(v)).collect())
    }
}

pub fn matmul(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut out = M::zeros(a.r, b.c);
    for i in 0..a.r {
        for p in 0..a.c {
            let av = a.at(i, p);
            for j in 0..b.c {
                out.d[i * b.c + j] += av * b.at(p, j);
            }
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Row softmax with a visibility predicate.
pub fn softmax_masked(x: &M, visible: impl Fn(usize, usize) -> bool) -> M {
    let mut out = M::zeros(x.r, x.c);
    for i in 0..x.r {
        let max = (0..x.c)
            .filter(|&j| visible(i, j))
            .map(|j| x.at(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..x.c {
            if visible(i, j) {
                let e = (x.at(i, j) - max).exp();
                out.d[i * x.c + j] = e;
                sum += e;
            }
        }
        for j in 0..x.c {
            out.d[i * x.c + j] /= sum;
        }
    }
    out
}

pub fn softmax(x: &M) -> M {
    softmax_masked(x, |_, _| true)
}

pub fn rmsnorm(x: &M, g: &[f64]) -> M {
    let mut out = M::zeros(x.r, x.c);
    for i in 0..x.r {
        let ms = x.row(i).iter().map(|v| v * v).sum::<f64>() / x.c as f64;
        let inv = 1.0 / (ms + 1e-5).sqrt();
        for j in 0..x.c {
            out.d[i * x.c + j] = x.at(i, j) * inv * g[j];
        }
    }
    out
}

pub fn rope(x: &M, positions: &[usize], theta: f64, head_dim: usize) -> M {
    let mut out = x.clone();
    for (i, &pos) in positions.iter().enumerate() {
        for h in 0..x.c / head_dim {
            for p in 0..head_dim / 2 {
                let ang = pos as f64 * theta.powf(-2.0 * p as f64 / head_dim as f64);
                let (s, c) = ang.sin_cos();
                let a = x.at(i, h * head_dim + 2 * p);
                let b = x.at(i, h * head_dim + 2 * p + 1);
                out.d[i * x.c + h * head_dim + 2 * p] = a * c - b * s;
                out.d[i * x.c + h * head_dim + 2 * p + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Multi-head attention; prefix columns always visible, the rest causal.
pub fn attention(q: &M, k: &M, v: &M, n_heads: usize, prefix: usize) -> M {
    let hd = q.c / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::new();
    for h in 0..n_heads {
        let qh = q.cols(h * hd, (h + 1) * hd);
        let kh = k.cols(h * hd, (h + 1) * hd);
        let vh = v.cols(h * hd, (h + 1) * hd);
        let s = matmul(&qh, &kh.t()).map(|x| x * scale);
        let p = softmax_masked(&s, |i, j| j < prefix || j - prefix <= i);
        heads.push(matmul(&p, &vh));
    }
    let refs: Vec<&M> = heads.iter().collect();
    M::hstack(&refs)
}

pub fn cross_entropy(logits: &M, targets: &[u32]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t as usize];
    }
    total / targets.len() as f64
}

pub fn embedding(table: &M, ids: &[u32]) -> M {
    let mut d = Vec::new();
    for &id in ids {
        d.extend_from_slice(table.row(id as usize));
    }
    M::new(ids.len(), table.c, d)
}

pub struct RefLayer {
    pub attn_norm: Vec<f64>,
    pub wq: M,
    pub wk: M,
    pub wv: M,
    pub wo: M,
    pub ffn_norm: Vec<f64>,
    pub w_gate: M,
    pub w_up: M,
    pub w_down: M,
}

pub struct RefModel {
    pub n_heads: usize,
    pub theta: f64,
    pub embed: M,
    pub layers: Vec<RefLayer>,
    pub final_norm: Vec<f64>,
}

/// Focus projections per layer: (W'_Q, W'_K, W'_V, W'_O).
pub type RefFocus = Vec<[M; 4]>;

impl RefModel {
    pub fn from_params(p: &BaseParams) -> Self {
        let v = |t: &Tensor| t.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
        Self {
            n_heads: p.config.n_heads,
            theta: p.config.rope_theta as f64,
            embed: M::from_tensor(&p.tok_embed),
            layers: p
                .layers
                .iter()
                .map(|l| RefLayer {
                    attn_norm: v(&l.attn_norm),
                    wq: M::from_tensor(&l.wq),
                    wk: M::from_tensor(&l.wk),
                    wv: M::from_tensor(&l.wv),
                    wo: M::from_tensor(&l.wo),
                    ffn_norm: v(&l.ffn_norm),
                    w_gate: M::from_tensor(&l.w_gate),
                    w_up: M::from_tensor(&l.w_up),
                    w_down: M::from_tensor(&l.w_down),
                })
                .collect(),
            final_norm: v(&p.final_norm),
        }
    }

    fn head_dim(&self) -> usize {
        self.embed.c / self.n_heads
    }

    fn ffn(&self, l: &RefLayer, x: &M) -> M {
        let h = rmsnorm(x, &l.ffn_norm);
        let g = matmul(&h, &l.w_gate).map(silu);
        let u = matmul(&h, &l.w_up);
        x.add(&matmul(&g.mul(&u), &l.w_down))
    }

    /// Returns (logits, per-layer (K, V) of the new tokens).
    pub fn forward(&self, tokens: &[u32], positions: &[usize], prefix: Option<&[(M, M)]>) -> (M, Vec<(M, M)>) {
        let mut x = embedding(&self.embed, tokens);
        let mut kv = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let h = rmsnorm(&x, &l.attn_norm);
            let q = rope(&matmul(&h, &l.wq), positions, self.theta, self.head_dim());
            let k = rope(&matmul(&h, &l.wk), positions, self.theta, self.head_dim());
            let v = matmul(&h, &l.wv);
            let (keys, values, plen) = match prefix {
                Some(p) if p[i].0.r > 0 => (M::vstack(&[&p[i].0, &k]), M::vstack(&[&p[i].1, &v]), p[i].0.r),
                _ => (k.clone(), v.clone(), 0),
            };
            kv.push((k, v));
            let a = attention(&q, &keys, &values, self.n_heads, plen);
            x = x.add(&matmul(&a, &l.wo));
            x = self.ffn(l, &x);
        }
        let h = rmsnorm(&x, &self.final_norm);
        (matmul(&h, &self.embed.t()), kv)
    }

    /// Next-token loss over `tokens` from position 0.
    pub fn lm_loss(&self, tokens: &[u32]) -> f64 {
        let n = tokens.len();
        let pos: Vec<usize> = (0..n - 1).collect();
        let (logits, _) = self.forward(&tokens[..n - 1], &pos, None);
        cross_entropy(&logits, &tokens[1..])
    }

    /// Parameter `t` in canonical checkpoint order, flattened.
    pub fn param_mut(&mut self, t: usize) -> &mut Vec<f64> {
        let per = 9;
        if t == 0 {
            return &mut self.embed.d;
        }
        if t == 1 + per * self.layers.len() {
            return &mut self.final_norm;
        }
        let l = &mut self.layers[(t - 1) / per];
        match (t - 1) % per {
            0 => &mut l.attn_norm,
            1 => &mut l.wq.d,
            2 => &mut l.wk.d,
            3 => &mut l.wv.d,
            4 => &mut l.wo.d,
            5 => &mut l.ffn_norm,
            6 => &mut l.w_gate.d,
            7 => &mut l.w_up.d,
            _ => &mut l.w_down.d,
        }
    }

    /// Candidate (K_e, V_e) per layer for one augmented chunk.
    pub fn candidate(&self, focus: &RefFocus, augmented: &[u32]) -> Vec<(M, M)> {
        let n = augmented.len();
        let pos: Vec<usize> = (0..n - 1).collect();
        let (_, ordinary) = self.forward(&augmented[..n - 1], &pos, None);
        let mut x = embedding(&self.embed, &augmented[n - 1..]);
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let [wq, wk, wv, wo] = &focus[i];
            let h = rmsnorm(&x, &l.attn_norm);
            let q = rope(&matmul(&h, wq), &[n - 1], self.theta, self.head_dim());
            let k = rope(&matmul(&h, wk), &[n - 1], self.theta, self.head_dim());
            let v = matmul(&h, wv);
            let keys = M::vstack(&[&ordinary[i].0, &k]);
            let values = M::vstack(&[&ordinary[i].1, &v]);
            let a = attention(&q, &keys, &values, self.n_heads, n - 1);
            x = x.add(&matmul(&a, wo));
            x = self.ffn(l, &x);
            out.push((k, v));
        }
        out
    }

    /// Mean next-token loss over the local tokens, conditioned on every chunk's candidate.
    pub fn focus_loss(&self, focus: &RefFocus, plan: &ChunkPlan) -> f64 {
        let cands: Vec<Vec<(M, M)>> = (0..plan.num_chunks())
            .map(|i| self.candidate(focus, &plan.augmented(i).unwrap()))
            .collect();
        let prefix: Vec<(M, M)> = (0..self.layers.len())
            .map(|l| {
                let ks: Vec<&M> = cands.iter().map(|c| &c[l].0).collect();
                let vs: Vec<&M> = cands.iter().map(|c| &c[l].1).collect();
                (M::vstack(&ks), M::vstack(&vs))
            })
            .collect();
        let pos: Vec<usize> = (0..plan.local.len()).collect();
        let (logits, _) = self.forward(&plan.local, &pos, Some(&prefix));
        let n = plan.local.len();
        let head = M::new(n - 1, logits.c, logits.d[..(n - 1) * logits.c].to_vec());
        cross_entropy(&head, &plan.local[1..])
    }
}

pub fn ref_focus(f: &FocusParams) -> RefFocus {
    f.layers
        .iter()
        .map(|l| {
            [
                M::from_tensor(&l.wq),
                M::from_tensor(&l.wk),
                M::from_tensor(&l.wv),
                M::from_tensor(&l.wo),
            ]
        })
        .collect()
}
