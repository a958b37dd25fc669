//! Gradient checking against central finite differences of the f64 reference.

use focusdec_core::autograd::{Tape, Var};
use focusdec_core::focus::{plan_chunks, FocusParams};
use focusdec_core::model::{BaseParams, ModelConfig};
use focusdec_core::tensor::{Mask, Tensor};
use focusdec_core::train::{focus_loss_and_grads, lm_loss_on_tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::reference::{self as r, M};

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

pub struct Case {
    pub name: &'static str,
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
    reference: Box<dyn Fn(&[M]) -> f64>,
}

fn case(
    name: &'static str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
    reference: impl Fn(&[M]) -> f64 + 'static,
) -> Case {
    Case {
        name,
        inputs: inputs.to_vec(),
        build: Box::new(build),
        reference: Box::new(reference),
    }
}

/// Max |analytic − numeric| over a tensor, relative to the tensor's largest numeric
/// gradient. The numeric side differentiates an independent f64 implementation.
pub fn check_grads(c: &Case) -> f64 {
    let (name, inputs, build, reference) = (c.name, &c.inputs, &c.build, &c.reference);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();

    let base: Vec<M> = inputs.iter().map(as_m).collect();
    let forward_gap = (tape.value(loss).item() as f64 - reference(&base)).abs();
    assert!(forward_gap < 1e-4, "{name}: forward disagrees with reference by {forward_gap}");

    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0f64; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut p = base.clone();
            p[i].d[j] += STEP;
            let lp = reference(&p);
            p[i].d[j] -= 2.0 * STEP;
            let lm = reference(&p);
            *n = (lp - lm) / (2.0 * STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, n)| (a as f64 - n).abs())
            .fold(0.0f64, f64::max)
            / scale;
        worst = worst.max(err);
    }
    worst
}

/// 1-D tensors become a single row.
fn as_m(t: &Tensor) -> M {
    let cols = *t.shape().last().unwrap();
    M::new(t.numel() / cols, cols, t.data().iter().map(|&v| v as f64).collect())
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Reduces any output to a scalar through fixed random weights.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(rand_t(&shape, seed));
    let m = tape.mul(out, w).unwrap();
    tape.sum(m)
}

fn ref_weighted_sum(out: &M, seed: u64) -> f64 {
    let w = rand_t(&[out.r, out.c], seed);
    out.d.iter().zip(w.data()).map(|(a, &b)| a * b as f64).sum()
}

/// Every differentiable primitive, each reduced to a scalar.
pub fn primitive_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    cases.push(case(
        "matmul",
        &[rand_t(&[5, 4], 1), rand_t(&[4, 3], 2)],
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, y, 9)
        },
        |m| ref_weighted_sum(&r::matmul(&m[0], &m[1]), 9),
    ));
    cases.push(case(
        "matmul_nt",
        &[rand_t(&[5, 4], 3), rand_t(&[3, 4], 4)],
        |t, v| {
            let y = t.matmul_nt(v[0], v[1]).unwrap();
            weighted_sum(t, y, 9)
        },
        |m| ref_weighted_sum(&r::matmul(&m[0], &m[1].t()), 9),
    ));
    cases.push(case(
        "matmul_tn",
        &[rand_t(&[4, 5], 5), rand_t(&[4, 3], 6)],
        |t, v| {
            let y = t.matmul_t(v[0], true, v[1], false).unwrap();
            weighted_sum(t, y, 9)
        },
        |m| ref_weighted_sum(&r::matmul(&m[0].t(), &m[1]), 9),
    ));
    cases.push(case(
        "matmul_row",
        &[rand_t(&[1, 4], 7), rand_t(&[4, 6], 8)],
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, y, 9)
        },
        |m| ref_weighted_sum(&r::matmul(&m[0], &m[1]), 9),
    ));
    let ins = [rand_t(&[3, 4], 10), rand_t(&[3, 4], 11)];
    cases.push(case(
        "add",
        &ins,
        |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, y, 12)
        },
        |m| ref_weighted_sum(&m[0].add(&m[1]), 12),
    ));
    cases.push(case(
        "mul",
        &ins,
        |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, y, 12)
        },
        |m| ref_weighted_sum(&m[0].mul(&m[1]), 12),
    ));
    cases.push(case(
        "scale",
        &ins[..1],
        |t, v| {
            let y = t.scale(v[0], -0.7);
            weighted_sum(t, y, 12)
        },
        |m| ref_weighted_sum(&m[0].map(|x| -0.7 * x), 12),
    ));
    cases.push(case(
        "silu",
        &ins[..1],
        |t, v| {
            let y = t.silu(v[0]);
            weighted_sum(t, y, 12)
        },
        |m| ref_weighted_sum(&m[0].map(r::silu), 12),
    ));
    let ins = [rand_t(&[3, 4], 20), rand_t(&[2, 4], 21)];
    cases.push(case(
        "concat_rows",
        &ins,
        |t, v| {
            let y = t.concat_rows(&[v[0], v[1]]).unwrap();
            weighted_sum(t, y, 22)
        },
        |m| ref_weighted_sum(&M::vstack(&[&m[0], &m[1]]), 22),
    ));
    let ins = [rand_t(&[3, 4], 23), rand_t(&[3, 2], 24)];
    cases.push(case(
        "concat_cols",
        &ins,
        |t, v| {
            let y = t.concat_cols(&[v[0], v[1]]).unwrap();
            weighted_sum(t, y, 22)
        },
        |m| ref_weighted_sum(&M::hstack(&[&m[0], &m[1]]), 22),
    ));
    cases.push(case(
        "slice_rows",
        &[rand_t(&[5, 3], 25)],
        |t, v| {
            let y = t.slice_rows(v[0], 1, 4).unwrap();
            weighted_sum(t, y, 22)
        },
        |m| ref_weighted_sum(&M::new(3, 3, m[0].d[3..12].to_vec()), 22),
    ));
    cases.push(case(
        "slice_cols",
        &[rand_t(&[3, 5], 26)],
        |t, v| {
            let y = t.slice_cols(v[0], 2, 5).unwrap();
            weighted_sum(t, y, 22)
        },
        |m| ref_weighted_sum(&m[0].cols(2, 5), 22),
    ));
    cases.push(case(
        "embedding",
        &[rand_t(&[6, 4], 27)],
        |t, v| {
            let y = t.embedding(v[0], &[3, 0, 3, 5]).unwrap();
            weighted_sum(t, y, 22)
        },
        |m| ref_weighted_sum(&r::embedding(&m[0], &[3, 0, 3, 5]), 22),
    ));
    cases.push(case(
        "rmsnorm",
        &[rand_t(&[3, 6], 30), rand_t(&[6], 31)],
        |t, v| {
            let y = t.rmsnorm(v[0], v[1]).unwrap();
            weighted_sum(t, y, 32)
        },
        |m| ref_weighted_sum(&r::rmsnorm(&m[0], &m[1].d), 32),
    ));
    cases.push(case(
        "softmax_rows",
        &[rand_t(&[3, 7], 33)],
        |t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            weighted_sum(t, y, 32)
        },
        |m| ref_weighted_sum(&r::softmax(&m[0]), 32),
    ));
    cases.push(case(
        "rope",
        &[rand_t(&[4, 8], 34)],
        |t, v| {
            let y = t.rope(v[0], &[0, 3, 7, 20], 10_000.0, 4).unwrap();
            weighted_sum(t, y, 32)
        },
        |m| ref_weighted_sum(&r::rope(&m[0], &[0, 3, 7, 20], 10_000.0, 4), 32),
    ));
    let ins = [rand_t(&[3, 8], 40), rand_t(&[5, 8], 41), rand_t(&[5, 8], 42)];
    cases.push(case(
        "attention",
        &ins,
        |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, Mask::causal(2)).unwrap();
            weighted_sum(t, y, 43)
        },
        |m| ref_weighted_sum(&r::attention(&m[0], &m[1], &m[2], 2, 2), 43),
    ));
    const TARGETS: [u32; 6] = [1, 9, 0, 4, 4, 7];
    cases.push(case(
        "cross_entropy",
        &[rand_t(&[6, 10], 50)],
        |t, v| t.cross_entropy(v[0], &TARGETS).unwrap(),
        |m| r::cross_entropy(&m[0], &TARGETS),
    ));
    let ins = [rand_t(&[4, 5], 60), rand_t(&[5, 8], 61), rand_t(&[8, 3], 62)];
    cases.push(case(
        "mlp",
        &ins,
        |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.silu(h);
            let y = t.matmul(h, v[2]).unwrap();
            t.cross_entropy(y, &[0, 2, 1, 2]).unwrap()
        },
        |m| {
            let h = r::matmul(&m[0], &m[1]).map(r::silu);
            r::cross_entropy(&r::matmul(&h, &m[2]), &[0, 2, 1, 2])
        },
    ));
    cases
}

pub fn small_model() -> (BaseParams, FocusParams) {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 24,
        context_len: 32,
        rope_theta: 10000.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Larger weights than the default init, so the candidate path carries real signal.
    let tensors = BaseParams::expected_shapes(&config)
        .iter()
        .map(|(name, shape)| {
            if shape.len() == 1 {
                Tensor::from_fn(shape, |_| 1.0)
            } else {
                let std = if name == "tok_embed" { 1.0 } else { 0.3 };
                Tensor::randn(shape, std, &mut rng)
            }
        })
        .collect();
    let base = BaseParams::from_tensors(&config, tensors).unwrap();
    let focus = FocusParams::init_from_base(&base, 0.2, &mut rng);
    (base, focus)
}

/// Worst relative error over the focus projections for the end-to-end focus loss on
/// a two-layer model with two memory chunks.
pub fn focus_loss_grad_error() -> f64 {
    let (base, focus) = small_model();
    let seq: Vec<u32> = (0..20).map(|i| ((i * 7 + 3) % 24) as u32).collect();
    let plan = plan_chunks(&seq, 8, 6, 3, 32).unwrap();
    assert_eq!(plan.num_chunks(), 2);

    let (loss, grads) = focus_loss_and_grads(&plan, &base, &focus).unwrap();
    let model = r::RefModel::from_params(&base);
    let mut rf = r::ref_focus(&focus);
    let reference = model.focus_loss(&rf, &plan);
    assert!((loss as f64 - reference).abs() < 1e-4, "loss {loss} vs reference {reference}");

    let mut worst = 0.0f64;
    for (t, analytic) in grads.iter().enumerate() {
        let (layer, which) = (t / 4, t % 4);
        let mut numeric = vec![0.0f64; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = rf[layer][which].d[j];
            rf[layer][which].d[j] = orig + STEP;
            let lp = model.focus_loss(&rf, &plan);
            rf[layer][which].d[j] = orig - STEP;
            let lm = model.focus_loss(&rf, &plan);
            rf[layer][which].d[j] = orig;
            *n = (lp - lm) / (2.0 * STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // The last layer's query and output projections never reach the candidate's key/value.
        if layer + 1 == rf.len() && (which == 0 || which == 3) {
            assert!(analytic.iter().all(|&a| a == 0.0) && scale < 1e-9);
            continue;
        }
        assert!(scale > 1e-6, "focus tensor {t} has a vanishing gradient");
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, n)| (a as f64 - n).abs())
            .fold(0.0f64, f64::max)
            / scale;
        worst = worst.max(err);
    }
    worst
}

/// Worst relative error over every base parameter for the plain next-token loss,
/// including the tied embedding that is used twice.
pub fn lm_loss_grad_error() -> f64 {
    let (base, _) = small_model();
    let tokens: Vec<u32> = (0..12).map(|i| ((i * 5 + 2) % 24) as u32).collect();
    let mut tape = Tape::new();
    let vars = base.bind(&mut tape, true);
    let loss = lm_loss_on_tape(&mut tape, &base.config, &vars, &tokens).unwrap();
    tape.backward(loss).unwrap();
    let mut model = r::RefModel::from_params(&base);
    let reference = model.lm_loss(&tokens);
    assert!((tape.value(loss).item() as f64 - reference).abs() < 1e-4);

    let mut worst = 0.0f64;
    for (t, v) in vars.all().into_iter().enumerate() {
        let analytic = tape.grad(v).unwrap().to_vec();
        let mut numeric = vec![0.0f64; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = model.param_mut(t)[j];
            model.param_mut(t)[j] = orig + STEP;
            let lp = model.lm_loss(&tokens);
            model.param_mut(t)[j] = orig - STEP;
            let lm = model.lm_loss(&tokens);
            model.param_mut(t)[j] = orig;
            *n = (lp - lm) / (2.0 * STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, n)| (a as f64 - n).abs())
            .fold(0.0f64, f64::max)
            / scale;
        worst = worst.max(err);
    }
    worst
}
