//! Checkpoint format: round trip and rejection of malformed files.

use focusdec::checkpoint::{Checkpoint, CheckpointError, MAGIC};
use focusdec_core::focus::FocusParams;
use focusdec_core::model::{BaseParams, ModelConfig};
use focusdec_core::optim::{AdamW, AdamWConfig};
use focusdec_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 64,
        context_len: 16,
        rope_theta: 10000.0,
    }
}

fn sample() -> (Checkpoint, BaseParams, FocusParams) {
    let config = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = BaseParams::init(&config, &mut rng).unwrap();
    let focus = FocusParams::init_from_base(&base, 0.01, &mut rng);
    let mut ck = Checkpoint {
        model: config,
        train_digest: "abc".into(),
        step: 7,
        tensors: Vec::new(),
    };
    ck.push_params(base.named_tensors());
    ck.push_params(focus.named_tensors());
    (ck, base, focus)
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let (ck, base, focus) = sample();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.step, 7);
    assert_eq!(back.train_digest, "abc");
    assert_eq!(back.model, ck.model);
    for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert_eq!(bits(t1), bits(t2));
    }
    let b = back.base().unwrap();
    for ((_, a), (_, c)) in base.named_tensors().iter().zip(b.named_tensors()) {
        assert_eq!(bits(a), bits(c));
    }
    let f = back.focus().unwrap().unwrap();
    for ((_, a), (_, c)) in focus.named_tensors().iter().zip(f.named_tensors()) {
        assert_eq!(bits(a), bits(c));
    }
    assert_eq!(ck.to_bytes(), back.to_bytes());
}

#[test]
fn optimizer_state_round_trips() {
    let (mut ck, _, focus) = sample();
    let names = FocusParams::expected_shapes(&ck.model);
    let named = focus.named_tensors();
    let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
    let mut opt = AdamW::new(AdamWConfig::default(), &refs);
    opt.m[0][3] = 0.5;
    opt.v[1][2] = 0.25;
    ck.push_optimizer(&opt, &names);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let o = back.optimizer(&AdamWConfig::default(), &names).unwrap().unwrap();
    assert_eq!(o.m, opt.m);
    assert_eq!(o.v, opt.v);
    assert_eq!(o.step, 7);
}

#[test]
fn base_only_checkpoint_has_no_focus() {
    let config = tiny();
    let base = BaseParams::init(&config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut ck = Checkpoint {
        model: config,
        train_digest: String::new(),
        step: 0,
        tensors: Vec::new(),
    };
    ck.push_params(base.named_tensors());
    assert!(ck.focus().unwrap().is_none());
}

fn header_len(bytes: &[u8]) -> usize {
    u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

/// Rewrites the JSON header, keeping the payload.
fn with_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
    let n = header_len(bytes);
    let mut h: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
    edit(&mut h);
    let json = serde_json::to_vec(&h).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + n..]);
    out
}

#[test]
fn malformed_files_get_distinct_errors() {
    let (ck, _, _) = sample();
    let good = ck.to_bytes();
    let mut messages = Vec::new();

    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XXXX");
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(matches!(e, CheckpointError::BadMagic(_)));
    messages.push(e.to_string());

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&99u32.to_le_bytes());
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(matches!(e, CheckpointError::Version { found: 99 }));
    messages.push(e.to_string());

    let e = Checkpoint::from_bytes(&good[..good.len() - 4]).unwrap_err();
    assert!(matches!(e, CheckpointError::Truncated { .. }));
    messages.push(e.to_string());

    let bad = with_header(&good, |h| {
        h["tensors"][1]["offset"] = serde_json::json!(0);
    });
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(matches!(e, CheckpointError::Overlap { .. }));
    messages.push(e.to_string());

    let mut bad = good.clone();
    bad.extend_from_slice(&[0, 0, 0, 0]);
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(matches!(e, CheckpointError::Trailing(4)));
    messages.push(e.to_string());

    let e = Checkpoint::from_bytes(&MAGIC[..2]).unwrap_err();
    assert!(matches!(e, CheckpointError::Truncated { .. }));

    let mut unique = messages.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), messages.len(), "{messages:?}");
}

#[test]
fn wrong_shapes_are_content_errors() {
    let (ck, _, _) = sample();
    let bad = with_header(&ck.to_bytes(), |h| {
        h["model"]["d_model"] = serde_json::json!(4);
        h["model"]["d_ff"] = serde_json::json!(16);
    });
    let back = Checkpoint::from_bytes(&bad).unwrap();
    assert!(matches!(back.base(), Err(CheckpointError::Content(_))));
}
