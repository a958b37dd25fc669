//! Synthetic corpora over the toy vocabulary.
//!
//! Ids `0..10` are digits, `10..FILLER_START` are template words, the rest
//! are filler symbols drawn from a fixed sparse Markov chain so that the
//! base model has local statistics to learn.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DIGITS: Range<u32> = 0..10;
pub const THE: u32 = 10;
pub const PASS: u32 = 11;
pub const KEY: u32 = 12;
pub const IS: u32 = 13;
pub const DOT: u32 = 14;
pub const REMEMBER: u32 = 15;
pub const IT: u32 = 16;
pub const WHAT: u32 = 17;
pub const WAS: u32 = 18;
pub const QMARK: u32 = 19;
pub const FILLER_START: u32 = 32;
/// Smallest vocabulary the generators accept.
pub const MIN_VOCAB: usize = 64;

const SUCCESSORS: usize = 4;
const STICKY: f64 = 0.8;
const LANGUAGE_SEED: u64 = 0x5eed_f111;

/// Sparse first-order Markov chain over the filler ids.
///
/// The chain depends only on the vocabulary size, so every corpus drawn for
/// the same vocabulary shares one "language".
#[derive(Clone, Debug)]
pub struct FillerModel {
    vocab_size: u32,
    successors: Vec<[u32; SUCCESSORS]>,
}

impl FillerModel {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            return Err(Error::config(format!(
                "synthetic data needs vocab_size >= {MIN_VOCAB}, got {vocab_size}"
            )));
        }
        let vocab_size = vocab_size as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(LANGUAGE_SEED ^ vocab_size as u64);
        let successors = (FILLER_START..vocab_size)
            .map(|_| std::array::from_fn(|_| rng.gen_range(FILLER_START..vocab_size)))
            .collect();
        Ok(Self {
            vocab_size,
            successors,
        })
    }

    pub fn is_filler(&self, t: u32) -> bool {
        (FILLER_START..self.vocab_size).contains(&t)
    }

    fn uniform(&self, rng: &mut impl Rng) -> u32 {
        rng.gen_range(FILLER_START..self.vocab_size)
    }

    pub fn next(&self, prev: Option<u32>, rng: &mut impl Rng) -> u32 {
        match prev {
            Some(p) if self.is_filler(p) && rng.gen_bool(STICKY) => {
                self.successors[(p - FILLER_START) as usize][rng.gen_range(0..SUCCESSORS)]
            }
            _ => self.uniform(rng),
        }
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut prev = None;
        for _ in 0..len {
            let t = self.next(prev, rng);
            out.push(t);
            prev = Some(t);
        }
        out
    }
}

/// Length of the planted segment in a copy document.
pub fn segment_len(doc_len: usize) -> usize {
    (doc_len / 8).clamp(2, 32)
}

/// A copy document and where its planted segment sits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyDoc {
    pub tokens: Vec<u32>,
    pub source: Range<usize>,
    pub repeat: Range<usize>,
}

/// Filler text whose last `seg_len` tokens repeat a segment that starts in the first quarter.
pub fn gen_copy_doc(
    filler: &FillerModel,
    doc_len: usize,
    seg_len: usize,
    rng: &mut impl Rng,
) -> Result<CopyDoc> {
    let s = seg_len;
    if s == 0 || doc_len < 2 * s {
        return Err(Error::contract(format!(
            "copy document of {doc_len} tokens cannot hold a segment of {s} twice"
        )));
    }
    let mut tokens = filler.sample(doc_len, rng);
    let start = rng.gen_range(0..=(doc_len / 4).min(doc_len - 2 * s));
    let source = start..start + s;
    let repeat = doc_len - s..doc_len;
    let seg = tokens[source.clone()].to_vec();
    tokens[repeat.clone()].copy_from_slice(&seg);
    Ok(CopyDoc {
        tokens,
        source,
        repeat,
    })
}

/// Copy documents with the default [`segment_len`].
pub fn gen_copy_corpus(
    filler: &FillerModel,
    rng: &mut impl Rng,
    n_docs: usize,
    doc_len: usize,
) -> Result<Vec<Vec<u32>>> {
    gen_copy_corpus_with(filler, rng, n_docs, doc_len, segment_len(doc_len))
}

pub fn gen_copy_corpus_with(
    filler: &FillerModel,
    rng: &mut impl Rng,
    n_docs: usize,
    doc_len: usize,
    seg_len: usize,
) -> Result<Vec<Vec<u32>>> {
    (0..n_docs)
        .map(|_| gen_copy_doc(filler, doc_len, seg_len, rng).map(|d| d.tokens))
        .collect()
}

/// A uniform random pattern of 6 to 40 tokens tiled across the document. The period
/// changes from document to document, so predicting the repeats takes content matching
/// rather than a fixed positional offset.
pub fn gen_repeat_doc(filler: &FillerModel, doc_len: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    if doc_len < 2 {
        return Err(Error::contract(format!("repeat documents need >= 2 tokens, got {doc_len}")));
    }
    let period = rng.gen_range(6..=40).min(doc_len - 1);
    let pattern: Vec<u32> = (0..period).map(|_| filler.uniform(rng)).collect();
    Ok(pattern.iter().copied().cycle().take(doc_len).collect())
}

const STATEMENT_HEAD: [u32; 4] = [THE, PASS, KEY, IS];
const STATEMENT_TAIL: [u32; 4] = [DOT, REMEMBER, IT, DOT];
const QUERY: [u32; 10] = [WHAT, WAS, THE, PASS, KEY, QMARK, THE, PASS, KEY, IS];

/// Tokens taken by the statement and the query besides the filler.
pub fn passkey_overhead(key_digits: usize) -> usize {
    STATEMENT_HEAD.len() + key_digits + STATEMENT_TAIL.len() + QUERY.len()
}

/// A passkey retrieval trial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PasskeyDoc {
    /// Filler, the key statement, more filler, then the query; ends right before the answer.
    pub tokens: Vec<u32>,
    pub answer: Vec<u32>,
    /// Where the key digits sit inside `tokens`.
    pub answer_span: Range<usize>,
}

pub fn gen_passkey_doc(
    filler: &FillerModel,
    rng: &mut impl Rng,
    total_len: usize,
    key_digits: usize,
) -> Result<PasskeyDoc> {
    let overhead = passkey_overhead(key_digits);
    if key_digits == 0 || total_len < overhead {
        return Err(Error::contract(format!(
            "passkey document of {total_len} tokens cannot hold a {key_digits}-digit key (needs {overhead})"
        )));
    }
    let answer: Vec<u32> = (0..key_digits).map(|_| rng.gen_range(DIGITS)).collect();
    let mut statement = STATEMENT_HEAD.to_vec();
    statement.extend_from_slice(&answer);
    statement.extend_from_slice(&STATEMENT_TAIL);

    let filler_len = total_len - overhead;
    let offset = rng.gen_range(0..=filler_len);
    let before = filler.sample(offset, rng);
    let after = filler.sample(filler_len - offset, rng);
    let mut tokens = Vec::with_capacity(total_len);
    tokens.extend(before);
    let span_start = tokens.len() + STATEMENT_HEAD.len();
    tokens.extend(statement);
    tokens.extend(after);
    tokens.extend_from_slice(&QUERY);
    Ok(PasskeyDoc {
        tokens,
        answer,
        answer_span: span_start..span_start + key_digits,
    })
}

pub fn write_corpus(path: &Path, docs: &[Vec<u32>]) -> Result<()> {
    let mut out = String::new();
    for doc in docs {
        for (i, t) in doc.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{t}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads one document per non-empty line of whitespace-separated ids.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc = line
            .split_whitespace()
            .map(|w| w.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Corpus {
                path: path.to_path_buf(),
                line: n + 1,
                detail: e.to_string(),
            })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Checks that every id is below `vocab_size`.
pub fn check_vocab(docs: &[Vec<u32>], vocab_size: usize) -> Result<()> {
    for (i, d) in docs.iter().enumerate() {
        if let Some(&t) = d.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::contract(format!(
                "document {i} holds token {t} outside vocabulary of {vocab_size}"
            )));
        }
    }
    Ok(())
}
