//! Top-k one-word completions of a prefix.
//!
//! A completion is a token path `w1 .. wn`: `w1` opens a word, the rest are
//! continuation subwords. After the path, the probability of every
//! word-initiating token plus EOS is pooled into one terminate event that
//! closes the word, so the score of a path is
//!
//! ```text
//! log P(w1) + sum log P(wi | .., w(i-1)) + log P(terminate | .., wn)
//! ```
//!
//! Distinct paths are disjoint events, so their probabilities sum to at
//! most one.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CausalLm;
use crate::tokenizer::{BpeTokenizer, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub k: usize,
    pub beam_width: usize,
    pub max_word_tokens: usize,
    /// Let punctuation-only tokens open a completion.
    pub allow_punctuation: bool,
}

impl DecodeOptions {
    /// `k` completions with the default beam of `4k`.
    pub fn new(k: usize) -> Self {
        DecodeOptions {
            k,
            beam_width: 4 * k,
            max_word_tokens: 8,
            allow_punctuation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub word: String,
    pub score: f64,
    pub rank: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completions {
    pub completions: Vec<Completion>,
    /// Set when fewer than `k` distinct words exist.
    pub short: bool,
}

impl Completions {
    pub fn words(&self) -> Vec<&str> {
        self.completions.iter().map(|c| c.word.as_str()).collect()
    }

    /// 0-based rank of `word`, compared case-insensitively.
    pub fn rank_of(&self, word: &str) -> Option<usize> {
        let w = word.to_lowercase();
        self.completions
            .iter()
            .find(|c| c.word.to_lowercase() == w)
            .map(|c| c.rank)
    }
}

/// Token roles precomputed from a vocabulary. A bare boundary marker may
/// open a word whose first letters come in the next token; on its own it
/// is not a word.
struct Roles {
    starters: Vec<u32>,
    bare: Vec<u32>,
    continuations: Vec<u32>,
    openers: Vec<u32>,
    terminators: Vec<usize>,
}

impl Roles {
    fn new<V: Vocabulary + ?Sized>(vocab: &V, allow_punctuation: bool) -> Self {
        let mut roles = Roles {
            starters: Vec::new(),
            bare: Vec::new(),
            continuations: Vec::new(),
            openers: Vec::new(),
            terminators: vec![vocab.eos_id() as usize],
        };
        for id in 0..vocab.vocab_size() as u32 {
            let bytes = vocab.token_bytes(id);
            if vocab.is_word_initiating(id) {
                roles.terminators.push(id as usize);
                if vocab.can_start_word(id, allow_punctuation) {
                    roles.starters.push(id);
                } else if bytes == b" " {
                    roles.bare.push(id);
                }
            } else if !vocab.is_special(id) && !bytes.is_empty() {
                roles.continuations.push(id);
                if allow_punctuation || bytes[0].is_ascii_alphanumeric() || bytes[0] >= 0x80 {
                    roles.openers.push(id);
                }
            }
        }
        roles
    }

    fn is_open(&self, path: &[u32]) -> bool {
        path.len() == 1 && self.bare.contains(&path[0])
    }

    fn extensions(&self, path: &[u32]) -> &[u32] {
        if self.is_open(path) {
            &self.openers
        } else {
            &self.continuations
        }
    }

    fn initial(&self) -> impl Iterator<Item = u32> + '_ {
        self.starters.iter().chain(&self.bare).copied()
    }

    fn terminate_logp(&self, lp: &Array1<f64>) -> f64 {
        let max = self
            .terminators
            .iter()
            .map(|&i| lp[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + self.terminators.iter().map(|&i| (lp[i] - max).exp()).sum::<f64>().ln()
    }
}

/// Surface of a token path with the boundary marker removed.
pub fn word_surface<V: Vocabulary + ?Sized>(vocab: &V, tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .flat_map(|&t| vocab.token_bytes(t).iter().copied())
        .collect();
    let body = bytes.strip_prefix(b" ").unwrap_or(&bytes);
    String::from_utf8_lossy(body).into_owned()
}

fn by_score_then_path(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(&b.1))
}

/// Keeps the best path per case-folded word and ranks the survivors.
fn rank_unique<V: Vocabulary + ?Sized>(vocab: &V, finished: Vec<(f64, Vec<u32>)>, k: usize) -> Completions {
    let mut best: BTreeMap<String, (f64, Vec<u32>, String)> = BTreeMap::new();
    for (score, path) in finished {
        let word = word_surface(vocab, &path);
        let key = word.to_lowercase();
        let better = match best.get(&key) {
            None => true,
            Some((s, p, _)) => by_score_then_path(&(score, path.clone()), &(*s, p.clone())) == Ordering::Less,
        };
        if better {
            best.insert(key, (score, path, word));
        }
    }
    let mut ranked: Vec<(f64, Vec<u32>, String)> = best.into_values().collect();
    ranked.sort_by(|a, b| by_score_then_path(&(a.0, a.1.clone()), &(b.0, b.1.clone())));
    let short = ranked.len() < k;
    ranked.truncate(k);
    Completions {
        completions: ranked
            .into_iter()
            .enumerate()
            .map(|(rank, (score, tokens, word))| Completion {
                word,
                score,
                rank,
                tokens,
            })
            .collect(),
        short,
    }
}

fn check_request<M: CausalLm>(model: &M, prefix: &[u32], k: usize, max_word_tokens: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if prefix.is_empty() {
        return Err(Error::InvalidArgument("empty prefix".into()));
    }
    if max_word_tokens == 0 {
        return Err(Error::InvalidArgument("max_word_tokens must be at least 1".into()));
    }
    if prefix.len() + max_word_tokens > model.context_length() {
        return Err(Error::SequenceTooLong {
            len: prefix.len() + max_word_tokens,
            context_length: model.context_length(),
        });
    }
    Ok(())
}

/// Beam search over one-word paths. `prefix` is the encoded context
/// (normally BOS-initial).
///
/// Search stops once `k` distinct words have finished with scores no lower
/// than the best live hypothesis, or when no hypothesis is left. Extending
/// a path never raises its score, so words found this way are exact with
/// respect to what the beam retained.
pub fn top_k_single_words<M: CausalLm, V: Vocabulary + ?Sized>(
    model: &M,
    vocab: &V,
    prefix: &[u32],
    options: &DecodeOptions,
) -> Result<Completions> {
    let DecodeOptions {
        k,
        beam_width,
        max_word_tokens,
        allow_punctuation,
    } = *options;
    if beam_width < k {
        return Err(Error::InvalidArgument(format!(
            "beam_width {beam_width} is below k = {k}"
        )));
    }
    check_request(model, prefix, k, max_word_tokens)?;
    if vocab.vocab_size() != model.vocab_size() {
        return Err(Error::VocabMismatch(format!(
            "vocabulary has {} tokens, model {}",
            vocab.vocab_size(),
            model.vocab_size()
        )));
    }
    let roles = Roles::new(vocab, allow_punctuation);
    let state = model.prefix_state(prefix)?;
    let first = model.continue_log_probs(&state, &[])?;
    let mut beam: Vec<(f64, Vec<u32>)> = roles
        .initial()
        .map(|t| (first[t as usize], vec![t]))
        .filter(|(s, _)| *s > f64::NEG_INFINITY)
        .collect();
    beam.sort_by(by_score_then_path);
    beam.truncate(beam_width);

    let mut finished: Vec<(f64, Vec<u32>)> = Vec::new();
    let mut finished_words: BTreeMap<String, f64> = BTreeMap::new();
    for depth in 1..=max_word_tokens {
        if beam.is_empty() {
            break;
        }
        let mut next = Vec::new();
        for (score, path) in &beam {
            let lp = model.continue_log_probs(&state, path)?;
            let done = score + roles.terminate_logp(&lp);
            if done > f64::NEG_INFINITY && !roles.is_open(path) {
                let key = word_surface(vocab, path).to_lowercase();
                let entry = finished_words.entry(key).or_insert(f64::NEG_INFINITY);
                *entry = entry.max(done);
                finished.push((done, path.clone()));
            }
            if depth < max_word_tokens {
                for &c in roles.extensions(path) {
                    let s = score + lp[c as usize];
                    if s > f64::NEG_INFINITY {
                        let mut p = path.clone();
                        p.push(c);
                        next.push((s, p));
                    }
                }
            }
        }
        next.sort_by(by_score_then_path);
        next.truncate(beam_width);
        beam = next;
        if let Some(best_live) = beam.first().map(|b| b.0) {
            let mut scores: Vec<f64> = finished_words.values().copied().collect();
            if scores.len() >= k {
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
                if scores[k - 1] > best_live {
                    break;
                }
            }
        }
    }
    Ok(rank_unique(vocab, finished, k))
}

/// Number of single-word paths of at most `max_word_tokens` tokens.
pub fn search_space_size<V: Vocabulary + ?Sized>(vocab: &V, max_word_tokens: usize, allow_punctuation: bool) -> u128 {
    let roles = Roles::new(vocab, allow_punctuation);
    let c = roles.continuations.len() as u128;
    let mut total = 0u128;
    let mut level = roles.starters.len() as u128;
    let mut open = (roles.bare.len() as u128).saturating_mul(roles.openers.len() as u128);
    for depth in 1..=max_word_tokens {
        total = total.saturating_add(level);
        level = level.saturating_mul(c);
        if depth >= 2 {
            total = total.saturating_add(open);
            open = open.saturating_mul(c);
        }
    }
    total
}

/// Every single-word path with its score, without deduplication.
pub fn enumerate_single_words<M: CausalLm, V: Vocabulary + ?Sized>(
    model: &M,
    vocab: &V,
    prefix: &[u32],
    max_word_tokens: usize,
    allow_punctuation: bool,
    budget: u128,
) -> Result<Vec<(f64, Vec<u32>)>> {
    check_request(model, prefix, 1, max_word_tokens)?;
    let size = search_space_size(vocab, max_word_tokens, allow_punctuation);
    if size > budget {
        return Err(Error::SearchTooLarge { size, budget });
    }
    let roles = Roles::new(vocab, allow_punctuation);
    let state = model.prefix_state(prefix)?;
    let first = model.continue_log_probs(&state, &[])?;
    let mut out = Vec::new();
    let initial: Vec<u32> = roles.initial().collect();
    let mut stack: Vec<(f64, Vec<u32>)> = initial.iter().rev().map(|&t| (first[t as usize], vec![t])).collect();
    while let Some((score, path)) = stack.pop() {
        let lp = model.continue_log_probs(&state, &path)?;
        if !roles.is_open(&path) {
            out.push((score + roles.terminate_logp(&lp), path.clone()));
        }
        if path.len() < max_word_tokens {
            for &c in roles.extensions(&path).iter().rev() {
                let mut p = path.clone();
                p.push(c);
                stack.push((score + lp[c as usize], p));
            }
        }
    }
    Ok(out)
}

/// Exact top-k by exhaustive enumeration, scored and deduplicated exactly
/// like [`top_k_single_words`].
pub fn brute_force_single_words<M: CausalLm, V: Vocabulary + ?Sized>(
    model: &M,
    vocab: &V,
    prefix: &[u32],
    k: usize,
    max_word_tokens: usize,
    allow_punctuation: bool,
    budget: u128,
) -> Result<Completions> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let all = enumerate_single_words(model, vocab, prefix, max_word_tokens, allow_punctuation, budget)?;
    let finite = all.into_iter().filter(|(s, _)| *s > f64::NEG_INFINITY).collect();
    Ok(rank_unique(vocab, finite, k))
}

/// BOS plus the encoded prefix with trailing whitespace removed; the
/// boundary marker belongs to the completion's first token.
pub fn encode_prefix(tokenizer: &BpeTokenizer, prefix: &str) -> Vec<u32> {
    let mut ids = vec![tokenizer.bos_id()];
    ids.extend(tokenizer.encode(prefix.trim_end()));
    ids
}

pub fn top_k_for_text<M: CausalLm>(
    model: &M,
    tokenizer: &BpeTokenizer,
    prefix: &str,
    options: &DecodeOptions,
) -> Result<Completions> {
    top_k_single_words(model, tokenizer, &encode_prefix(tokenizer, prefix), options)
}
