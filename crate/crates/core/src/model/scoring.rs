use serde::{Deserialize, Serialize};

use super::CausalLm;
use crate::corpus::words::word_spans;
use crate::error::{Error, Result};
use crate::tokenizer::{BpeTokenizer, Vocabulary};

/// `-log p(token_t | tokens_<t)` for every position after the first.
pub fn nll<M: CausalLm>(model: &M, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument("need at least two tokens to score".into()));
    }
    let vocab_size = model.vocab_size();
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::UnknownToken { id, vocab_size });
    }
    let lp = model.log_probs(&tokens[..tokens.len() - 1])?;
    Ok(tokens[1..]
        .iter()
        .enumerate()
        .map(|(t, &next)| -lp[[t, next as usize]])
        .collect())
}

/// Per-token NLL for every token after the first, with sliding windows of
/// the model's context length advanced by `stride` (at most
/// `context_length - 1`, so every window keeps one token of context). Each
/// window scores only the tokens no earlier window scored.
pub fn windowed_nll<M: CausalLm>(model: &M, tokens: &[u32], stride: usize) -> Result<Vec<f64>> {
    let ctx = model.context_length();
    if stride == 0 || stride > ctx {
        return Err(Error::InvalidArgument(format!("stride {stride} must be in 1..={ctx}")));
    }
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    if tokens.len() <= ctx {
        return nll(model, tokens);
    }
    let mut out = Vec::with_capacity(tokens.len() - 1);
    let mut scored_until = 1;
    let mut begin = 0;
    loop {
        let end = (begin + ctx).min(tokens.len());
        let values = nll(model, &tokens[begin..end])?;
        // values[i] scores tokens[begin + 1 + i]
        let first_new = scored_until.max(begin + 1);
        out.extend_from_slice(&values[first_new - begin - 1..]);
        scored_until = end;
        if end == tokens.len() {
            break;
        }
        begin += stride.min(ctx - 1);
    }
    Ok(out)
}

/// Corpus perplexity over pre-tokenized sequences.
pub fn perplexity_ids<M: CausalLm>(model: &M, sequences: &[Vec<u32>], stride: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        for v in windowed_nll(model, seq, stride)? {
            total += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no tokens to score".into()));
    }
    Ok((total / count as f64).exp())
}

/// BOS-prefixed token ids of a text.
pub fn bos_encode(tokenizer: &BpeTokenizer, text: &str) -> Vec<u32> {
    let mut ids = vec![tokenizer.bos_id()];
    ids.extend(tokenizer.encode(text));
    ids
}

/// `exp(mean NLL)` over every token of every text, each text BOS-prefixed.
pub fn perplexity<M: CausalLm, S: AsRef<str>>(
    model: &M,
    tokenizer: &BpeTokenizer,
    texts: &[S],
    stride: usize,
) -> Result<f64> {
    let seqs: Vec<Vec<u32>> = texts.iter().map(|t| bos_encode(tokenizer, t.as_ref())).collect();
    perplexity_ids(model, &seqs, stride)
}

/// Total log-probability of a BOS-prefixed sentence and its token count.
pub fn sentence_log_prob<M: CausalLm>(model: &M, tokenizer: &BpeTokenizer, sentence: &str) -> Result<(f64, usize)> {
    let ids = bos_encode(tokenizer, sentence);
    let values = windowed_nll(model, &ids, model.context_length().div_ceil(2).max(1))?;
    Ok((-values.iter().sum::<f64>(), values.len()))
}

/// Surprisal of one word occurrence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordSurprisal {
    pub word: String,
    /// Byte span of the word in the sentence.
    pub start: usize,
    pub end: usize,
    /// Mean NLL of the word's subword tokens.
    pub value: f64,
    pub n_tokens: usize,
}

/// Mean subword NLL of every word of `sentence`. A token belongs to the
/// word its bytes overlap (ignoring the boundary marker); punctuation
/// tokens belong to no word.
pub fn per_word_surprisal<M: CausalLm, V: Vocabulary>(
    model: &M,
    tokenizer: &V,
    encode: impl Fn(&str) -> Vec<u32>,
    sentence: &str,
) -> Result<Vec<WordSurprisal>> {
    let spans = word_spans(sentence);
    if spans.is_empty() {
        return Ok(Vec::new());
    }
    let body = encode(sentence);
    let mut ids = vec![tokenizer.bos_id()];
    ids.extend(&body);
    let values = windowed_nll(model, &ids, model.context_length().div_ceil(2).max(1))?;

    let mut sums = vec![(0.0f64, 0usize); spans.len()];
    let mut pos = 0usize;
    let mut w = 0usize;
    for (&id, &v) in body.iter().zip(&values) {
        let bytes = tokenizer.token_bytes(id);
        let lead = bytes.iter().take_while(|&&b| b == b' ').count();
        let (start, end) = (pos + lead, pos + bytes.len());
        pos += bytes.len();
        if start >= end {
            continue;
        }
        while w < spans.len() && spans[w].1 <= start {
            w += 1;
        }
        if w < spans.len() && spans[w].0 < end {
            sums[w].0 += v;
            sums[w].1 += 1;
        }
    }
    Ok(spans
        .iter()
        .zip(sums)
        .map(|(&(s, e), (total, n))| WordSurprisal {
            word: sentence[s..e].to_lowercase(),
            start: s,
            end: e,
            value: if n == 0 { f64::NAN } else { total / n as f64 },
            n_tokens: n,
        })
        .collect())
}

/// Convenience wrapper of [`per_word_surprisal`] for BPE tokenizers.
pub fn word_surprisals<M: CausalLm>(model: &M, tokenizer: &BpeTokenizer, sentence: &str) -> Result<Vec<WordSurprisal>> {
    per_word_surprisal(model, tokenizer, |s| tokenizer.encode(s), sentence)
}

/// Min-max scaling of one row to [0, 1]; a constant row maps to zeros.
pub fn normalize_row(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / range).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub model: String,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Per-word surprisal of one sentence under several models, each row
/// min-max normalized on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurprisalProfile {
    pub sentence: String,
    pub words: Vec<String>,
    pub rows: Vec<ProfileRow>,
}

pub fn normalize_profile(sentence: &str, rows: Vec<(String, Vec<WordSurprisal>)>) -> Result<SurprisalProfile> {
    let words: Vec<String> = rows
        .first()
        .map(|(_, r)| r.iter().map(|w| w.word.clone()).collect())
        .unwrap_or_default();
    let mut out = Vec::with_capacity(rows.len());
    for (model, row) in rows {
        let these: Vec<&str> = row.iter().map(|w| w.word.as_str()).collect();
        if these != words.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!(
                "model {model} produced a different word segmentation"
            )));
        }
        let raw: Vec<f64> = row.iter().map(|w| w.value).collect();
        out.push(ProfileRow {
            model,
            normalized: normalize_row(&raw),
            raw,
        });
    }
    Ok(SurprisalProfile {
        sentence: sentence.to_string(),
        words,
        rows: out,
    })
}
