use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::{chunks, BpeTokenizer, BASE_SIZE, N_SPECIALS};
use crate::error::{Error, Result};

/// Pairs seen fewer times than this are never merged.
const MIN_PAIR_COUNT: u64 = 2;

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    merged: Reverse<Vec<u8>>,
    left: Reverse<Vec<u8>>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| self.merged.cmp(&other.merged))
            .then_with(|| self.left.cmp(&other.left))
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Word {
    symbols: Vec<u32>,
    count: u64,
}

/// Greedy BPE: repeatedly merges the most frequent adjacent pair within
/// chunks. Ties go to the lexicographically smallest merged byte string,
/// then the smallest left part. Stops at `vocab_size` or when no pair
/// occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<BpeTokenizer> {
    if vocab_size <= BASE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {vocab_size} must exceed the {BASE_SIZE} base symbols"
        )));
    }
    if texts.is_empty() {
        return Err(Error::InvalidArgument("no training texts".into()));
    }

    let mut chunk_counts: HashMap<&[u8], u64> = HashMap::new();
    for text in texts {
        let bytes = text.as_ref().as_bytes();
        for (s, e) in chunks(bytes) {
            *chunk_counts.entry(&bytes[s..e]).or_default() += 1;
        }
    }
    let mut sorted: Vec<(&[u8], u64)> = chunk_counts.into_iter().collect();
    sorted.sort_unstable();
    let mut words: Vec<Word> = sorted
        .into_iter()
        .map(|(c, count)| Word {
            symbols: c.iter().map(|&b| BpeTokenizer::byte_id(b)).collect(),
            count,
        })
        .collect();

    let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); N_SPECIALS as usize];
    tokens.extend((0..=255u8).map(|b| vec![b]));
    let mut known: HashSet<Vec<u8>> = tokens.iter().skip(N_SPECIALS as usize).cloned().collect();

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.symbols.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += w.count;
            where_.entry(pair).or_default().insert(wi);
        }
    }

    let candidate = |pair: (u32, u32), count: u64, tokens: &[Vec<u8>]| {
        let left = tokens[pair.0 as usize].clone();
        let mut merged = left.clone();
        merged.extend_from_slice(&tokens[pair.1 as usize]);
        Candidate {
            count,
            merged: Reverse(merged),
            left: Reverse(left),
            pair,
        }
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&pair, &count)| candidate(pair, count, &tokens))
        .collect();

    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let Some(best) = heap.pop() else { break };
        let current = pair_counts.get(&best.pair).copied().unwrap_or(0);
        if current != best.count {
            continue;
        }
        if current < MIN_PAIR_COUNT {
            break;
        }
        let merged_bytes = best.merged.0;
        if !known.insert(merged_bytes.clone()) {
            // Same surface already exists; never create duplicate tokens.
            pair_counts.remove(&best.pair);
            continue;
        }
        let new_id = tokens.len() as u32;
        tokens.push(merged_bytes);
        merges.push(best.pair);

        let affected: Vec<usize> = {
            let mut v: Vec<usize> = where_.remove(&best.pair).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let w = &mut words[wi];
            for p in w.symbols.windows(2) {
                let pair = (p[0], p[1]);
                if let Some(c) = pair_counts.get_mut(&pair) {
                    *c -= w.count;
                }
                touched.insert(pair);
            }
            let mut next = Vec::with_capacity(w.symbols.len());
            let mut i = 0;
            while i < w.symbols.len() {
                if i + 1 < w.symbols.len() && (w.symbols[i], w.symbols[i + 1]) == best.pair {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(w.symbols[i]);
                    i += 1;
                }
            }
            w.symbols = next;
            for p in w.symbols.windows(2) {
                let pair = (p[0], p[1]);
                *pair_counts.entry(pair).or_default() += w.count;
                where_.entry(pair).or_default().insert(wi);
                touched.insert(pair);
            }
        }
        pair_counts.remove(&best.pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for pair in touched {
            if let Some(&c) = pair_counts.get(&pair) {
                if c == 0 {
                    pair_counts.remove(&pair);
                    where_.remove(&pair);
                } else {
                    heap.push(candidate(pair, c, &tokens));
                }
            }
        }
    }
    debug_assert_eq!(tokens.len(), BASE_SIZE + merges.len());
    BpeTokenizer::from_merges(merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Vocabulary;

    fn merge_strings(tok: &BpeTokenizer) -> Vec<(String, String)> {
        tok.merges()
            .iter()
            .map(|&(a, b)| {
                (
                    String::from_utf8(tok.token_bytes(a).to_vec()).unwrap(),
                    String::from_utf8(tok.token_bytes(b).to_vec()).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn hand_simulated_toy_corpus() {
        let tok = train_bpe(&["aaab aaab"], BASE_SIZE + 2).unwrap();
        assert_eq!(
            merge_strings(&tok),
            vec![("a".to_string(), "a".to_string()), ("aa".to_string(), "a".to_string())]
        );
        assert_eq!(tok.vocab_size(), BASE_SIZE + 2);
    }

    #[test]
    fn single_character_corpus_has_no_merges() {
        let tok = train_bpe(&["a"], BASE_SIZE + 10).unwrap();
        assert!(tok.merges().is_empty());
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        assert!(train_bpe(&["abc"], BASE_SIZE).is_err());
        assert!(train_bpe::<&str>(&[], BASE_SIZE + 5).is_err());
    }

    #[test]
    fn deterministic_retraining() {
        let texts = ["the cat sat on the mat", "a bat and a cat sat", "that hat"];
        let a = train_bpe(&texts, BASE_SIZE + 25).unwrap();
        let b = train_bpe(&texts, BASE_SIZE + 25).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn merges_stay_inside_chunks() {
        let tok = train_bpe(&["ab.ab.ab.ab. x y x y x y"], BASE_SIZE + 50).unwrap();
        for id in 0..tok.vocab_size() as u32 {
            let bytes = tok.token_bytes(id);
            assert_eq!(chunks(bytes).len().min(1), bytes.len().min(1));
            assert!(chunks(bytes).len() <= 1, "token {:?} crosses a chunk", bytes);
        }
    }

    /// Naive re-implementation: recount all pairs from scratch after every
    /// merge.
    fn naive(texts: &[&str], vocab_size: usize) -> Vec<Vec<u8>> {
        let mut words: Vec<(Vec<Vec<u8>>, u64)> = Vec::new();
        let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for t in texts {
            for (s, e) in chunks(t.as_bytes()) {
                *counts.entry(t.as_bytes()[s..e].to_vec()).or_default() += 1;
            }
        }
        for (c, n) in counts {
            words.push((c.iter().map(|&b| vec![b]).collect(), n));
        }
        let mut vocab: HashSet<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut out = Vec::new();
        while BASE_SIZE + out.len() < vocab_size {
            let mut pc: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
            for (syms, n) in &words {
                for p in syms.windows(2) {
                    *pc.entry((p[0].clone(), p[1].clone())).or_default() += n;
                }
            }
            let best = pc
                .into_iter()
                .filter(|((a, b), _)| !vocab.contains(&[a.clone(), b.clone()].concat()))
                .max_by(|x, y| {
                    x.1.cmp(&y.1)
                        .then_with(|| {
                            [&y.0 .0[..], &y.0 .1[..]]
                                .concat()
                                .cmp(&[&x.0 .0[..], &x.0 .1[..]].concat())
                        })
                        .then_with(|| y.0 .0.cmp(&x.0 .0))
                });
            let Some(((a, b), n)) = best else { break };
            if n < MIN_PAIR_COUNT {
                break;
            }
            let merged = [a.clone(), b.clone()].concat();
            vocab.insert(merged.clone());
            out.push(merged.clone());
            for (syms, _) in &mut words {
                let mut next = Vec::new();
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                        next.push(merged.clone());
                        i += 2;
                    } else {
                        next.push(syms[i].clone());
                        i += 1;
                    }
                }
                *syms = next;
            }
        }
        out
    }

    #[test]
    fn incremental_counts_match_naive_recount() {
        let texts = [
            "the station master stood at the station, waiting",
            "she stationed the nation's trains; the nation waited",
            "aaaa aaa aa a bbbb abab baba",
        ];
        let tok = train_bpe(&texts, BASE_SIZE + 60).unwrap();
        let got: Vec<Vec<u8>> = (BASE_SIZE as u32..tok.vocab_size() as u32)
            .map(|id| tok.token_bytes(id).to_vec())
            .collect();
        assert_eq!(got, naive(&texts, BASE_SIZE + 60));
    }
}
