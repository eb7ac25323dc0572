//! Byte-level BPE codec trained per time slice.
//!
//! The base alphabet is the 256 byte values, so any input encodes without
//! unknown tokens. The space byte doubles as the word-boundary marker: a
//! token whose surface begins with it starts a new word. Specials sit at
//! ids 0..3, bytes at 3..259, merged tokens after.

mod pretokenize;
mod train;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub(crate) use pretokenize::{chunks, class_of, ByteClass};
pub use train::train_bpe;

use crate::error::{Error, Result};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const N_SPECIALS: u32 = 3;
pub const BASE_SIZE: usize = N_SPECIALS as usize + 256;
/// Display form of the boundary marker in tokenizer files.
pub const BOUNDARY_MARKER: &str = "\u{2581}";

/// Token classification needed by the word-level decoder.
pub trait Vocabulary {
    fn vocab_size(&self) -> usize;

    fn bos_id(&self) -> u32;

    fn eos_id(&self) -> u32;

    fn is_special(&self, id: u32) -> bool;

    /// Surface bytes of a token; empty for specials and unknown ids.
    fn token_bytes(&self, id: u32) -> &[u8];

    /// True iff the token begins with the boundary marker or is made only
    /// of punctuation and whitespace.
    fn is_word_initiating(&self, id: u32) -> bool {
        if self.is_special(id) {
            return false;
        }
        let bytes = self.token_bytes(id);
        match bytes.first() {
            None => false,
            Some(b' ') => true,
            Some(_) => bytes
                .iter()
                .all(|&b| matches!(class_of(b), ByteClass::Punct | ByteClass::Space)),
        }
    }

    /// Whether the token may open a one-word completion. Without
    /// `allow_punctuation` the token must be a marker followed by a letter
    /// or digit.
    fn can_start_word(&self, id: u32, allow_punctuation: bool) -> bool {
        if !self.is_word_initiating(id) {
            return false;
        }
        let bytes = self.token_bytes(id);
        let body = bytes.strip_prefix(b" ").unwrap_or(bytes);
        match body.first() {
            None => false,
            Some(&b) if allow_punctuation => class_of(b) != ByteClass::Space,
            Some(&b) => bytes[0] == b' ' && matches!(class_of(b), ByteClass::Letter | ByteClass::Digit),
        }
    }

    fn partition(&self) -> VocabPartition {
        let mut part = VocabPartition {
            initiating: Vec::new(),
            continuation: Vec::new(),
            eos: self.eos_id(),
        };
        for id in 0..self.vocab_size() as u32 {
            if id == self.eos_id() {
                continue;
            }
            if self.is_word_initiating(id) {
                part.initiating.push(id);
            } else {
                part.continuation.push(id);
            }
        }
        part
    }
}

/// Split of the vocabulary by [`Vocabulary::is_word_initiating`]. EOS is
/// kept apart; non-EOS specials count as continuation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabPartition {
    pub initiating: Vec<u32>,
    pub continuation: Vec<u32>,
    pub eos: u32,
}

impl VocabPartition {
    pub fn total(&self) -> usize {
        self.initiating.len() + self.continuation.len() + 1
    }
}

/// A hand-specified vocabulary of byte pieces, for toy models.
#[derive(Clone, Debug)]
pub struct FixedVocabulary {
    pieces: Vec<Vec<u8>>,
    specials: Vec<bool>,
    bos: u32,
    eos: u32,
}

impl FixedVocabulary {
    /// Ids 0 and 1 are BOS and EOS; `pieces[i]` gets id `i + 2`.
    pub fn new<S: AsRef<[u8]>>(pieces: &[S]) -> Self {
        let mut all = vec![Vec::new(), Vec::new()];
        all.extend(pieces.iter().map(|p| p.as_ref().to_vec()));
        let mut specials = vec![false; all.len()];
        specials[0] = true;
        specials[1] = true;
        FixedVocabulary {
            pieces: all,
            specials,
            bos: 0,
            eos: 1,
        }
    }

    pub fn id_of(&self, piece: &[u8]) -> Option<u32> {
        self.pieces
            .iter()
            .enumerate()
            .position(|(i, p)| !self.specials[i] && p == piece)
            .map(|i| i as u32)
    }
}

impl Vocabulary for FixedVocabulary {
    fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    fn bos_id(&self) -> u32 {
        self.bos
    }

    fn eos_id(&self) -> u32 {
        self.eos
    }

    fn is_special(&self, id: u32) -> bool {
        self.specials.get(id as usize).copied().unwrap_or(true)
    }

    fn token_bytes(&self, id: u32) -> &[u8] {
        self.pieces.get(id as usize).map_or(&[], |p| p.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct BpeTokenizer {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

impl PartialEq for BpeTokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
    }
}

impl BpeTokenizer {
    /// Rebuilds a tokenizer from its ordered merge list.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); N_SPECIALS as usize];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let known = tokens.len() as u32;
            if a < N_SPECIALS || b < N_SPECIALS || a >= known || b >= known {
                return Err(Error::format(
                    "tokenizer",
                    format!("merge {rank} references invalid ids ({a}, {b})"),
                ));
            }
            let mut merged = tokens[a as usize].clone();
            merged.extend_from_slice(&tokens[b as usize]);
            tokens.push(merged);
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(Error::format("tokenizer", format!("duplicate merge {rank}")));
            }
        }
        Ok(BpeTokenizer { tokens, merges, ranks })
    }

    pub fn byte_level() -> Self {
        Self::from_merges(Vec::new()).expect("no merges")
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn byte_id(b: u8) -> u32 {
        N_SPECIALS + b as u32
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.tokens
            .iter()
            .skip(N_SPECIALS as usize)
            .position(|t| t == bytes)
            .map(|i| i as u32 + N_SPECIALS)
    }

    pub(crate) fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk.iter().map(|&b| Self::byte_id(b)).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min_by_key(|&(r, _)| r);
            let Some((rank, pair)) = best else { break };
            let merged = BASE_SIZE as u32 + rank;
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len() / 3 + 1);
        let mut cache: HashMap<&[u8], (usize, usize)> = HashMap::new();
        for (s, e) in chunks(bytes) {
            let chunk = &bytes[s..e];
            if let Some(&(a, b)) = cache.get(chunk) {
                out.extend_from_within(a..b);
                continue;
            }
            let start = out.len();
            self.encode_chunk(chunk, &mut out);
            cache.insert(chunk, (start, out.len()));
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Exact inverse of [`encode_bytes`](Self::encode_bytes). Specials
    /// decode to nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.tokens.get(id as usize).ok_or(Error::UnknownToken {
                id,
                vocab_size: self.tokens.len(),
            })?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_file(&self) -> TokenizerFile {
        TokenizerFile {
            format: "chronolm-bpe".into(),
            version: 1,
            boundary_marker: BOUNDARY_MARKER.into(),
            specials: Specials {
                bos: BOS_ID,
                eos: EOS_ID,
                unk: UNK_ID,
            },
            vocab_size: self.tokens.len(),
            vocab: (0..self.tokens.len() as u32).map(|id| self.display(id)).collect(),
            merges: self
                .merges
                .iter()
                .map(|&(a, b)| format!("{} {}", self.display(a), self.display(b)))
                .collect(),
        }
    }

    /// Canonical serialized form; its SHA-256 is the tokenizer hash.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(&self.to_file()).expect("serializable");
        v.push(b'\n');
        v
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_slice(bytes).map_err(|e| Error::format("tokenizer", e))?;
        Self::from_file(&file)
    }

    pub fn from_file(file: &TokenizerFile) -> Result<Self> {
        if file.format != "chronolm-bpe" || file.version != 1 {
            return Err(Error::format(
                "tokenizer",
                format!("unsupported format {} v{}", file.format, file.version),
            ));
        }
        let mut by_display: HashMap<String, u32> = HashMap::new();
        let byte_level = Self::byte_level();
        for id in N_SPECIALS..BASE_SIZE as u32 {
            by_display.insert(byte_level.display(id), id);
        }
        let mut merges = Vec::with_capacity(file.merges.len());
        for (rank, line) in file.merges.iter().enumerate() {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::format("tokenizer", format!("bad merge line {line:?}")))?;
            let lookup = |s: &str| {
                by_display
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::format("tokenizer", format!("unknown token {s:?}")))
            };
            let pair = (lookup(a)?, lookup(b)?);
            merges.push(pair);
            by_display.insert(format!("{a}{b}"), BASE_SIZE as u32 + rank as u32);
        }
        let tok = Self::from_merges(merges)?;
        if tok.tokens.len() != file.vocab_size || file.vocab.len() != file.vocab_size {
            return Err(Error::format(
                "tokenizer",
                format!(
                    "vocab_size {} disagrees with {} merges",
                    file.vocab_size,
                    file.merges.len()
                ),
            ));
        }
        for (id, shown) in file.vocab.iter().enumerate() {
            if *shown != tok.display(id as u32) {
                return Err(Error::format(
                    "tokenizer",
                    format!(
                        "vocab entry {id} is {shown:?}, merges imply {:?}",
                        tok.display(id as u32)
                    ),
                ));
            }
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable form of a token: space shows as the marker, printable
    /// ASCII as itself, anything else as `<0xNN>`.
    pub fn display(&self, id: u32) -> String {
        match id {
            BOS_ID => return "<bos>".into(),
            EOS_ID => return "<eos>".into(),
            UNK_ID => return "<unk>".into(),
            _ => {}
        }
        let mut s = String::new();
        for &b in self.token_bytes(id) {
            match b {
                b' ' => s.push_str(BOUNDARY_MARKER),
                b'<' | b'\\' => s.push_str(&format!("<0x{b:02X}>")),
                0x21..=0x7e => s.push(b as char),
                _ => s.push_str(&format!("<0x{b:02X}>")),
            }
        }
        s
    }
}

impl Vocabulary for BpeTokenizer {
    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn bos_id(&self) -> u32 {
        BOS_ID
    }

    fn eos_id(&self) -> u32 {
        EOS_ID
    }

    fn is_special(&self, id: u32) -> bool {
        id < N_SPECIALS
    }

    fn token_bytes(&self, id: u32) -> &[u8] {
        self.tokens.get(id as usize).map_or(&[], |t| t.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

/// On-disk tokenizer layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerFile {
    pub format: String,
    pub version: u32,
    pub boundary_marker: String,
    pub specials: Specials,
    pub vocab_size: usize,
    pub vocab: Vec<String>,
    pub merges: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> BpeTokenizer {
        train_bpe(&["aaab aaab"], BASE_SIZE + 2).unwrap()
    }

    #[test]
    fn empty_roundtrip() {
        let tok = toy();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
    }

    #[test]
    fn toy_encoding() {
        let tok = toy();
        let aaa = tok.id_of(b"aaa").unwrap();
        let b = BpeTokenizer::byte_id(b'b');
        assert_eq!(tok.encode("aaab"), vec![aaa, b]);
        let space = BpeTokenizer::byte_id(b' ');
        assert_eq!(tok.encode(" aaab"), vec![space, aaa, b]);
        assert!(tok.is_word_initiating(space));
        assert!(!tok.is_word_initiating(aaa));
    }

    #[test]
    fn word_initiation() {
        let tok = train_bpe(&[" station station nation"], BASE_SIZE + 40).unwrap();
        let station = tok.id_of(b" station").expect("merged");
        assert!(tok.is_word_initiating(station));
        assert!(tok.can_start_word(station, false));
        let inner = tok.id_of(b"ation").expect("merged");
        assert!(!tok.is_word_initiating(inner));
        let dot = BpeTokenizer::byte_id(b'.');
        assert!(tok.is_word_initiating(dot));
        assert!(!tok.can_start_word(dot, false));
        assert!(tok.can_start_word(dot, true));
        assert!(!tok.is_word_initiating(BOS_ID));
    }

    #[test]
    fn partition_covers_vocab() {
        let tok = train_bpe(&["the cat, the hat; a mat!"], BASE_SIZE + 20).unwrap();
        let part = tok.partition();
        assert_eq!(part.total(), tok.vocab_size());
        for id in 0..tok.vocab_size() as u32 {
            if id == EOS_ID {
                continue;
            }
            let expected = id >= N_SPECIALS && {
                let bytes = tok.token_bytes(id);
                bytes[0] == b' '
                    || bytes
                        .iter()
                        .all(|b| !b.is_ascii_alphanumeric() && *b != b'\'' && *b < 0x80)
            };
            assert_eq!(part.initiating.contains(&id), expected, "id {id}");
        }
    }

    #[test]
    fn file_roundtrip_and_hash() {
        let tok = train_bpe(&["<the> \\cat sat on the mat, naïve café"], BASE_SIZE + 30).unwrap();
        let bytes = tok.to_bytes();
        let back = BpeTokenizer::from_bytes(&bytes).unwrap();
        assert_eq!(back.merges(), tok.merges());
        assert_eq!(back.hash(), tok.hash());
        assert_ne!(tok.hash(), BpeTokenizer::byte_level().hash());
    }

    #[test]
    fn decode_rejects_unknown_id() {
        let tok = toy();
        let err = tok.decode(&[tok.vocab_size() as u32]).unwrap_err();
        assert!(matches!(err, Error::UnknownToken { .. }));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn roundtrip_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
                let tok = train_bpe(&["the quick brown fox jumps over the lazy dog, twice: the dog"], BASE_SIZE + 30).unwrap();
                let ids = tok.encode_bytes(&bytes);
                prop_assert!(ids.len() <= bytes.len());
                prop_assert_eq!(tok.decode_bytes(&ids).unwrap(), bytes);
            }
        }
    }
}
