//! Templated corpora with planted diachronic change.
//!
//! Every slice draws its open-class words from a window over a shared
//! lexicon; the window slides by `drift` of its width per slice, so
//! adjacent slices share vocabulary and distant ones share less. On top of
//! that three kinds of words are planted:
//!
//! * past senses, cued by a fixed phrase, present in every slice;
//! * future senses, spelled with letters no other word uses, present only
//!   in the last slice;
//! * one emerging word, absent from the first slice and increasingly
//!   frequent afterwards.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, YearRange};
use crate::error::{Error, Result};
use crate::evaluation::{MinimalPair, SenseRecord};

const CONSONANTS: &[u8] = b"bdfgklmnprstv";
const VOWELS: &[u8] = b"aeiou";
const FUTURE_CONSONANTS: &[u8] = b"jqxz";
const DETERMINERS: &[&str] = &["the", "a", "one", "some"];
const PREPOSITIONS: &[&str] = &["near", "in", "on", "under", "beside", "past", "along"];
const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "one", "some", "near", "in", "on", "under", "beside", "past", "along", "and", "so",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_slices: usize,
    pub first_year: i32,
    pub years_per_slice: i32,
    /// Whitespace tokens generated per slice.
    pub words_per_slice: u64,
    pub sentences_per_document: usize,
    pub core_nouns: usize,
    pub core_verbs: usize,
    pub core_adjectives: usize,
    pub window_nouns: usize,
    pub window_verbs: usize,
    pub window_adjectives: usize,
    /// Share of a window that is replaced from one slice to the next.
    pub drift: f64,
    /// Share of open-class slots filled from the sliding window rather
    /// than the core lexicon.
    pub window_share: f64,
    pub past_senses: usize,
    pub future_senses: usize,
    /// Planted sentences per sense and slice in which the sense exists.
    pub planted_occurrences: usize,
    /// Occurrences of the emerging word in the last slice; earlier slices
    /// get a quadratically smaller share.
    pub emerging_occurrences: usize,
    pub examples_per_sense: usize,
    pub minimal_pairs: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_slices: 3,
            first_year: 1800,
            years_per_slice: 50,
            words_per_slice: 100_000,
            sentences_per_document: 20,
            core_nouns: 24,
            core_verbs: 12,
            core_adjectives: 12,
            window_nouns: 120,
            window_verbs: 40,
            window_adjectives: 40,
            drift: 0.5,
            window_share: 0.7,
            past_senses: 8,
            future_senses: 8,
            planted_occurrences: 80,
            emerging_occurrences: 200,
            examples_per_sense: 3,
            minimal_pairs: 60,
        }
    }
}

impl SyntheticConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_slices == 0 {
            out.push("n_slices must be at least 1".into());
        }
        if self.years_per_slice < 1 {
            out.push("years_per_slice must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.drift) {
            out.push(format!("drift must lie in [0, 1], got {}", self.drift));
        }
        if !(0.0..=1.0).contains(&self.window_share) {
            out.push(format!("window_share must lie in [0, 1], got {}", self.window_share));
        }
        if self.core_nouns < 2 || self.core_verbs == 0 || self.core_adjectives == 0 {
            out.push("core lexicon needs at least two nouns, one verb and one adjective".into());
        }
        if self.window_nouns == 0 || self.window_verbs == 0 || self.window_adjectives == 0 {
            out.push("window sizes must be positive".into());
        }
        if self.sentences_per_document == 0 {
            out.push("sentences_per_document must be at least 1".into());
        }
        out
    }

    pub fn slice_ranges(&self) -> Vec<YearRange> {
        (0..self.n_slices as i32)
            .map(|s| {
                let start = self.first_year + s * self.years_per_slice;
                YearRange::new(start, start + self.years_per_slice - 1)
            })
            .collect()
    }
}

/// A planted word together with the phrase that precedes it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSense {
    pub word: String,
    pub cue: String,
    pub sense_year: i32,
    /// Slices (by index) whose text contains the sense.
    pub slices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub slices: Vec<YearRange>,
    pub documents: Vec<Document>,
    pub past: Vec<PlantedSense>,
    pub future: Vec<PlantedSense>,
    pub emerging: String,
    pub senses: Vec<SenseRecord>,
    pub pairs: Vec<MinimalPair>,
}

impl SyntheticCorpus {
    /// Texts of the documents dated inside slice `index`.
    pub fn slice_texts(&self, index: usize) -> Vec<&str> {
        let range = self.slices[index];
        self.documents
            .iter()
            .filter(|d| range.contains(d.year))
            .map(|d| d.text.as_str())
            .collect()
    }
}

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
}

struct Namer {
    used: BTreeSet<String>,
}

impl Namer {
    fn new() -> Self {
        Namer {
            used: FUNCTION_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn fresh(
        &mut self,
        rng: &mut ChaCha8Rng,
        consonants: &[u8],
        syllables: (usize, usize),
        coda: Option<u8>,
    ) -> String {
        loop {
            let n = rng.gen_range(syllables.0..=syllables.1);
            let mut w = String::new();
            for _ in 0..n {
                w.push(*consonants.choose(rng).unwrap() as char);
                w.push(*VOWELS.choose(rng).unwrap() as char);
            }
            if let Some(c) = coda {
                w.push(c as char);
            }
            // Plural and third-person forms add an "s"; keep those unique too.
            let plural = format!("{w}s");
            if !self.used.contains(&w) && !self.used.contains(&plural) {
                self.used.insert(plural);
                self.used.insert(w.clone());
                return w;
            }
        }
    }

    fn many(&mut self, rng: &mut ChaCha8Rng, n: usize, syllables: (usize, usize), coda: Option<u8>) -> Vec<String> {
        (0..n).map(|_| self.fresh(rng, CONSONANTS, syllables, coda)).collect()
    }
}

struct Grammar<'a> {
    core: &'a Lexicon,
    window: Lexicon,
    window_share: f64,
}

impl Grammar<'_> {
    fn pick<'b>(&'b self, rng: &mut ChaCha8Rng, core: &'b [String], window: &'b [String]) -> &'b str {
        if rng.gen_bool(self.window_share) {
            window.choose(rng).unwrap()
        } else {
            core.choose(rng).unwrap()
        }
    }

    fn noun_phrase(&self, rng: &mut ChaCha8Rng, out: &mut Vec<String>, noun: Option<&str>) -> bool {
        out.push(DETERMINERS.choose(rng).unwrap().to_string());
        if rng.gen_bool(0.4) {
            out.push(
                self.pick(rng, &self.core.adjectives, &self.window.adjectives)
                    .to_string(),
            );
        }
        let plural = noun.is_none() && rng.gen_bool(0.3);
        let n = noun.unwrap_or_else(|| self.pick(rng, &self.core.nouns, &self.window.nouns));
        out.push(if plural { format!("{n}s") } else { n.to_string() });
        plural
    }

    /// Subject, agreeing verb, object and an optional prepositional phrase.
    fn clause(&self, rng: &mut ChaCha8Rng, object: Option<&str>) -> Vec<String> {
        let mut out = Vec::new();
        let plural = self.noun_phrase(rng, &mut out, None);
        let v = self.pick(rng, &self.core.verbs, &self.window.verbs);
        out.push(if plural { v.to_string() } else { format!("{v}s") });
        self.noun_phrase(rng, &mut out, object);
        if object.is_none() && rng.gen_bool(0.35) {
            out.push(PREPOSITIONS.choose(rng).unwrap().to_string());
            self.noun_phrase(rng, &mut out, None);
        }
        out
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let mut words = self.clause(rng, None);
        if rng.gen_bool(0.3) {
            words.push("and".into());
            words.extend(self.clause(rng, None));
        }
        finish(words)
    }

    /// A long clause ending in `cue word`, so the word falls in the final
    /// tenth of the characters.
    fn planted(&self, rng: &mut ChaCha8Rng, sense: &PlantedSense) -> String {
        let tail = sense.word.len() + 1;
        let mut words = self.clause(rng, None);
        while text_len(&words) < 12 * tail + sense.cue.len() {
            words.push("and".into());
            words.extend(self.clause(rng, None));
        }
        words.push("so".into());
        words.extend(sense.cue.split(' ').map(String::from));
        words.push(sense.word.clone());
        finish(words)
    }
}

fn text_len(words: &[String]) -> usize {
    words.iter().map(|w| w.len() + 1).sum()
}

fn finish(words: Vec<String>) -> String {
    let mut s = words.join(" ");
    s.push('.');
    s
}

fn window<'a>(pool: &'a [String], width: usize, drift: f64, slice: usize) -> Vec<String> {
    let shift = (width as f64 * drift).round() as usize;
    pool[slice * shift..slice * shift + width].to_vec()
}

fn pool_size(width: usize, drift: f64, n_slices: usize) -> usize {
    width + (width as f64 * drift).round() as usize * n_slices.saturating_sub(1)
}

/// Generates the corpus, sense inventory and minimal pairs for `config`.
/// Output depends only on the configuration.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut namer = Namer::new();
    let core = Lexicon {
        nouns: namer.many(&mut rng, config.core_nouns, (2, 2), None),
        verbs: namer.many(&mut rng, config.core_verbs, (2, 2), Some(b'n')),
        adjectives: namer.many(&mut rng, config.core_adjectives, (2, 2), Some(b'l')),
    };
    let n = config.n_slices;
    let noun_pool = namer.many(&mut rng, pool_size(config.window_nouns, config.drift, n), (2, 3), None);
    let verb_pool = namer.many(
        &mut rng,
        pool_size(config.window_verbs, config.drift, n),
        (2, 3),
        Some(b'n'),
    );
    let adj_pool = namer.many(
        &mut rng,
        pool_size(config.window_adjectives, config.drift, n),
        (2, 3),
        Some(b'l'),
    );

    let slices = config.slice_ranges();
    let cue = |rng: &mut ChaCha8Rng, namer: &mut Namer| {
        format!(
            "{} {}",
            namer.fresh(rng, CONSONANTS, (2, 3), Some(b'r')),
            namer.fresh(rng, CONSONANTS, (2, 3), Some(b'm'))
        )
    };
    let past: Vec<PlantedSense> = (0..config.past_senses)
        .map(|_| PlantedSense {
            word: namer.fresh(&mut rng, CONSONANTS, (2, 3), Some(b't')),
            cue: cue(&mut rng, &mut namer),
            sense_year: slices[0].start,
            slices: (0..n).collect(),
        })
        .collect();
    let last = slices[n - 1];
    let future: Vec<PlantedSense> = (0..config.future_senses)
        .map(|_| PlantedSense {
            word: namer.fresh(&mut rng, FUTURE_CONSONANTS, (2, 3), None),
            cue: cue(&mut rng, &mut namer),
            sense_year: last.start + (last.end - last.start) / 5,
            slices: vec![n - 1],
        })
        .collect();
    let emerging = namer.fresh(&mut rng, CONSONANTS, (3, 3), Some(b'k'));

    let mut documents = Vec::new();
    let mut total_words = 0u64;
    let mut planted_counts = vec![0u64; past.len() + future.len()];
    for (s, range) in slices.iter().enumerate() {
        let grammar = Grammar {
            core: &core,
            window: Lexicon {
                nouns: window(&noun_pool, config.window_nouns, config.drift, s),
                verbs: window(&verb_pool, config.window_verbs, config.drift, s),
                adjectives: window(&adj_pool, config.window_adjectives, config.drift, s),
            },
            window_share: config.window_share,
        };
        let mut sentences = Vec::new();
        for (i, sense) in past.iter().chain(&future).enumerate() {
            if sense.slices.contains(&s) {
                for _ in 0..config.planted_occurrences {
                    sentences.push(grammar.planted(&mut rng, sense));
                    planted_counts[i] += 1;
                }
            }
        }
        let share = if n == 1 {
            1.0
        } else {
            (s as f64 / (n - 1) as f64).powi(2)
        };
        let emerging_here = (config.emerging_occurrences as f64 * share).round() as usize;
        for _ in 0..emerging_here {
            sentences.push(finish(grammar.clause(&mut rng, Some(&emerging))));
        }
        let mut words: u64 = sentences.iter().map(|t| t.split_whitespace().count() as u64).sum();
        while words < config.words_per_slice {
            let t = grammar.sentence(&mut rng);
            words += t.split_whitespace().count() as u64;
            sentences.push(t);
        }
        total_words += words;
        sentences.shuffle(&mut rng);
        for (d, chunk) in sentences.chunks(config.sentences_per_document).enumerate() {
            documents.push(Document {
                id: format!("s{s}-{d:05}"),
                title: None,
                author: None,
                year: rng.gen_range(range.start..=range.end),
                text: chunk.join(" "),
            });
        }
    }

    let grammar = Grammar {
        core: &core,
        window: Lexicon {
            nouns: core.nouns.clone(),
            verbs: core.verbs.clone(),
            adjectives: core.adjectives.clone(),
        },
        window_share: 0.0,
    };
    let senses = past
        .iter()
        .chain(&future)
        .zip(&planted_counts)
        .map(|(sense, &count)| SenseRecord {
            word: sense.word.clone(),
            sense_id: Some("1".into()),
            year: Some(sense.sense_year),
            definition: Some(format!("what follows \"{}\"", sense.cue)),
            examples: (0..config.examples_per_sense)
                .map(|_| grammar.planted(&mut rng, sense))
                .collect(),
            frequency_per_million: Some(count as f64 * 1e6 / total_words.max(1) as f64),
        })
        .collect();
    let pairs = minimal_pairs(&core, config.minimal_pairs, &mut rng);

    Ok(SyntheticCorpus {
        config: config.clone(),
        slices,
        documents,
        past,
        future,
        emerging,
        senses,
        pairs,
    })
}

/// Agreement pairs swap the verb's number; order pairs move the
/// determiner after the adjective. Only the core lexicon is used, so
/// every slice has seen every word.
fn minimal_pairs(core: &Lexicon, n: usize, rng: &mut ChaCha8Rng) -> Vec<MinimalPair> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let subj = core.nouns.choose(rng).unwrap();
        let obj = core.nouns.choose(rng).unwrap();
        let verb = core.verbs.choose(rng).unwrap();
        let adj = core.adjectives.choose(rng).unwrap();
        let det = DETERMINERS.choose(rng).unwrap();
        let pair = if i % 2 == 0 {
            if rng.gen_bool(0.5) {
                MinimalPair {
                    good: format!("the {subj} {verb}s {det} {obj}."),
                    bad: format!("the {subj} {verb} {det} {obj}."),
                    subtask: "agreement".into(),
                }
            } else {
                MinimalPair {
                    good: format!("the {subj}s {verb} {det} {obj}."),
                    bad: format!("the {subj}s {verb}s {det} {obj}."),
                    subtask: "agreement".into(),
                }
            }
        } else {
            MinimalPair {
                good: format!("{det} {adj} {subj} {verb}s the {obj}."),
                bad: format!("{adj} {det} {subj} {verb}s the {obj}."),
                subtask: "determiner_order".into(),
            }
        };
        out.push(pair);
    }
    out
}
