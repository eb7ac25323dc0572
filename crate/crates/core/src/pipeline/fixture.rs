use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::{
    AttributionSection, CorpusSection, DiscoverySection, DistillationSection, EvaluationSection, PipelineConfig, Seeds,
    SlicingSection, TokenizerSection,
};
use super::manifest::write_file;
use super::stages::write_jsonl;
use crate::attribution::{AuthorRecord, RecordSource, Work};
use crate::corpus::{whitespace_tokens, Budgets, FieldSchema, YearRange};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::scalar::DType;
use crate::synthetic::SyntheticCorpus;
use crate::training::TrainConfig;

/// Smallest per-slice token total that makes greedy planning reproduce the
/// generator's slice boundaries. When none exists, the smallest slice
/// total, which keeps the plan feasible with boundaries a little early.
fn slice_budget(corpus: &SyntheticCorpus) -> u64 {
    let mut per_year: BTreeMap<i32, u64> = BTreeMap::new();
    for d in &corpus.documents {
        *per_year.entry(d.year).or_default() += whitespace_tokens(&d.text);
    }
    let total = |r: &YearRange, end: i32| per_year.range(r.start..=end).map(|(_, n)| n).sum::<u64>();
    let n = corpus.slices.len();
    let mut lower = 0;
    let mut upper = u64::MAX;
    for (i, r) in corpus.slices.iter().enumerate() {
        upper = upper.min(total(r, r.end));
        if i + 1 < n {
            lower = lower.max(total(r, r.end - 1) + 1);
        }
    }
    if lower <= upper {
        lower
    } else {
        log::warn!("no budget reproduces the synthetic slice boundaries exactly; using {upper}");
        upper
    }
}

fn fixture_works(corpus: &SyntheticCorpus) -> (Vec<Work>, Vec<AuthorRecord>, Vec<AuthorRecord>) {
    let given = ["Anna", "Thomas", "Maria", "Henry", "Clara", "Samuel"];
    let family = ["Bradley", "Whitcombe", "Osgood", "Pellham", "Ransome", "Tully"];
    let mut works = Vec::new();
    let mut authority = Vec::new();
    let mut catalog = Vec::new();
    for (i, (g, f)) in given.iter().zip(family).enumerate() {
        let slice = corpus.slices[i % corpus.slices.len()];
        let born = slice.start - 30 + i as i32;
        let year = slice.start + 5 + i as i32;
        works.push(Work {
            id: format!("w{i:02}"),
            title: format!(
                "The {} of {}",
                ["Harvest", "Voyage", "Letters", "Orchard", "Garden", "Tower"][i],
                f
            ),
            author: format!("{g} {f}"),
            gold_years: vec![year],
        });
        authority.push(AuthorRecord {
            id: format!("a{i:02}"),
            name: format!("{f}, {g}"),
            birth_year: Some(born),
            death_year: Some(born + 60),
            source: RecordSource::Authority,
        });
        catalog.push(AuthorRecord {
            id: format!("c{i:02}"),
            name: format!("{g} {f}"),
            birth_year: Some(born),
            death_year: if i % 2 == 0 { Some(born + 60) } else { None },
            source: RecordSource::Catalog,
        });
    }
    (works, authority, catalog)
}

/// A runnable config over `corpus` with data files under `dir`: a small
/// transformer recipe, budgets that reproduce the generator's slices, and
/// the cloze vocabulary filter off since future senses are unseen words.
pub fn fixture_config(corpus: &SyntheticCorpus, dir: &Path) -> Result<PipelineConfig> {
    let budget = slice_budget(corpus);
    let test = budget / 10;
    let val = budget / 10;
    let vocab = 512;
    let first = corpus.slices[0].start;
    let last = corpus.slices[corpus.slices.len() - 1].end;
    Ok(PipelineConfig {
        output_dir: PathBuf::from("out"),
        dtype: DType::F32,
        seeds: Seeds {
            split: corpus.config.seed,
            init: corpus.config.seed * 10 + 1,
            data: corpus.config.seed,
        },
        corpus: CorpusSection {
            paths: vec![PathBuf::from("corpus.jsonl")],
            schema: FieldSchema::default(),
            range: YearRange::new(first, last),
        },
        slicing: SlicingSection {
            n_slices: corpus.slices.len(),
            budgets: Budgets {
                train: budget - test - val,
                val,
                test,
            },
        },
        tokenizer: TokenizerSection { vocab_size: vocab },
        model: ModelConfig {
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_model: 48,
            d_ff: 128,
            vocab_size: vocab,
            context_length: 64,
            ..ModelConfig::default()
        },
        training: TrainConfig {
            learning_rate: 3e-3,
            epochs: 2,
            batch_size: 8,
            weight_decay: 0.1,
            ..TrainConfig::default()
        },
        distillation: DistillationSection::default(),
        evaluation: EvaluationSection {
            cloze_inventory: Some(PathBuf::from("senses.jsonl")),
            minimal_pairs: Some(PathBuf::from("pairs.jsonl")),
            filter_cloze: false,
            ..EvaluationSection::default()
        },
        discovery: DiscoverySection {
            words: vec![corpus.emerging.clone(), corpus.past[0].word.clone()],
            ..DiscoverySection::default()
        },
        attribution: Some(AttributionSection {
            works: PathBuf::from("works.jsonl"),
            authority: Some(PathBuf::from("authority.jsonl")),
            catalog: Some(PathBuf::from("catalog.jsonl")),
            thresholds: Default::default(),
            endpoint: Default::default(),
            options: Default::default(),
            tolerance: 5,
            dq_delta: None,
        }),
        base_dir: dir.to_path_buf(),
    })
}

impl PipelineConfig {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml()?.as_bytes())
    }
}

/// Writes the corpus, sense inventory, minimal pairs, attribution inputs
/// and `config.toml` into `dir`, and returns the config.
pub fn write_fixture(corpus: &SyntheticCorpus, dir: &Path) -> Result<PipelineConfig> {
    let cfg = fixture_config(corpus, dir)?;
    write_jsonl(&dir.join("corpus.jsonl"), &corpus.documents)?;
    write_jsonl(&dir.join("senses.jsonl"), &corpus.senses)?;
    write_jsonl(&dir.join("pairs.jsonl"), &corpus.pairs)?;
    let (works, authority, catalog) = fixture_works(corpus);
    write_jsonl(&dir.join("works.jsonl"), &works)?;
    write_jsonl(&dir.join("authority.jsonl"), &authority)?;
    write_jsonl(&dir.join("catalog.jsonl"), &catalog)?;
    cfg.save(&dir.join("config.toml"))?;
    Ok(cfg)
}
