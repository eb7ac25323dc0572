use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::PipelineConfig;
use super::manifest::{digest, inputs_hash, write_file, Manifest, RunLock};
use crate::attribution::{
    attribute_dates, evaluate_attribution, match_authors, AuthorRecord, DateAttribution, TextGenerator, Work,
};
use crate::corpus::{
    filter_in_vocab, ingest, plan_slices, split_slice, whitespace_tokens, word_counts, CorpusStore, Document,
    PlanOutcome, SlicePlan, SplitSet, WordCounts,
};
use crate::decoding::{top_k_for_text, DecodeOptions};
use crate::discovery::{
    occurrence_trajectories, rank_candidates, rank_cumulative, score_occurrences, trajectories, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_cloze_set, cross_time_matrix, grouped_accuracy, leakage_report, minimal_pair_accuracy_bpe, mrr, rank_cloze,
    slice_grouper, ClozeRanking, ClozeTask, GroupAccuracy, Member, MinimalPair, SenseRecord, SubtaskAccuracy,
};
use crate::model::{Checkpoint, CheckpointMeta, ModelConfig, Transformer};
use crate::scalar::{DType, Scalar};
use crate::tokenizer::{train_bpe, BpeTokenizer, Vocabulary};
use crate::training::{distill_student, pack, train_teacher, TrainConfig, TrainingLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Slice,
    Split,
    Tokenize,
    TrainTeachers,
    Distill,
    EvalPpl,
    EvalPairs,
    BuildCloze,
    EvalCloze,
    Leakage,
    Discover,
    Attribute,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::Ingest,
        Stage::Slice,
        Stage::Split,
        Stage::Tokenize,
        Stage::TrainTeachers,
        Stage::Distill,
        Stage::EvalPpl,
        Stage::EvalPairs,
        Stage::BuildCloze,
        Stage::EvalCloze,
        Stage::Leakage,
        Stage::Discover,
        Stage::Attribute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Slice => "slice",
            Stage::Split => "split",
            Stage::Tokenize => "tokenize",
            Stage::TrainTeachers => "train-teachers",
            Stage::Distill => "distill",
            Stage::EvalPpl => "eval-ppl",
            Stage::EvalPairs => "eval-pairs",
            Stage::BuildCloze => "build-cloze",
            Stage::EvalCloze => "eval-cloze",
            Stage::Leakage => "leakage",
            Stage::Discover => "discover",
            Stage::Attribute => "attribute",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Stages that run once per slice and accept `--slice`.
    pub fn per_slice(self) -> bool {
        matches!(
            self,
            Stage::Split | Stage::Tokenize | Stage::TrainTeachers | Stage::Distill
        )
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `all` or a single stage name.
pub fn parse_stages(name: &str) -> Option<Vec<Stage>> {
    if name == "all" {
        Some(Stage::ALL.to_vec())
    } else {
        Stage::from_name(name).map(|s| vec![s])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Ran,
    Skipped,
    NotConfigured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub stage: Stage,
    pub slice: Option<String>,
    pub status: UnitStatus,
    pub duration_secs: f64,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Restricts per-slice stages to one slice.
    pub slice: Option<String>,
    /// Re-run even when the manifest says nothing changed.
    pub force: bool,
    pub generator: Option<&'a dyn TextGenerator>,
}

/// File locations under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    fn at(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn documents(&self) -> PathBuf {
        self.at("ingest/documents.jsonl")
    }
    pub fn rejections(&self) -> PathBuf {
        self.at("ingest/rejections.jsonl")
    }
    pub fn plan(&self) -> PathBuf {
        self.at("slice/plan.json")
    }
    pub fn infeasibility(&self) -> PathBuf {
        self.at("slice/infeasibility.json")
    }
    pub fn split(&self, label: &str) -> PathBuf {
        self.at(format!("split/{label}.json"))
    }
    pub fn tokenizer(&self, label: &str) -> PathBuf {
        self.at(format!("tokenize/{label}.tokenizer.json"))
    }
    pub fn vocabulary(&self, label: &str) -> PathBuf {
        self.at(format!("tokenize/{label}.vocab.json"))
    }
    pub fn teacher(&self, label: &str, i: usize) -> PathBuf {
        self.at(format!("teachers/{label}/teacher-{i}.ckpt"))
    }
    pub fn teacher_log(&self, label: &str, i: usize) -> PathBuf {
        self.at(format!("teachers/{label}/teacher-{i}.log.jsonl"))
    }
    pub fn student(&self, label: &str) -> PathBuf {
        self.at(format!("students/{label}/student.ckpt"))
    }
    pub fn student_log(&self, label: &str) -> PathBuf {
        self.at(format!("students/{label}/student.log.jsonl"))
    }
    pub fn perplexity(&self) -> PathBuf {
        self.at("reports/perplexity.csv")
    }
    pub fn pairs(&self) -> PathBuf {
        self.at("reports/minimal_pairs.jsonl")
    }
    pub fn pairs_retention(&self) -> PathBuf {
        self.at("reports/minimal_pairs_retention.json")
    }
    pub fn cloze_tasks(&self) -> PathBuf {
        self.at("cloze/tasks.jsonl")
    }
    pub fn cloze_build(&self) -> PathBuf {
        self.at("cloze/build_report.json")
    }
    pub fn cloze_rankings(&self) -> PathBuf {
        self.at("reports/cloze_rankings.jsonl")
    }
    pub fn cloze_failures(&self) -> PathBuf {
        self.at("reports/cloze_failures.jsonl")
    }
    pub fn leakage(&self) -> PathBuf {
        self.at("reports/leakage.jsonl")
    }
    pub fn cloze_accuracy(&self) -> PathBuf {
        self.at("reports/cloze_accuracy.jsonl")
    }
    pub fn candidates(&self) -> PathBuf {
        self.at("reports/trajectory_candidates.tsv")
    }
    pub fn cumulative(&self) -> PathBuf {
        self.at("reports/cumulative_divergence.tsv")
    }
    pub fn occurrences(&self, word: &str) -> PathBuf {
        self.at(format!("reports/occurrences/{word}.tsv"))
    }
    pub fn author_matches(&self) -> PathBuf {
        self.at("attribution/author_matches.json")
    }
    pub fn attribution_cache(&self) -> PathBuf {
        self.at("attribution/cache.jsonl")
    }
    pub fn attribution_dates(&self) -> PathBuf {
        self.at("reports/attribution_dates.jsonl")
    }
    pub fn attribution_score(&self) -> PathBuf {
        self.at("reports/attribution_score.json")
    }
    pub fn manifest(&self, stage: Stage, slice: Option<&str>) -> PathBuf {
        match slice {
            Some(l) => self.at(format!("manifests/{}/{l}.json", stage.name())),
            None => self.at(format!("manifests/{}.json", stage.name())),
        }
    }
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("record file", format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("serializable record"));
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(
        path,
        (serde_json::to_string_pretty(value).expect("serializable record") + "\n").as_bytes(),
    )
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("json file", format!("{}: {e}", path.display())))
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    layout: Layout,
    force: bool,
}

impl Ctx<'_> {
    /// The path, or an error naming the stage that produces it.
    fn require(&self, path: PathBuf, producer: Stage) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingUpstream {
                stage: producer.name().to_string(),
                detail: format!("{} not found; run `{}` first", path.display(), producer.name()),
            })
        }
    }

    /// Runs `body` unless the manifest shows identical inputs and intact
    /// outputs.
    fn unit(
        &self,
        stage: Stage,
        slice: Option<&str>,
        inputs: &[PathBuf],
        fragment: Value,
        body: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<UnitReport> {
        let started = Instant::now();
        let root = &self.layout.root;
        let digests = inputs.iter().map(|p| digest(p, root)).collect::<Result<Vec<_>>>()?;
        let hash = inputs_hash(stage.name(), slice, &fragment, &digests);
        let manifest_path = self.layout.manifest(stage, slice);
        if !self.force {
            if let Some(m) = Manifest::load(&manifest_path) {
                if m.inputs_hash == hash && m.outputs_intact(root) {
                    log::info!(
                        "{stage}{}: unchanged, skipped",
                        slice.map(|s| format!(" [{s}]")).unwrap_or_default()
                    );
                    return Ok(UnitReport {
                        stage,
                        slice: slice.map(String::from),
                        status: UnitStatus::Skipped,
                        duration_secs: 0.0,
                    });
                }
            }
        }
        log::info!(
            "{stage}{}: running",
            slice.map(|s| format!(" [{s}]")).unwrap_or_default()
        );
        let outputs = body()?;
        let duration = started.elapsed().as_secs_f64();
        let manifest = Manifest {
            stage: stage.name().to_string(),
            slice: slice.map(String::from),
            inputs_hash: hash,
            inputs: digests,
            outputs: outputs.iter().map(|p| digest(p, root)).collect::<Result<Vec<_>>>()?,
            duration_secs: duration,
        };
        manifest.save(&manifest_path)?;
        Ok(UnitReport {
            stage,
            slice: slice.map(String::from),
            status: UnitStatus::Ran,
            duration_secs: duration,
        })
    }

    fn not_configured(&self, stage: Stage, what: &str) -> UnitReport {
        log::info!("{stage}: no {what} configured, nothing to do");
        UnitReport {
            stage,
            slice: None,
            status: UnitStatus::NotConfigured,
            duration_secs: 0.0,
        }
    }

    fn store(&self) -> Result<CorpusStore> {
        let docs: Vec<Document> = read_jsonl(&self.require(self.layout.documents(), Stage::Ingest)?)?;
        let (store, rejected) = CorpusStore::from_documents(docs, self.cfg.corpus.range);
        if !rejected.is_empty() {
            return Err(Error::Other(format!(
                "{} contains {} invalid documents; re-run `ingest`",
                self.layout.documents().display(),
                rejected.len()
            )));
        }
        Ok(store)
    }

    fn plan(&self) -> Result<SlicePlan> {
        read_json(&self.require(self.layout.plan(), Stage::Slice)?)
    }

    fn split(&self, label: &str) -> Result<SplitSet> {
        read_json(&self.require(self.layout.split(label), Stage::Split)?)
    }

    fn tokenizer(&self, label: &str) -> Result<BpeTokenizer> {
        BpeTokenizer::load(&self.require(self.layout.tokenizer(label), Stage::Tokenize)?)
    }

    fn vocabularies(&self, labels: &[String]) -> Result<(Vec<WordCounts>, Vec<PathBuf>)> {
        let mut vocabs = Vec::new();
        let mut paths = Vec::new();
        for l in labels {
            let p = self.require(self.layout.vocabulary(l), Stage::Tokenize)?;
            vocabs.push(read_json(&p)?);
            paths.push(p);
        }
        Ok((vocabs, paths))
    }

    /// Labels selected by `--slice`.
    fn units(&self, plan: &SlicePlan, only: Option<&str>) -> Result<Vec<String>> {
        let labels = plan.labels();
        match only {
            None => Ok(labels),
            Some(l) if labels.iter().any(|x| x == l) => Ok(vec![l.to_string()]),
            Some(l) => Err(Error::Config(format!(
                "no slice labelled {l}; slices are {}",
                labels.join(", ")
            ))),
        }
    }

    fn battery_inputs(&self, labels: &[String]) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for l in labels {
            out.push(self.require(self.layout.tokenizer(l), Stage::Tokenize)?);
            out.push(self.require(self.layout.student(l), Stage::Distill)?);
        }
        Ok(out)
    }

    fn load_battery<T: Scalar>(&self, labels: &[String]) -> Result<(Vec<BpeTokenizer>, Vec<Transformer<T>>)> {
        let mut toks = Vec::new();
        let mut models = Vec::new();
        for l in labels {
            let tok = self.tokenizer(l)?;
            let loaded = Checkpoint::<T>::load(
                &self.require(self.layout.student(l), Stage::Distill)?,
                Some(&tok.hash()),
            )?;
            toks.push(tok);
            models.push(loaded.checkpoint.model);
        }
        Ok((toks, models))
    }

    fn decode_options(&self) -> DecodeOptions {
        let e = &self.cfg.evaluation;
        DecodeOptions {
            k: e.k,
            beam_width: e.beam_width,
            max_word_tokens: e.max_word_tokens,
            allow_punctuation: e.allow_punctuation,
        }
    }
}

fn members<'a, T>(
    labels: &[String],
    toks: &'a [BpeTokenizer],
    models: &'a [Transformer<T>],
) -> Vec<Member<'a, Transformer<T>>> {
    labels
        .iter()
        .zip(toks.iter().zip(models))
        .map(|(l, (t, m))| Member::new(l.clone(), m, t))
        .collect()
}

fn fragment<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("serializable config")
}

/// Runs `stages` in order under the output-directory lock.
pub fn run(config: &PipelineConfig, stages: &[Stage], options: &RunOptions<'_>) -> Result<Vec<UnitReport>> {
    let root = config.output_root();
    let _lock = RunLock::acquire(&root)?;
    let ctx = Ctx {
        cfg: config,
        layout: Layout::new(root),
        force: options.force,
    };
    if let Some(s) = &options.slice {
        if let Some(bad) = stages.iter().find(|st| !st.per_slice()) {
            if stages.len() == 1 {
                return Err(Error::Config(format!("stage {bad} does not take --slice (got {s})")));
            }
        }
    }
    let mut reports = Vec::new();
    for &stage in stages {
        let only = options.slice.as_deref().filter(|_| stage.per_slice());
        let mut r = match stage {
            Stage::Ingest => vec![ingest_stage(&ctx)?],
            Stage::Slice => vec![slice_stage(&ctx)?],
            Stage::Split => split_stage(&ctx, only)?,
            Stage::Tokenize => tokenize_stage(&ctx, only)?,
            Stage::TrainTeachers => match config.dtype {
                DType::F32 => teachers_stage::<f32>(&ctx, only)?,
                DType::F64 => teachers_stage::<f64>(&ctx, only)?,
            },
            Stage::Distill => match config.dtype {
                DType::F32 => distill_stage::<f32>(&ctx, only)?,
                DType::F64 => distill_stage::<f64>(&ctx, only)?,
            },
            Stage::EvalPpl => vec![match config.dtype {
                DType::F32 => ppl_stage::<f32>(&ctx)?,
                DType::F64 => ppl_stage::<f64>(&ctx)?,
            }],
            Stage::EvalPairs => vec![match config.dtype {
                DType::F32 => pairs_stage::<f32>(&ctx)?,
                DType::F64 => pairs_stage::<f64>(&ctx)?,
            }],
            Stage::BuildCloze => vec![build_cloze_stage(&ctx)?],
            Stage::EvalCloze => vec![match config.dtype {
                DType::F32 => eval_cloze_stage::<f32>(&ctx)?,
                DType::F64 => eval_cloze_stage::<f64>(&ctx)?,
            }],
            Stage::Leakage => vec![leakage_stage(&ctx)?],
            Stage::Discover => vec![match config.dtype {
                DType::F32 => discover_stage::<f32>(&ctx)?,
                DType::F64 => discover_stage::<f64>(&ctx)?,
            }],
            Stage::Attribute => vec![attribute_stage(&ctx, options.generator)?],
        };
        reports.append(&mut r);
    }
    Ok(reports)
}

fn ingest_stage(ctx: &Ctx) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    let inputs: Vec<PathBuf> = cfg.corpus.paths.iter().map(|p| cfg.resolve(p)).collect();
    for p in &inputs {
        if !p.exists() {
            return Err(Error::Config(format!("corpus file {} does not exist", p.display())));
        }
    }
    ctx.unit(
        Stage::Ingest,
        None,
        &inputs,
        json!({"schema": cfg.corpus.schema, "range": cfg.corpus.range}),
        || {
            let (store, report) = ingest(&inputs, &cfg.corpus.schema, cfg.corpus.range)?;
            if !report.is_empty() {
                log::warn!("ingest rejected {} records", report.len());
            }
            let l = &ctx.layout;
            write_jsonl(&l.documents(), store.documents())?;
            write_jsonl(&l.rejections(), &report.rejections)?;
            Ok(vec![l.documents(), l.rejections()])
        },
    )
}

fn slice_stage(ctx: &Ctx) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    let docs = ctx.require(ctx.layout.documents(), Stage::Ingest)?;
    ctx.unit(
        Stage::Slice,
        None,
        &[docs],
        json!({"slicing": cfg.slicing, "range": cfg.corpus.range}),
        || {
            let store = ctx.store()?;
            let outcome = plan_slices(
                &store,
                cfg.slicing.n_slices,
                cfg.slicing.budgets,
                cfg.corpus.range,
                &whitespace_tokens,
            )?;
            let _ = std::fs::remove_file(ctx.layout.infeasibility());
            let _ = std::fs::remove_file(ctx.layout.plan());
            match outcome {
                PlanOutcome::Feasible(plan) => {
                    write_json(&ctx.layout.plan(), &plan)?;
                    Ok(vec![ctx.layout.plan()])
                }
                PlanOutcome::Infeasible(inf) => {
                    write_json(&ctx.layout.infeasibility(), &inf)?;
                    let lines: Vec<String> = inf
                        .shortfalls
                        .iter()
                        .map(|s| format!("slice {}: short by {} tokens", s.index + 1, s.shortfall()))
                        .collect();
                    Err(Error::Other(format!(
                        "slice plan is infeasible ({} tokens available, {} required): {}; details in {}",
                        inf.total_available,
                        inf.total_required,
                        lines.join("; "),
                        ctx.layout.infeasibility().display()
                    )))
                }
            }
        },
    )
}

fn split_stage(ctx: &Ctx, only: Option<&str>) -> Result<Vec<UnitReport>> {
    let plan_path = ctx.require(ctx.layout.plan(), Stage::Slice)?;
    let docs = ctx.require(ctx.layout.documents(), Stage::Ingest)?;
    let plan = ctx.plan()?;
    let mut store = None;
    let mut out = Vec::new();
    for label in ctx.units(&plan, only)? {
        let inputs = [plan_path.clone(), docs.clone()];
        out.push(ctx.unit(
            Stage::Split,
            Some(&label),
            &inputs,
            json!({"seed": ctx.cfg.seeds.split}),
            || {
                if store.is_none() {
                    store = Some(ctx.store()?);
                }
                let set = split_slice(
                    &plan,
                    store.as_ref().expect("loaded"),
                    &label,
                    ctx.cfg.seeds.split,
                    &whitespace_tokens,
                )?;
                write_json(&ctx.layout.split(&label), &set)?;
                Ok(vec![ctx.layout.split(&label)])
            },
        )?);
    }
    Ok(out)
}

fn tokenize_stage(ctx: &Ctx, only: Option<&str>) -> Result<Vec<UnitReport>> {
    let docs = ctx.require(ctx.layout.documents(), Stage::Ingest)?;
    let plan = ctx.plan()?;
    let mut store = None;
    let mut out = Vec::new();
    for label in ctx.units(&plan, only)? {
        let split_path = ctx.require(ctx.layout.split(&label), Stage::Split)?;
        let inputs = [split_path, docs.clone()];
        out.push(ctx.unit(
            Stage::Tokenize,
            Some(&label),
            &inputs,
            fragment(&ctx.cfg.tokenizer),
            || {
                if store.is_none() {
                    store = Some(ctx.store()?);
                }
                let store = store.as_ref().expect("loaded");
                let split = ctx.split(&label)?;
                let texts: Vec<&str> = store.texts(&split.train).collect();
                let tok = train_bpe(&texts, ctx.cfg.tokenizer.vocab_size)?;
                ensure_parent(&ctx.layout.tokenizer(&label))?;
                tok.save(&ctx.layout.tokenizer(&label))?;
                write_json(
                    &ctx.layout.vocabulary(&label),
                    &word_counts(store, &split.train, &label),
                )?;
                Ok(vec![ctx.layout.tokenizer(&label), ctx.layout.vocabulary(&label)])
            },
        )?);
    }
    Ok(out)
}

fn encoded_blocks(store: &CorpusStore, ids: &[String], tok: &BpeTokenizer, ctx_len: usize) -> Vec<Vec<u32>> {
    let docs: Vec<Vec<u32>> = store.texts(ids).map(|t| tok.encode(t)).collect();
    pack(&docs, ctx_len)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRow<'a> {
    Step(&'a crate::training::StepRecord),
    Eval(&'a crate::training::EvalRecord),
    Summary {
        selected: usize,
        val_loss: Option<f64>,
        wall_time_secs: f64,
    },
}

fn write_log(path: &Path, log: &TrainingLog) -> Result<()> {
    let mut rows: Vec<LogRow> = log.steps.iter().map(LogRow::Step).collect();
    rows.extend(log.evals.iter().map(LogRow::Eval));
    rows.push(LogRow::Summary {
        selected: log.selected,
        val_loss: log.selected_eval().map(|e| e.val_loss),
        wall_time_secs: log.wall_time_secs,
    });
    write_jsonl(path, &rows)
}

fn model_for(cfg: &ModelConfig, tok: &BpeTokenizer, seed: u64) -> ModelConfig {
    if cfg.vocab_size != tok.vocab_size() {
        log::warn!(
            "tokenizer has {} tokens; model vocab_size {} adjusted",
            tok.vocab_size(),
            cfg.vocab_size
        );
    }
    ModelConfig {
        vocab_size: tok.vocab_size(),
        seed,
        ..cfg.clone()
    }
}

fn meta(label: &str, role: &str, log: &TrainingLog, base: CheckpointMeta) -> CheckpointMeta {
    let mut m = base;
    m.extra.insert("slice".into(), label.to_string());
    m.extra.insert("role".into(), role.to_string());
    m.extra.insert("selected_eval".into(), log.selected.to_string());
    m
}

fn teachers_stage<T: Scalar>(ctx: &Ctx, only: Option<&str>) -> Result<Vec<UnitReport>> {
    let cfg = ctx.cfg;
    let docs = ctx.require(ctx.layout.documents(), Stage::Ingest)?;
    let plan = ctx.plan()?;
    let mut store = None;
    let mut out = Vec::new();
    for label in ctx.units(&plan, only)? {
        let inputs = [
            ctx.require(ctx.layout.split(&label), Stage::Split)?,
            ctx.require(ctx.layout.tokenizer(&label), Stage::Tokenize)?,
            docs.clone(),
        ];
        let frag = json!({
            "model": cfg.model, "training": cfg.training, "teachers": cfg.distillation.teachers,
            "seeds": cfg.seeds, "dtype": cfg.dtype,
        });
        out.push(ctx.unit(Stage::TrainTeachers, Some(&label), &inputs, frag, || {
            if store.is_none() {
                store = Some(ctx.store()?);
            }
            let store = store.as_ref().expect("loaded");
            let split = ctx.split(&label)?;
            let tok = ctx.tokenizer(&label)?;
            let train = encoded_blocks(store, &split.train, &tok, cfg.model.context_length);
            let val = encoded_blocks(store, &split.val, &tok, cfg.model.context_length);
            let mut written = Vec::new();
            for i in 0..cfg.distillation.teachers {
                let mc = model_for(&cfg.model, &tok, cfg.seeds.init.wrapping_add(i as u64));
                let tc = TrainConfig {
                    seed: cfg.seeds.data.wrapping_add(i as u64),
                    ..cfg.training.clone()
                };
                let outcome = train_teacher::<T>(&mc, &tc, &train, &val)?;
                let ck = Checkpoint::new(
                    outcome.checkpoint.model,
                    tok.hash(),
                    meta(
                        &label,
                        &format!("teacher-{i}"),
                        &outcome.log,
                        outcome.checkpoint.metadata,
                    ),
                );
                ensure_parent(&ctx.layout.teacher(&label, i))?;
                ck.save(&ctx.layout.teacher(&label, i))?;
                write_log(&ctx.layout.teacher_log(&label, i), &outcome.log)?;
                written.push(ctx.layout.teacher(&label, i));
                written.push(ctx.layout.teacher_log(&label, i));
            }
            Ok(written)
        })?);
    }
    Ok(out)
}

fn distill_stage<T: Scalar>(ctx: &Ctx, only: Option<&str>) -> Result<Vec<UnitReport>> {
    let cfg = ctx.cfg;
    let docs = ctx.require(ctx.layout.documents(), Stage::Ingest)?;
    let plan = ctx.plan()?;
    let mut store = None;
    let mut out = Vec::new();
    for label in ctx.units(&plan, only)? {
        let mut inputs = vec![
            ctx.require(ctx.layout.split(&label), Stage::Split)?,
            ctx.require(ctx.layout.tokenizer(&label), Stage::Tokenize)?,
            docs.clone(),
        ];
        for i in 0..cfg.distillation.teachers {
            inputs.push(ctx.require(ctx.layout.teacher(&label, i), Stage::TrainTeachers)?);
        }
        let frag = json!({
            "student": cfg.student_model(), "training": cfg.student_training(),
            "seeds": cfg.seeds, "dtype": cfg.dtype,
        });
        out.push(ctx.unit(Stage::Distill, Some(&label), &inputs, frag, || {
            if store.is_none() {
                store = Some(ctx.store()?);
            }
            let store = store.as_ref().expect("loaded");
            let split = ctx.split(&label)?;
            let tok = ctx.tokenizer(&label)?;
            let student_cfg = model_for(cfg.student_model(), &tok, cfg.seeds.init.wrapping_add(1000));
            let teachers = (0..cfg.distillation.teachers)
                .map(|i| {
                    Ok(
                        Checkpoint::<T>::load(&ctx.layout.teacher(&label, i), Some(&tok.hash()))?
                            .checkpoint
                            .model,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Transformer<T>> = teachers.iter().collect();
            let train = encoded_blocks(store, &split.train, &tok, student_cfg.context_length);
            let val = encoded_blocks(store, &split.val, &tok, student_cfg.context_length);
            let tc = TrainConfig {
                seed: cfg.seeds.data.wrapping_add(1000),
                ..cfg.student_training().clone()
            };
            let outcome = distill_student(&refs, &student_cfg, &tc, &train, &val)?;
            let ck = Checkpoint::new(
                outcome.checkpoint.model,
                tok.hash(),
                meta(&label, "student", &outcome.log, outcome.checkpoint.metadata),
            );
            ensure_parent(&ctx.layout.student(&label))?;
            ck.save(&ctx.layout.student(&label))?;
            write_log(&ctx.layout.student_log(&label), &outcome.log)?;
            Ok(vec![ctx.layout.student(&label), ctx.layout.student_log(&label)])
        })?);
    }
    Ok(out)
}

fn ppl_stage<T: Scalar>(ctx: &Ctx) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    let plan = ctx.plan()?;
    let labels = plan.labels();
    let mut inputs = ctx.battery_inputs(&labels)?;
    for l in &labels {
        inputs.push(ctx.require(ctx.layout.split(l), Stage::Split)?);
    }
    inputs.push(ctx.require(ctx.layout.documents(), Stage::Ingest)?);
    let stride = cfg
        .evaluation
        .stride
        .unwrap_or((cfg.student_model().context_length / 2).max(1));
    ctx.unit(
        Stage::EvalPpl,
        None,
        &inputs,
        json!({"stride": stride, "dtype": cfg.dtype}),
        || {
            let store = ctx.store()?;
            let (toks, models) = ctx.load_battery::<T>(&labels)?;
            let battery = members(&labels, &toks, &models);
            let mut sets = Vec::new();
            for l in &labels {
                let split = ctx.split(l)?;
                let texts: Vec<String> = store.texts(&split.test).map(String::from).collect();
                sets.push((l.clone(), texts));
            }
            let matrix = cross_time_matrix(&battery, &sets, stride)?;
            write_file(&ctx.layout.perplexity(), matrix.to_csv().as_bytes())?;
            Ok(vec![ctx.layout.perplexity()])
        },
    )
}

#[derive(Serialize)]
struct PairRow<'a> {
    model: &'a str,
    correct: usize,
    total: usize,
    accuracy: Option<f64>,
    per_subtask: &'a BTreeMap<String, SubtaskAccuracy>,
}

fn pairs_stage<T: Scalar>(ctx: &Ctx) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    let Some(pairs_path) = &cfg.evaluation.minimal_pairs else {
        return Ok(ctx.not_configured(Stage::EvalPairs, "minimal_pairs file"));
    };
    let plan = ctx.plan()?;
    let labels = plan.labels();
    let mut inputs = vec![cfg.resolve(pairs_path)];
    inputs.extend(ctx.battery_inputs(&labels)?);
    let (vocabs, vocab_paths) = ctx.vocabularies(&labels)?;
    if cfg.evaluation.filter_pairs {
        inputs.extend(vocab_paths);
    }
    let frag = json!({
        "filter": cfg.evaluation.filter_pairs, "min_count": cfg.evaluation.cloze.min_count,
        "per_token": cfg.evaluation.per_token, "dtype": cfg.dtype,
    });
    ctx.unit(Stage::EvalPairs, None, &inputs, frag, || {
        let pairs: Vec<MinimalPair> = read_jsonl(&cfg.resolve(pairs_path))?;
        let kept = if cfg.evaluation.filter_pairs {
            let outcome = filter_in_vocab(&pairs, &vocabs, cfg.evaluation.cloze.min_count)?;
            write_json(&ctx.layout.pairs_retention(), &outcome.report)?;
            outcome.retained
        } else {
            let _ = std::fs::remove_file(ctx.layout.pairs_retention());
            pairs
        };
        let (toks, models) = ctx.load_battery::<T>(&labels)?;
        let mut reports = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            reports.push((
                l,
                minimal_pair_accuracy_bpe(&models[i], &toks[i], &kept, cfg.evaluation.per_token)?,
            ));
        }
        let rows: Vec<PairRow> = reports
            .iter()
            .map(|(l, r)| PairRow {
                model: l,
                correct: r.correct,
                total: r.total,
                accuracy: r.accuracy,
                per_subtask: &r.per_subtask,
            })
            .collect();
        write_jsonl(&ctx.layout.pairs(), &rows)?;
        let mut outputs = vec![ctx.layout.pairs()];
        if cfg.evaluation.filter_pairs {
            outputs.push(ctx.layout.pairs_retention());
        }
        Ok(outputs)
    })
}

fn build_cloze_stage(ctx: &Ctx) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    let Some(inv) = &cfg.evaluation.cloze_inventory else {
        return Ok(ctx.not_configured(Stage::BuildCloze, "cloze_inventory"));
    };
    let mut inputs = vec![cfg.resolve(inv)];
    let mut vocabs = Vec::new();
    if cfg.evaluation.filter_cloze {
        let plan = ctx.plan()?;
        let (v, paths) = ctx.vocabularies(&plan.labels())?;
        vocabs = v;
        inputs.extend(paths);
    }
    let frag = json!({"cloze": cfg.evaluation.cloze, "filter": cfg.evaluation.filter_cloze});
    ctx.unit(Stage::BuildCloze, None, &inputs, frag, || {
        let records: Vec<SenseRecord> = read_jsonl(&cfg.resolve(inv))?;
        let (tasks, report) = build_cloze_set(&records, &cfg.evaluation.cloze, &vocabs)?;
        write_jsonl(&ctx.layout.cloze_tasks(), &tasks)?;
        write_json(&ctx.layout.cloze_build(), &report)?;
        Ok(vec![ctx.layout.cloze_tasks(), ctx.layout.cloze_build()])
    })
}

fn eval_cloze_stage<T: Scalar>(ctx: &Ctx) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    if cfg.evaluation.cloze_inventory.is_none() {
        return Ok(ctx.not_configured(Stage::EvalCloze, "cloze_inventory"));
    }
    let plan = ctx.plan()?;
    let labels = plan.labels();
    let mut inputs = vec![ctx.require(ctx.layout.cloze_tasks(), Stage::BuildCloze)?];
    inputs.extend(ctx.battery_inputs(&labels)?);
    let opts = ctx.decode_options();
    ctx.unit(
        Stage::EvalCloze,
        None,
        &inputs,
        json!({"decode": opts, "dtype": cfg.dtype}),
        || {
            let tasks: Vec<ClozeTask> = read_jsonl(&ctx.layout.cloze_tasks())?;
            let (toks, models) = ctx.load_battery::<T>(&labels)?;
            let battery = members(&labels, &toks, &models);
            let outcome = rank_cloze(&battery, &tasks, &opts);
            write_jsonl(&ctx.layout.cloze_rankings(), &outcome.rankings)?;
            write_jsonl(&ctx.layout.cloze_failures(), &outcome.failures)?;
            Ok(vec![ctx.layout.cloze_rankings(), ctx.layout.cloze_failures()])
        },
    )
}

#[derive(Serialize)]
struct AccuracyRow<'a> {
    model: &'a str,
    n: usize,
    mrr: Option<f64>,
    groups: Vec<GroupAccuracy>,
    omitted_groups: Vec<String>,
}

fn leakage_stage(ctx: &Ctx) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    if cfg.evaluation.cloze_inventory.is_none() {
        return Ok(ctx.not_configured(Stage::Leakage, "cloze_inventory"));
    }
    let inputs = [
        ctx.require(ctx.layout.cloze_tasks(), Stage::BuildCloze)?,
        ctx.require(ctx.layout.cloze_rankings(), Stage::EvalCloze)?,
        ctx.require(ctx.layout.plan(), Stage::Slice)?,
    ];
    ctx.unit(Stage::Leakage, None, &inputs, json!({"k": cfg.evaluation.k}), || {
        let plan = ctx.plan()?;
        let tasks: Vec<ClozeTask> = read_jsonl(&ctx.layout.cloze_tasks())?;
        let rankings: Vec<ClozeRanking> = read_jsonl(&ctx.layout.cloze_rankings())?;
        let labels = plan.labels();
        let mut leak = Vec::new();
        let mut acc = Vec::new();
        for slice in &plan.slices {
            let mine: Vec<ClozeRanking> = rankings.iter().filter(|r| r.model == slice.label).cloned().collect();
            leak.push(leakage_report(
                &slice.label,
                &mine,
                &tasks,
                slice.last_year(),
                cfg.evaluation.k,
            )?);
            let grouped = grouped_accuracy(&mine, &tasks, &labels, slice_grouper(&plan.slices))?;
            acc.push(AccuracyRow {
                model: &slice.label,
                n: mine.len(),
                mrr: mrr(&mine).ok(),
                groups: grouped.groups,
                omitted_groups: grouped.omitted,
            });
        }
        write_jsonl(&ctx.layout.leakage(), &leak)?;
        write_jsonl(&ctx.layout.cloze_accuracy(), &acc)?;
        Ok(vec![ctx.layout.leakage(), ctx.layout.cloze_accuracy()])
    })
}

/// Sentences of the slices' test documents, in slice then document order.
pub fn discovery_sample(store: &CorpusStore, splits: &[SplitSet], limit: usize) -> Vec<String> {
    let mut out = Vec::new();
    for split in splits {
        for text in store.texts(&split.test) {
            for sentence in text.split_inclusive(['.', '!', '?']) {
                let s = sentence.trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                    if out.len() == limit {
                        return out;
                    }
                }
            }
        }
    }
    out
}

fn trajectory_tsv(labels: &[String], records: &[TrajectoryRecord]) -> String {
    let mut s = String::from("word\toccurrences");
    for l in labels {
        s.push_str(&format!("\tdelta_{l}"));
    }
    s.push_str("\tmonotone_decreasing\tfirst_last_change\tcumulative_delta\n");
    for r in records {
        s.push_str(&format!("{}\t{}", r.word, r.occurrences));
        for d in &r.deltas {
            s.push_str(&format!("\t{d:?}"));
        }
        s.push_str(&format!(
            "\t{}\t{:?}\t{:?}\n",
            r.monotone_decreasing, r.first_last_change, r.cumulative_delta
        ));
    }
    s
}

fn discover_stage<T: Scalar>(ctx: &Ctx) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    let plan = ctx.plan()?;
    let labels = plan.labels();
    let baseline = cfg.discovery.baseline.clone().unwrap_or_else(|| labels[0].clone());
    let Some(b) = labels.iter().position(|l| *l == baseline) else {
        return Err(Error::Config(format!(
            "discovery.baseline {baseline} is not a slice label; slices are {}",
            labels.join(", ")
        )));
    };
    let mut inputs = ctx.battery_inputs(&labels)?;
    for l in &labels {
        inputs.push(ctx.require(ctx.layout.split(l), Stage::Split)?);
    }
    inputs.push(ctx.require(ctx.layout.documents(), Stage::Ingest)?);
    let frag = json!({"discovery": cfg.discovery, "baseline": baseline, "dtype": cfg.dtype});
    ctx.unit(Stage::Discover, None, &inputs, frag, || {
        let store = ctx.store()?;
        let splits = labels.iter().map(|l| ctx.split(l)).collect::<Result<Vec<_>>>()?;
        let sample = discovery_sample(&store, &splits, cfg.discovery.max_sentences);
        let (toks, models) = ctx.load_battery::<T>(&labels)?;
        let battery = members(&labels, &toks, &models);
        let opts = &cfg.discovery.options;
        let occ = score_occurrences(&battery, &sample, opts.values)?;
        let all = trajectories(&occ, b, opts);
        let candidates = rank_candidates(all.clone(), opts.top_n);
        let cumulative = rank_cumulative(all, opts.top_n);
        write_file(
            &ctx.layout.candidates(),
            trajectory_tsv(&labels, &candidates).as_bytes(),
        )?;
        write_file(
            &ctx.layout.cumulative(),
            trajectory_tsv(&labels, &cumulative).as_bytes(),
        )?;
        let mut outputs = vec![ctx.layout.candidates(), ctx.layout.cumulative()];
        for word in &cfg.discovery.words {
            let table = occurrence_trajectories(&battery, word, &sample, opts.values)?;
            let mut text = table.to_tsv();
            if let Some(note) = &table.note {
                text = format!("# {note}\n{text}");
            }
            let path = ctx.layout.occurrences(&word.to_lowercase());
            write_file(&path, text.as_bytes())?;
            outputs.push(path);
        }
        Ok(outputs)
    })
}

fn attribute_stage(ctx: &Ctx, generator: Option<&dyn TextGenerator>) -> Result<UnitReport> {
    let cfg = ctx.cfg;
    let Some(a) = &cfg.attribution else {
        return Ok(ctx.not_configured(Stage::Attribute, "attribution section"));
    };
    let mut inputs = vec![cfg.resolve(&a.works)];
    if let (Some(auth), Some(cat)) = (&a.authority, &a.catalog) {
        inputs.push(cfg.resolve(auth));
        inputs.push(cfg.resolve(cat));
    }
    let frag = json!({
        "thresholds": a.thresholds, "endpoint": {"url": a.endpoint.url, "model": a.endpoint.model, "temperature": a.endpoint.temperature},
        "plausible_range": a.options.plausible_range, "tolerance": a.tolerance, "dq_delta": a.dq_delta, "dates": generator.is_some(),
    });
    ctx.unit(Stage::Attribute, None, &inputs, frag, || {
        let mut outputs = Vec::new();
        if let (Some(auth), Some(cat)) = (&a.authority, &a.catalog) {
            let authority: Vec<AuthorRecord> = read_jsonl(&cfg.resolve(auth))?;
            let catalog: Vec<AuthorRecord> = read_jsonl(&cfg.resolve(cat))?;
            for r in authority.iter().chain(&catalog) {
                r.check()?;
            }
            write_json(
                &ctx.layout.author_matches(),
                &match_authors(&authority, &catalog, a.thresholds)?,
            )?;
            outputs.push(ctx.layout.author_matches());
        }
        let Some(client) = generator else {
            log::warn!("attribute: no text generator configured; date attribution skipped");
            return Ok(outputs);
        };
        let works: Vec<Work> = read_jsonl(&cfg.resolve(&a.works))?;
        let dates: Vec<DateAttribution> =
            attribute_dates(&works, client, &a.options, Some(&ctx.layout.attribution_cache()))?;
        write_jsonl(&ctx.layout.attribution_dates(), &dates)?;
        outputs.push(ctx.layout.attribution_dates());
        if dates.iter().any(|d| !d.gold_years.is_empty()) {
            write_json(
                &ctx.layout.attribution_score(),
                &evaluate_attribution(&dates, a.tolerance, a.dq_delta)?,
            )?;
            outputs.push(ctx.layout.attribution_score());
        }
        Ok(outputs)
    })
}

/// One decoded completion of one prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRow {
    pub prefix_index: usize,
    pub model: String,
    pub rank: usize,
    pub word: String,
    pub score: f64,
}

/// Top-k completions of every prefix under the students of `slice` (or
/// of every slice).
pub fn decode_prefixes(config: &PipelineConfig, prefixes: &[String], slice: Option<&str>) -> Result<Vec<DecodeRow>> {
    match config.dtype {
        DType::F32 => decode_with::<f32>(config, prefixes, slice),
        DType::F64 => decode_with::<f64>(config, prefixes, slice),
    }
}

fn decode_with<T: Scalar>(config: &PipelineConfig, prefixes: &[String], slice: Option<&str>) -> Result<Vec<DecodeRow>> {
    let ctx = Ctx {
        cfg: config,
        layout: Layout::new(config.output_root()),
        force: false,
    };
    let plan = ctx.plan()?;
    let labels = ctx.units(&plan, slice)?;
    let (toks, models) = ctx.load_battery::<T>(&labels)?;
    let opts = ctx.decode_options();
    let mut rows = Vec::new();
    for (i, prefix) in prefixes.iter().enumerate() {
        for (j, label) in labels.iter().enumerate() {
            let c = top_k_for_text(&models[j], &toks[j], prefix, &opts)?;
            for comp in c.completions {
                rows.push(DecodeRow {
                    prefix_index: i,
                    model: label.clone(),
                    rank: comp.rank,
                    word: comp.word,
                    score: comp.score,
                });
            }
        }
    }
    Ok(rows)
}
