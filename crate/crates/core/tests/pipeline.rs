mod common;

use std::sync::Mutex;

use chronolm::attribution::{GenerationError, TextGenerator};
use chronolm::pipeline::{parse_stages, run, PipelineConfig, RunOptions, Stage, UnitStatus};
use chronolm::Error;

struct FixedYear;

impl TextGenerator for FixedYear {
    fn generate(&self, prompt: &str) -> Result<String, GenerationError> {
        let n = prompt.len() % 7;
        Ok(format!("{}", 1805 + n as i32 * 20))
    }
}

fn stage(name: &str) -> Vec<Stage> {
    parse_stages(name).unwrap()
}

#[test]
fn stage_names_roundtrip() {
    for s in Stage::ALL {
        assert_eq!(Stage::from_name(s.name()), Some(s));
    }
    assert_eq!(parse_stages("all").unwrap().len(), 13);
    assert!(parse_stages("bogus").is_none());
}

#[test]
fn config_roundtrips_and_fixture_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_fixture(dir.path());
    assert!(cfg.diagnostics().is_empty(), "{:?}", cfg.diagnostics());
    let loaded = PipelineConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(loaded, cfg);
    let again = PipelineConfig::from_toml(&loaded.to_toml().unwrap(), dir.path()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn diagnostics_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_fixture(dir.path());
    cfg.training.distillation_alpha = 1.5;
    cfg.slicing.n_slices = 0;
    cfg.slicing.budgets.val = 0;
    cfg.corpus.paths.push("missing.jsonl".into());
    let d = cfg.diagnostics();
    let fields: Vec<&str> = d.iter().map(|x| x.field.as_str()).collect();
    assert!(d.iter().any(|x| x.message.contains("distillation_alpha")), "{d:?}");
    assert!(fields.contains(&"slicing.n_slices"));
    assert!(fields.contains(&"slicing.budgets"));
    assert!(d
        .iter()
        .any(|x| x.field == "corpus.paths" && x.message.contains("missing.jsonl")));
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_fixture(dir.path());
    let text = cfg.to_toml().unwrap().replace("[slicing]", "[slicing]\nslices = 3");
    assert!(PipelineConfig::from_toml(&text, dir.path()).is_err());
}

#[test]
fn missing_upstream_names_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_fixture(dir.path());
    let opts = RunOptions::default();
    match run(&cfg, &stage("slice"), &opts) {
        Err(Error::MissingUpstream { stage, .. }) => assert_eq!(stage, "ingest"),
        other => panic!("expected a missing-upstream error, got {other:?}"),
    }
    run(&cfg, &parse_stages("ingest").unwrap(), &opts).unwrap();
    run(&cfg, &stage("slice"), &opts).unwrap();
    run(&cfg, &stage("split"), &opts).unwrap();
    run(&cfg, &stage("tokenize"), &opts).unwrap();
    match run(&cfg, &stage("distill"), &opts) {
        Err(Error::MissingUpstream { stage, .. }) => assert_eq!(stage, "train-teachers"),
        other => panic!("expected a missing-upstream error, got {other:?}"),
    }
}

#[test]
fn unchanged_stage_is_skipped_and_changes_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_fixture(dir.path());
    let opts = RunOptions::default();
    run(&cfg, &stage("ingest"), &opts).unwrap();
    let first = run(&cfg, &stage("slice"), &opts).unwrap();
    assert_eq!(first[0].status, UnitStatus::Ran);
    let second = run(&cfg, &stage("slice"), &opts).unwrap();
    assert_eq!(second[0].status, UnitStatus::Skipped);
    let forced = run(
        &cfg,
        &stage("slice"),
        &RunOptions {
            force: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(forced[0].status, UnitStatus::Ran);

    std::fs::remove_file(dir.path().join("out/slice/plan.json")).unwrap();
    let rebuilt = run(&cfg, &stage("slice"), &opts).unwrap();
    assert_eq!(rebuilt[0].status, UnitStatus::Ran);
    assert!(dir.path().join("out/slice/plan.json").exists());

    cfg.slicing.budgets.test += 1;
    let changed = run(&cfg, &stage("slice"), &opts).unwrap();
    assert_eq!(changed[0].status, UnitStatus::Ran);
}

#[test]
fn infeasible_budgets_fail_with_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_fixture(dir.path());
    cfg.slicing.budgets.train *= 10;
    let opts = RunOptions::default();
    run(&cfg, &stage("ingest"), &opts).unwrap();
    let err = run(&cfg, &stage("slice"), &opts).unwrap_err();
    assert!(err.to_string().contains("infeasible"), "{err}");
    let report = std::fs::read_to_string(dir.path().join("out/slice/infeasibility.json")).unwrap();
    assert!(report.contains("shortfalls"));
    assert!(!dir.path().join("out/slice/plan.json").exists());
}

#[test]
fn slice_flag_limits_per_slice_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_fixture(dir.path());
    let opts = RunOptions::default();
    run(&cfg, &stage("ingest"), &opts).unwrap();
    run(&cfg, &stage("slice"), &opts).unwrap();
    let one = RunOptions {
        slice: Some("1850-1900".into()),
        ..Default::default()
    };
    let r = run(&cfg, &stage("split"), &one).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].slice.as_deref(), Some("1850-1900"));
    assert!(dir.path().join("out/split/1850-1900.json").exists());
    assert!(!dir.path().join("out/split/1800-1850.json").exists());
    let bad = RunOptions {
        slice: Some("1700-1750".into()),
        ..Default::default()
    };
    assert!(run(&cfg, &stage("split"), &bad).is_err());
    assert!(run(&cfg, &stage("slice"), &one).is_err());
}

#[test]
fn lock_blocks_a_concurrent_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_fixture(dir.path());
    let _held = chronolm::pipeline::RunLock::acquire(&cfg.output_root()).unwrap();
    let err = run(&cfg, &stage("ingest"), &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("in use"), "{err}");
}

static FULL: Mutex<()> = Mutex::new(());

#[test]
fn full_run_writes_every_report() {
    let _g = FULL.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_fixture(dir.path());
    let gen = FixedYear;
    let opts = RunOptions {
        generator: Some(&gen),
        ..Default::default()
    };
    let reports = run(&cfg, &stage("all"), &opts).unwrap();
    assert!(reports.iter().all(|r| r.status == UnitStatus::Ran), "{reports:?}");
    let out = dir.path().join("out");
    let labels = ["1800-1850", "1850-1900", "1900-1949"];
    let mut expected = vec![
        "ingest/documents.jsonl".to_string(),
        "ingest/rejections.jsonl".into(),
        "slice/plan.json".into(),
        "reports/perplexity.csv".into(),
        "reports/minimal_pairs.jsonl".into(),
        "reports/minimal_pairs_retention.json".into(),
        "cloze/tasks.jsonl".into(),
        "cloze/build_report.json".into(),
        "reports/cloze_rankings.jsonl".into(),
        "reports/cloze_failures.jsonl".into(),
        "reports/leakage.jsonl".into(),
        "reports/cloze_accuracy.jsonl".into(),
        "reports/trajectory_candidates.tsv".into(),
        "reports/cumulative_divergence.tsv".into(),
        "attribution/author_matches.json".into(),
        "attribution/cache.jsonl".into(),
        "reports/attribution_dates.jsonl".into(),
        "reports/attribution_score.json".into(),
    ];
    for l in labels {
        expected.push(format!("split/{l}.json"));
        expected.push(format!("tokenize/{l}.tokenizer.json"));
        expected.push(format!("tokenize/{l}.vocab.json"));
        expected.push(format!("teachers/{l}/teacher-0.ckpt"));
        expected.push(format!("teachers/{l}/teacher-1.ckpt"));
        expected.push(format!("students/{l}/student.ckpt"));
        expected.push(format!("manifests/distill/{l}.json"));
    }
    for w in &cfg.discovery.words {
        expected.push(format!("reports/occurrences/{w}.tsv"));
    }
    for s in Stage::ALL.iter().filter(|s| !s.per_slice()) {
        expected.push(format!("manifests/{}.json", s.name()));
    }
    for e in &expected {
        assert!(out.join(e).exists(), "missing {e}");
    }
    let ppl = std::fs::read_to_string(out.join("reports/perplexity.csv")).unwrap();
    for l in labels {
        assert!(ppl.contains(l));
    }
    assert!(!out.join(".lock").exists());

    let again = run(&cfg, &stage("all"), &opts).unwrap();
    assert!(again.iter().all(|r| r.status == UnitStatus::Skipped), "{again:?}");
}
