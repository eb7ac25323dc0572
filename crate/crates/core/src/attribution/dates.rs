use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_TEMPLATE: &str = "When was the work {} by {} written? Answer just with the year.";

/// The template with title and author substituted in order.
pub fn build_prompt(title: &str, author: &str) -> String {
    format!("When was the work {title} by {author} written? Answer just with the year.")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationError {
    pub message: String,
    pub retryable: bool,
}

impl std::fmt::Display for GenerationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// A chat or completion endpoint answering one prompt at a time.
pub trait TextGenerator: Sync {
    fn generate(&self, prompt: &str) -> std::result::Result<String, GenerationError>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub id: String,
    pub title: String,
    pub author: String,
    #[serde(default)]
    pub gold_years: Vec<i32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionStatus {
    Parsed,
    Unparseable,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateAttribution {
    pub work_id: String,
    pub predicted_year: Option<i32>,
    #[serde(default)]
    pub gold_years: Vec<i32>,
    pub raw_response: String,
    pub status: AttributionStatus,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionOptions {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_in_flight: usize,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
    pub plausible_range: (i32, i32),
}

impl Default for AttributionOptions {
    fn default() -> Self {
        AttributionOptions {
            max_attempts: 4,
            initial_backoff_ms: 500,
            max_in_flight: 4,
            min_interval_ms: 0,
            plausible_range: (500, 2100),
        }
    }
}

/// First standalone run of 3 or 4 ASCII digits whose value lies in
/// `range` (inclusive).
pub fn extract_year(text: &str, range: (i32, i32)) -> Option<i32> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let standalone = (start == 0 || !bytes[start - 1].is_ascii_alphanumeric())
            && (i == bytes.len() || !bytes[i].is_ascii_alphanumeric());
        if standalone && (3..=4).contains(&(i - start)) {
            let year: i32 = text[start..i].parse().expect("ascii digits");
            if year >= range.0 && year <= range.1 {
                return Some(year);
            }
        }
    }
    None
}

/// Reads an attribution cache; unparsable lines (e.g. a torn final write)
/// are skipped. Later records for a work override earlier ones.
pub fn load_cache(path: &Path) -> Result<BTreeMap<String, DateAttribution>> {
    let mut out = BTreeMap::new();
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(path, e)),
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Ok(rec) = serde_json::from_str::<DateAttribution>(&line) {
            out.insert(rec.work_id.clone(), rec);
        }
    }
    Ok(out)
}

fn attribute_one(
    work: &Work,
    client: &dyn TextGenerator,
    options: &AttributionOptions,
    pace: &Mutex<Instant>,
) -> DateAttribution {
    let prompt = build_prompt(&work.title, &work.author);
    let mut backoff = Duration::from_millis(options.initial_backoff_ms);
    let mut attempts = 0;
    let mut last_error = String::new();
    while attempts < options.max_attempts.max(1) {
        attempts += 1;
        if options.min_interval_ms > 0 {
            let wait = {
                let mut next = pace.lock().expect("pace lock");
                let now = Instant::now();
                let start = (*next).max(now);
                *next = start + Duration::from_millis(options.min_interval_ms);
                start - now
            };
            std::thread::sleep(wait);
        }
        match client.generate(&prompt) {
            Ok(response) => {
                let year = extract_year(&response, options.plausible_range);
                return DateAttribution {
                    work_id: work.id.clone(),
                    predicted_year: year,
                    gold_years: work.gold_years.clone(),
                    raw_response: response,
                    status: if year.is_some() {
                        AttributionStatus::Parsed
                    } else {
                        AttributionStatus::Unparseable
                    },
                    attempts,
                };
            }
            Err(e) => {
                log::warn!("work {}: attempt {attempts} failed: {e}", work.id);
                last_error = e.message;
                if !e.retryable {
                    break;
                }
                if attempts < options.max_attempts {
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
    DateAttribution {
        work_id: work.id.clone(),
        predicted_year: None,
        gold_years: work.gold_years.clone(),
        raw_response: last_error,
        status: AttributionStatus::Failed,
        attempts,
    }
}

/// Prompts `client` for each work's year. Works already present in the
/// cache with a response (parsed or not) are reused; failed ones are
/// retried. New results are appended to the cache as they arrive. The
/// output is sorted by work id.
pub fn attribute_dates(
    works: &[Work],
    client: &dyn TextGenerator,
    options: &AttributionOptions,
    cache: Option<&Path>,
) -> Result<Vec<DateAttribution>> {
    let cached = match cache {
        Some(p) => load_cache(p)?,
        None => BTreeMap::new(),
    };
    let mut done: BTreeMap<String, DateAttribution> = BTreeMap::new();
    let mut todo = Vec::new();
    for w in works {
        match cached.get(&w.id) {
            Some(rec) if rec.status != AttributionStatus::Failed => {
                let mut rec = rec.clone();
                rec.gold_years = w.gold_years.clone();
                done.insert(w.id.clone(), rec);
            }
            _ => todo.push(w),
        }
    }
    let sink = match cache {
        Some(p) => Some(Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    let results = Mutex::new(Vec::with_capacity(todo.len()));
    let write_error = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let pace = Mutex::new(Instant::now());
    let workers = options.max_in_flight.max(1).min(todo.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(work) = todo.get(i) else { break };
                let rec = attribute_one(work, client, options, &pace);
                if let Some(sink) = &sink {
                    let line = serde_json::to_string(&rec).expect("serializable record");
                    let mut f = sink.lock().expect("cache lock");
                    if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                        write_error.lock().expect("error lock").get_or_insert(e);
                    }
                }
                results.lock().expect("results lock").push(rec);
            });
        }
    });
    if let (Some(e), Some(p)) = (write_error.into_inner().expect("error lock"), cache) {
        return Err(Error::io(p, e));
    }
    for rec in results.into_inner().expect("results lock") {
        done.insert(rec.work_id.clone(), rec);
    }
    Ok(done.into_values().collect())
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::AtomicU32;

    use super::*;

    struct Fixed(&'static str);

    impl TextGenerator for Fixed {
        fn generate(&self, _: &str) -> std::result::Result<String, GenerationError> {
            Ok(self.0.to_string())
        }
    }

    struct Flaky {
        failures: AtomicU32,
        calls: AtomicU32,
    }

    impl TextGenerator for Flaky {
        fn generate(&self, prompt: &str) -> std::result::Result<String, GenerationError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            assert!(prompt.starts_with("When was the work "));
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(GenerationError {
                    message: "503".into(),
                    retryable: true,
                });
            }
            Ok("1851".into())
        }
    }

    fn work(id: &str) -> Work {
        Work {
            id: id.into(),
            title: "Moby-Dick".into(),
            author: "Herman Melville".into(),
            gold_years: vec![1851],
        }
    }

    fn fast() -> AttributionOptions {
        AttributionOptions {
            initial_backoff_ms: 1,
            ..Default::default()
        }
    }

    #[test]
    fn prompt_is_exact() {
        assert_eq!(
            build_prompt("Moby-Dick", "Herman Melville"),
            "When was the work Moby-Dick by Herman Melville written? Answer just with the year."
        );
        assert_eq!(
            PROMPT_TEMPLATE
                .replacen("{}", "Moby-Dick", 1)
                .replacen("{}", "Herman Melville", 1),
            build_prompt("Moby-Dick", "Herman Melville")
        );
    }

    #[test]
    fn year_extraction() {
        let r = (500, 2100);
        assert_eq!(extract_year("1851", r), Some(1851));
        assert_eq!(extract_year("It was written in 1851.", r), Some(1851));
        assert_eq!(extract_year("unknown", r), None);
        assert_eq!(extract_year("12345 or 1851", r), Some(1851));
        assert_eq!(extract_year("ISBN978 then 1790s", r), None);
        assert_eq!(extract_year("about 3000 copies in 1820", r), Some(1820));
        assert_eq!(extract_year("written c. 890", r), Some(890));
    }

    #[test]
    fn clean_and_unparseable_responses() {
        let out = attribute_dates(&[work("a")], &Fixed("It was written in 1851."), &fast(), None).unwrap();
        assert_eq!(out[0].predicted_year, Some(1851));
        let out = attribute_dates(&[work("a")], &Fixed("unknown"), &fast(), None).unwrap();
        assert_eq!(out[0].predicted_year, None);
        assert_eq!(out[0].status, AttributionStatus::Unparseable);
    }

    #[test]
    fn retries_then_succeeds_or_fails() {
        let flaky = Flaky {
            failures: AtomicU32::new(2),
            calls: AtomicU32::new(0),
        };
        let out = attribute_dates(&[work("a")], &flaky, &fast(), None).unwrap();
        assert_eq!((out[0].predicted_year, out[0].attempts), (Some(1851), 3));
        let flaky = Flaky {
            failures: AtomicU32::new(100),
            calls: AtomicU32::new(0),
        };
        let out = attribute_dates(&[work("a")], &flaky, &fast(), None).unwrap();
        assert_eq!(out[0].status, AttributionStatus::Failed);
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn cache_makes_runs_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let works: Vec<Work> = (0..6).map(|i| work(&format!("w{i}"))).collect();
        let first = attribute_dates(&works[..4], &Fixed("1851"), &fast(), Some(&path)).unwrap();
        assert_eq!(first.len(), 4);
        let counter = Flaky {
            failures: AtomicU32::new(0),
            calls: AtomicU32::new(0),
        };
        let all = attribute_dates(&works, &counter, &fast(), Some(&path)).unwrap();
        assert_eq!(counter.calls.load(Ordering::SeqCst), 2);
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0].work_id < w[1].work_id));
        assert_eq!(load_cache(&path).unwrap().len(), 6);
    }
}
