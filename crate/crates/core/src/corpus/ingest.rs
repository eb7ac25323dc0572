use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CorpusStore, Document, YearRange};
use crate::error::{Error, Result};

/// Names of the record fields that carry each document attribute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSchema {
    pub id: String,
    pub title: Option<String>,
    pub author: Option<String>,
    pub year: String,
    pub text: String,
}

impl Default for FieldSchema {
    fn default() -> Self {
        FieldSchema {
            id: "id".into(),
            title: Some("title".into()),
            author: Some("author".into()),
            year: "year".into(),
            text: "text".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub source: String,
    pub line: Option<usize>,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub rejections: Vec<Rejection>,
}

impl RejectionReport {
    pub fn push(&mut self, r: Rejection) {
        self.rejections.push(r);
    }

    pub fn len(&self) -> usize {
        self.rejections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rejections.is_empty()
    }
}

/// Reads newline-delimited JSON records from every path into one store.
///
/// Unreadable files are errors; bad records are collected into the
/// rejection report.
pub fn ingest<P: AsRef<Path>>(
    paths: &[P],
    schema: &FieldSchema,
    range: YearRange,
) -> Result<(CorpusStore, RejectionReport)> {
    let mut store = CorpusStore::empty(range);
    let mut report = RejectionReport::default();
    for path in paths {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        ingest_into(
            BufReader::new(file),
            &path.display().to_string(),
            schema,
            &mut store,
            &mut report,
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok((store, report))
}

/// Same as [`ingest`] for a single in-memory source.
pub fn ingest_reader<R: BufRead>(
    reader: R,
    source: &str,
    schema: &FieldSchema,
    range: YearRange,
) -> std::io::Result<(CorpusStore, RejectionReport)> {
    let mut store = CorpusStore::empty(range);
    let mut report = RejectionReport::default();
    ingest_into(reader, source, schema, &mut store, &mut report)?;
    Ok((store, report))
}

fn ingest_into<R: BufRead>(
    reader: R,
    source: &str,
    schema: &FieldSchema,
    store: &mut CorpusStore,
    report: &mut RejectionReport,
) -> std::io::Result<()> {
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reject = |id: Option<String>, reason: String| Rejection {
            source: source.to_string(),
            line: Some(i + 1),
            id,
            reason,
        };
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                report.push(reject(None, format!("unparseable record: {e}")));
                continue;
            }
        };
        match parse_record(&value, schema) {
            Ok(doc) => match store.check(&doc) {
                Ok(()) => store.insert(doc),
                Err(reason) => report.push(reject(Some(doc.id), reason)),
            },
            Err((id, reason)) => report.push(reject(id, reason)),
        }
    }
    Ok(())
}

fn parse_record(value: &Value, schema: &FieldSchema) -> std::result::Result<Document, (Option<String>, String)> {
    let obj = value.as_object().ok_or((None, "record is not an object".to_string()))?;
    let id = match obj.get(&schema.id) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err((None, format!("missing field `{}`", schema.id))),
    };
    let year = match obj.get(&schema.year) {
        Some(Value::Number(n)) => n.as_i64(),
        Some(Value::String(s)) => s.trim().parse::<i64>().ok(),
        _ => None,
    }
    .and_then(|y| i32::try_from(y).ok())
    .ok_or((Some(id.clone()), format!("missing or non-integer `{}`", schema.year)))?;
    let text = match obj.get(&schema.text) {
        Some(Value::String(s)) => s.clone(),
        _ => return Err((Some(id), format!("missing field `{}`", schema.text))),
    };
    let opt = |field: &Option<String>| {
        field
            .as_ref()
            .and_then(|f| obj.get(f))
            .and_then(Value::as_str)
            .map(str::to_string)
    };
    Ok(Document {
        title: opt(&schema.title),
        author: opt(&schema.author),
        id,
        year,
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range() -> YearRange {
        YearRange::new(1750, 1940)
    }

    #[test]
    fn single_valid_record() {
        let src = r#"{"id":"a","year":1800,"text":"some words here"}"#;
        let (store, report) = ingest_reader(src.as_bytes(), "mem", &FieldSchema::default(), range()).unwrap();
        assert_eq!(store.len(), 1);
        assert!(report.is_empty());
        assert_eq!(store.get("a").unwrap().year, 1800);
    }

    #[test]
    fn out_of_range_year_is_reported() {
        let src = r#"{"id":"a","year":1700,"text":"old"}"#;
        let (store, report) = ingest_reader(src.as_bytes(), "mem", &FieldSchema::default(), range()).unwrap();
        assert!(store.is_empty());
        assert_eq!(report.len(), 1);
        assert!(report.rejections[0].reason.contains("outside range"));
    }

    #[test]
    fn custom_schema_and_string_years() {
        let src = r#"{"key":"x","date":"1851","body":"text","by":"Melville"}"#;
        let schema = FieldSchema {
            id: "key".into(),
            title: None,
            author: Some("by".into()),
            year: "date".into(),
            text: "body".into(),
        };
        let (store, _) = ingest_reader(src.as_bytes(), "mem", &schema, range()).unwrap();
        let doc = store.get("x").unwrap();
        assert_eq!(doc.year, 1851);
        assert_eq!(doc.author.as_deref(), Some("Melville"));
    }

    #[test]
    fn multiple_files_with_malformed_records() {
        let dir = tempfile::tempdir().unwrap();
        let files = [
            // 4 records, 1 missing year
            "{\"id\":\"a1\",\"year\":1800,\"text\":\"a\"}\n{\"id\":\"a2\",\"year\":1801,\"text\":\"b\"}\n{\"id\":\"a3\",\"text\":\"c\"}\n{\"id\":\"a4\",\"year\":1802,\"text\":\"d\"}\n",
            // 3 records, 1 not json
            "{\"id\":\"b1\",\"year\":1850,\"text\":\"e\"}\nnot json at all\n{\"id\":\"b2\",\"year\":1851,\"text\":\"f\"}\n",
            // 3 valid records
            "{\"id\":\"c1\",\"year\":1900,\"text\":\"g\"}\n{\"id\":\"c2\",\"year\":1901,\"text\":\"h\"}\n{\"id\":\"c3\",\"year\":1902,\"text\":\"i\"}\n",
        ];
        let mut paths = Vec::new();
        for (i, body) in files.iter().enumerate() {
            let p = dir.path().join(format!("f{i}.jsonl"));
            std::fs::write(&p, body).unwrap();
            paths.push(p);
        }
        let (store, report) = ingest(&paths, &FieldSchema::default(), range()).unwrap();
        assert_eq!(store.len(), 8);
        assert_eq!(report.len(), 2);
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let err = ingest(&["/nonexistent/x.jsonl"], &FieldSchema::default(), range());
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn empty_text_and_duplicates_rejected() {
        let src = "{\"id\":\"a\",\"year\":1800,\"text\":\"\"}\n{\"id\":\"b\",\"year\":1800,\"text\":\"x\"}\n{\"id\":\"b\",\"year\":1801,\"text\":\"y\"}\n";
        let (store, report) = ingest_reader(src.as_bytes(), "mem", &FieldSchema::default(), range()).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(report.len(), 2);
    }
}
