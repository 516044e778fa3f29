//! Line-delimited JSON files for impressions and the show catalog.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{DataError, ImpressionRecord, LESS_STREAMED_THRESHOLD};
use crate::model::{Source, Task};

const IMPRESSION_FIELDS: [&str; 12] = [
    "id",
    "ts",
    "source",
    "user_id",
    "show_id",
    "f_user",
    "f_content",
    "f_context",
    "f_creative",
    "labels",
    "label_present",
    "cost",
];

/// One show as written to the catalog file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogRow {
    pub show_id: u32,
    pub tier: u8,
    pub hours_30d: f64,
    pub lifetime_streams: u64,
    pub popularity: f64,
}

impl CatalogRow {
    pub fn less_streamed(&self) -> bool {
        self.lifetime_streams < LESS_STREAMED_THRESHOLD
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_impressions(records: &[ImpressionRecord], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        for (name, v) in [
            ("f_user", &r.f_user),
            ("f_content", &r.f_content),
            ("f_context", &r.f_context),
            ("f_creative", &r.f_creative),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DataError::Malformed {
                    line: 0,
                    field: name.into(),
                    message: format!("record {} has a non-finite feature", r.id),
                });
            }
        }
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_impressions(path: impl AsRef<Path>) -> Result<Vec<ImpressionRecord>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_impression(&line, i + 1)?);
    }
    Ok(out)
}

fn malformed(line: usize, field: &str, message: impl Into<String>) -> DataError {
    DataError::Malformed {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn parse_impression(text: &str, line: usize) -> Result<ImpressionRecord, DataError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| malformed(line, "<record>", e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(malformed(line, "<record>", "expected a JSON object"));
    };
    if let Some(extra) = obj.keys().find(|k| !IMPRESSION_FIELDS.contains(&k.as_str())) {
        return Err(malformed(line, extra, "unknown field"));
    }
    let field = |name: &str| obj.get(name).ok_or_else(|| malformed(line, name, "missing"));
    let as_u64 = |name: &str| {
        field(name)?
            .as_u64()
            .ok_or_else(|| malformed(line, name, "expected a non-negative integer"))
    };
    let as_u32 = |name: &str| {
        u32::try_from(as_u64(name)?).map_err(|_| malformed(line, name, "out of range"))
    };
    let as_vec = |name: &str| -> Result<Vec<f64>, DataError> {
        let arr = field(name)?
            .as_array()
            .ok_or_else(|| malformed(line, name, "expected an array of numbers"))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| malformed(line, name, "expected finite numbers"))
            })
            .collect()
    };

    let source: Source = field("source")?
        .as_str()
        .ok_or_else(|| malformed(line, "source", "expected \"P\" or \"A\""))?
        .parse()
        .map_err(|e: String| malformed(line, "source", e))?;
    let ts = field("ts")?
        .as_i64()
        .ok_or_else(|| malformed(line, "ts", "expected an integer"))?;
    let cost = field("cost")?
        .as_f64()
        .filter(|c| c.is_finite() && *c >= 0.0)
        .ok_or_else(|| malformed(line, "cost", "expected a non-negative number"))?;
    if source == Source::Promotion && cost != 0.0 {
        return Err(malformed(line, "cost", "promotion impressions carry no cost"));
    }

    let labels = task_map(&obj, "labels", line, |v| match v.as_u64() {
        Some(0) => Some(0u8),
        Some(1) => Some(1u8),
        _ => None,
    })?;
    let label_present = task_map(&obj, "label_present", line, Value::as_bool)?;

    Ok(ImpressionRecord {
        id: as_u64("id")?,
        ts,
        source,
        user_id: as_u32("user_id")?,
        show_id: as_u32("show_id")?,
        f_user: as_vec("f_user")?,
        f_content: as_vec("f_content")?,
        f_context: as_vec("f_context")?,
        f_creative: as_vec("f_creative")?,
        labels,
        label_present,
        cost,
    })
}

fn task_map<T>(
    obj: &Map<String, Value>,
    name: &str,
    line: usize,
    convert: impl Fn(&Value) -> Option<T>,
) -> Result<BTreeMap<Task, T>, DataError> {
    let map = obj
        .get(name)
        .ok_or_else(|| malformed(line, name, "missing"))?
        .as_object()
        .ok_or_else(|| malformed(line, name, "expected an object keyed by task"))?;
    let unknown: Vec<String> = map
        .keys()
        .filter(|k| k.parse::<Task>().is_err())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(DataError::UnknownTasks { line, keys: unknown });
    }
    map.iter()
        .map(|(k, v)| {
            let task: Task = k.parse().expect("checked above");
            convert(v)
                .map(|x| (task, x))
                .ok_or_else(|| malformed(line, name, format!("bad value for task {k}")))
        })
        .collect()
}

pub fn write_catalog(rows: &[CatalogRow], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<Vec<CatalogRow>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CatalogRow = serde_json::from_str(&line)
            .map_err(|e| malformed(i + 1, "<catalog row>", e.to_string()))?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{LogConfig, World, WorldConfig};

    fn sample(n_promo: usize, n_ad: usize) -> Vec<ImpressionRecord> {
        let w = World::generate(
            &WorldConfig {
                n_users: 300,
                n_shows: 64,
                ..WorldConfig::default()
            },
            3,
        )
        .unwrap();
        w.simulate_logs(
            &LogConfig {
                n_promo,
                n_ad,
                ..LogConfig::default()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(read_impressions(&p).unwrap().is_empty());
    }

    #[test]
    fn round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imp.jsonl");
        let mut recs = sample(700, 300);
        recs[0].f_user[0] = 0.1 + 0.2;
        recs[1].label_present.insert(Task::Like, false);
        write_impressions(&recs, &p).unwrap();
        assert_eq!(read_impressions(&p).unwrap(), recs);
    }

    #[test]
    fn missing_source_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let recs = sample(3, 0);
        write_impressions(&recs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut obj: Map<String, Value> = serde_json::from_str(&lines[1]).unwrap();
        obj.remove("source");
        lines[1] = serde_json::to_string(&obj).unwrap();
        std::fs::write(&p, lines.join("\n")).unwrap();
        match read_impressions(&p).unwrap_err() {
            DataError::Malformed { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "source");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_task_keys_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let recs = sample(1, 0);
        let mut obj: Map<String, Value> =
            serde_json::from_str(&serde_json::to_string(&recs[0]).unwrap()).unwrap();
        let labels = obj.get_mut("labels").unwrap().as_object_mut().unwrap();
        labels.insert("Share".into(), Value::from(1));
        labels.insert("Save".into(), Value::from(0));
        std::fs::write(&p, serde_json::to_string(&obj).unwrap()).unwrap();
        match read_impressions(&p).unwrap_err() {
            DataError::UnknownTasks { line, keys } => {
                assert_eq!(line, 1);
                assert_eq!(keys, vec!["Save".to_string(), "Share".to_string()]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn catalog_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("catalog.jsonl");
        let w = World::generate(
            &WorldConfig {
                n_users: 10,
                n_shows: 50,
                ..WorldConfig::default()
            },
            1,
        )
        .unwrap();
        let rows = w.catalog.rows();
        write_catalog(&rows, &p).unwrap();
        assert_eq!(read_catalog(&p).unwrap(), rows);
    }
}
