//! Line-delimited record files: pages, tasks, predictions, results.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::RecordError;
use crate::geometry::ClipTally;
use crate::taskgen::{PageRecord, RawPage, TaskInstance};

/// `{"task_id", "raw_output"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_id: String,
    pub raw_output: String,
}

/// Parse every nonblank line as a `T`, reporting 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<(usize, T)>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|source| RecordError::Json { line: i + 1, source })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<(), RecordError> {
    for item in items {
        serde_json::to_writer(&mut writer, item).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn check_unique<'a>(ids: impl Iterator<Item = (usize, &'a str)>) -> Result<(), RecordError> {
    let mut seen = HashSet::new();
    for (line, id) in ids {
        if !seen.insert(id) {
            return Err(RecordError::DuplicateId {
                id: id.to_string(),
                line,
            });
        }
    }
    Ok(())
}

/// Read page records, clipping boxes into each image.
pub fn read_pages(reader: impl BufRead) -> Result<(Vec<PageRecord>, ClipTally), RecordError> {
    let raw: Vec<(usize, RawPage)> = read_jsonl(reader)?;
    check_unique(raw.iter().map(|(l, p)| (*l, p.id.as_str())))?;
    let mut tally = ClipTally::default();
    let mut pages = Vec::with_capacity(raw.len());
    for (line, r) in raw {
        let page = PageRecord::from_raw(r, &mut tally).map_err(|e| RecordError::Invalid {
            line,
            message: e.to_string(),
        })?;
        pages.push(page);
    }
    Ok((pages, tally))
}

pub fn read_tasks(reader: impl BufRead) -> Result<Vec<TaskInstance>, RecordError> {
    let tasks: Vec<(usize, TaskInstance)> = read_jsonl(reader)?;
    check_unique(tasks.iter().map(|(l, t)| (*l, t.task_id.as_str())))?;
    Ok(tasks.into_iter().map(|(_, t)| t).collect())
}

/// Predictions keyed by task id. A repeated task id is an error.
pub fn read_predictions(reader: impl BufRead) -> Result<HashMap<String, String>, RecordError> {
    let preds: Vec<(usize, Prediction)> = read_jsonl(reader)?;
    check_unique(preds.iter().map(|(l, p)| (*l, p.task_id.as_str())))?;
    Ok(preds.into_iter().map(|(_, p)| (p.task_id, p.raw_output)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_numbers_in_errors() {
        let text = "{\"task_id\":\"a\",\"raw_output\":\"x\"}\n\n{\"task_id\":\"a\",\"raw_output\":\"y\"}\n";
        match read_predictions(text.as_bytes()) {
            Err(RecordError::DuplicateId { id, line }) => assert_eq!((id.as_str(), line), ("a", 3)),
            other => panic!("{other:?}"),
        }
        let text = "{\"task_id\":\"a\",\"raw_output\":\"x\"}\nnot json\n";
        match read_predictions(text.as_bytes()) {
            Err(RecordError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let page = "{\"id\":\"p\",\"image\":{\"width\":0,\"height\":5},\"lines\":[]}\n";
        assert!(matches!(
            read_pages(page.as_bytes()),
            Err(RecordError::Invalid { line: 1, .. })
        ));
    }

    #[test]
    fn predictions_round_trip() {
        let preds = vec![Prediction {
            task_id: "t".into(),
            raw_output: "[[1,2,3,4]]".into(),
        }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &preds).unwrap();
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back["t"], "[[1,2,3,4]]");
    }
}
