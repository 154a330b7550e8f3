use thiserror::Error;

use crate::outparse::ParseKind;
use crate::taskgen::{Family, Granularity, OutputFormat};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite box coordinates {0:?}")]
    NonFinite([f64; 4]),
    #[error("degenerate box {0:?}: need x1 < x2 and y1 < y2")]
    Degenerate([i64; 4]),
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("page {page_id} has no {granularity} annotations")]
    MissingGranularity { page_id: String, granularity: Granularity },
    #[error("{format} is not a valid output format for {family} tasks")]
    UnsupportedFormat { family: Family, format: OutputFormat },
    #[error("template bank has no templates for {family}/{format}")]
    EmptyTemplateBank { family: Family, format: OutputFormat },
    #[error("invalid template bank: {0}")]
    BadTemplateBank(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("task {task_id}: {family}/{format} is not a scorable combination")]
    FamilyFormatMismatch {
        task_id: String,
        family: Family,
        format: OutputFormat,
    },
    #[error("task {task_id}: reference payload does not match {family}/{format}")]
    ReferenceMismatch {
        task_id: String,
        family: Family,
        format: OutputFormat,
    },
    #[error("task {task_id}: parsed as {got}, which cannot score a {format} task")]
    ParseMismatch {
        task_id: String,
        format: OutputFormat,
        got: ParseKind,
    },
    #[error("composite input {name} = {value} lies outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
}

/// Schema problems in line-delimited record files.
#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
