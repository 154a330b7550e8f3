//! Grounded OCR evaluation: task construction from annotated pages, tolerant
//! parsing of model output, and scoring with CER/WER, IoU-matched detection
//! F1, mCER, page-level CER over layout-preserving linearizations, and a
//! composite score.

pub mod detmatch;
pub mod e2emetrics;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod geometry;
pub mod outparse;
pub mod records;
pub mod scorer;
pub mod span;
pub mod taskgen;
pub mod text2d;
pub mod textmetrics;
pub mod textnorm;

pub use detmatch::{assign, detection_scores, match_boxes, DetectionScores, Matching};
pub use e2emetrics::{cer_e2e, mcer_at};
pub use error::{GeometryError, RecordError, ScoreError, TaskError};
pub use exec::Execution;
pub use geometry::{clip_box, coverage, iou, BBox, ImageDims};
pub use outparse::{parse_prediction, ParseKind, ParsedOutput, Payload};
pub use scorer::{composite, score_task, Aggregate, CompositeInputs, Metric, Report, ScoreGroup, TaskResult};
pub use span::GroundedSpan;
pub use taskgen::{Family, Granularity, OutputFormat, PageRecord, Reference, TaskInstance};
pub use text2d::render_text2d;
pub use textmetrics::{cer, levenshtein, wer};
pub use textnorm::{normalize, normalize_2d};
