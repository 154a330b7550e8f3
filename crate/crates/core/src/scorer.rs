//! Per-task scoring, sharded aggregation, and the composite score.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::detmatch::DetectionScores;
use crate::e2emetrics::{cer_e2e, match_spans, mcer_from_matching};
use crate::error::ScoreError;
use crate::exec::Execution;
use crate::geometry::ImageDims;
use crate::outparse::{parse_prediction_with, ParseKind, ParseOptions, ParsedOutput, Payload};
use crate::span::GroundedSpan;
use crate::taskgen::{Family, OutputFormat, Reference, TaskInstance};
use crate::textmetrics::{cer, cer_with, wer, TextMode};

/// IoU threshold for all detection-style metrics.
pub const MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cer,
    Wer,
    Mcer,
    CerE2e,
    F1,
    Recall,
    Precision,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cer => "cer",
            Metric::Wer => "wer",
            Metric::Mcer => "mcer",
            Metric::CerE2e => "cer_e2e",
            Metric::F1 => "f1",
            Metric::Recall => "recall",
            Metric::Precision => "precision",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reporting bucket: a task family, with reading split by output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreGroup {
    ReadingText,
    ReadingText2d,
    ReadingLines,
    ReadingParagraphs,
    LocalizedReading,
    Detection,
    ConditionalDetection,
}

impl ScoreGroup {
    pub fn of(family: Family, format: OutputFormat) -> Option<Self> {
        use OutputFormat as F;
        Some(match (family, format) {
            (Family::Reading, F::Text) => ScoreGroup::ReadingText,
            (Family::Reading, F::Text2d) => ScoreGroup::ReadingText2d,
            (Family::Reading, F::Lines) => ScoreGroup::ReadingLines,
            (Family::Reading, F::Paragraphs) => ScoreGroup::ReadingParagraphs,
            (Family::LocalizedReading, F::Lines | F::Paragraphs) => ScoreGroup::LocalizedReading,
            (Family::Detection, F::Box) => ScoreGroup::Detection,
            (Family::ConditionalDetection, F::Box) => ScoreGroup::ConditionalDetection,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreGroup::ReadingText => "reading_text",
            ScoreGroup::ReadingText2d => "reading_text2d",
            ScoreGroup::ReadingLines => "reading_lines",
            ScoreGroup::ReadingParagraphs => "reading_paragraphs",
            ScoreGroup::LocalizedReading => "localized_reading",
            ScoreGroup::Detection => "detection",
            ScoreGroup::ConditionalDetection => "conditional_detection",
        }
    }

    /// Metrics every result in this group carries.
    pub fn metrics(self) -> &'static [Metric] {
        match self {
            ScoreGroup::ReadingText | ScoreGroup::ReadingText2d | ScoreGroup::LocalizedReading => {
                &[Metric::Cer, Metric::Wer]
            }
            ScoreGroup::ReadingLines | ScoreGroup::ReadingParagraphs => &[
                Metric::CerE2e,
                Metric::Mcer,
                Metric::F1,
                Metric::Recall,
                Metric::Precision,
            ],
            ScoreGroup::Detection | ScoreGroup::ConditionalDetection => {
                &[Metric::F1, Metric::Recall, Metric::Precision]
            }
        }
    }
}

impl fmt::Display for ScoreGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScoreGroup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown score group {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub family: Family,
    pub output_format: OutputFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub metrics: BTreeMap<Metric, f64>,
    pub parse_kind: ParseKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl TaskResult {
    pub fn group(&self) -> ScoreGroup {
        ScoreGroup::of(self.family, self.output_format).expect("results only exist for valid pairs")
    }

    pub fn metric(&self, m: Metric) -> Option<f64> {
        self.metrics.get(&m).copied()
    }
}

fn detection_metrics(d: &DetectionScores) -> [(Metric, f64); 3] {
    [
        (Metric::F1, d.f1),
        (Metric::Recall, d.recall),
        (Metric::Precision, d.precision),
    ]
}

fn span_metrics(preds: &[GroundedSpan], gts: &[GroundedSpan], dims: ImageDims) -> Vec<(Metric, f64)> {
    let m = match_spans(preds, gts, MATCH_THRESHOLD);
    let d = DetectionScores::from_counts(m.len(), preds.len(), gts.len());
    let mut out = vec![
        (Metric::CerE2e, cer_e2e(preds, gts, dims)),
        (Metric::Mcer, mcer_from_matching(preds, gts, &m)),
    ];
    out.extend(detection_metrics(&d));
    out
}

/// Maximal-error values: every error 1, every detection score 0.
fn invalid_metrics(group: ScoreGroup) -> Vec<(Metric, f64)> {
    group
        .metrics()
        .iter()
        .map(|&m| {
            let v = match m {
                Metric::Cer | Metric::Wer | Metric::Mcer | Metric::CerE2e => 1.0,
                Metric::F1 | Metric::Recall | Metric::Precision => 0.0,
            };
            (m, v)
        })
        .collect()
}

pub fn score_task(task: &TaskInstance, parsed: &ParsedOutput) -> Result<TaskResult, ScoreError> {
    let group = ScoreGroup::of(task.family, task.output_format).ok_or_else(|| ScoreError::FamilyFormatMismatch {
        task_id: task.task_id.clone(),
        family: task.family,
        format: task.output_format,
    })?;
    let ref_mismatch = || ScoreError::ReferenceMismatch {
        task_id: task.task_id.clone(),
        family: task.family,
        format: task.output_format,
    };
    let parse_mismatch = || ScoreError::ParseMismatch {
        task_id: task.task_id.clone(),
        format: task.parse_format(),
        got: parsed.kind(),
    };

    let metrics: Vec<(Metric, f64)> = match (&parsed.payload, &task.reference) {
        (Payload::Invalid, _) => invalid_metrics(group),
        (Payload::PlainText(p), Reference::Text(r)) => match group {
            ScoreGroup::ReadingText | ScoreGroup::LocalizedReading => {
                vec![(Metric::Cer, cer(p, r)), (Metric::Wer, wer(p, r))]
            }
            ScoreGroup::ReadingText2d => vec![
                (Metric::Cer, cer_with(p, r, TextMode::Layout)),
                (Metric::Wer, wer(p, r)),
            ],
            _ => return Err(ref_mismatch()),
        },
        (Payload::Spans(p), Reference::Spans(r)) => match group {
            ScoreGroup::ReadingLines | ScoreGroup::ReadingParagraphs => span_metrics(p, r, task.image),
            _ => return Err(ref_mismatch()),
        },
        (Payload::Boxes(p), Reference::Boxes(r)) => match group {
            ScoreGroup::Detection | ScoreGroup::ConditionalDetection => {
                let m = crate::detmatch::match_boxes(p, r, MATCH_THRESHOLD);
                detection_metrics(&DetectionScores::from_counts(m.len(), p.len(), r.len())).to_vec()
            }
            _ => return Err(ref_mismatch()),
        },
        (Payload::PlainText(_) | Payload::Spans(_) | Payload::Boxes(_), _) => {
            let expected_kind = match task.reference {
                Reference::Text(_) => ParseKind::PlainText,
                Reference::Spans(_) => ParseKind::Spans,
                Reference::Boxes(_) => ParseKind::Boxes,
            };
            if task.check().is_err() || expected_kind == parsed.kind() {
                return Err(ref_mismatch());
            }
            return Err(parse_mismatch());
        }
    };

    Ok(TaskResult {
        task_id: task.task_id.clone(),
        family: task.family,
        output_format: task.output_format,
        dataset: task.dataset.clone(),
        metrics: metrics.into_iter().collect(),
        parse_kind: parsed.kind(),
        diagnostics: parsed.diagnostics.clone(),
    })
}

/// Parse a raw model output for `task` and score it. A missing prediction
/// scores as invalid.
pub fn score_raw(task: &TaskInstance, raw: Option<&str>, options: &ParseOptions) -> Result<TaskResult, ScoreError> {
    let parsed = match raw {
        Some(raw) => parse_prediction_with(raw, task.parse_format(), task.image, options),
        None => ParsedOutput::invalid("no prediction for this task"),
    };
    score_task(task, &parsed)
}

// ---------------------------------------------------------------------------
// Aggregation

/// Fixed-point scale for metric sums: values are rounded to multiples of
/// 2^-40 before summing so that shard merges are exact and order-free.
const FIXED_SCALE: f64 = (1u64 << 40) as f64;

fn to_fixed(v: f64) -> i128 {
    (v * FIXED_SCALE).round() as i128
}

/// Running sums for one group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSums {
    pub count: usize,
    sums: BTreeMap<Metric, i128>,
}

impl GroupSums {
    pub fn add(&mut self, metrics: &BTreeMap<Metric, f64>) {
        self.count += 1;
        for (&m, &v) in metrics {
            *self.sums.entry(m).or_default() += to_fixed(v);
        }
    }

    pub fn merge(&mut self, other: &GroupSums) {
        self.count += other.count;
        for (&m, &v) in &other.sums {
            *self.sums.entry(m).or_default() += v;
        }
    }

    pub fn means(&self) -> BTreeMap<Metric, f64> {
        self.sums
            .iter()
            .map(|(&m, &s)| (m, s as f64 / FIXED_SCALE / self.count.max(1) as f64))
            .collect()
    }
}

/// Dataset label used for results without one.
pub const UNLABELED: &str = "unlabeled";

/// Mergeable partial aggregate over task results.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregate {
    pub groups: BTreeMap<ScoreGroup, GroupSums>,
    pub datasets: BTreeMap<String, BTreeMap<ScoreGroup, GroupSums>>,
    pub parse_kinds: BTreeMap<ParseKind, usize>,
}

impl Aggregate {
    pub fn add(&mut self, r: &TaskResult) {
        let g = r.group();
        self.groups.entry(g).or_default().add(&r.metrics);
        let ds = r.dataset.clone().unwrap_or_else(|| UNLABELED.to_string());
        self.datasets
            .entry(ds)
            .or_default()
            .entry(g)
            .or_default()
            .add(&r.metrics);
        *self.parse_kinds.entry(r.parse_kind).or_default() += 1;
    }

    pub fn merge(mut self, other: &Aggregate) -> Aggregate {
        for (g, s) in &other.groups {
            self.groups.entry(*g).or_default().merge(s);
        }
        for (ds, groups) in &other.datasets {
            let mine = self.datasets.entry(ds.clone()).or_default();
            for (g, s) in groups {
                mine.entry(*g).or_default().merge(s);
            }
        }
        for (k, n) in &other.parse_kinds {
            *self.parse_kinds.entry(*k).or_default() += n;
        }
        self
    }

    pub fn from_results(results: &[TaskResult]) -> Aggregate {
        let mut a = Aggregate::default();
        for r in results {
            a.add(r);
        }
        a
    }

    pub fn task_count(&self) -> usize {
        self.parse_kinds.values().sum()
    }

    /// Group means over all tasks, regardless of dataset.
    pub fn micro(&self) -> BTreeMap<ScoreGroup, GroupSummary> {
        self.groups
            .iter()
            .map(|(&g, s)| {
                (
                    g,
                    GroupSummary {
                        count: s.count,
                        means: s.means(),
                    },
                )
            })
            .collect()
    }

    /// Per-group mean of per-dataset means.
    pub fn macro_over_datasets(&self) -> BTreeMap<ScoreGroup, GroupSummary> {
        let mut acc: BTreeMap<ScoreGroup, (usize, usize, BTreeMap<Metric, f64>)> = BTreeMap::new();
        for groups in self.datasets.values() {
            for (&g, s) in groups {
                let e = acc.entry(g).or_default();
                e.0 += 1;
                e.1 += s.count;
                for (m, v) in s.means() {
                    *e.2.entry(m).or_default() += v;
                }
            }
        }
        acc.into_iter()
            .map(|(g, (n_ds, count, sums))| {
                let means = sums.into_iter().map(|(m, v)| (m, v / n_ds as f64)).collect();
                (g, GroupSummary { count, means })
            })
            .collect()
    }

    pub fn by_dataset(&self) -> BTreeMap<String, BTreeMap<ScoreGroup, GroupSummary>> {
        self.datasets
            .iter()
            .map(|(ds, groups)| {
                let inner = groups
                    .iter()
                    .map(|(&g, s)| {
                        (
                            g,
                            GroupSummary {
                                count: s.count,
                                means: s.means(),
                            },
                        )
                    })
                    .collect();
                (ds.clone(), inner)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub means: BTreeMap<Metric, f64>,
}

// ---------------------------------------------------------------------------
// Composite

/// The six family-level values the composite averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeInputs {
    pub reading_text_cer: f64,
    pub reading_text2d_cer: f64,
    pub reading_lines_cer_e2e: f64,
    pub localized_reading_cer: f64,
    pub detection_f1: f64,
    pub conditional_detection_f1: f64,
}

/// `(group, metric)` behind each composite ingredient, in field order.
pub const COMPOSITE_SOURCES: [(ScoreGroup, Metric, &str); 6] = [
    (ScoreGroup::ReadingText, Metric::Cer, "reading_text_cer"),
    (ScoreGroup::ReadingText2d, Metric::Cer, "reading_text2d_cer"),
    (ScoreGroup::ReadingLines, Metric::CerE2e, "reading_lines_cer_e2e"),
    (ScoreGroup::LocalizedReading, Metric::Cer, "localized_reading_cer"),
    (ScoreGroup::Detection, Metric::F1, "detection_f1"),
    (ScoreGroup::ConditionalDetection, Metric::F1, "conditional_detection_f1"),
];

impl CompositeInputs {
    fn as_array(&self) -> [f64; 6] {
        [
            self.reading_text_cer,
            self.reading_text2d_cer,
            self.reading_lines_cer_e2e,
            self.localized_reading_cer,
            self.detection_f1,
            self.conditional_detection_f1,
        ]
    }

    /// Pick the ingredients out of group means; `Err` lists missing names.
    pub fn from_group_means(means: &BTreeMap<ScoreGroup, BTreeMap<Metric, f64>>) -> Result<Self, Vec<String>> {
        let mut vals = [0.0; 6];
        let mut missing = Vec::new();
        for (slot, (g, m, name)) in vals.iter_mut().zip(COMPOSITE_SOURCES) {
            match means.get(&g).and_then(|mm| mm.get(&m)) {
                Some(&v) => *slot = v,
                None => missing.push(name.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(missing);
        }
        Ok(Self {
            reading_text_cer: vals[0],
            reading_text2d_cer: vals[1],
            reading_lines_cer_e2e: vals[2],
            localized_reading_cer: vals[3],
            detection_f1: vals[4],
            conditional_detection_f1: vals[5],
        })
    }
}

/// Mean of the four reading scores `1 - error` and the two detection F1s.
///
/// The mean is evaluated exactly over the given `f64` inputs and rounded
/// once, so values that sit on a decimal boundary come out as that decimal.
pub fn composite(inputs: &CompositeInputs) -> Result<f64, ScoreError> {
    let vals = inputs.as_array();
    for (v, (_, _, name)) in vals.iter().zip(COMPOSITE_SOURCES) {
        if !(0.0..=1.0).contains(v) {
            return Err(ScoreError::OutOfRange { name, value: *v });
        }
    }
    let q = |x: f64| BigRational::from_float(x).expect("finite after range check");
    let one = BigRational::one();
    let mut total = BigRational::zero();
    for &e in &vals[..4] {
        total += &one - q(e);
    }
    for &f in &vals[4..] {
        total += q(f);
    }
    let mean = total / BigRational::from_integer(6.into());
    Ok(mean.to_f64().expect("mean lies in [0, 1]"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeReport {
    pub inputs: Option<CompositeInputs>,
    pub composite: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

impl CompositeReport {
    pub fn from_summaries(summaries: &BTreeMap<ScoreGroup, GroupSummary>) -> Result<Self, ScoreError> {
        let means = summaries.iter().map(|(&g, s)| (g, s.means.clone())).collect();
        Self::from_group_means(&means)
    }

    pub fn from_group_means(means: &BTreeMap<ScoreGroup, BTreeMap<Metric, f64>>) -> Result<Self, ScoreError> {
        Ok(match CompositeInputs::from_group_means(means) {
            Ok(inputs) => CompositeReport {
                composite: Some(composite(&inputs)?),
                inputs: Some(inputs),
                missing: Vec::new(),
            },
            Err(missing) => CompositeReport {
                inputs: None,
                composite: None,
                missing,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean over datasets of per-dataset means.
    #[default]
    Macro,
    /// Mean over all tasks.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub averaging: Averaging,
    pub tasks: usize,
    pub missing_predictions: usize,
    pub parse_kinds: BTreeMap<ParseKind, usize>,
    /// Group means under `averaging`.
    pub families: BTreeMap<ScoreGroup, GroupSummary>,
    pub composite: CompositeReport,
    pub macro_families: BTreeMap<ScoreGroup, GroupSummary>,
    pub micro_families: BTreeMap<ScoreGroup, GroupSummary>,
    pub micro_composite: CompositeReport,
    pub datasets: BTreeMap<String, BTreeMap<ScoreGroup, GroupSummary>>,
    /// Which group metric feeds each composite ingredient.
    pub composite_sources: BTreeMap<String, String>,
}

impl Report {
    pub fn build(agg: &Aggregate, averaging: Averaging, missing_predictions: usize) -> Result<Self, ScoreError> {
        let macro_families = agg.macro_over_datasets();
        let micro_families = agg.micro();
        let macro_composite = CompositeReport::from_summaries(&macro_families)?;
        let micro_composite = CompositeReport::from_summaries(&micro_families)?;
        let (families, composite) = match averaging {
            Averaging::Macro => (macro_families.clone(), macro_composite),
            Averaging::Micro => (micro_families.clone(), micro_composite.clone()),
        };
        Ok(Report {
            averaging,
            tasks: agg.task_count(),
            missing_predictions,
            parse_kinds: agg.parse_kinds.clone(),
            families,
            composite,
            macro_families,
            micro_families,
            micro_composite,
            datasets: agg.by_dataset(),
            composite_sources: COMPOSITE_SOURCES
                .iter()
                .map(|(g, m, name)| (name.to_string(), format!("{g}.{m}")))
                .collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Batch

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub results: Vec<TaskResult>,
    pub aggregate: Aggregate,
    pub missing_predictions: usize,
}

/// Score every task against its prediction (looked up by task id). Results
/// come back in task order.
pub fn score_batch(
    tasks: &[TaskInstance],
    predictions: &HashMap<String, String>,
    options: &ParseOptions,
    exec: Execution,
) -> Result<BatchOutcome, ScoreError> {
    let scored = exec.map(tasks, |t| {
        score_raw(t, predictions.get(&t.task_id).map(String::as_str), options)
    });
    let results = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
    let missing_predictions = tasks.iter().filter(|t| !predictions.contains_key(&t.task_id)).count();
    let aggregate = Aggregate::from_results(&results);
    Ok(BatchOutcome {
        results,
        aggregate,
        missing_predictions,
    })
}
