//! Task construction: page records in, task instances with references and
//! rendered prompts out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::e2emetrics::e2e_reading_order;
use crate::error::{GeometryError, TaskError};
use crate::exec::Execution;
use crate::geometry::{coverage, iou, BBox, ClipTally, ImageDims};
use crate::outparse::{boxes_to_json, spans_to_json};
use crate::span::{boxes_of, GroundedSpan};
use crate::text2d::render_text2d;
use crate::textnorm::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Reading,
    Detection,
    ConditionalDetection,
    LocalizedReading,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Reading,
        Family::Detection,
        Family::ConditionalDetection,
        Family::LocalizedReading,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Reading => "reading",
            Family::Detection => "detection",
            Family::ConditionalDetection => "conditional_detection",
            Family::LocalizedReading => "localized_reading",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown task family {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Text,
    Text2d,
    Lines,
    Paragraphs,
    Box,
}

impl OutputFormat {
    pub const ALL: [OutputFormat; 5] = [
        OutputFormat::Text,
        OutputFormat::Text2d,
        OutputFormat::Lines,
        OutputFormat::Paragraphs,
        OutputFormat::Box,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutputFormat::Text => "text",
            OutputFormat::Text2d => "text2d",
            OutputFormat::Lines => "lines",
            OutputFormat::Paragraphs => "paragraphs",
            OutputFormat::Box => "box",
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OutputFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown output format {s:?}"))
    }
}

/// Annotation level a detection or localized task works at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Lines,
    Paragraphs,
}

impl Granularity {
    pub const ALL: [Granularity; 2] = [Granularity::Lines, Granularity::Paragraphs];

    pub fn as_format(self) -> OutputFormat {
        match self {
            Granularity::Lines => OutputFormat::Lines,
            Granularity::Paragraphs => OutputFormat::Paragraphs,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.as_format().as_str()
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lines" => Ok(Granularity::Lines),
            "paragraphs" => Ok(Granularity::Paragraphs),
            _ => Err(format!("unknown granularity {s:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Pages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    pub id: String,
    #[serde(rename = "image")]
    pub dims: ImageDims,
    pub lines: Vec<GroundedSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paragraphs: Option<Vec<GroundedSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<GroundedSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

/// A span as it appears in an input file, before clipping.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawSpan {
    pub text: String,
    pub bbox: [f64; 4],
}

/// A page record as it appears in an input file, before clipping.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawPage {
    pub id: String,
    pub image: ImageDims,
    pub lines: Vec<RawSpan>,
    #[serde(default)]
    pub paragraphs: Option<Vec<RawSpan>>,
    #[serde(default)]
    pub words: Option<Vec<RawSpan>>,
    #[serde(default)]
    pub dataset: Option<String>,
}

impl PageRecord {
    /// Clip every annotation box into the image, dropping degenerate ones.
    pub fn from_raw(raw: RawPage, tally: &mut ClipTally) -> Result<Self, GeometryError> {
        let dims = ImageDims::new(raw.image.width, raw.image.height)?;
        let mut clip = |spans: Vec<RawSpan>| -> Vec<GroundedSpan> {
            spans
                .into_iter()
                .filter_map(|s| tally.ingest(s.bbox, dims).map(|b| GroundedSpan::new(s.text, b)))
                .collect()
        };
        let lines = clip(raw.lines);
        let paragraphs = raw.paragraphs.map(&mut clip);
        let words = raw.words.map(&mut clip);
        Ok(Self {
            id: raw.id,
            dims,
            lines,
            paragraphs,
            words,
            dataset: raw.dataset,
        })
    }

    pub fn spans(&self, granularity: Granularity) -> Option<&[GroundedSpan]> {
        match granularity {
            Granularity::Lines => Some(&self.lines),
            Granularity::Paragraphs => self.paragraphs.as_deref(),
        }
    }

    fn require(&self, granularity: Granularity) -> Result<&[GroundedSpan], TaskError> {
        self.spans(granularity).ok_or_else(|| TaskError::MissingGranularity {
            page_id: self.id.clone(),
            granularity,
        })
    }

    /// Every box lies inside the image.
    pub fn is_within_bounds(&self) -> bool {
        let ok = |v: &[GroundedSpan]| v.iter().all(|s| s.bbox.within(self.dims));
        ok(&self.lines) && self.paragraphs.as_deref().is_none_or(ok) && self.words.as_deref().is_none_or(ok)
    }
}

// ---------------------------------------------------------------------------
// Tasks

#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Text(String),
    Spans(Vec<GroundedSpan>),
    Boxes(Vec<BBox>),
}

impl Reference {
    /// The reference written the way a perfect model would answer.
    pub fn to_prediction(&self) -> String {
        match self {
            Reference::Text(t) => t.clone(),
            Reference::Spans(s) => spans_to_json(s),
            Reference::Boxes(b) => boxes_to_json(b),
        }
    }

    fn to_value(&self) -> Value {
        match self {
            Reference::Text(t) => Value::String(t.clone()),
            Reference::Spans(s) => serde_json::to_value(s).expect("spans serialize"),
            Reference::Boxes(b) => serde_json::to_value(b).expect("boxes serialize"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskRecord", into = "TaskRecord")]
pub struct TaskInstance {
    pub task_id: String,
    pub page_id: String,
    pub family: Family,
    pub output_format: OutputFormat,
    pub granularity: Option<Granularity>,
    pub query: Option<String>,
    pub region: Option<BBox>,
    pub image: ImageDims,
    pub dataset: Option<String>,
    pub prompt: String,
    pub reference: Reference,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    task_id: String,
    page_id: String,
    family: Family,
    output_format: OutputFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region: Option<BBox>,
    image: ImageDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    prompt: String,
    reference: Value,
}

impl From<TaskInstance> for TaskRecord {
    fn from(t: TaskInstance) -> Self {
        Self {
            reference: t.reference.to_value(),
            task_id: t.task_id,
            page_id: t.page_id,
            family: t.family,
            output_format: t.output_format,
            granularity: t.granularity,
            query: t.query,
            region: t.region,
            image: t.image,
            dataset: t.dataset,
            prompt: t.prompt,
        }
    }
}

impl TryFrom<TaskRecord> for TaskInstance {
    type Error = String;

    fn try_from(r: TaskRecord) -> Result<Self, Self::Error> {
        let image = ImageDims::new(r.image.width, r.image.height).map_err(|e| e.to_string())?;
        let kind = reference_kind(r.family, r.output_format).ok_or_else(|| {
            format!(
                "{} is not a valid output format for {} tasks",
                r.output_format, r.family
            )
        })?;
        let bad = |e: serde_json::Error| format!("reference: {e}");
        let reference = match kind {
            RefKind::Text => Reference::Text(serde_json::from_value(r.reference).map_err(bad)?),
            RefKind::Spans => Reference::Spans(serde_json::from_value(r.reference).map_err(bad)?),
            RefKind::Boxes => Reference::Boxes(serde_json::from_value(r.reference).map_err(bad)?),
        };
        let task = TaskInstance {
            task_id: r.task_id,
            page_id: r.page_id,
            family: r.family,
            output_format: r.output_format,
            granularity: r.granularity,
            query: r.query,
            region: r.region,
            image,
            dataset: r.dataset,
            prompt: r.prompt,
            reference,
        };
        task.check().map(|()| task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RefKind {
    Text,
    Spans,
    Boxes,
}

fn reference_kind(family: Family, format: OutputFormat) -> Option<RefKind> {
    use OutputFormat as F;
    match (family, format) {
        (Family::Reading, F::Text | F::Text2d) => Some(RefKind::Text),
        (Family::Reading, F::Lines | F::Paragraphs) => Some(RefKind::Spans),
        (Family::Detection | Family::ConditionalDetection, F::Box) => Some(RefKind::Boxes),
        (Family::LocalizedReading, F::Lines | F::Paragraphs) => Some(RefKind::Text),
        _ => None,
    }
}

/// Whether `(family, format)` is a task shape this toolkit builds and scores.
pub fn is_valid_pair(family: Family, format: OutputFormat) -> bool {
    reference_kind(family, format).is_some()
}

impl TaskInstance {
    /// Format to parse predictions with. Localized reading always answers in
    /// plain text; its `lines`/`paragraphs` label names only the granularity.
    pub fn parse_format(&self) -> OutputFormat {
        match self.family {
            Family::LocalizedReading => OutputFormat::Text,
            _ => self.output_format,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        let kind = reference_kind(self.family, self.output_format).ok_or_else(|| {
            format!(
                "{} is not a valid output format for {} tasks",
                self.output_format, self.family
            )
        })?;
        let matches = matches!(
            (kind, &self.reference),
            (RefKind::Text, Reference::Text(_))
                | (RefKind::Spans, Reference::Spans(_))
                | (RefKind::Boxes, Reference::Boxes(_))
        );
        if !matches {
            return Err(format!(
                "reference payload does not fit {}/{}",
                self.family, self.output_format
            ));
        }
        if self.family == Family::ConditionalDetection && self.query.is_none() {
            return Err("conditional_detection task without a query".into());
        }
        if self.family == Family::LocalizedReading && self.region.is_none() {
            return Err("localized_reading task without a region".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Seeds

/// Seed derived from a parent seed and a key, so per-page and per-task
/// randomness does not depend on processing order.
pub fn derive_seed(parent: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Builders

fn blank_task(
    page: &PageRecord,
    task_id: String,
    family: Family,
    format: OutputFormat,
    reference: Reference,
) -> TaskInstance {
    TaskInstance {
        task_id,
        page_id: page.id.clone(),
        family,
        output_format: format,
        granularity: None,
        query: None,
        region: None,
        image: page.dims,
        dataset: page.dataset.clone(),
        prompt: String::new(),
        reference,
    }
}

/// Normalized texts in top-to-bottom, left-to-right order, one per line,
/// skipping texts that normalize to nothing.
pub fn joined_reading_text(spans: &[GroundedSpan]) -> String {
    e2e_reading_order(spans)
        .into_iter()
        .map(|i| normalize(&spans[i].text))
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_reading_tasks(page: &PageRecord, formats: &[OutputFormat]) -> Result<Vec<TaskInstance>, TaskError> {
    let mut out = Vec::with_capacity(formats.len());
    for &format in formats {
        let reference = match format {
            OutputFormat::Text => Reference::Text(joined_reading_text(&page.lines)),
            OutputFormat::Text2d => Reference::Text(render_text2d(&page.lines, page.dims)),
            OutputFormat::Lines => Reference::Spans(page.lines.clone()),
            OutputFormat::Paragraphs => Reference::Spans(page.require(Granularity::Paragraphs)?.to_vec()),
            OutputFormat::Box => {
                return Err(TaskError::UnsupportedFormat {
                    family: Family::Reading,
                    format,
                })
            }
        };
        let id = format!("{}/reading/{}", page.id, format);
        out.push(blank_task(page, id, Family::Reading, format, reference));
    }
    Ok(out)
}

pub fn build_detection_tasks(page: &PageRecord, granularity: Granularity) -> Result<TaskInstance, TaskError> {
    let spans = page.require(granularity)?;
    let id = format!("{}/detection/{}", page.id, granularity);
    let mut t = blank_task(
        page,
        id,
        Family::Detection,
        OutputFormat::Box,
        Reference::Boxes(boxes_of(spans)),
    );
    t.granularity = Some(granularity);
    Ok(t)
}

/// Tasks built for one page plus notes on anything skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generated {
    pub tasks: Vec<TaskInstance>,
    pub diagnostics: Vec<String>,
}

/// Boxes of every line whose normalized text contains the normalized query.
/// A line with several hits still contributes one box.
pub fn conditional_reference(lines: &[GroundedSpan], query: &str) -> Vec<BBox> {
    let q = normalize(query);
    lines
        .iter()
        .filter(|l| !q.is_empty() && normalize(&l.text).contains(&q))
        .map(|l| l.bbox)
        .collect()
}

/// Distinct runs of one to four consecutive words from the normalized lines.
pub fn query_candidates(lines: &[GroundedSpan]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for line in lines {
        let text = normalize(&line.text);
        let words: Vec<&str> = text.split(' ').filter(|w| !w.is_empty()).collect();
        for n in 1..=4 {
            for w in words.windows(n) {
                set.insert(w.join(" "));
            }
        }
    }
    set.into_iter().collect()
}

const NEGATIVE_ATTEMPTS: usize = 32;

fn negative_query(rng: &mut ChaCha8Rng, candidates: &[String], normalized_lines: &[String]) -> Option<String> {
    for attempt in 0..NEGATIVE_ATTEMPTS {
        let q: String = match candidates.choose(rng) {
            Some(c) if attempt % 2 == 0 => {
                let mut chars: Vec<char> = c.chars().filter(|c| !c.is_whitespace()).collect();
                chars.shuffle(rng);
                chars.push(rng.gen_range('a'..='z'));
                chars.into_iter().collect()
            }
            _ => {
                let len = rng.gen_range(4..=8);
                (0..len).map(|_| rng.gen_range('a'..='z')).collect()
            }
        };
        let q = normalize(&q);
        if !q.is_empty() && normalized_lines.iter().all(|l| !l.contains(&q)) {
            return Some(q);
        }
    }
    None
}

pub fn build_conditional_tasks(page: &PageRecord, n_positive: usize, n_negative: usize, seed: u64) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Generated::default();
    let candidates = query_candidates(&page.lines);
    if candidates.len() < n_positive {
        gen.diagnostics.push(format!(
            "page {}: {} positive queries requested, {} available",
            page.id,
            n_positive,
            candidates.len()
        ));
    }
    let mut queries: Vec<String> = candidates
        .iter()
        .cloned()
        .choose_multiple(&mut rng, n_positive.min(candidates.len()));
    queries.sort();
    queries.shuffle(&mut rng);

    let normalized: Vec<String> = page.lines.iter().map(|l| normalize(&l.text)).collect();
    let mut negatives = Vec::new();
    for _ in 0..n_negative {
        match negative_query(&mut rng, &candidates, &normalized) {
            Some(q) if !negatives.contains(&q) => negatives.push(q),
            _ => gen
                .diagnostics
                .push(format!("page {}: could not sample an absent query", page.id)),
        }
    }

    for (k, q) in queries.into_iter().chain(negatives).enumerate() {
        let reference = Reference::Boxes(conditional_reference(&page.lines, &q));
        let id = format!("{}/conditional_detection/{}", page.id, k);
        let mut t = blank_task(page, id, Family::ConditionalDetection, OutputFormat::Box, reference);
        t.query = Some(q);
        gen.tasks.push(t);
    }
    gen
}

/// Rule deciding which blocks a localized-reading region selects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "threshold")]
pub enum LocalizedRule {
    /// `IoU(block, region) >= t`.
    Iou(f64),
    /// `coverage(block, region) >= t`: the share of the block inside the region.
    Coverage(f64),
}

impl Default for LocalizedRule {
    fn default() -> Self {
        LocalizedRule::Iou(0.5)
    }
}

impl LocalizedRule {
    pub fn selects(self, block: &BBox, region: &BBox) -> bool {
        match self {
            LocalizedRule::Iou(t) => iou(block, region) >= t,
            LocalizedRule::Coverage(t) => coverage(block, region) >= t,
        }
    }
}

/// Normalized texts of the selected blocks in reading order, newline-joined.
pub fn localized_reference(spans: &[GroundedSpan], region: &BBox, rule: LocalizedRule) -> String {
    let picked: Vec<GroundedSpan> = spans
        .iter()
        .filter(|s| rule.selects(&s.bbox, region))
        .cloned()
        .collect();
    joined_reading_text(&picked)
}

pub fn build_localized_tasks(
    page: &PageRecord,
    granularity: Granularity,
    n: usize,
    seed: u64,
    rule: LocalizedRule,
) -> Result<Generated, TaskError> {
    let spans = page.require(granularity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Generated::default();
    if spans.len() < n {
        gen.diagnostics.push(format!(
            "page {}: {} localized regions requested, {} {} available",
            page.id,
            n,
            spans.len(),
            granularity
        ));
    }
    let mut picks = rand::seq::index::sample(&mut rng, spans.len(), n.min(spans.len())).into_vec();
    picks.sort_unstable();
    for (k, i) in picks.into_iter().enumerate() {
        let region = spans[i].bbox;
        let reference = Reference::Text(localized_reference(spans, &region, rule));
        let id = format!("{}/localized_reading/{}/{}", page.id, granularity, k);
        let mut t = blank_task(page, id, Family::LocalizedReading, granularity.as_format(), reference);
        t.granularity = Some(granularity);
        t.region = Some(region);
        gen.tasks.push(t);
    }
    Ok(gen)
}

// ---------------------------------------------------------------------------
// Prompts

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct BankFile {
    version: u32,
    determiners: Vec<String>,
    nouns: Vec<String>,
    templates: BTreeMap<String, Vec<String>>,
}

/// Prompt templates keyed by `(family, output_format)`, plus the words used
/// to refer to the image.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub version: u32,
    pub determiners: Vec<String>,
    pub nouns: Vec<String>,
    templates: BTreeMap<(Family, OutputFormat), Vec<String>>,
}

const BUILTIN_BANK: &str = include_str!("../assets/prompt_templates.json");

fn placeholders(template: &str) -> Result<Vec<&str>, String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let tail = &rest[open + 1..];
        let close = tail
            .find('}')
            .ok_or_else(|| format!("unclosed placeholder in {template:?}"))?;
        out.push(&tail[..close]);
        rest = &tail[close + 1..];
    }
    Ok(out)
}

fn allowed_placeholders(family: Family) -> &'static [&'static str] {
    match family {
        Family::Reading => &["IMAGE", "FORMAT"],
        Family::Detection => &["IMAGE", "UNIT"],
        Family::ConditionalDetection => &["IMAGE", "q"],
        Family::LocalizedReading => &["IMAGE", "FORMAT", "x1", "y1", "x2", "y2"],
    }
}

fn required_placeholders(family: Family) -> &'static [&'static str] {
    match family {
        Family::ConditionalDetection => &["q"],
        Family::LocalizedReading => &["x1", "y1", "x2", "y2"],
        _ => &[],
    }
}

impl TemplateBank {
    pub fn parse(json: &str) -> Result<Self, TaskError> {
        let bad = |m: String| TaskError::BadTemplateBank(m);
        let file: BankFile = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        if file.determiners.is_empty() || file.nouns.is_empty() {
            return Err(bad("determiners and nouns must be nonempty".into()));
        }
        let mut templates = BTreeMap::new();
        for (key, list) in file.templates {
            let (f, o) = key
                .split_once('/')
                .ok_or_else(|| bad(format!("key {key:?} is not family/format")))?;
            let family: Family = f.parse().map_err(bad)?;
            let format: OutputFormat = o.parse().map_err(bad)?;
            if !is_valid_pair(family, format) {
                return Err(bad(format!("{key:?} is not a valid task shape")));
            }
            for t in &list {
                let names = placeholders(t).map_err(bad)?;
                if let Some(n) = names.iter().find(|n| !allowed_placeholders(family).contains(n)) {
                    return Err(bad(format!("placeholder {{{n}}} not allowed for {family}: {t:?}")));
                }
                if let Some(n) = required_placeholders(family).iter().find(|n| !names.contains(n)) {
                    return Err(bad(format!("template for {family} lacks {{{n}}}: {t:?}")));
                }
            }
            templates.insert((family, format), list);
        }
        Ok(Self {
            version: file.version,
            determiners: file.determiners,
            nouns: file.nouns,
            templates,
        })
    }

    pub fn builtin() -> &'static TemplateBank {
        static BANK: OnceLock<TemplateBank> = OnceLock::new();
        BANK.get_or_init(|| TemplateBank::parse(BUILTIN_BANK).expect("builtin template bank is valid"))
    }

    pub fn templates(&self, family: Family, format: OutputFormat) -> &[String] {
        self.templates.get(&(family, format)).map_or(&[], Vec::as_slice)
    }
}

/// Replace `{name}` placeholders in one left-to-right pass, so substituted
/// values (such as a query containing braces) are never re-expanded.
fn substitute(template: &str, lookup: impl Fn(&str) -> Option<String>) -> String {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        match tail
            .find('}')
            .and_then(|close| lookup(&tail[..close]).map(|v| (close, v)))
        {
            Some((close, value)) => {
                out.push_str(&value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_prompt(task: &TaskInstance, bank: &TemplateBank, seed: u64) -> Result<String, TaskError> {
    let list = bank.templates(task.family, task.output_format);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = list.choose(&mut rng).ok_or(TaskError::EmptyTemplateBank {
        family: task.family,
        format: task.output_format,
    })?;
    let det = bank.determiners.choose(&mut rng).expect("nonempty determiners");
    let noun = bank.nouns.choose(&mut rng).expect("nonempty nouns");
    let image = format!("{det} {noun}");
    let region = task.region.map(|b| b.to_array());
    let unit = task.granularity.unwrap_or(Granularity::Lines).as_str().to_uppercase();
    Ok(substitute(template, |name| {
        Some(match name {
            "IMAGE" => image.clone(),
            "FORMAT" => task.output_format.as_str().to_string(),
            "UNIT" => unit.clone(),
            "q" => task.query.clone()?,
            "x1" => region?[0].to_string(),
            "y1" => region?[1].to_string(),
            "x2" => region?[2].to_string(),
            "y2" => region?[3].to_string(),
            _ => return None,
        })
    }))
}

/// System prompt for model harnesses, shipped alongside generated tasks.
pub const SYSTEM_PROMPT: &str = include_str!("../assets/system_prompt.txt");

// ---------------------------------------------------------------------------
// Corpus

/// Which tasks to build for each page.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    pub families: BTreeSet<Family>,
    pub reading_formats: Vec<OutputFormat>,
    pub granularities: Vec<Granularity>,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_localized: usize,
    pub localized_rule: LocalizedRule,
    /// Skip (with a diagnostic) rather than fail when a page lacks the
    /// annotations a requested task needs.
    pub skip_missing: bool,
}

impl Default for TaskPlan {
    fn default() -> Self {
        Self {
            families: Family::ALL.into_iter().collect(),
            reading_formats: vec![
                OutputFormat::Text,
                OutputFormat::Text2d,
                OutputFormat::Lines,
                OutputFormat::Paragraphs,
            ],
            granularities: Granularity::ALL.to_vec(),
            n_positive: 2,
            n_negative: 1,
            n_localized: 2,
            localized_rule: LocalizedRule::default(),
            skip_missing: true,
        }
    }
}

fn soften<T>(r: Result<T, TaskError>, skip: bool, diags: &mut Vec<String>) -> Result<Option<T>, TaskError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ TaskError::MissingGranularity { .. }) if skip => {
            diags.push(format!("skipped: {e}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// All planned tasks for one page, prompts rendered.
pub fn build_page_tasks(
    page: &PageRecord,
    plan: &TaskPlan,
    bank: &TemplateBank,
    corpus_seed: u64,
) -> Result<Generated, TaskError> {
    let page_seed = derive_seed(corpus_seed, &page.id);
    let mut gen = Generated::default();
    let skip = plan.skip_missing;
    for &family in &plan.families {
        match family {
            Family::Reading => {
                for &format in &plan.reading_formats {
                    if let Some(ts) = soften(build_reading_tasks(page, &[format]), skip, &mut gen.diagnostics)? {
                        gen.tasks.extend(ts);
                    }
                }
            }
            Family::Detection => {
                for &g in &plan.granularities {
                    if let Some(t) = soften(build_detection_tasks(page, g), skip, &mut gen.diagnostics)? {
                        gen.tasks.push(t);
                    }
                }
            }
            Family::ConditionalDetection => {
                let seed = derive_seed(page_seed, "conditional_detection");
                let g = build_conditional_tasks(page, plan.n_positive, plan.n_negative, seed);
                gen.tasks.extend(g.tasks);
                gen.diagnostics.extend(g.diagnostics);
            }
            Family::LocalizedReading => {
                for &gr in &plan.granularities {
                    let seed = derive_seed(page_seed, &format!("localized_reading/{gr}"));
                    let built = build_localized_tasks(page, gr, plan.n_localized, seed, plan.localized_rule);
                    if let Some(g) = soften(built, skip, &mut gen.diagnostics)? {
                        gen.tasks.extend(g.tasks);
                        gen.diagnostics.extend(g.diagnostics);
                    }
                }
            }
        }
    }
    for t in &mut gen.tasks {
        t.prompt = render_prompt(t, bank, derive_seed(page_seed, &t.task_id))?;
    }
    Ok(gen)
}

/// Build tasks for every page; output order follows input order.
pub fn build_corpus_tasks(
    pages: &[PageRecord],
    plan: &TaskPlan,
    bank: &TemplateBank,
    corpus_seed: u64,
    exec: Execution,
) -> Result<Generated, TaskError> {
    let per_page = exec.map(pages, |p| build_page_tasks(p, plan, bank, corpus_seed));
    let mut all = Generated::default();
    for g in per_page {
        let g = g?;
        all.tasks.extend(g.tasks);
        all.diagnostics.extend(g.diagnostics);
    }
    Ok(all)
}
