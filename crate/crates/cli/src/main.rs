//! `groundeval`: build grounded-OCR tasks from page annotations, score model
//! predictions against them, and inspect the pieces in between.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use groundeval_core::exec::Execution;
use groundeval_core::fixtures::{synth_corpus, FixtureConfig};
use groundeval_core::outparse::{extract_candidate, parse_prediction_with, repair, CoordSpace, ParseOptions, Payload};
use groundeval_core::records::{read_jsonl, read_pages, read_predictions, read_tasks, write_jsonl};
use groundeval_core::scorer::{
    score_batch, Aggregate, Averaging, CompositeReport, Metric, Report, ScoreGroup, TaskResult,
};
use groundeval_core::taskgen::{
    build_corpus_tasks, Family, Granularity, LocalizedRule, OutputFormat, PageRecord, TaskPlan, TemplateBank,
    SYSTEM_PROMPT,
};
use groundeval_core::text2d::render_text2d;
use groundeval_core::ImageDims;
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "groundeval", version, about = "Grounded OCR task construction and scoring")]
struct Cli {
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded synthetic page records.
    GenFixtures {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        pages: usize,
        #[arg(long, default_value_t = 3)]
        min_lines: usize,
        #[arg(long, default_value_t = 24)]
        max_lines: usize,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build task instances from page records.
    MakeTasks {
        /// Page record files (repeatable).
        #[arg(long, required_unless_present = "manifest")]
        pages: Vec<PathBuf>,
        /// JSON manifest: {"seed": n, "files": [{"path": ..., "dataset": ...}]}.
        #[arg(long, conflicts_with = "pages")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated families; all four by default.
        #[arg(long, value_delimiter = ',')]
        families: Vec<Family>,
        /// Reading output formats.
        #[arg(long, value_delimiter = ',')]
        formats: Vec<OutputFormat>,
        #[arg(long, value_delimiter = ',')]
        granularities: Vec<Granularity>,
        /// Present queries per page for conditional detection.
        #[arg(long, default_value_t = 2)]
        positives: usize,
        /// Absent queries per page for conditional detection.
        #[arg(long, default_value_t = 1)]
        negatives: usize,
        /// Regions per page and granularity for localized reading.
        #[arg(long, default_value_t = 2)]
        regions: usize,
        /// `iou:T` or `coverage:T`.
        #[arg(long, default_value = "iou:0.5", value_parser = parse_rule)]
        localized_rule: LocalizedRule,
        /// Prompt template bank replacing the built-in one.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Fail instead of skipping tasks whose annotations are missing.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against tasks.
    Score {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Per-task result records.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Report document; standard output when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// `pixel` or `normalized:SCALE` for predicted boxes.
        #[arg(long, default_value = "pixel", value_parser = parse_coords)]
        coords: CoordSpace,
        #[arg(long, default_value = "macro", value_parser = parse_averaging)]
        averaging: Averaging,
    },
    /// Rebuild a report from result records, or compute the composite from
    /// per-group means.
    Report {
        #[arg(long, required_unless_present = "means")]
        results: Option<PathBuf>,
        /// JSON object: group -> metric -> mean.
        #[arg(long, conflicts_with = "results")]
        means: Option<PathBuf>,
        #[arg(long, default_value = "macro", value_parser = parse_averaging)]
        averaging: Averaging,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one page's lines as layout-preserving text.
    Text2d {
        #[arg(long)]
        pages: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// Repair one raw model output. With --format, also normalize it into
    /// spans or boxes.
    Repair {
        /// Raw output file; standard input when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<OutputFormat>,
        #[arg(long, default_value = "1000")]
        width: u32,
        #[arg(long, default_value = "1000")]
        height: u32,
        #[arg(long, default_value = "pixel", value_parser = parse_coords)]
        coords: CoordSpace,
    },
    /// Print the system prompt used with every task.
    SystemPrompt,
}

/// Failures that are not the caller's fault; they exit with status 2.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "internal error: {}", self.0)
    }
}

impl std::error::Error for Internal {}

fn internal(e: impl std::fmt::Display) -> anyhow::Error {
    Internal(e.to_string()).into()
}

fn parse_rule(s: &str) -> Result<LocalizedRule, String> {
    let (kind, t) = s.split_once(':').ok_or("expected iou:T or coverage:T")?;
    let t: f64 = t.parse().map_err(|_| format!("bad threshold {t:?}"))?;
    if !(0.0..=1.0).contains(&t) {
        return Err(format!("threshold {t} outside [0, 1]"));
    }
    match kind {
        "iou" => Ok(LocalizedRule::Iou(t)),
        "coverage" => Ok(LocalizedRule::Coverage(t)),
        other => Err(format!("unknown rule {other:?}")),
    }
}

fn parse_coords(s: &str) -> Result<CoordSpace, String> {
    match s.split_once(':') {
        None if s == "pixel" => Ok(CoordSpace::Pixel),
        Some(("normalized", scale)) => match scale.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(CoordSpace::Normalized(v)),
            _ => Err(format!("bad scale {scale:?}")),
        },
        _ => Err(format!("expected pixel or normalized:SCALE, got {s:?}")),
    }
}

fn parse_averaging(s: &str) -> Result<Averaging, String> {
    match s {
        "macro" => Ok(Averaging::Macro),
        "micro" => Ok(Averaging::Micro),
        _ => Err(format!("expected macro or micro, got {s:?}")),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn with_file<T>(path: &Path, r: Result<T, groundeval_core::RecordError>) -> Result<T> {
    r.with_context(|| path.display().to_string())
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(internal)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn execution(jobs: Option<usize>) -> Result<Execution> {
    match jobs {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(1) => Ok(Execution::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(internal)?;
            Ok(Execution::Parallel)
        }
        _ => Ok(Execution::default()),
    }
}

#[derive(Deserialize)]
struct Manifest {
    #[serde(default)]
    seed: u64,
    files: Vec<ManifestFile>,
}

#[derive(Deserialize)]
struct ManifestFile {
    path: PathBuf,
    #[serde(default)]
    dataset: Option<String>,
}

/// Pages from every file in order; ids must be unique across files.
fn load_corpus(files: &[(PathBuf, Option<String>)]) -> Result<Vec<PageRecord>> {
    let mut pages = Vec::new();
    let mut seen = HashSet::new();
    for (path, dataset) in files {
        let (mut ps, tally) = with_file(path, read_pages(open(path)?))?;
        if tally.clipped + tally.dropped > 0 {
            eprintln!(
                "{}: {} boxes clipped, {} dropped as degenerate",
                path.display(),
                tally.clipped,
                tally.dropped
            );
        }
        for p in &mut ps {
            if !seen.insert(p.id.clone()) {
                bail!("{}: page id {:?} already seen in an earlier file", path.display(), p.id);
            }
            if p.dataset.is_none() {
                p.dataset.clone_from(dataset);
            }
        }
        pages.extend(ps);
    }
    Ok(pages)
}

fn cmd_gen_fixtures(
    seed: u64,
    n: usize,
    min_lines: usize,
    max_lines: usize,
    out: Option<&Path>,
    exec: Execution,
) -> Result<()> {
    if min_lines == 0 || min_lines > max_lines {
        bail!("need 1 <= --min-lines <= --max-lines");
    }
    let config = FixtureConfig {
        min_lines,
        max_lines,
        ..FixtureConfig::default()
    };
    let pages = synth_corpus(seed, n, &config, exec);
    if let Some(p) = pages.iter().find(|p| !p.is_within_bounds()) {
        return Err(internal(format!("generated page {} leaves its image", p.id)));
    }
    write_jsonl(sink(out)?, &pages).map_err(internal)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_make_tasks(
    pages: Vec<PathBuf>,
    manifest: Option<PathBuf>,
    seed: Option<u64>,
    families: Vec<Family>,
    formats: Vec<OutputFormat>,
    granularities: Vec<Granularity>,
    counts: (usize, usize, usize),
    localized_rule: LocalizedRule,
    templates: Option<PathBuf>,
    strict: bool,
    out: Option<&Path>,
    exec: Execution,
) -> Result<()> {
    let (files, manifest_seed) = match manifest {
        Some(m) => {
            let mf: Manifest = serde_json::from_reader(open(&m)?).with_context(|| m.display().to_string())?;
            let base = m.parent().unwrap_or(Path::new(""));
            (
                mf.files.into_iter().map(|f| (base.join(f.path), f.dataset)).collect(),
                mf.seed,
            )
        }
        None => (pages.into_iter().map(|p| (p, None)).collect::<Vec<_>>(), 0),
    };
    let corpus = load_corpus(&files)?;

    let mut plan = TaskPlan::default();
    if !families.is_empty() {
        plan.families = families.into_iter().collect::<BTreeSet<_>>();
    }
    if !formats.is_empty() {
        if let Some(f) = formats.iter().find(|f| **f == OutputFormat::Box) {
            bail!("reading has no {f} output format");
        }
        plan.reading_formats = formats;
    }
    if !granularities.is_empty() {
        plan.granularities = granularities;
    }
    (plan.n_positive, plan.n_negative, plan.n_localized) = counts;
    plan.localized_rule = localized_rule;
    plan.skip_missing = !strict;

    let owned;
    let bank = match templates {
        Some(p) => {
            let mut text = String::new();
            open(&p)?.read_to_string(&mut text)?;
            owned = TemplateBank::parse(&text).with_context(|| p.display().to_string())?;
            &owned
        }
        None => TemplateBank::builtin(),
    };
    let gen = build_corpus_tasks(&corpus, &plan, bank, seed.unwrap_or(manifest_seed), exec)?;
    for d in &gen.diagnostics {
        eprintln!("{d}");
    }
    write_jsonl(sink(out)?, &gen.tasks).map_err(internal)?;
    eprintln!("{} tasks from {} pages", gen.tasks.len(), corpus.len());
    Ok(())
}

fn summary_line(report: &Report) -> String {
    match report.composite.composite {
        Some(c) => format!("composite {c:.4}"),
        None => format!(
            "composite unavailable (missing {})",
            report.composite.missing.join(", ")
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_score(
    tasks_path: &Path,
    preds_path: &Path,
    results: Option<&Path>,
    report_path: Option<&Path>,
    coords: CoordSpace,
    averaging: Averaging,
    exec: Execution,
) -> Result<()> {
    let tasks = with_file(tasks_path, read_tasks(open(tasks_path)?))?;
    let predictions = with_file(preds_path, read_predictions(open(preds_path)?))?;
    let known: HashSet<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let unknown = predictions.keys().filter(|k| !known.contains(k.as_str())).count();
    if unknown > 0 {
        eprintln!("{unknown} predictions name no task and were ignored");
    }
    let options = ParseOptions { coords };
    let outcome = score_batch(&tasks, &predictions, &options, exec)?;
    if let Some(path) = results {
        write_jsonl(sink(Some(path))?, &outcome.results).map_err(internal)?;
    }
    let report = Report::build(&outcome.aggregate, averaging, outcome.missing_predictions)?;
    write_json(report_path, &report)?;
    eprintln!(
        "scored {} tasks ({} without a prediction), {}",
        outcome.results.len(),
        outcome.missing_predictions,
        summary_line(&report)
    );
    Ok(())
}

fn cmd_report(
    results: Option<PathBuf>,
    means: Option<PathBuf>,
    averaging: Averaging,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(path) = means {
        let means: BTreeMap<ScoreGroup, BTreeMap<Metric, f64>> =
            serde_json::from_reader(open(&path)?).with_context(|| path.display().to_string())?;
        let report = CompositeReport::from_group_means(&means)?;
        write_json(out, &report)?;
        return Ok(());
    }
    let path = results.ok_or_else(|| anyhow!("need --results or --means"))?;
    let rows: Vec<(usize, TaskResult)> = with_file(&path, read_jsonl(open(&path)?))?;
    let mut agg = Aggregate::default();
    for (line, r) in &rows {
        if ScoreGroup::of(r.family, r.output_format).is_none() {
            bail!(
                "{}:{line}: {} has no {} output",
                path.display(),
                r.family,
                r.output_format
            );
        }
        agg.add(r);
    }
    let report = Report::build(&agg, averaging, 0)?;
    write_json(out, &report)?;
    eprintln!("{} results, {}", rows.len(), summary_line(&report));
    Ok(())
}

fn cmd_text2d(pages: &Path, id: &str) -> Result<()> {
    let (corpus, _) = with_file(pages, read_pages(open(pages)?))?;
    let page = corpus
        .iter()
        .find(|p| p.id == id)
        .ok_or_else(|| anyhow!("{}: no page with id {id:?}", pages.display()))?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", render_text2d(&page.lines, page.dims))?;
    Ok(())
}

fn cmd_repair(
    input: Option<PathBuf>,
    format: Option<OutputFormat>,
    dims: (u32, u32),
    coords: CoordSpace,
) -> Result<()> {
    let mut raw = String::new();
    match &input {
        Some(p) => open(p)?.read_to_string(&mut raw)?,
        None => io::stdin().lock().read_to_string(&mut raw)?,
    };
    let Some(format) = format else {
        let fixed = repair(&extract_candidate(&raw))?;
        for n in &fixed.notes {
            eprintln!("note: {n}");
        }
        println!("{}", fixed.text);
        return Ok(());
    };
    let dims = ImageDims::new(dims.0, dims.1)?;
    let parsed = parse_prediction_with(&raw, format, dims, &ParseOptions { coords });
    for d in &parsed.diagnostics {
        eprintln!("note: {d}");
    }
    let output = match &parsed.payload {
        Payload::PlainText(t) => serde_json::Value::String(t.clone()),
        Payload::Spans(s) => serde_json::to_value(s).map_err(internal)?,
        Payload::Boxes(b) => serde_json::to_value(b).map_err(internal)?,
        Payload::Invalid => bail!("output is invalid for {format}: {}", parsed.diagnostics.join("; ")),
    };
    let doc = serde_json::json!({ "parse_kind": parsed.kind(), "output": output });
    println!("{doc}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = execution(cli.jobs)?;
    match cli.command {
        Command::GenFixtures {
            seed,
            pages,
            min_lines,
            max_lines,
            out,
        } => cmd_gen_fixtures(seed, pages, min_lines, max_lines, out.as_deref(), exec),
        Command::MakeTasks {
            pages,
            manifest,
            seed,
            families,
            formats,
            granularities,
            positives,
            negatives,
            regions,
            localized_rule,
            templates,
            strict,
            out,
        } => cmd_make_tasks(
            pages,
            manifest,
            seed,
            families,
            formats,
            granularities,
            (positives, negatives, regions),
            localized_rule,
            templates,
            strict,
            out.as_deref(),
            exec,
        ),
        Command::Score {
            tasks,
            predictions,
            results,
            report,
            coords,
            averaging,
        } => cmd_score(
            &tasks,
            &predictions,
            results.as_deref(),
            report.as_deref(),
            coords,
            averaging,
            exec,
        ),
        Command::Report {
            results,
            means,
            averaging,
            out,
        } => cmd_report(results, means, averaging, out.as_deref()),
        Command::Text2d { pages, id } => cmd_text2d(&pages, &id),
        Command::Repair {
            input,
            format,
            width,
            height,
            coords,
        } => cmd_repair(input, format, (width, height), coords),
        Command::SystemPrompt => {
            print!("{SYSTEM_PROMPT}");
            if !SYSTEM_PROMPT.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

/// The error chain on one line, skipping causes the previous message
/// already ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<Internal>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
        Err(_) => ExitCode::from(2),
    }
}
