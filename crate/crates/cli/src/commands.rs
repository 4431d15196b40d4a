//! The individual subcommands. Each returns its stdout payload as a string;
//! failures carry the exit-code class.

use std::path::Path;

use mathflow::corpus::{
    self, build_rp_samples, corpus_stats, load_corpus, validate_record, ErrorLabel,
    ExpectedAnswer, ProblemRecord, QuestionType, CHOICE_LETTERS,
};
use mathflow::grading::grade_response;
use mathflow::reporting::{
    self, aggregate_errors, render_report, AccResult, ModelIds, ReportFormat, ReportMetadata,
};
use mathflow::versioning::{compose_version, VersionTag};

use crate::runner::{self, AccLine, EvalLine, RunConfig, RunManifest, Scoring};
use crate::CliError;

/// Parse a comma-separated version list; "all" (or nothing) means all six.
pub fn parse_versions(raw: &[String]) -> Result<Vec<VersionTag>, CliError> {
    if raw.is_empty() || raw.iter().any(|s| s == "all") {
        return Ok(VersionTag::ALL.to_vec());
    }
    let mut versions = Vec::new();
    for name in raw {
        for part in name.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let tag = VersionTag::parse(part).ok_or_else(|| {
                CliError::Data(format!(
                    "unknown version \"{part}\" (expected one of: {})",
                    VersionTag::ALL.map(|v| v.tag()).join(", ")
                ))
            })?;
            versions.push(tag);
        }
    }
    versions.sort();
    versions.dedup();
    if versions.is_empty() {
        return Err(CliError::Data("no versions selected".to_string()));
    }
    Ok(versions)
}

fn load(corpus_path: &Path) -> Result<Vec<ProblemRecord>, CliError> {
    load_corpus(corpus_path).map_err(|e| CliError::Data(e.to_string()))
}

/// Validate every record, including assets needed by the requested versions.
/// Nonzero exit (a `Data` error) on any violation.
pub fn cmd_validate(
    corpus_path: &Path,
    versions: &[VersionTag],
    json: bool,
) -> Result<String, CliError> {
    let records = load(corpus_path)?;
    let base_dir = corpus_path.parent().unwrap_or_else(|| Path::new("."));
    let mut failing: Vec<(String, Vec<corpus::Violation>)> = Vec::new();
    for record in &records {
        let report = validate_record(record, versions, Some(base_dir));
        if !report.is_ok() {
            failing.push((record.id.clone(), report.violations));
        }
    }
    if failing.is_empty() {
        return Ok(format!("ok: {} records validated", records.len()));
    }
    let listing = if json {
        let value: Vec<serde_json::Value> = failing
            .iter()
            .map(|(id, violations)| serde_json::json!({ "id": id, "violations": violations }))
            .collect();
        serde_json::to_string_pretty(&value).unwrap()
    } else {
        let mut out = String::new();
        for (id, violations) in &failing {
            for violation in violations {
                out.push_str(&format!("{id}: {violation}\n"));
            }
        }
        out.push_str(&format!(
            "{} of {} records failed validation",
            failing.len(),
            records.len()
        ));
        out
    };
    Err(CliError::Data(listing))
}

/// Compose each record into the requested versions and write one rendered
/// problem per line, in record order then version order.
pub fn cmd_render(
    corpus_path: &Path,
    versions: &[VersionTag],
    out: &Path,
) -> Result<String, CliError> {
    let records = load(corpus_path)?;
    let mut lines = Vec::new();
    for record in &records {
        for &version in versions {
            let rendered = compose_version(record, version)
                .map_err(|e| CliError::Data(format!("record {}: {e}", record.id)))?;
            lines.push(rendered);
        }
    }
    runner::write_jsonl(out, &lines)?;
    Ok(format!("wrote {} rendered problems to {}", lines.len(), out.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsFormat {
    Markdown,
    Csv,
    Json,
}

impl StatsFormat {
    pub fn parse(s: &str) -> Option<StatsFormat> {
        match s {
            "markdown" | "md" => Some(StatsFormat::Markdown),
            "csv" => Some(StatsFormat::Csv),
            "json" => Some(StatsFormat::Json),
            _ => None,
        }
    }
}

pub fn cmd_stats(
    corpus_path: &Path,
    version: VersionTag,
    format: StatsFormat,
) -> Result<String, CliError> {
    let records = load(corpus_path)?;
    let stats = corpus_stats(&records, version).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(match format {
        StatsFormat::Markdown => stats.to_markdown(),
        StatsFormat::Csv => stats.to_csv(),
        StatsFormat::Json => {
            let mut rendered = serde_json::to_string_pretty(&stats).unwrap();
            rendered.push('\n');
            rendered
        }
    })
}

/// Emit one next-step training pair per solution step of every record.
pub fn cmd_datagen(corpus_path: &Path, out: &Path) -> Result<String, CliError> {
    let records = load(corpus_path)?;
    let mut pairs = Vec::new();
    for record in &records {
        let mut sample =
            build_rp_samples(record).map_err(|e| CliError::Data(e.to_string()))?;
        pairs.append(&mut sample);
    }
    runner::write_jsonl(out, &pairs)?;
    Ok(format!("wrote {} prompt/target pairs to {}", pairs.len(), out.display()))
}

/// Grade a response snippet against an expected answer on the command line.
pub fn cmd_grade(
    text: &str,
    expected: &str,
    question_type: QuestionType,
) -> Result<String, CliError> {
    let expected = match question_type {
        QuestionType::MultipleChoice => {
            let mut chars = expected.trim().chars();
            let letter = chars
                .next()
                .map(|c| c.to_ascii_uppercase())
                .filter(|c| CHOICE_LETTERS.contains(c) && chars.next().is_none())
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "expected answer \"{expected}\" is not a letter A\u{2013}F"
                    ))
                })?;
            ExpectedAnswer::Choice { choice: letter }
        }
        QuestionType::FreeForm => ExpectedAnswer::Value { value: expected.trim().to_string() },
    };
    let outcome = grade_response(text, &expected, question_type);
    let mut rendered = serde_json::to_string_pretty(&outcome).unwrap();
    rendered.push('\n');
    Ok(rendered)
}

/// Run an evaluation; see [`runner::execute`].
pub fn cmd_eval(config: &RunConfig) -> Result<String, CliError> {
    let output = runner::execute(config)?;
    Ok(format!(
        "run complete: {} results ({} resumed) in {}\nreport: {}",
        output.completed,
        output.resumed,
        output.run_dir.display(),
        output.report_markdown.display()
    ))
}

/// Re-render the report for an existing run directory.
pub fn cmd_report(
    run_dir: &Path,
    format: ReportFormat,
    error_labels: Option<&Path>,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let manifest_path = run_dir.join("run.json");
    let manifest: RunManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", manifest_path.display())))?,
    )
    .map_err(|e| CliError::Data(format!("run.json: {e}")))?;

    let models = match &manifest.mode {
        runner::Mode::Direct { backend } => ModelIds::Direct { backend: backend.clone() },
        runner::Mode::Mathflow { perception_ei, perception_rp, inference } => {
            ModelIds::Mathflow {
                perception_ei: perception_ei.clone(),
                perception_rp: perception_rp.clone(),
                inference: inference.clone(),
            }
        }
    };
    let metadata = ReportMetadata::new(manifest.generated_at_unix, &manifest.config_digest);
    let results_path = run_dir.join("results.jsonl");

    let mut report = match manifest.scoring {
        Scoring::Acc => {
            let lines: Vec<AccLine> = runner::read_jsonl(&results_path)?;
            let results: Vec<AccResult> = lines.into_iter().map(|l| l.result).collect();
            reporting::aggregate_acc(&results, &manifest.run_id, models, metadata)
        }
        Scoring::CotE | Scoring::Both => {
            let lines: Vec<EvalLine> = runner::read_jsonl(&results_path)?;
            let results: Vec<_> = lines.into_iter().map(|l| l.result).collect();
            reporting::aggregate_run(&results, &manifest.run_id, models, metadata)
        }
    }
    .map_err(|e| CliError::Data(e.to_string()))?;

    if let Some(labels_path) = error_labels {
        let labels: Vec<ErrorLabel> = runner::read_jsonl(labels_path)?;
        report.error_breakdown = Some(aggregate_errors(&labels));
    }

    let rendered = render_report(&report, format);
    if let Some(out) = out {
        std::fs::write(out, &rendered)
            .map_err(|e| CliError::Infra(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(rendered)
}
