//! Aggregation of graded results into per-version tables plus
//! error-distribution breakdowns, rendered as markdown, CSV, or JSON.
//!
//! Rows keep full-precision percentages; rounding to one decimal happens at
//! render time, identically across all three formats.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{ErrorCategory, ErrorLabel};
use crate::cot_eval::CoTEvalResult;
use crate::versioning::VersionTag;

/// Which models produced a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModelIds {
    Direct { backend: String },
    Mathflow { perception_ei: String, perception_rp: String, inference: String },
}

impl ModelIds {
    pub fn label(&self) -> String {
        match self {
            ModelIds::Direct { backend } => backend.clone(),
            ModelIds::Mathflow { perception_ei, perception_rp, inference } => {
                format!("mathflow[ei={perception_ei}, rp={perception_rp}, inference={inference}]")
            }
        }
    }
}

/// Report provenance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub generated_at_unix: u64,
    pub config_digest: String,
    pub aggregation: String,
}

impl ReportMetadata {
    pub fn new(generated_at_unix: u64, config_digest: &str) -> ReportMetadata {
        ReportMetadata {
            generated_at_unix,
            config_digest: config_digest.to_string(),
            aggregation: "All = unweighted mean over version rows".to_string(),
        }
    }
}

/// Per-version metrics as percentages (unrounded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionRow {
    pub version: VersionTag,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot_e: Option<f64>,
    pub acc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub visual_perception: usize,
    pub reasoning: usize,
    pub knowledge: usize,
}

impl CategoryCounts {
    fn add(&mut self, category: ErrorCategory) {
        match category {
            ErrorCategory::VisualPerception => self.visual_perception += 1,
            ErrorCategory::Reasoning => self.reasoning += 1,
            ErrorCategory::Knowledge => self.knowledge += 1,
        }
    }

    pub fn get(&self, category: ErrorCategory) -> usize {
        match category {
            ErrorCategory::VisualPerception => self.visual_perception,
            ErrorCategory::Reasoning => self.reasoning,
            ErrorCategory::Knowledge => self.knowledge,
        }
    }

    pub fn total(&self) -> usize {
        self.visual_perception + self.reasoning + self.knowledge
    }
}

/// Error counts grouped by version, plus the grand total.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub per_version: BTreeMap<VersionTag, CategoryCounts>,
    pub total: CategoryCounts,
}

/// The whole report for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub models: ModelIds,
    pub rows: Vec<VersionRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_cot_e: Option<f64>,
    pub all_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_breakdown: Option<ErrorBreakdown>,
    pub metadata: ReportMetadata,
}

#[derive(Debug)]
pub enum ReportError {
    EmptyResults,
}

impl fmt::Display for ReportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportError::EmptyResults => f.write_str("no results to aggregate"),
        }
    }
}

impl std::error::Error for ReportError {}

/// Order-independent mean: values are sorted before summation so that
/// aggregation is exactly permutation-invariant, not just up to float
/// rounding.
fn mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

fn build_rows(per_version: BTreeMap<VersionTag, Vec<(f64, Option<f64>)>>) -> Vec<VersionRow> {
    let mut rows = Vec::new();
    for (version, scores) in per_version {
        let acc: Vec<f64> = scores.iter().map(|(score0, _)| *score0).collect();
        let finals: Vec<f64> = scores.iter().filter_map(|(_, f)| *f).collect();
        rows.push(VersionRow {
            version,
            n: scores.len(),
            cot_e: if finals.len() == scores.len() && !finals.is_empty() {
                Some(mean(&finals) * 100.0)
            } else {
                None
            },
            acc: mean(&acc) * 100.0,
        });
    }
    rows
}

fn assemble(
    rows: Vec<VersionRow>,
    run_id: &str,
    models: ModelIds,
    metadata: ReportMetadata,
) -> RunReport {
    let accs: Vec<f64> = rows.iter().map(|r| r.acc).collect();
    let cots: Vec<f64> = rows.iter().filter_map(|r| r.cot_e).collect();
    RunReport {
        run_id: run_id.to_string(),
        models,
        all_cot_e: if cots.len() == rows.len() && !cots.is_empty() {
            Some(mean(&cots))
        } else {
            None
        },
        all_acc: mean(&accs),
        rows,
        error_breakdown: None,
        metadata,
    }
}

/// Aggregate step-guided results: per-version means of the final score
/// (CoT-E column) and of the baseline score (Acc column), as percentages;
/// "All" is the unweighted mean across version rows.
pub fn aggregate_run(
    results: &[CoTEvalResult],
    run_id: &str,
    models: ModelIds,
    metadata: ReportMetadata,
) -> Result<RunReport, ReportError> {
    if results.is_empty() {
        return Err(ReportError::EmptyResults);
    }
    let mut per_version: BTreeMap<VersionTag, Vec<(f64, Option<f64>)>> = BTreeMap::new();
    for result in results {
        per_version
            .entry(result.version)
            .or_default()
            .push((result.score0, Some(result.final_score)));
    }
    Ok(assemble(build_rows(per_version), run_id, models, metadata))
}

/// A baseline-only result, for runs scored without step guidance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccResult {
    pub problem_id: String,
    pub version: VersionTag,
    pub score0: f64,
}

/// Aggregate baseline-only results; rows carry Acc with no CoT-E column.
pub fn aggregate_acc(
    results: &[AccResult],
    run_id: &str,
    models: ModelIds,
    metadata: ReportMetadata,
) -> Result<RunReport, ReportError> {
    if results.is_empty() {
        return Err(ReportError::EmptyResults);
    }
    let mut per_version: BTreeMap<VersionTag, Vec<(f64, Option<f64>)>> = BTreeMap::new();
    for result in results {
        per_version.entry(result.version).or_default().push((result.score0, None));
    }
    Ok(assemble(build_rows(per_version), run_id, models, metadata))
}

/// Count externally supplied error labels by version and category.
pub fn aggregate_errors(labels: &[ErrorLabel]) -> ErrorBreakdown {
    let mut breakdown = ErrorBreakdown::default();
    for label in labels {
        breakdown.per_version.entry(label.version).or_default().add(label.category);
        breakdown.total.add(label.category);
    }
    breakdown
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s {
            "markdown" | "md" => Some(ReportFormat::Markdown),
            "csv" => Some(ReportFormat::Csv),
            "json" => Some(ReportFormat::Json),
            _ => None,
        }
    }
}

/// Half-up rounding to one decimal.
pub fn round1(value: f64) -> f64 {
    (value * 10.0).round() / 10.0
}

fn fmt1(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.1}", round1(v)),
        None => "-".to_string(),
    }
}

fn render_markdown(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str("# Run Report\n\n");
    out.push_str(&format!("- run: {}\n", report.run_id));
    out.push_str(&format!("- model: {}\n", report.models.label()));
    out.push_str(&format!("- config digest: {}\n", report.metadata.config_digest));
    out.push_str(&format!("- generated at: {} (unix)\n", report.metadata.generated_at_unix));
    out.push_str(&format!("- aggregation: {}\n\n", report.metadata.aggregation));

    let mut header = String::from("| Model | All CoT-E | All Acc |");
    let mut rule = String::from("|---|---:|---:|");
    for row in &report.rows {
        header.push_str(&format!(" {} CoT-E | {} Acc |", row.version.label(), row.version.label()));
        rule.push_str("---:|---:|");
    }
    out.push_str(&header);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    let mut line = format!(
        "| {} | {} | {} |",
        report.models.label(),
        fmt1(report.all_cot_e),
        fmt1(Some(report.all_acc)),
    );
    for row in &report.rows {
        line.push_str(&format!(" {} | {} |", fmt1(row.cot_e), fmt1(Some(row.acc))));
    }
    out.push_str(&line);
    out.push('\n');

    out.push_str("\nSamples per version: ");
    let counts: Vec<String> =
        report.rows.iter().map(|row| format!("{} n={}", row.version.label(), row.n)).collect();
    out.push_str(&counts.join(", "));
    out.push('\n');

    if let Some(errors) = &report.error_breakdown {
        out.push_str("\n## Error distribution\n\n");
        out.push_str("| Version | Visual perception | Reasoning | Knowledge |\n");
        out.push_str("|---|---:|---:|---:|\n");
        for (version, counts) in &errors.per_version {
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                version.label(),
                counts.visual_perception,
                counts.reasoning,
                counts.knowledge
            ));
        }
        out.push_str(&format!(
            "| All | {} | {} | {} |\n",
            errors.total.visual_perception, errors.total.reasoning, errors.total.knowledge
        ));
    }
    out
}

fn render_csv(report: &RunReport) -> String {
    let mut out = String::from("version,n,cot_e,acc\n");
    let total_n: usize = report.rows.iter().map(|r| r.n).sum();
    out.push_str(&format!(
        "All,{},{},{}\n",
        total_n,
        fmt1(report.all_cot_e).replace('-', ""),
        fmt1(Some(report.all_acc)),
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.version,
            row.n,
            fmt1(row.cot_e).replace('-', ""),
            fmt1(Some(row.acc)),
        ));
    }
    if let Some(errors) = &report.error_breakdown {
        out.push_str("\nversion,visual_perception,reasoning,knowledge\n");
        for (version, counts) in &errors.per_version {
            out.push_str(&format!(
                "{},{},{},{}\n",
                version, counts.visual_perception, counts.reasoning, counts.knowledge
            ));
        }
        out.push_str(&format!(
            "all,{},{},{}\n",
            errors.total.visual_perception, errors.total.reasoning, errors.total.knowledge
        ));
    }
    out
}

fn render_json(report: &RunReport) -> String {
    // The JSON view carries the same one-decimal values as the table.
    let rows: Vec<serde_json::Value> = report
        .rows
        .iter()
        .map(|row| {
            let mut obj = serde_json::json!({
                "version": row.version,
                "n": row.n,
                "acc": round1(row.acc),
            });
            if let Some(cot_e) = row.cot_e {
                obj["cot_e"] = serde_json::json!(round1(cot_e));
            }
            obj
        })
        .collect();
    let mut value = serde_json::json!({
        "run_id": report.run_id,
        "models": report.models,
        "rows": rows,
        "all_acc": round1(report.all_acc),
        "metadata": report.metadata,
    });
    if let Some(all_cot_e) = report.all_cot_e {
        value["all_cot_e"] = serde_json::json!(round1(all_cot_e));
    }
    if let Some(errors) = &report.error_breakdown {
        value["error_breakdown"] = serde_json::to_value(errors).unwrap();
    }
    let mut rendered = serde_json::to_string_pretty(&value).unwrap();
    rendered.push('\n');
    rendered
}

/// Render a report. Byte-deterministic: identical reports yield identical
/// output.
pub fn render_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Json => render_json(report),
    }
}
