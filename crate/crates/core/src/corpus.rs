//! Problem corpus: schema, JSONL ingestion, validation, statistics, and
//! next-step training-pair generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::versioning::{self, VersionTag};

/// Letters a multiple-choice answer may use.
pub const CHOICE_LETTERS: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

/// Problem language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::En => f.write_str("en"),
            Language::Zh => f.write_str("zh"),
        }
    }
}

/// Whether a problem asks for an option letter or a free-form value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    MultipleChoice,
    FreeForm,
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuestionType::MultipleChoice => f.write_str("multiple_choice"),
            QuestionType::FreeForm => f.write_str("free_form"),
        }
    }
}

/// A reference to a diagram image: either a path (relative references are
/// resolved against the corpus file's directory) or an http(s) URI.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn is_remote(&self) -> bool {
        self.0.starts_with("http://") || self.0.starts_with("https://")
    }

    /// Resolve a relative path reference against `base_dir`. Remote URIs and
    /// absolute paths pass through unchanged.
    pub fn resolve(&self, base_dir: &Path) -> ImageRef {
        if self.is_remote() || Path::new(&self.0).is_absolute() {
            self.clone()
        } else {
            ImageRef(base_dir.join(&self.0).to_string_lossy().into_owned())
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The four textual information components of a problem.
///
/// `di` describes directly observable composition of the figure, `ei` carries
/// the concrete values and relations needed to solve, `rp` holds properties
/// inferred beyond what the diagram states, and `oq` is the bare question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemComponents {
    #[serde(default)]
    pub di: String,
    #[serde(default)]
    pub rp: String,
    #[serde(default)]
    pub ei: String,
    pub oq: String,
}

impl ProblemComponents {
    /// Join the selected components with newlines in the fixed order
    /// DI, RP, EI, OQ. Empty components contribute nothing.
    pub fn joined(&self, include_di: bool, include_rp: bool, include_ei: bool) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(4);
        if include_di && !self.di.is_empty() {
            parts.push(&self.di);
        }
        if include_rp && !self.rp.is_empty() {
            parts.push(&self.rp);
        }
        if include_ei && !self.ei.is_empty() {
            parts.push(&self.ei);
        }
        if !self.oq.is_empty() {
            parts.push(&self.oq);
        }
        parts.join("\n")
    }

    /// All four components joined (the fullest textual form of the problem).
    pub fn joined_all(&self) -> String {
        self.joined(true, true, true)
    }
}

/// Diagram image references for the three rendering states of a problem.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagramAssets {
    /// The diagram as it appears in the original problem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_diagram: Option<ImageRef>,
    /// The diagram with the essential information drawn into it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagram_ei: Option<ImageRef>,
    /// The diagram with both essential information and reasoned properties
    /// drawn into it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagram_ei_rp: Option<ImageRef>,
}

/// The ground-truth answer for a problem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpectedAnswer {
    /// A single option letter A–F.
    Choice { choice: char },
    /// A canonical value string: integer, decimal with '.', or fraction "a/b".
    Value { value: String },
}

impl ExpectedAnswer {
    /// The answer as the string used for length statistics and string matching.
    pub fn as_text(&self) -> String {
        match self {
            ExpectedAnswer::Choice { choice } => choice.to_string(),
            ExpectedAnswer::Value { value } => value.clone(),
        }
    }
}

/// Error category assigned by an external annotator to one model response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    VisualPerception,
    Reasoning,
    Knowledge,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 3] = [
        ErrorCategory::VisualPerception,
        ErrorCategory::Reasoning,
        ErrorCategory::Knowledge,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ErrorCategory::VisualPerception => "visual_perception",
            ErrorCategory::Reasoning => "reasoning",
            ErrorCategory::Knowledge => "knowledge",
        }
    }
}

/// One externally supplied error annotation for a (model, version) run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorLabel {
    pub model_id: String,
    pub version: VersionTag,
    pub category: ErrorCategory,
}

/// One annotated problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: String,
    pub language: Language,
    pub subject: String,
    pub subfield: String,
    pub question_type: QuestionType,
    pub components: ProblemComponents,
    #[serde(default)]
    pub assets: DiagramAssets,
    pub answer: ExpectedAnswer,
    #[serde(default)]
    pub solution_steps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_labels: Option<Vec<ErrorLabel>>,
}

/// Errors raised while reading a corpus file.
#[derive(Debug)]
pub enum CorpusError {
    Unreadable {
        path: PathBuf,
        error: String,
    },
    MalformedLine {
        line: usize,
        error: String,
    },
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    EmptyCorpus,
    NoSolutionSteps {
        id: String,
    },
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::Unreadable { path, error } => {
                write!(f, "cannot read corpus file {}: {error}", path.display())
            }
            CorpusError::MalformedLine { line, error } => {
                write!(f, "line {line}: {error}")
            }
            CorpusError::DuplicateId {
                id,
                first_line,
                second_line,
            } => write!(
                f,
                "duplicate id \"{id}\" on lines {first_line} and {second_line}"
            ),
            CorpusError::EmptyCorpus => f.write_str("corpus contains no records"),
            CorpusError::NoSolutionSteps { id } => {
                write!(f, "record \"{id}\" has no solution steps")
            }
        }
    }
}

impl std::error::Error for CorpusError {}

/// Load a JSONL corpus: one record per line, blank lines skipped.
///
/// Fails on unreadable files, malformed lines (reported with their line
/// number), and duplicate ids. Semantic invariants are checked separately by
/// [`validate_record`].
pub fn load_corpus(path: &Path) -> Result<Vec<ProblemRecord>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Unreadable {
        path: path.to_path_buf(),
        error: e.to_string(),
    })?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Unreadable {
            path: path.to_path_buf(),
            error: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record: ProblemRecord =
            serde_json::from_str(trimmed).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                error: e.to_string(),
            })?;
        if let Some(&first_line) = seen.get(&record.id) {
            return Err(CorpusError::DuplicateId {
                id: record.id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(record.id.clone(), line_no);
        records.push(record);
    }
    Ok(records)
}

/// Serialize records back to the JSONL form accepted by [`load_corpus`].
pub fn serialize_corpus(records: &[ProblemRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// One violated invariant found by [`validate_record`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Violation {
    EmptyOq,
    AnswerLetterOutOfRange { letter: char },
    AnswerKindMismatch { question_type: QuestionType },
    BadValueFormat { value: String },
    EmptySolutionSteps,
    EmptySolutionStep { index: usize },
    MissingAsset { version: VersionTag, asset: String },
    UnreadableAsset { asset: String, reference: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyOq => f.write_str("components.oq is empty"),
            Violation::AnswerLetterOutOfRange { letter } => {
                write!(f, "answer letter '{letter}' out of A\u{2013}F")
            }
            Violation::AnswerKindMismatch { question_type } => {
                write!(f, "answer kind does not match question type {question_type}")
            }
            Violation::BadValueFormat { value } => write!(
                f,
                "answer value \"{value}\" is not an integer, decimal, or fraction a/b"
            ),
            Violation::EmptySolutionSteps => f.write_str("solution_steps is empty"),
            Violation::EmptySolutionStep { index } => {
                write!(f, "solution_steps[{index}] is empty")
            }
            Violation::MissingAsset { version, asset } => {
                write!(f, "version {version} requires asset {asset} but it is absent")
            }
            Violation::UnreadableAsset { asset, reference } => {
                write!(f, "asset {asset} reference \"{reference}\" is not readable")
            }
        }
    }
}

/// Validation outcome for one record: empty means ok.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn is_canonical_value(value: &str) -> bool {
    let body = value.strip_prefix('-').unwrap_or(value);
    if body.is_empty() {
        return false;
    }
    if let Some((num, den)) = body.split_once('/') {
        return !num.is_empty()
            && !den.is_empty()
            && num.chars().all(|c| c.is_ascii_digit())
            && den.chars().all(|c| c.is_ascii_digit())
            && den.chars().any(|c| c != '0');
    }
    if let Some((int_part, frac_part)) = body.split_once('.') {
        return !int_part.is_empty()
            && !frac_part.is_empty()
            && int_part.chars().all(|c| c.is_ascii_digit())
            && frac_part.chars().all(|c| c.is_ascii_digit());
    }
    body.chars().all(|c| c.is_ascii_digit())
}

fn asset_readable(reference: &ImageRef, base_dir: Option<&Path>) -> bool {
    if reference.is_remote() {
        // Remote references are accepted by form; they are fetched lazily.
        return true;
    }
    let path = match base_dir {
        Some(dir) => reference.resolve(dir),
        None => reference.clone(),
    };
    std::fs::metadata(path.as_str())
        .map(|m| m.is_file() && m.len() > 0)
        .unwrap_or(false)
}

/// Check every record invariant, plus the diagram assets required by each of
/// `requested_versions`. Relative asset paths are resolved against
/// `base_dir` when given. Violations are data, not failures: the report
/// lists everything found.
pub fn validate_record(
    record: &ProblemRecord,
    requested_versions: &[VersionTag],
    base_dir: Option<&Path>,
) -> ValidationReport {
    let mut violations = Vec::new();

    if record.components.oq.is_empty() {
        violations.push(Violation::EmptyOq);
    }

    match (&record.question_type, &record.answer) {
        (QuestionType::MultipleChoice, ExpectedAnswer::Choice { choice }) => {
            if !CHOICE_LETTERS.contains(choice) {
                violations.push(Violation::AnswerLetterOutOfRange { letter: *choice });
            }
        }
        (QuestionType::FreeForm, ExpectedAnswer::Value { value }) => {
            if !is_canonical_value(value) {
                violations.push(Violation::BadValueFormat {
                    value: value.clone(),
                });
            }
        }
        _ => violations.push(Violation::AnswerKindMismatch {
            question_type: record.question_type,
        }),
    }

    if record.solution_steps.is_empty() {
        violations.push(Violation::EmptySolutionSteps);
    }
    for (index, step) in record.solution_steps.iter().enumerate() {
        if step.trim().is_empty() {
            violations.push(Violation::EmptySolutionStep { index });
        }
    }

    // Present references must be readable regardless of the requested versions.
    for (name, reference) in [
        ("base_diagram", &record.assets.base_diagram),
        ("diagram_ei", &record.assets.diagram_ei),
        ("diagram_ei_rp", &record.assets.diagram_ei_rp),
    ] {
        if let Some(reference) = reference {
            if !asset_readable(reference, base_dir) {
                violations.push(Violation::UnreadableAsset {
                    asset: name.to_string(),
                    reference: reference.0.clone(),
                });
            }
        }
    }

    for &version in requested_versions {
        if let Some(requirement) = versioning::required_assets(version) {
            if versioning::asset_for(&record.assets, requirement).is_none() {
                violations.push(Violation::MissingAsset {
                    version,
                    asset: requirement.field_name().to_string(),
                });
            }
        }
    }

    ValidationReport { violations }
}

/// Max and average length in characters; the average is kept to 1 decimal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LengthStats {
    pub max: usize,
    pub avg: f64,
}

fn length_stats(lengths: &[usize]) -> LengthStats {
    if lengths.is_empty() {
        return LengthStats::default();
    }
    let max = *lengths.iter().max().unwrap();
    let sum: usize = lengths.iter().sum();
    let avg = (sum as f64 / lengths.len() as f64 * 10.0).round() / 10.0;
    LengthStats { max, avg }
}

/// Corpus statistics for one problem version.
#[derive(Clone, Debug, Serialize)]
pub struct StatsReport {
    pub version: VersionTag,
    pub total_questions: usize,
    pub multiple_choice: usize,
    pub free_form: usize,
    pub with_solutions: usize,
    pub answer_letters: BTreeMap<char, usize>,
    pub by_language: BTreeMap<Language, usize>,
    pub by_subject: BTreeMap<String, usize>,
    pub by_subfield: BTreeMap<String, usize>,
    pub unique_images: usize,
    pub unique_questions: usize,
    pub unique_answers: usize,
    pub question_length: LengthStats,
    pub answer_length: LengthStats,
}

/// Compute corpus statistics for `version`. Question lengths are measured on
/// the composed prompt text for that version; answers on their canonical
/// string form.
pub fn corpus_stats(
    corpus: &[ProblemRecord],
    version: VersionTag,
) -> Result<StatsReport, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }

    let mut multiple_choice = 0;
    let mut free_form = 0;
    let mut with_solutions = 0;
    let mut answer_letters: BTreeMap<char, usize> =
        CHOICE_LETTERS.iter().map(|&c| (c, 0)).collect();
    let mut by_language = BTreeMap::new();
    let mut by_subject = BTreeMap::new();
    let mut by_subfield = BTreeMap::new();
    let mut images = BTreeSet::new();
    let mut questions = BTreeSet::new();
    let mut answers = BTreeSet::new();
    let mut question_lengths = Vec::with_capacity(corpus.len());
    let mut answer_lengths = Vec::with_capacity(corpus.len());

    for record in corpus {
        match record.question_type {
            QuestionType::MultipleChoice => multiple_choice += 1,
            QuestionType::FreeForm => free_form += 1,
        }
        if !record.solution_steps.is_empty() {
            with_solutions += 1;
        }
        if let ExpectedAnswer::Choice { choice } = &record.answer {
            *answer_letters.entry(*choice).or_insert(0) += 1;
        }
        *by_language.entry(record.language).or_insert(0) += 1;
        *by_subject.entry(record.subject.clone()).or_insert(0) += 1;
        *by_subfield.entry(record.subfield.clone()).or_insert(0) += 1;

        if let Some(requirement) = versioning::required_assets(version) {
            if let Some(image) = versioning::asset_for(&record.assets, requirement) {
                images.insert(image.0.clone());
            }
        }

        let question = versioning::prompt_text_for(record, version);
        question_lengths.push(question.chars().count());
        questions.insert(question);

        let answer = record.answer.as_text();
        answer_lengths.push(answer.chars().count());
        answers.insert(answer);
    }

    Ok(StatsReport {
        version,
        total_questions: corpus.len(),
        multiple_choice,
        free_form,
        with_solutions,
        answer_letters,
        by_language,
        by_subject,
        by_subfield,
        unique_images: images.len(),
        unique_questions: questions.len(),
        unique_answers: answers.len(),
        question_length: length_stats(&question_lengths),
        answer_length: length_stats(&answer_lengths),
    })
}

fn percent(part: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (part as f64 / total as f64 * 1000.0).round() / 10.0
}

impl StatsReport {
    /// Two-column "Statistic | Number" markdown table.
    pub fn to_markdown(&self) -> String {
        let total = self.total_questions;
        let mut out = String::new();
        out.push_str(&format!("# Corpus statistics ({})\n\n", self.version));
        out.push_str("| Statistic | Number |\n|---|---:|\n");
        let mut row = |name: &str, value: String| {
            out.push_str(&format!("| {name} | {value} |\n"));
        };
        row("Total questions", total.to_string());
        row(
            "Subjects/subfields",
            format!("{}/{}", self.by_subject.len(), self.by_subfield.len()),
        );
        row(
            "Multiple-choice questions",
            format!(
                "{} ({}%)",
                self.multiple_choice,
                percent(self.multiple_choice, total)
            ),
        );
        row(
            "Free-form questions",
            format!("{} ({}%)", self.free_form, percent(self.free_form, total)),
        );
        row(
            "Questions with solutions",
            format!(
                "{} ({}%)",
                self.with_solutions,
                percent(self.with_solutions, total)
            ),
        );
        for (letter, count) in &self.answer_letters {
            row(
                &format!("Proportion of answer {letter}"),
                format!("{} ({}%)", count, percent(*count, self.multiple_choice)),
            );
        }
        for (subject, count) in &self.by_subject {
            row(
                &format!("Subject: {subject}"),
                format!("{} ({}%)", count, percent(*count, total)),
            );
        }
        row(
            "Number of unique images",
            format!("{} ({}%)", self.unique_images, percent(self.unique_images, total)),
        );
        row(
            "Number of unique questions",
            format!(
                "{} ({}%)",
                self.unique_questions,
                percent(self.unique_questions, total)
            ),
        );
        row(
            "Number of unique answers",
            format!(
                "{} ({}%)",
                self.unique_answers,
                percent(self.unique_answers, total)
            ),
        );
        for (language, count) in &self.by_language {
            row(
                &format!("Number of {language} questions"),
                format!("{} ({}%)", count, percent(*count, total)),
            );
        }
        row("Maximum question length", self.question_length.max.to_string());
        row("Maximum answer length", self.answer_length.max.to_string());
        row("Average question length", format!("{:.1}", self.question_length.avg));
        row("Average answer length", format!("{:.1}", self.answer_length.avg));
        out
    }

    /// CSV with the same rows as the markdown table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("statistic,number\n");
        let mut row = |name: &str, value: String| {
            out.push_str(&format!("{name},{value}\n"));
        };
        row("total_questions", self.total_questions.to_string());
        row("subjects", self.by_subject.len().to_string());
        row("subfields", self.by_subfield.len().to_string());
        row("multiple_choice", self.multiple_choice.to_string());
        row("free_form", self.free_form.to_string());
        row("with_solutions", self.with_solutions.to_string());
        for (letter, count) in &self.answer_letters {
            row(&format!("answer_{letter}"), count.to_string());
        }
        for (language, count) in &self.by_language {
            row(&format!("language_{language}"), count.to_string());
        }
        for (subject, count) in &self.by_subject {
            row(&format!("subject_{subject}"), count.to_string());
        }
        row("unique_images", self.unique_images.to_string());
        row("unique_questions", self.unique_questions.to_string());
        row("unique_answers", self.unique_answers.to_string());
        row("max_question_length", self.question_length.max.to_string());
        row("max_answer_length", self.answer_length.max.to_string());
        row("avg_question_length", format!("{:.1}", self.question_length.avg));
        row("avg_answer_length", format!("{:.1}", self.answer_length.avg));
        out
    }
}

/// One next-step training pair: the question plus the steps before
/// `step_index`, targeting the step at `step_index` (1-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTargetPair {
    pub prompt: String,
    pub target: String,
    pub source_id: String,
    pub step_index: usize,
}

/// Format steps as a single numbered line: "1. first 2. second".
pub fn numbered_steps(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, step)| format!("{}. {}", i + 1, step))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Build one next-step pair per solution step: pair `k` prompts with the
/// question and steps `1..k-1` and targets step `k`.
pub fn build_rp_samples(record: &ProblemRecord) -> Result<Vec<PromptTargetPair>, CorpusError> {
    if record.solution_steps.is_empty() {
        return Err(CorpusError::NoSolutionSteps {
            id: record.id.clone(),
        });
    }
    let question = record.components.joined_all();
    let mut pairs = Vec::with_capacity(record.solution_steps.len());
    for (idx, step) in record.solution_steps.iter().enumerate() {
        let context = &record.solution_steps[..idx];
        let solution_section = if context.is_empty() {
            "-- Solution:".to_string()
        } else {
            format!("-- Solution: {}", numbered_steps(context))
        };
        let prompt = format!("-- Question: {question}\n{solution_section}\n-- Next Step:");
        pairs.push(PromptTargetPair {
            prompt,
            target: step.clone(),
            source_id: record.id.clone(),
            step_index: idx + 1,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn sample_record(id: &str) -> ProblemRecord {
        ProblemRecord {
            id: id.to_string(),
            language: Language::En,
            subject: "plane geometry".to_string(),
            subfield: "triangles".to_string(),
            question_type: QuestionType::MultipleChoice,
            components: ProblemComponents {
                di: "Triangle ABC is drawn with altitude AD.".to_string(),
                rp: "Triangles ABD and ACD are congruent.".to_string(),
                ei: "AB = 5, AD \u{22a5} BC.".to_string(),
                oq: "Find the length of BC.".to_string(),
            },
            assets: DiagramAssets::default(),
            answer: ExpectedAnswer::Choice { choice: 'B' },
            solution_steps: vec![
                "Drop the altitude from A.".to_string(),
                "Apply the Pythagorean theorem.".to_string(),
                "Double the half-base.".to_string(),
            ],
            error_labels: None,
        }
    }

    fn write_jsonl(lines: &[String]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    #[test]
    fn load_single_well_formed_line() {
        let record = sample_record("p1");
        let file = write_jsonl(&[serde_json::to_string(&record).unwrap()]);
        let loaded = load_corpus(file.path()).unwrap();
        assert_eq!(loaded, vec![record]);
    }

    #[test]
    fn error_labels_round_trip() {
        let mut record = sample_record("p1");
        record.error_labels = Some(vec![
            ErrorLabel {
                model_id: "m1".to_string(),
                version: VersionTag::VisionPrimary,
                category: ErrorCategory::VisualPerception,
            },
            ErrorLabel {
                model_id: "m1".to_string(),
                version: VersionTag::TextPlus,
                category: ErrorCategory::Knowledge,
            },
        ]);
        let file = write_jsonl(&[serde_json::to_string(&record).unwrap()]);
        let loaded = load_corpus(file.path()).unwrap();
        assert_eq!(loaded[0].error_labels.as_ref().unwrap().len(), 2);
        assert_eq!(loaded, vec![record]);

        // An out-of-vocabulary category is a malformed line, not a record.
        let bad = r#"{"id":"x","language":"en","subject":"s","subfield":"f","question_type":"free_form",
            "components":{"oq":"q"},"answer":{"kind":"value","value":"1"},"solution_steps":["a"],
            "error_labels":[{"model_id":"m","version":"text_plus","category":"arithmetic"}]}"#
            .replace('\n', " ");
        let file = write_jsonl(&[bad]);
        assert!(matches!(load_corpus(file.path()), Err(CorpusError::MalformedLine { line: 1, .. })));
    }

    #[test]
    fn load_reports_missing_oq_with_line_number() {
        let good = serde_json::to_string(&sample_record("p1")).unwrap();
        let mut bad: serde_json::Value = serde_json::from_str(&good).unwrap();
        bad["id"] = "p2".into();
        bad["components"].as_object_mut().unwrap().remove("oq");
        let file = write_jsonl(&[good, bad.to_string()]);
        let err = load_corpus(file.path()).unwrap_err();
        match err {
            CorpusError::MalformedLine { line, error } => {
                assert_eq!(line, 2);
                assert!(error.contains("oq"), "error should name the field: {error}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn load_rejects_duplicate_ids_citing_both_lines() {
        let line = serde_json::to_string(&sample_record("p1")).unwrap();
        let file = write_jsonl(&[line.clone(), line]);
        let err = load_corpus(file.path()).unwrap_err();
        match err {
            CorpusError::DuplicateId {
                id,
                first_line,
                second_line,
            } => {
                assert_eq!(id, "p1");
                assert_eq!((first_line, second_line), (1, 2));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn validate_accepts_answer_b() {
        let record = sample_record("p1");
        assert!(validate_record(&record, &[], None).is_ok());
    }

    #[test]
    fn validate_flags_letter_out_of_range() {
        let mut record = sample_record("p1");
        record.answer = ExpectedAnswer::Choice { choice: 'G' };
        let report = validate_record(&record, &[], None);
        assert!(report
            .violations
            .contains(&Violation::AnswerLetterOutOfRange { letter: 'G' }));
    }

    #[test]
    fn validate_flags_missing_asset_for_requested_version() {
        let record = sample_record("p1");
        let report = validate_record(&record, &[VersionTag::VisionCentric], None);
        assert!(report.violations.iter().any(|v| matches!(
            v,
            Violation::MissingAsset { version: VersionTag::VisionCentric, asset } if asset == "diagram_ei"
        )));
    }

    #[test]
    fn validate_flags_value_grammar() {
        let mut record = sample_record("p1");
        record.question_type = QuestionType::FreeForm;
        record.answer = ExpectedAnswer::Value {
            value: "two".to_string(),
        };
        let report = validate_record(&record, &[], None);
        assert!(report
            .violations
            .contains(&Violation::BadValueFormat { value: "two".to_string() }));

        for ok in ["300", "2.5", "-7", "3/4", "-3/4"] {
            record.answer = ExpectedAnswer::Value { value: ok.to_string() };
            assert!(
                validate_record(&record, &[], None).is_ok(),
                "{ok} should be canonical"
            );
        }
        for bad in ["3/0", "1.", ".5", "a/b", ""] {
            record.answer = ExpectedAnswer::Value { value: bad.to_string() };
            assert!(
                !validate_record(&record, &[], None).is_ok(),
                "{bad} should be rejected"
            );
        }
    }

    #[test]
    fn stats_singleton_max_equals_avg() {
        let record = sample_record("p1");
        let stats = corpus_stats(std::slice::from_ref(&record), VersionTag::TextPlus).unwrap();
        let expected = record.components.joined_all().chars().count();
        assert_eq!(stats.question_length.max, expected);
        assert_eq!(stats.question_length.avg, expected as f64);
        assert_eq!(stats.total_questions, 1);
        assert_eq!(stats.unique_questions, 1);
        assert_eq!(stats.unique_answers, 1);
    }

    #[test]
    fn stats_average_to_one_decimal() {
        // Two OQ-only records with composed lengths 100 and 120.
        let mut a = sample_record("a");
        a.components = ProblemComponents {
            di: String::new(),
            rp: String::new(),
            ei: String::new(),
            oq: "x".repeat(100),
        };
        let mut b = sample_record("b");
        b.components = ProblemComponents {
            di: String::new(),
            rp: String::new(),
            ei: String::new(),
            oq: "y".repeat(120),
        };
        let stats = corpus_stats(&[a, b], VersionTag::TextPlus).unwrap();
        assert_eq!(stats.question_length.avg, 110.0);
        assert_eq!(stats.question_length.max, 120);
    }

    #[test]
    fn stats_counts_partition_total() {
        let records: Vec<ProblemRecord> = (0..5)
            .map(|i| {
                let mut r = sample_record(&format!("p{i}"));
                r.subject = if i % 2 == 0 { "algebra" } else { "functions" }.to_string();
                r
            })
            .collect();
        let stats = corpus_stats(&records, VersionTag::TextPlus).unwrap();
        let by_subject: usize = stats.by_subject.values().sum();
        assert_eq!(by_subject, stats.total_questions);
        let by_type = stats.multiple_choice + stats.free_form;
        assert_eq!(by_type, stats.total_questions);
    }

    #[test]
    fn stats_empty_corpus_errors() {
        assert!(matches!(
            corpus_stats(&[], VersionTag::TextPlus),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn rp_samples_three_steps() {
        let record = sample_record("p1");
        let pairs = build_rp_samples(&record).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].target, record.solution_steps[0]);
        assert!(!pairs[0].prompt.contains(&record.solution_steps[0]));
        assert!(pairs[1].prompt.contains(&record.solution_steps[0]));
        assert_eq!(pairs[1].target, record.solution_steps[1]);
        assert!(pairs[2].prompt.contains(&record.solution_steps[0]));
        assert!(pairs[2].prompt.contains(&record.solution_steps[1]));
        assert_eq!(pairs[2].target, record.solution_steps[2]);
        for (k, pair) in pairs.iter().enumerate() {
            assert_eq!(pair.step_index, k + 1);
            assert!(pair.prompt.contains(&record.components.oq));
        }
    }

    #[test]
    fn rp_samples_single_step_has_empty_context() {
        let mut record = sample_record("p1");
        record.solution_steps = vec!["Only step.".to_string()];
        let pairs = build_rp_samples(&record).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].prompt.contains("-- Solution:\n"));
    }

    #[test]
    fn rp_samples_prompts_strictly_increase() {
        let record = sample_record("p1");
        let pairs = build_rp_samples(&record).unwrap();
        for pair in pairs.windows(2) {
            assert!(pair[1].prompt.len() > pair[0].prompt.len());
        }
    }

    #[test]
    fn rp_samples_empty_steps_error() {
        let mut record = sample_record("p1");
        record.solution_steps.clear();
        assert!(matches!(
            build_rp_samples(&record),
            Err(CorpusError::NoSolutionSteps { .. })
        ));
    }

    mod round_trip {
        use super::*;
        use proptest::prelude::*;

        fn arb_answer() -> impl Strategy<Value = (QuestionType, ExpectedAnswer)> {
            prop_oneof![
                prop::sample::select(CHOICE_LETTERS.to_vec()).prop_map(|letter| {
                    (QuestionType::MultipleChoice, ExpectedAnswer::Choice { choice: letter })
                }),
                (-1000i64..1000).prop_map(|v| {
                    (QuestionType::FreeForm, ExpectedAnswer::Value { value: v.to_string() })
                }),
                (1i64..100, 1i64..100).prop_map(|(a, b)| {
                    (QuestionType::FreeForm, ExpectedAnswer::Value { value: format!("{a}/{b}") })
                }),
            ]
        }

        fn arb_record() -> impl Strategy<Value = ProblemRecord> {
            (
                "[a-z0-9]{1,12}",
                prop::bool::ANY,
                "[a-z ]{1,20}",
                ".{0,30}",
                ".{0,30}",
                ".{0,30}",
                ".{1,30}",
                arb_answer(),
                prop::collection::vec(".{1,40}", 1..5),
                prop::option::of("[a-z]{1,8}\\.png"),
            )
                .prop_map(
                    |(id, zh, subject, di, rp, ei, oq, (question_type, answer), steps, image)| {
                        ProblemRecord {
                            id,
                            language: if zh { Language::Zh } else { Language::En },
                            subject: subject.clone(),
                            subfield: subject,
                            question_type,
                            components: ProblemComponents { di, rp, ei, oq },
                            assets: DiagramAssets {
                                base_diagram: image.map(ImageRef),
                                diagram_ei: None,
                                diagram_ei_rp: None,
                            },
                            answer,
                            solution_steps: steps,
                            error_labels: None,
                        }
                    },
                )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn load_after_serialize_is_identity(
                records in prop::collection::vec(arb_record(), 1..6)
            ) {
                // Ids must be unique within a corpus file.
                let mut deduped: Vec<ProblemRecord> = Vec::new();
                for (i, mut record) in records.into_iter().enumerate() {
                    record.id = format!("{}-{i}", record.id);
                    deduped.push(record);
                }
                let mut file = tempfile::NamedTempFile::new().unwrap();
                std::io::Write::write_all(&mut file, serialize_corpus(&deduped).as_bytes()).unwrap();
                std::io::Write::flush(&mut file).unwrap();
                let loaded = load_corpus(file.path()).unwrap();
                prop_assert_eq!(loaded, deduped);
            }
        }
    }
}
