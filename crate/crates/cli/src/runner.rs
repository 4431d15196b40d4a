//! Evaluation run orchestration: a bounded-parallel work queue over
//! (record, version, repeat) tasks, deterministic result ordering, and a
//! run directory that later invocations can resume.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use mathflow::client::{sha256_hex, BackendRegistry, GenerationConfig, RegistryContext};
use mathflow::corpus::{load_corpus, ProblemRecord, QuestionType};
use mathflow::cot_eval::{
    build_step_prompt, run_cot_eval, solve_prompt, CoTEvalConfig, CoTEvalResult, Solver, StepRun,
};
use mathflow::grading::grade_response;
use mathflow::pipeline::{
    run_mathflow, DirectSolver, MathFlowSolver, PipelineConfig, PipelineTrace,
    DEFAULT_EI_INSTRUCTION, DEFAULT_RP_INSTRUCTION,
};
use mathflow::reporting::{self, AccResult, ModelIds, ReportFormat, ReportMetadata};
use mathflow::versioning::{compose_version, RenderedProblem, VersionTag};

use crate::CliError;

/// Which backends answer the problems.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Direct { backend: String },
    Mathflow { perception_ei: String, perception_rp: String, inference: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Acc,
    CotE,
    Both,
}

impl Scoring {
    pub fn parse(s: &str) -> Option<Scoring> {
        match s {
            "acc" => Some(Scoring::Acc),
            "cot_e" => Some(Scoring::CotE),
            "both" => Some(Scoring::Both),
            _ => None,
        }
    }

    fn step_guided(&self) -> bool {
        !matches!(self, Scoring::Acc)
    }
}

/// Everything one `eval` invocation needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub registry: PathBuf,
    pub versions: Vec<VersionTag>,
    pub mode: Mode,
    pub scoring: Scoring,
    pub alpha: f64,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
    pub repeat: u32,
    pub audit: bool,
    pub attach_image_to_inference: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.versions.is_empty() {
            return Err(CliError::Data("no versions selected".to_string()));
        }
        if self.concurrency < 1 {
            return Err(CliError::Data("concurrency must be >= 1".to_string()));
        }
        if self.repeat < 1 {
            return Err(CliError::Data("repeat must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CliError::Data(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// One line of `results.jsonl` for step-guided scoring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalLine {
    pub repeat: u32,
    #[serde(flatten)]
    pub result: CoTEvalResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_runs: Option<Vec<StepRun>>,
}

/// One line of `results.jsonl` for baseline-only scoring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccLine {
    pub repeat: u32,
    #[serde(flatten)]
    pub result: AccResult,
}

/// Run provenance, written once per run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub generated_at_unix: u64,
    pub corpus: String,
    pub corpus_sha256: String,
    pub registry: String,
    pub versions: Vec<VersionTag>,
    pub mode: Mode,
    pub scoring: Scoring,
    pub alpha: f64,
    pub repeat: u32,
    pub attach_image_to_inference: bool,
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Digest over everything that determines results: corpus and registry
/// content, the run parameters, and the prompt templates in use.
pub fn config_digest(config: &RunConfig) -> Result<String, CliError> {
    let canonical = serde_json::json!({
        "corpus_sha256": file_sha256(&config.corpus)?,
        "registry_sha256": file_sha256(&config.registry)?,
        "versions": config.versions,
        "mode": config.mode,
        "scoring": config.scoring,
        "alpha": config.alpha,
        "repeat": config.repeat,
        "attach_image_to_inference": config.attach_image_to_inference,
        "templates": templates_fingerprint(),
    });
    Ok(sha256_hex(canonical.to_string().as_bytes()))
}

/// Fingerprint of the prompt templates and perception instructions baked
/// into this build, so reports are traceable to exact prompt bytes.
pub fn templates_fingerprint() -> String {
    let rendered = RenderedProblem {
        problem_id: String::new(),
        version: VersionTag::TextPlus,
        prompt_text: "{question}".to_string(),
        image: None,
        question_type: QuestionType::FreeForm,
    };
    let steps = vec!["{step}".to_string()];
    let samples = [
        solve_prompt("{question}", QuestionType::FreeForm),
        solve_prompt("{question}", QuestionType::MultipleChoice),
        build_step_prompt(&rendered, &steps, 1).expect("in range"),
        DEFAULT_EI_INSTRUCTION.to_string(),
        DEFAULT_RP_INSTRUCTION.to_string(),
    ];
    sha256_hex(samples.join("\n\u{1e}\n").as_bytes())
}

struct Task {
    index: usize,
    record_idx: usize,
    version: VersionTag,
    repeat: u32,
}

enum TaskOutcome {
    Eval(Box<EvalLine>),
    Acc(AccLine, Option<Box<PipelineTrace>>),
}

fn task_key(problem_id: &str, version: VersionTag, repeat: u32) -> String {
    format!("{problem_id}\u{1f}{version}\u{1f}{repeat}")
}

/// Files produced by a finished run.
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub results_path: PathBuf,
    pub report_markdown: PathBuf,
    pub completed: usize,
    pub resumed: usize,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), idx + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::Infra(format!("cannot write {}: {e}", path.display())))
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn resolve_rendered(
    record: &ProblemRecord,
    version: VersionTag,
    corpus_dir: &Path,
) -> Result<RenderedProblem, CliError> {
    let mut rendered = compose_version(record, version)
        .map_err(|e| CliError::Data(format!("record {}: {e}", record.id)))?;
    rendered.image = rendered.image.map(|image| image.resolve(corpus_dir));
    Ok(rendered)
}

/// Execute an evaluation run; returns the run directory and summary counts.
///
/// Results land in `results.jsonl` ordered by (record, version, repeat)
/// regardless of completion order. Re-invoking over an existing run
/// directory with the same config digest computes only the missing tasks.
pub fn execute(config: &RunConfig) -> Result<RunOutput, CliError> {
    config.validate()?;
    let digest = config_digest(config)?;
    let run_id = config.run_id.clone().unwrap_or_else(|| format!("run-{}", &digest[..12]));
    let run_dir = config.out_dir.join(&run_id);
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| CliError::Infra(format!("cannot create {}: {e}", run_dir.display())))?;

    let records = load_corpus(&config.corpus).map_err(|e| CliError::Data(e.to_string()))?;
    if records.is_empty() {
        return Err(CliError::Data("corpus contains no records".to_string()));
    }
    let corpus_dir = config.corpus.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

    let ctx =
        RegistryContext { cache_dir: config.cache_dir.clone(), ..RegistryContext::default() };
    let registry = mathflow::client::load_registry(&config.registry, &ctx)
        .map_err(|e| CliError::Infra(e.to_string()))?;

    let generation = GenerationConfig::default();
    let pipeline_config = match &config.mode {
        Mode::Mathflow { perception_ei, perception_rp, inference } => {
            let mut pc = PipelineConfig::new(perception_ei, perception_rp, inference);
            pc.generation = generation;
            pc.attach_image_to_inference = config.attach_image_to_inference;
            pc.validate(&registry).map_err(|e| CliError::Infra(e.to_string()))?;
            Some(pc)
        }
        Mode::Direct { backend } => {
            registry.get(backend).map_err(|e| CliError::Infra(e.to_string()))?;
            None
        }
    };

    let cot_config =
        CoTEvalConfig::new(config.alpha).map_err(|e| CliError::Data(e.to_string()))?;

    if config.scoring.step_guided() {
        if let Some(record) = records.iter().find(|r| r.solution_steps.is_empty()) {
            return Err(CliError::Data(format!(
                "record {} has no solution steps; step-guided scoring needs at least one (use --scoring acc)",
                record.id
            )));
        }
    }

    // Manifest: reuse an existing one only if the config digest agrees.
    let manifest_path = run_dir.join("run.json");
    let manifest = if manifest_path.is_file() {
        let existing: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path)
                .map_err(|e| CliError::Infra(format!("read run.json: {e}")))?,
        )
        .map_err(|e| CliError::Data(format!("run.json: {e}")))?;
        if existing.config_digest != digest {
            return Err(CliError::Data(format!(
                "run directory {} was produced by a different configuration; choose a new --run-id",
                run_dir.display()
            )));
        }
        existing
    } else {
        let manifest = RunManifest {
            run_id: run_id.clone(),
            config_digest: digest.clone(),
            generated_at_unix: now_unix(),
            corpus: config.corpus.display().to_string(),
            corpus_sha256: file_sha256(&config.corpus)?,
            registry: config.registry.display().to_string(),
            versions: config.versions.clone(),
            mode: config.mode.clone(),
            scoring: config.scoring,
            alpha: config.alpha,
            repeat: config.repeat,
            attach_image_to_inference: config.attach_image_to_inference,
        };
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())
            .map_err(|e| CliError::Infra(format!("write run.json: {e}")))?;
        manifest
    };

    // Previously completed tasks, for resume.
    let results_path = run_dir.join("results.jsonl");
    let mut done_eval: Vec<EvalLine> = Vec::new();
    let mut done_acc: Vec<AccLine> = Vec::new();
    let mut done_keys: BTreeSet<String> = BTreeSet::new();
    if results_path.is_file() {
        if config.scoring.step_guided() {
            done_eval = read_jsonl(&results_path)?;
            for line in &done_eval {
                done_keys
                    .insert(task_key(&line.result.problem_id, line.result.version, line.repeat));
            }
        } else {
            done_acc = read_jsonl(&results_path)?;
            for line in &done_acc {
                done_keys
                    .insert(task_key(&line.result.problem_id, line.result.version, line.repeat));
            }
        }
    }
    let resumed = done_keys.len();

    // Canonical task order: record file order x version order x repeat.
    let mut versions = config.versions.clone();
    versions.sort();
    versions.dedup();
    let mut tasks = Vec::new();
    let mut index = 0;
    for (record_idx, record) in records.iter().enumerate() {
        for &version in &versions {
            for repeat in 0..config.repeat {
                if !done_keys.contains(&task_key(&record.id, version, repeat)) {
                    tasks.push(Task { index, record_idx, version, repeat });
                }
                index += 1;
            }
        }
    }

    let solver: Box<dyn Solver> = match (&config.mode, &pipeline_config) {
        (Mode::Mathflow { .. }, Some(pc)) => {
            Box::new(MathFlowSolver { config: pc, registry: &registry })
        }
        (Mode::Direct { backend }, _) => Box::new(DirectSolver {
            backend: registry.get(backend).map_err(|e| CliError::Infra(e.to_string()))?,
            generation,
        }),
        _ => unreachable!("mathflow mode always builds a pipeline config"),
    };

    let outcomes: Mutex<Vec<Option<(usize, TaskOutcome)>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    let stop = AtomicBool::new(false);
    let cursor = AtomicUsize::new(0);
    let workers = config.concurrency.min(tasks.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    return;
                }
                let slot = cursor.fetch_add(1, Ordering::Relaxed);
                if slot >= tasks.len() {
                    return;
                }
                let task = &tasks[slot];
                let record = &records[task.record_idx];
                match run_task(
                    record,
                    task,
                    &corpus_dir,
                    solver.as_ref(),
                    &cot_config,
                    config,
                    pipeline_config.as_ref(),
                    &registry,
                ) {
                    Ok(outcome) => {
                        outcomes.lock().unwrap()[slot] = Some((task.index, outcome));
                    }
                    Err(error) => {
                        let mut failure = failure.lock().unwrap();
                        if failure.is_none() {
                            *failure = Some(error);
                        }
                        stop.store(true, Ordering::Relaxed);
                        return;
                    }
                }
            });
        }
    });

    let failure = failure.into_inner().unwrap();
    let completed_outcomes: Vec<(usize, TaskOutcome)> =
        outcomes.into_inner().unwrap().into_iter().flatten().collect();

    // Scripted backends record every request; dump the transcripts of this
    // invocation so offline runs are auditable.
    let scripted: Vec<_> = registry.scripted().collect();
    if !scripted.is_empty() {
        let transcripts_dir = run_dir.join("transcripts");
        std::fs::create_dir_all(&transcripts_dir)
            .map_err(|e| CliError::Infra(format!("cannot create transcripts dir: {e}")))?;
        for (id, backend) in scripted {
            write_jsonl(&transcripts_dir.join(format!("{id}.jsonl")), &backend.transcript())?;
        }
    }

    // Merge resumed and fresh results in canonical task order, and write
    // them even on failure so the run can resume.
    let position = |problem_id: &str, version: VersionTag, rep: u32| -> usize {
        let record_idx = records.iter().position(|r| r.id == problem_id).unwrap_or(0);
        let version_idx = versions.iter().position(|&v| v == version).unwrap_or(0);
        (record_idx * versions.len() + version_idx) * config.repeat as usize + rep as usize
    };

    let (eval_lines, acc_lines, traces) = if config.scoring.step_guided() {
        let mut merged: Vec<(usize, EvalLine)> = done_eval
            .into_iter()
            .map(|line| (position(&line.result.problem_id, line.result.version, line.repeat), line))
            .collect();
        for (task_index, outcome) in completed_outcomes {
            if let TaskOutcome::Eval(line) = outcome {
                merged.push((task_index, *line));
            }
        }
        merged.sort_by_key(|(index, _)| *index);
        let lines: Vec<EvalLine> = merged.into_iter().map(|(_, line)| line).collect();
        write_jsonl(&results_path, &lines)?;
        (lines, Vec::new(), Vec::new())
    } else {
        let mut merged: Vec<(usize, AccLine)> = done_acc
            .into_iter()
            .map(|line| (position(&line.result.problem_id, line.result.version, line.repeat), line))
            .collect();
        let mut traces: Vec<(usize, PipelineTrace)> = Vec::new();
        for (task_index, outcome) in completed_outcomes {
            if let TaskOutcome::Acc(line, trace) = outcome {
                merged.push((task_index, line));
                if let Some(trace) = trace {
                    traces.push((task_index, *trace));
                }
            }
        }
        merged.sort_by_key(|(index, _)| *index);
        traces.sort_by_key(|(index, _)| *index);
        let lines: Vec<AccLine> = merged.into_iter().map(|(_, line)| line).collect();
        write_jsonl(&results_path, &lines)?;
        (Vec::new(), lines, traces.into_iter().map(|(_, t)| t).collect::<Vec<_>>())
    };

    if let Some(error) = failure {
        return Err(error);
    }

    finish(config, &run_dir, &results_path, manifest, eval_lines, acc_lines, traces, resumed)
}

#[allow(clippy::too_many_arguments)]
fn run_task(
    record: &ProblemRecord,
    task: &Task,
    corpus_dir: &Path,
    solver: &dyn Solver,
    cot_config: &CoTEvalConfig,
    config: &RunConfig,
    pipeline_config: Option<&PipelineConfig>,
    registry: &BackendRegistry,
) -> Result<TaskOutcome, CliError> {
    let rendered = resolve_rendered(record, task.version, corpus_dir)?;
    if config.scoring.step_guided() {
        let run = run_cot_eval(solver, record, &rendered, cot_config)
            .map_err(|e| CliError::Infra(format!("record {}: {e}", record.id)))?;
        Ok(TaskOutcome::Eval(Box::new(EvalLine {
            repeat: task.repeat,
            result: run.result,
            step_runs: if config.audit { Some(run.step_runs) } else { None },
        })))
    } else if let Some(pc) = pipeline_config {
        let trace = run_mathflow(pc, registry, &rendered, &record.answer)
            .map_err(|e| CliError::Infra(format!("record {}: {e}", record.id)))?;
        let score0 = if trace.grade.correct { 1.0 } else { 0.0 };
        Ok(TaskOutcome::Acc(
            AccLine {
                repeat: task.repeat,
                result: AccResult {
                    problem_id: record.id.clone(),
                    version: task.version,
                    score0,
                },
            },
            Some(Box::new(trace)),
        ))
    } else {
        let solved = solver
            .solve_step(&rendered, &record.solution_steps, 0)
            .map_err(|e| CliError::Infra(format!("record {}: {e}", record.id)))?;
        let outcome = grade_response(&solved.response.text, &record.answer, record.question_type);
        Ok(TaskOutcome::Acc(
            AccLine {
                repeat: task.repeat,
                result: AccResult {
                    problem_id: record.id.clone(),
                    version: task.version,
                    score0: if outcome.correct { 1.0 } else { 0.0 },
                },
            },
            None,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    config: &RunConfig,
    run_dir: &Path,
    results_path: &Path,
    manifest: RunManifest,
    eval_lines: Vec<EvalLine>,
    acc_lines: Vec<AccLine>,
    traces: Vec<PipelineTrace>,
    resumed: usize,
) -> Result<RunOutput, CliError> {
    if !traces.is_empty() {
        write_jsonl(&run_dir.join("traces.jsonl"), &traces)?;
    }

    let models = match &config.mode {
        Mode::Direct { backend } => ModelIds::Direct { backend: backend.clone() },
        Mode::Mathflow { perception_ei, perception_rp, inference } => ModelIds::Mathflow {
            perception_ei: perception_ei.clone(),
            perception_rp: perception_rp.clone(),
            inference: inference.clone(),
        },
    };
    let metadata = ReportMetadata::new(manifest.generated_at_unix, &manifest.config_digest);

    let completed = if config.scoring.step_guided() { eval_lines.len() } else { acc_lines.len() };
    let report = if config.scoring.step_guided() {
        let results: Vec<CoTEvalResult> =
            eval_lines.iter().map(|line| line.result.clone()).collect();
        reporting::aggregate_run(&results, &manifest.run_id, models, metadata)
    } else {
        let results: Vec<AccResult> = acc_lines.iter().map(|line| line.result.clone()).collect();
        reporting::aggregate_acc(&results, &manifest.run_id, models, metadata)
    }
    .map_err(|e| CliError::Data(e.to_string()))?;

    for (format, name) in [
        (ReportFormat::Markdown, "report.md"),
        (ReportFormat::Csv, "report.csv"),
        (ReportFormat::Json, "report.json"),
    ] {
        let rendered = reporting::render_report(&report, format);
        std::fs::write(run_dir.join(name), rendered)
            .map_err(|e| CliError::Infra(format!("write {name}: {e}")))?;
    }

    Ok(RunOutput {
        run_dir: run_dir.to_path_buf(),
        results_path: results_path.to_path_buf(),
        report_markdown: run_dir.join("report.md"),
        completed,
        resumed,
    })
}
