use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mathflow::corpus::QuestionType;
use mathflow::reporting::ReportFormat;
use mathflow::versioning::VersionTag;
use mathflow_cli::commands::{self, StatsFormat};
use mathflow_cli::runner::{Mode, RunConfig, Scoring};
use mathflow_cli::CliError;

#[derive(Parser)]
#[command(
    name = "mathflow",
    version,
    about = "Visual-math benchmark harness: compose problem versions, run model evaluations, grade and report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Check every record against the schema invariants and asset rules.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        /// Versions whose diagram assets must be present (default: all six).
        #[arg(long, value_delimiter = ',')]
        versions: Vec<String>,
        /// Emit the violation listing as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Compose records into problem versions and write them as JSONL.
    Render {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',')]
        versions: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics for one version.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "text_centric")]
        version: String,
        #[arg(long, default_value = "markdown")]
        format: String,
    },
    /// Build next-step prediction pairs from solution steps.
    Datagen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grade a response snippet against an expected answer.
    Grade {
        #[arg(long)]
        text: String,
        #[arg(long)]
        expected: String,
        #[arg(long = "question-type", default_value = "free_form")]
        question_type: String,
    },
    /// Evaluate a corpus against configured backends.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, value_delimiter = ',')]
        versions: Vec<String>,
        /// "direct" (one backend) or "mathflow" (perception + inference).
        #[arg(long, default_value = "direct")]
        mode: String,
        /// Backend id for direct mode.
        #[arg(long)]
        backend: Option<String>,
        /// Perception backend for essential information (mathflow mode).
        #[arg(long)]
        ei_backend: Option<String>,
        /// Perception backend for reasoned properties (mathflow mode).
        #[arg(long)]
        rp_backend: Option<String>,
        /// Inference backend (mathflow mode); may be text-only.
        #[arg(long)]
        inference_backend: Option<String>,
        #[arg(long, default_value = "both")]
        scoring: String,
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, default_value_t = 1)]
        repeat: u32,
        /// Embed per-step prompts and responses in the results file.
        #[arg(long)]
        audit: bool,
        /// Also send the diagram to the inference backend.
        #[arg(long)]
        attach_image_to_inference: bool,
    },
    /// Render the report for an existing run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
        /// JSONL file of externally annotated error labels.
        #[arg(long)]
        error_labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Validate { corpus, versions, json } => {
            let versions = commands::parse_versions(&versions)?;
            commands::cmd_validate(&corpus, &versions, json)
        }
        Command::Render { corpus, versions, out } => {
            let versions = commands::parse_versions(&versions)?;
            commands::cmd_render(&corpus, &versions, &out)
        }
        Command::Stats { corpus, version, format } => {
            let version = VersionTag::parse(&version)
                .ok_or_else(|| CliError::Data(format!("unknown version \"{version}\"")))?;
            let format = StatsFormat::parse(&format)
                .ok_or_else(|| CliError::Data(format!("unknown stats format \"{format}\"")))?;
            commands::cmd_stats(&corpus, version, format)
        }
        Command::Datagen { corpus, out } => commands::cmd_datagen(&corpus, &out),
        Command::Grade { text, expected, question_type } => {
            let question_type = match question_type.as_str() {
                "multiple_choice" | "mc" => QuestionType::MultipleChoice,
                "free_form" | "ff" => QuestionType::FreeForm,
                other => {
                    return Err(CliError::Data(format!("unknown question type \"{other}\"")))
                }
            };
            commands::cmd_grade(&text, &expected, question_type)
        }
        Command::Eval {
            corpus,
            registry,
            versions,
            mode,
            backend,
            ei_backend,
            rp_backend,
            inference_backend,
            scoring,
            alpha,
            concurrency,
            cache_dir,
            out_dir,
            run_id,
            repeat,
            audit,
            attach_image_to_inference,
        } => {
            let versions = commands::parse_versions(&versions)?;
            let mode = match mode.as_str() {
                "direct" => Mode::Direct {
                    backend: backend.ok_or_else(|| {
                        CliError::Data("--backend is required in direct mode".to_string())
                    })?,
                },
                "mathflow" => Mode::Mathflow {
                    perception_ei: ei_backend.ok_or_else(|| {
                        CliError::Data("--ei-backend is required in mathflow mode".to_string())
                    })?,
                    perception_rp: rp_backend.ok_or_else(|| {
                        CliError::Data("--rp-backend is required in mathflow mode".to_string())
                    })?,
                    inference: inference_backend.ok_or_else(|| {
                        CliError::Data(
                            "--inference-backend is required in mathflow mode".to_string(),
                        )
                    })?,
                },
                other => return Err(CliError::Data(format!("unknown mode \"{other}\""))),
            };
            let scoring = Scoring::parse(&scoring)
                .ok_or_else(|| CliError::Data(format!("unknown scoring \"{scoring}\"")))?;
            let config = RunConfig {
                corpus,
                registry,
                versions,
                mode,
                scoring,
                alpha,
                concurrency,
                cache_dir,
                out_dir,
                run_id,
                repeat,
                audit,
                attach_image_to_inference,
            };
            commands::cmd_eval(&config)
        }
        Command::Report { run_dir, format, error_labels, out } => {
            let format = ReportFormat::parse(&format)
                .ok_or_else(|| CliError::Data(format!("unknown report format \"{format}\"")))?;
            commands::cmd_report(&run_dir, format, error_labels.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(output) => {
            if !output.is_empty() {
                // Tolerate a closed pipe (e.g. `mathflow stats ... | head`).
                use std::io::Write;
                let mut stdout = std::io::stdout().lock();
                let _ = writeln!(stdout, "{output}");
            }
            ExitCode::SUCCESS
        }
        Err(error) => {
            eprintln!("{error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
