//! Step-guided chain-of-thought scoring.
//!
//! A problem is solved N+1 times: once bare (run 0) and once for each prefix
//! of its authoritative solution steps. Each run is graded on its final
//! answer alone, and the per-run scores are folded into a weighted aggregate
//! that emphasizes the step-guided runs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::client::ModelResponse;
use crate::corpus::{numbered_steps, ProblemRecord};
use crate::grading::{grade_response, GradeOutcome};
use crate::pipeline::PipelineError;
use crate::versioning::{RenderedProblem, VersionTag};
use crate::corpus::QuestionType;

/// Default weight on the step-guided runs.
pub const DEFAULT_ALPHA: f64 = 0.8;

const FREE_FORM_INSTRUCTION: &str = "Please first conduct reasoning, and then answer the question and provide the final value, e.g., 1, 2.5, 300, at the end.";
const MULTIPLE_CHOICE_INSTRUCTION: &str = "Please first conduct reasoning, and then answer the question and provide the correct option letter, e.g., A, B, C, D, at the end.";

const STEP_GUIDED_HEADER: &str = "You will be provided with a visual mathematics problem along with a detailed solution procedure. Your task is to solve the problem by utilizing the provided solution steps as guidance.\nHere are examples:\n-- Question: XXX\n-- Solution: 1. XXX 2. XXX 3. XXX\n-- Final Solution: XXX\n\nHere is what you need to solve:";

/// The answer-generation prompt: the question-type instruction followed by
/// the question itself.
pub fn solve_prompt(question: &str, question_type: QuestionType) -> String {
    let instruction = match question_type {
        QuestionType::FreeForm => FREE_FORM_INSTRUCTION,
        QuestionType::MultipleChoice => MULTIPLE_CHOICE_INSTRUCTION,
    };
    format!("{instruction}\n-- Question: {question}")
}

/// Scoring configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CoTEvalConfig {
    pub alpha: f64,
}

impl CoTEvalConfig {
    pub fn new(alpha: f64) -> Result<CoTEvalConfig, CotError> {
        if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
            return Err(CotError::InvalidAlpha(alpha));
        }
        Ok(CoTEvalConfig { alpha })
    }
}

impl Default for CoTEvalConfig {
    fn default() -> Self {
        CoTEvalConfig { alpha: DEFAULT_ALPHA }
    }
}

/// One solver run: index 0 is the bare baseline, index i >= 1 saw steps 1..=i.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRun {
    pub step_index: usize,
    pub prompt: String,
    pub response: ModelResponse,
    pub score: f64,
}

/// Scores for one problem under one version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoTEvalResult {
    pub problem_id: String,
    pub version: VersionTag,
    pub n: usize,
    pub score0: f64,
    pub step_scores: Vec<f64>,
    pub final_score: f64,
}

/// A [`CoTEvalResult`] together with the per-run audit trail.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoTEvalRun {
    pub result: CoTEvalResult,
    pub step_runs: Vec<StepRun>,
}

#[derive(Debug)]
pub enum CotError {
    InvalidAlpha(f64),
    EmptyStepScores,
    NoSolutionSteps { problem_id: String },
    StepOutOfRange { index: usize, steps: usize },
    Solver { step_index: usize, source: PipelineError },
}

impl fmt::Display for CotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CotError::InvalidAlpha(alpha) => write!(f, "alpha {alpha} outside [0, 1]"),
            CotError::EmptyStepScores => f.write_str("step_scores is empty"),
            CotError::NoSolutionSteps { problem_id } => {
                write!(f, "record \"{problem_id}\" has no solution steps")
            }
            CotError::StepOutOfRange { index, steps } => {
                write!(f, "step index {index} out of range for {steps} steps")
            }
            CotError::Solver { step_index, source } => {
                write!(f, "solver failed on step run {step_index}: {source}")
            }
        }
    }
}

impl std::error::Error for CotError {}

/// Build the prompt for step run `i` over `rendered`.
///
/// Run 0 is the plain answer-generation prompt; run i >= 1 is the
/// step-guided template carrying steps 1..=i as a numbered solution line.
/// Byte-deterministic.
pub fn build_step_prompt(
    rendered: &RenderedProblem,
    steps: &[String],
    i: usize,
) -> Result<String, CotError> {
    if i > steps.len() {
        return Err(CotError::StepOutOfRange { index: i, steps: steps.len() });
    }
    if i == 0 {
        return Ok(solve_prompt(&rendered.prompt_text, rendered.question_type));
    }
    Ok(format!(
        "{STEP_GUIDED_HEADER}\n-- Question: {}\n-- Solution: {}\n-- Final Solution:",
        rendered.prompt_text,
        numbered_steps(&steps[..i]),
    ))
}

/// The weighted aggregate: `alpha * mean(step_scores) + (1 - alpha) * score0`.
pub fn aggregate(step_scores: &[f64], score0: f64, alpha: f64) -> Result<f64, CotError> {
    if step_scores.is_empty() {
        return Err(CotError::EmptyStepScores);
    }
    let mean = step_scores.iter().sum::<f64>() / step_scores.len() as f64;
    Ok(alpha * mean + (1.0 - alpha) * score0)
}

/// Something that can answer a rendered problem given a prefix of its
/// solution steps (step 0 = no guidance). Implementations report the exact
/// prompt their inference model answered, for audit.
pub trait Solver: Sync {
    fn solve_step(
        &self,
        rendered: &RenderedProblem,
        steps: &[String],
        step: usize,
    ) -> Result<SolvedStep, PipelineError>;
}

/// The prompt sent for inference and the response it produced.
#[derive(Clone, Debug)]
pub struct SolvedStep {
    pub prompt: String,
    pub response: ModelResponse,
}

/// Run the N+1 step runs for one problem, grade each on its final answer
/// (binary 0/1), and aggregate.
pub fn run_cot_eval(
    solver: &dyn Solver,
    record: &ProblemRecord,
    rendered: &RenderedProblem,
    cfg: &CoTEvalConfig,
) -> Result<CoTEvalRun, CotError> {
    let steps = &record.solution_steps;
    if steps.is_empty() {
        return Err(CotError::NoSolutionSteps { problem_id: record.id.clone() });
    }

    let mut step_runs = Vec::with_capacity(steps.len() + 1);
    for i in 0..=steps.len() {
        let solved = solver
            .solve_step(rendered, steps, i)
            .map_err(|source| CotError::Solver { step_index: i, source })?;
        let outcome: GradeOutcome =
            grade_response(&solved.response.text, &record.answer, record.question_type);
        step_runs.push(StepRun {
            step_index: i,
            prompt: solved.prompt,
            response: solved.response,
            score: if outcome.correct { 1.0 } else { 0.0 },
        });
    }

    let score0 = step_runs[0].score;
    let step_scores: Vec<f64> = step_runs[1..].iter().map(|r| r.score).collect();
    let final_score = aggregate(&step_scores, score0, cfg.alpha)?;
    Ok(CoTEvalRun {
        result: CoTEvalResult {
            problem_id: record.id.clone(),
            version: rendered.version,
            n: steps.len(),
            score0,
            step_scores,
            final_score,
        },
        step_runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rendered(question: &str, question_type: QuestionType) -> RenderedProblem {
        RenderedProblem {
            problem_id: "p1".to_string(),
            version: VersionTag::TextPlus,
            prompt_text: question.to_string(),
            image: None,
            question_type,
        }
    }

    #[test]
    fn free_form_prompt_opens_with_instruction() {
        let prompt = build_step_prompt(&rendered("q", QuestionType::FreeForm), &[], 0).unwrap();
        assert!(prompt.starts_with(
            "Please first conduct reasoning, and then answer the question and provide the final value, e.g., 1, 2.5, 300, at the end."
        ));
        assert!(prompt.ends_with("-- Question: q"));
    }

    #[test]
    fn choice_prompt_asks_for_option_letter() {
        let prompt =
            build_step_prompt(&rendered("q", QuestionType::MultipleChoice), &[], 0).unwrap();
        assert!(prompt.contains("provide the correct option letter, e.g., A, B, C, D, at the end."));
    }

    #[test]
    fn step_two_of_three_omits_the_third() {
        let steps: Vec<String> = ["s1", "s2", "s3"].iter().map(|s| s.to_string()).collect();
        let prompt =
            build_step_prompt(&rendered("q", QuestionType::FreeForm), &steps, 2).unwrap();
        assert!(prompt.contains("-- Solution: 1. s1 2. s2\n"));
        assert!(!prompt.contains("s3"));
        assert!(prompt.ends_with("-- Final Solution:"));
    }

    #[test]
    fn each_prompt_extends_the_previous_solution_section() {
        let steps: Vec<String> = ["s1", "s2", "s3"].iter().map(|s| s.to_string()).collect();
        let r = rendered("q", QuestionType::FreeForm);
        for i in 1..steps.len() {
            let prev = numbered_steps(&steps[..i]);
            let next = numbered_steps(&steps[..i + 1]);
            assert!(next.starts_with(&prev));
            let prompt = build_step_prompt(&r, &steps, i + 1).unwrap();
            assert!(prompt.contains(&next));
        }
    }

    #[test]
    fn step_index_out_of_range_errors() {
        let steps = vec!["s1".to_string()];
        let err = build_step_prompt(&rendered("q", QuestionType::FreeForm), &steps, 2).unwrap_err();
        assert!(matches!(err, CotError::StepOutOfRange { index: 2, steps: 1 }));
    }

    #[test]
    fn aggregate_hand_worked_example() {
        let value = aggregate(&[1.0, 1.0, 0.0], 1.0, 0.8).unwrap();
        assert!((value - (0.8 * (2.0 / 3.0) + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn aggregate_all_ones_is_one() {
        for alpha in [0.0, 0.3, 0.8, 1.0] {
            let value = aggregate(&[1.0, 1.0], 1.0, alpha).unwrap();
            assert!((value - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_alpha_zero_is_score0() {
        let value = aggregate(&[0.0, 1.0], 0.25, 0.0).unwrap();
        assert_eq!(value, 0.25);
    }

    #[test]
    fn aggregate_empty_errors() {
        assert!(matches!(aggregate(&[], 1.0, 0.8), Err(CotError::EmptyStepScores)));
    }

    #[test]
    fn config_rejects_out_of_range_alpha() {
        assert!(CoTEvalConfig::new(1.2).is_err());
        assert!(CoTEvalConfig::new(-0.1).is_err());
        assert!(CoTEvalConfig::new(0.8).is_ok());
    }

    proptest! {
        #[test]
        fn aggregate_monotone_and_bounded(
            scores in prop::collection::vec(0.0f64..=1.0, 1..8),
            score0 in 0.0f64..=1.0,
            alpha in 0.0f64..=1.0,
            bump_index in 0usize..8,
        ) {
            let base = aggregate(&scores, score0, alpha).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&base));

            // Raising any one step score never lowers the aggregate.
            let mut bumped = scores.clone();
            let idx = bump_index % bumped.len();
            bumped[idx] = 1.0;
            let raised = aggregate(&bumped, score0, alpha).unwrap();
            prop_assert!(raised >= base - 1e-12);

            // Raising score0 never lowers it either.
            let raised0 = aggregate(&scores, 1.0, alpha).unwrap();
            prop_assert!(raised0 >= base - 1e-12);
        }

        #[test]
        fn aggregate_affine_in_alpha(
            scores in prop::collection::vec(0.0f64..=1.0, 1..8),
            score0 in 0.0f64..=1.0,
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let slope = mean - score0;
            let at_a = aggregate(&scores, score0, a).unwrap();
            let at_b = aggregate(&scores, score0, b).unwrap();
            prop_assert!(((at_a - at_b) - slope * (a - b)).abs() < 1e-9);
        }
    }
}
