//! Two-stage problem-solving orchestration: a perception model reads the
//! diagram (essential information first, then reasoned properties), the
//! findings are fused into an enriched textual problem, and an inference
//! model answers it. The inference model never needs to see the image, so a
//! text-only model can solve visual problems.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{
    Backend, BackendRegistry, ChatRequest, ClientError, GenerationConfig, ModelResponse,
};
use crate::corpus::{ExpectedAnswer, ImageRef};
use crate::cot_eval::{build_step_prompt, solve_prompt, SolvedStep, Solver};
use crate::grading::{grade_response, GradeOutcome};
use crate::versioning::{RenderedProblem, VersionTag};

pub const DEFAULT_EI_INSTRUCTION: &str =
    "List every essential numeric value and geometric relation visible in the diagram.";
pub const DEFAULT_RP_INSTRUCTION: &str =
    "State properties that can be inferred from the diagram and the given information.";

/// Section labels used when fusing perception output into the problem text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionLabels {
    pub ei_label: String,
    pub rp_label: String,
}

impl Default for FusionLabels {
    fn default() -> Self {
        FusionLabels {
            ei_label: "Essential Information:".to_string(),
            rp_label: "Reasoned Property:".to_string(),
        }
    }
}

/// Pipeline wiring: which backend plays which role, plus the perception
/// instructions (explicit and overridable so runs are reproducible).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub perception_ei_backend: String,
    pub perception_rp_backend: String,
    pub inference_backend: String,
    pub generation: GenerationConfig,
    #[serde(default)]
    pub fusion_labels: FusionLabels,
    #[serde(default = "default_ei_instruction")]
    pub ei_instruction: String,
    #[serde(default = "default_rp_instruction")]
    pub rp_instruction: String,
    /// Also hand the diagram to the inference model. Off by default: the
    /// enriched text is the pipeline's whole point.
    #[serde(default)]
    pub attach_image_to_inference: bool,
}

fn default_ei_instruction() -> String {
    DEFAULT_EI_INSTRUCTION.to_string()
}

fn default_rp_instruction() -> String {
    DEFAULT_RP_INSTRUCTION.to_string()
}

impl PipelineConfig {
    pub fn new(ei: &str, rp: &str, inference: &str) -> PipelineConfig {
        PipelineConfig {
            perception_ei_backend: ei.to_string(),
            perception_rp_backend: rp.to_string(),
            inference_backend: inference.to_string(),
            generation: GenerationConfig::default(),
            fusion_labels: FusionLabels::default(),
            ei_instruction: default_ei_instruction(),
            rp_instruction: default_rp_instruction(),
            attach_image_to_inference: false,
        }
    }

    /// Check that every backend id resolves and that the perception backends
    /// accept images; the inference backend may be text-only.
    pub fn validate(&self, registry: &BackendRegistry) -> Result<(), PipelineError> {
        for (id, needs_images) in [
            (&self.perception_ei_backend, true),
            (&self.perception_rp_backend, true),
            (&self.inference_backend, false),
        ] {
            let backend = registry
                .get(id)
                .map_err(|_| PipelineError::UnknownBackend { id: id.clone() })?;
            if needs_images && !backend.supports_images() {
                return Err(PipelineError::PerceptionNeedsImages { backend: id.clone() });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PerceptionEi,
    PerceptionRp,
    Inference,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::PerceptionEi => f.write_str("perception_ei"),
            Stage::PerceptionRp => f.write_str("perception_rp"),
            Stage::Inference => f.write_str("inference"),
        }
    }
}

#[derive(Debug)]
pub enum PipelineError {
    Stage { stage: Stage, source: ClientError },
    UnknownBackend { id: String },
    PerceptionNeedsImages { backend: String },
    Prompt(String),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Stage { stage, source } => write!(f, "stage {stage} failed: {source}"),
            PipelineError::UnknownBackend { id } => write!(f, "backend \"{id}\" not in registry"),
            PipelineError::PerceptionNeedsImages { backend } => {
                write!(f, "perception backend \"{backend}\" does not accept images")
            }
            PipelineError::Prompt(detail) => write!(f, "prompt construction failed: {detail}"),
        }
    }
}

impl std::error::Error for PipelineError {}

/// Everything one pipeline run produced, retained for audit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub problem_id: String,
    pub version: VersionTag,
    pub ei_text: String,
    pub rp_text: String,
    pub enriched_prompt: String,
    pub inference_response: ModelResponse,
    pub grade: GradeOutcome,
}

fn check_image_resolvable(stage: Stage, image: &ImageRef) -> Result<(), PipelineError> {
    if !image.is_remote() && !Path::new(image.as_str()).is_file() {
        return Err(PipelineError::Stage {
            stage,
            source: ClientError::UnresolvableImage { reference: image.0.clone() },
        });
    }
    Ok(())
}

/// One chat call asking for the essential information visible in the
/// diagram. The reply is returned verbatim apart from trimming.
pub fn extract_ei(
    backend: &Backend,
    image: &ImageRef,
    prompt_text: &str,
    instruction: &str,
    generation: GenerationConfig,
) -> Result<String, PipelineError> {
    check_image_resolvable(Stage::PerceptionEi, image)?;
    let text = format!("{instruction}\n-- Question: {prompt_text}");
    let request = ChatRequest::user_text_with_image(backend.id(), &text, image, generation);
    let response = backend
        .complete(&request)
        .map_err(|source| PipelineError::Stage { stage: Stage::PerceptionEi, source })?;
    Ok(response.text.trim().to_string())
}

/// One chat call asking for reasoned properties, with the already-extracted
/// essential information passed along as context.
pub fn extract_rp(
    backend: &Backend,
    image: &ImageRef,
    prompt_text: &str,
    ei_text: &str,
    instruction: &str,
    ei_label: &str,
    generation: GenerationConfig,
) -> Result<String, PipelineError> {
    check_image_resolvable(Stage::PerceptionRp, image)?;
    let mut text = format!("{instruction}\n-- Question: {prompt_text}");
    if !ei_text.is_empty() {
        text.push_str(&format!("\n{ei_label} {ei_text}"));
    }
    let request = ChatRequest::user_text_with_image(backend.id(), &text, image, generation);
    let response = backend
        .complete(&request)
        .map_err(|source| PipelineError::Stage { stage: Stage::PerceptionRp, source })?;
    Ok(response.text.trim().to_string())
}

/// Deterministic fusion: the rendered problem text, then a labeled line per
/// non-empty perception finding. The question text is preserved verbatim.
pub fn fuse(prompt_text: &str, ei_text: &str, rp_text: &str, labels: &FusionLabels) -> String {
    let mut out = prompt_text.to_string();
    if !ei_text.is_empty() {
        out.push_str(&format!("\n{} {}", labels.ei_label, ei_text));
    }
    if !rp_text.is_empty() {
        out.push_str(&format!("\n{} {}", labels.rp_label, rp_text));
    }
    out
}

/// Run perception over a rendered problem's image. Image-free versions skip
/// perception entirely and fuse nothing.
fn perceive(
    config: &PipelineConfig,
    registry: &BackendRegistry,
    rendered: &RenderedProblem,
) -> Result<(String, String), PipelineError> {
    let image = match &rendered.image {
        Some(image) => image,
        None => return Ok((String::new(), String::new())),
    };
    let ei_backend = registry
        .get(&config.perception_ei_backend)
        .map_err(|_| PipelineError::UnknownBackend { id: config.perception_ei_backend.clone() })?;
    let rp_backend = registry
        .get(&config.perception_rp_backend)
        .map_err(|_| PipelineError::UnknownBackend { id: config.perception_rp_backend.clone() })?;

    let ei_text = extract_ei(
        ei_backend,
        image,
        &rendered.prompt_text,
        &config.ei_instruction,
        config.generation,
    )?;
    let rp_text = extract_rp(
        rp_backend,
        image,
        &rendered.prompt_text,
        &ei_text,
        &config.rp_instruction,
        &config.fusion_labels.ei_label,
        config.generation,
    )?;
    Ok((ei_text, rp_text))
}

fn inference_call(
    config: &PipelineConfig,
    registry: &BackendRegistry,
    rendered: &RenderedProblem,
    prompt: &str,
) -> Result<ModelResponse, PipelineError> {
    let backend = registry
        .get(&config.inference_backend)
        .map_err(|_| PipelineError::UnknownBackend { id: config.inference_backend.clone() })?;
    let request = match (&rendered.image, config.attach_image_to_inference) {
        (Some(image), true) => {
            ChatRequest::user_text_with_image(backend.id(), prompt, image, config.generation)
        }
        _ => ChatRequest::user_text(backend.id(), prompt, config.generation),
    };
    backend
        .complete(&request)
        .map_err(|source| PipelineError::Stage { stage: Stage::Inference, source })
}

/// Full pipeline over one rendered problem: perception, fusion, one
/// inference call on the answer-generation template, and grading.
pub fn run_mathflow(
    config: &PipelineConfig,
    registry: &BackendRegistry,
    rendered: &RenderedProblem,
    expected: &ExpectedAnswer,
) -> Result<PipelineTrace, PipelineError> {
    let (ei_text, rp_text) = perceive(config, registry, rendered)?;
    let enriched_prompt = fuse(&rendered.prompt_text, &ei_text, &rp_text, &config.fusion_labels);
    let prompt = solve_prompt(&enriched_prompt, rendered.question_type);
    let inference_response = inference_call(config, registry, rendered, &prompt)?;
    let grade = grade_response(&inference_response.text, expected, rendered.question_type);
    Ok(PipelineTrace {
        problem_id: rendered.problem_id.clone(),
        version: rendered.version,
        ei_text,
        rp_text,
        enriched_prompt,
        inference_response,
        grade,
    })
}

/// Single-backend solver: one call per step run, with the rendered problem's
/// image attached when present.
pub struct DirectSolver<'a> {
    pub backend: &'a Backend,
    pub generation: GenerationConfig,
}

impl Solver for DirectSolver<'_> {
    fn solve_step(
        &self,
        rendered: &RenderedProblem,
        steps: &[String],
        step: usize,
    ) -> Result<SolvedStep, PipelineError> {
        let prompt = build_step_prompt(rendered, steps, step)
            .map_err(|e| PipelineError::Prompt(e.to_string()))?;
        let request = match &rendered.image {
            Some(image) => ChatRequest::user_text_with_image(
                self.backend.id(),
                &prompt,
                image,
                self.generation,
            ),
            None => ChatRequest::user_text(self.backend.id(), &prompt, self.generation),
        };
        let response = self
            .backend
            .complete(&request)
            .map_err(|source| PipelineError::Stage { stage: Stage::Inference, source })?;
        Ok(SolvedStep { prompt, response })
    }
}

/// Pipeline solver: each step run perceives the diagram afresh, fuses the
/// findings into the problem text, and sends the step-guided prompt built
/// over that enriched text to the inference backend. Three model calls per
/// step run with an image, one without.
pub struct MathFlowSolver<'a> {
    pub config: &'a PipelineConfig,
    pub registry: &'a BackendRegistry,
}

impl Solver for MathFlowSolver<'_> {
    fn solve_step(
        &self,
        rendered: &RenderedProblem,
        steps: &[String],
        step: usize,
    ) -> Result<SolvedStep, PipelineError> {
        let (ei_text, rp_text) = perceive(self.config, self.registry, rendered)?;
        let enriched = RenderedProblem {
            prompt_text: fuse(
                &rendered.prompt_text,
                &ei_text,
                &rp_text,
                &self.config.fusion_labels,
            ),
            ..rendered.clone()
        };
        let prompt = build_step_prompt(&enriched, steps, step)
            .map_err(|e| PipelineError::Prompt(e.to_string()))?;
        let response = inference_call(self.config, self.registry, rendered, &prompt)?;
        Ok(SolvedStep { prompt, response })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ScriptedBackend, ScriptedRule};
    use crate::corpus::QuestionType;

    fn scripted(id: &str, rules: Vec<(&[&str], &str)>) -> Backend {
        let mut list: Vec<ScriptedRule> = rules
            .into_iter()
            .map(|(needles, reply)| ScriptedRule {
                contains_all: needles.iter().map(|s| s.to_string()).collect(),
                reply: reply.to_string(),
            })
            .collect();
        list.push(ScriptedRule { contains_all: vec![], reply: String::new() });
        Backend::Scripted(ScriptedBackend::new(id, true, list).unwrap())
    }

    fn test_registry(image_dir: &Path) -> (BackendRegistry, ImageRef) {
        let image_path = image_dir.join("diagram.png");
        std::fs::write(&image_path, b"fake-png").unwrap();
        let mut registry = BackendRegistry::new();
        registry.insert(scripted("ei", vec![(&[], "AB=5, AD\u{22a5}BC")]));
        registry.insert(scripted(
            "rp",
            vec![(&[], "triangles ABD and ACD are congruent")],
        ));
        registry.insert(scripted(
            "inference",
            vec![(&["Essential Information:"], "The answer is B."), (&[], "The answer is C.")],
        ));
        (registry, ImageRef(image_path.to_string_lossy().into_owned()))
    }

    fn rendered(image: Option<ImageRef>) -> RenderedProblem {
        RenderedProblem {
            problem_id: "p1".to_string(),
            version: VersionTag::VisionPrimary,
            prompt_text: "Find the length of BC.".to_string(),
            image,
            question_type: QuestionType::MultipleChoice,
        }
    }

    #[test]
    fn fuse_appends_labeled_sections() {
        let labels = FusionLabels::default();
        assert_eq!(
            fuse("q", "e", "r", &labels),
            "q\nEssential Information: e\nReasoned Property: r"
        );
        assert_eq!(fuse("q", "", "", &labels), "q");
        assert_eq!(fuse("q", "e", "", &labels), "q\nEssential Information: e");
    }

    #[test]
    fn extract_ei_passes_reply_through() {
        let dir = tempfile::tempdir().unwrap();
        let (registry, image) = test_registry(dir.path());
        let backend = registry.get("ei").unwrap();
        let ei = extract_ei(
            backend,
            &image,
            "Find BC.",
            DEFAULT_EI_INSTRUCTION,
            GenerationConfig::default(),
        )
        .unwrap();
        assert_eq!(ei, "AB=5, AD\u{22a5}BC");
    }

    #[test]
    fn extract_rp_includes_ei_verbatim_in_outgoing_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let (registry, image) = test_registry(dir.path());
        let backend = registry.get("rp").unwrap();
        extract_rp(
            backend,
            &image,
            "Find BC.",
            "AB=5",
            DEFAULT_RP_INSTRUCTION,
            "Essential Information:",
            GenerationConfig::default(),
        )
        .unwrap();
        let transcript = backend.as_scripted().unwrap().transcript();
        assert!(transcript[0].prompt.contains("Essential Information: AB=5"));
        assert!(transcript[0].has_image);
    }

    #[test]
    fn unresolvable_image_fails_before_any_call() {
        let dir = tempfile::tempdir().unwrap();
        let (registry, _) = test_registry(dir.path());
        let backend = registry.get("ei").unwrap();
        let missing = ImageRef(dir.path().join("gone.png").to_string_lossy().into_owned());
        let err = extract_ei(
            backend,
            &missing,
            "q",
            DEFAULT_EI_INSTRUCTION,
            GenerationConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Stage { stage: Stage::PerceptionEi, source: ClientError::UnresolvableImage { .. } }
        ));
        assert_eq!(backend.as_scripted().unwrap().call_count(), 0);
    }

    #[test]
    fn run_mathflow_composes_all_stages() {
        let dir = tempfile::tempdir().unwrap();
        let (registry, image) = test_registry(dir.path());
        let config = PipelineConfig::new("ei", "rp", "inference");
        let trace = run_mathflow(
            &config,
            &registry,
            &rendered(Some(image)),
            &ExpectedAnswer::Choice { choice: 'B' },
        )
        .unwrap();
        assert_eq!(trace.ei_text, "AB=5, AD\u{22a5}BC");
        assert_eq!(trace.rp_text, "triangles ABD and ACD are congruent");
        assert!(trace.enriched_prompt.contains("Find the length of BC."));
        assert!(trace.enriched_prompt.contains("Essential Information: AB=5"));
        assert!(trace.grade.correct);
        for id in ["ei", "rp", "inference"] {
            assert_eq!(registry.get(id).unwrap().as_scripted().unwrap().call_count(), 1);
        }
    }

    #[test]
    fn image_free_problem_skips_perception() {
        let dir = tempfile::tempdir().unwrap();
        let (registry, _) = test_registry(dir.path());
        let config = PipelineConfig::new("ei", "rp", "inference");
        let mut problem = rendered(None);
        problem.version = VersionTag::TextPlus;
        let trace = run_mathflow(
            &config,
            &registry,
            &problem,
            &ExpectedAnswer::Choice { choice: 'C' },
        )
        .unwrap();
        assert_eq!(trace.ei_text, "");
        assert_eq!(trace.rp_text, "");
        assert_eq!(trace.enriched_prompt, "Find the length of BC.");
        assert!(trace.grade.correct, "default inference reply grades as C");
        assert_eq!(registry.get("ei").unwrap().as_scripted().unwrap().call_count(), 0);
        assert_eq!(registry.get("rp").unwrap().as_scripted().unwrap().call_count(), 0);
        assert_eq!(registry.get("inference").unwrap().as_scripted().unwrap().call_count(), 1);
    }

    #[test]
    fn text_only_inference_backend_solves_visual_problem() {
        let dir = tempfile::tempdir().unwrap();
        let (mut registry, image) = test_registry(dir.path());
        // Replace the inference backend with one that rejects images.
        registry.insert(Backend::Scripted(
            ScriptedBackend::new(
                "inference",
                false,
                vec![ScriptedRule { contains_all: vec![], reply: "The answer is B.".to_string() }],
            )
            .unwrap(),
        ));
        let config = PipelineConfig::new("ei", "rp", "inference");
        let trace = run_mathflow(
            &config,
            &registry,
            &rendered(Some(image)),
            &ExpectedAnswer::Choice { choice: 'B' },
        )
        .unwrap();
        assert!(trace.grade.correct);
    }

    #[test]
    fn swapping_inference_backend_leaves_perception_requests_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let (registry, image) = test_registry(dir.path());
        let config = PipelineConfig::new("ei", "rp", "inference");
        run_mathflow(
            &config,
            &registry,
            &rendered(Some(image.clone())),
            &ExpectedAnswer::Choice { choice: 'B' },
        )
        .unwrap();
        let first: Vec<String> = registry
            .get("ei")
            .unwrap()
            .as_scripted()
            .unwrap()
            .transcript()
            .iter()
            .map(|t| t.prompt.clone())
            .collect();

        let (registry2, image2) = test_registry(dir.path());
        registry2.get("inference").unwrap();
        let mut swapped = PipelineConfig::new("ei", "rp", "rp");
        swapped.attach_image_to_inference = false;
        let _ = run_mathflow(
            &swapped,
            &registry2,
            &rendered(Some(image2)),
            &ExpectedAnswer::Choice { choice: 'B' },
        );
        let second: Vec<String> = registry2
            .get("ei")
            .unwrap()
            .as_scripted()
            .unwrap()
            .transcript()
            .iter()
            .map(|t| t.prompt.clone())
            .collect();
        assert_eq!(first, second);
        let _ = image;
    }

    #[test]
    fn config_validation_requires_image_capable_perception() {
        let dir = tempfile::tempdir().unwrap();
        let (mut registry, _) = test_registry(dir.path());
        registry.insert(Backend::Scripted(
            ScriptedBackend::new(
                "text-only",
                false,
                vec![ScriptedRule { contains_all: vec![], reply: String::new() }],
            )
            .unwrap(),
        ));
        let bad = PipelineConfig::new("text-only", "rp", "inference");
        assert!(matches!(
            bad.validate(&registry),
            Err(PipelineError::PerceptionNeedsImages { .. })
        ));
        let missing = PipelineConfig::new("nope", "rp", "inference");
        assert!(matches!(missing.validate(&registry), Err(PipelineError::UnknownBackend { .. })));
        let good = PipelineConfig::new("ei", "rp", "text-only");
        assert!(good.validate(&registry).is_ok(), "text-only inference is fine");
    }
}
