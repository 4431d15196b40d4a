//! Composition of a problem record into the six benchmark versions.
//!
//! Each version includes a fixed subset of the four textual components and a
//! fixed diagram asset; what one version removes relative to another is what
//! makes the family a controlled experiment on information placement.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{DiagramAssets, ImageRef, ProblemRecord, QuestionType};

/// The six problem versions, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionTag {
    TextCentric,
    TextLimited,
    TextPlus,
    VisionDense,
    VisionCentric,
    VisionPrimary,
}

impl VersionTag {
    pub const ALL: [VersionTag; 6] = [
        VersionTag::TextCentric,
        VersionTag::TextLimited,
        VersionTag::TextPlus,
        VersionTag::VisionDense,
        VersionTag::VisionCentric,
        VersionTag::VisionPrimary,
    ];

    /// Snake-case tag used in files and on the command line.
    pub fn tag(&self) -> &'static str {
        match self {
            VersionTag::TextCentric => "text_centric",
            VersionTag::TextLimited => "text_limited",
            VersionTag::TextPlus => "text_plus",
            VersionTag::VisionDense => "vision_dense",
            VersionTag::VisionCentric => "vision_centric",
            VersionTag::VisionPrimary => "vision_primary",
        }
    }

    /// Human-readable name used in report tables.
    pub fn label(&self) -> &'static str {
        match self {
            VersionTag::TextCentric => "Text Centric",
            VersionTag::TextLimited => "Text Limited",
            VersionTag::TextPlus => "Text Plus",
            VersionTag::VisionDense => "Vision Dense",
            VersionTag::VisionCentric => "Vision Centric",
            VersionTag::VisionPrimary => "Vision Primary",
        }
    }

    pub fn parse(s: &str) -> Option<VersionTag> {
        VersionTag::ALL.iter().copied().find(|v| v.tag() == s)
    }
}

impl fmt::Display for VersionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which diagram asset a version puts in front of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetRequirement {
    BaseDiagram,
    DiagramEi,
    DiagramEiRp,
}

impl AssetRequirement {
    pub fn field_name(&self) -> &'static str {
        match self {
            AssetRequirement::BaseDiagram => "base_diagram",
            AssetRequirement::DiagramEi => "diagram_ei",
            AssetRequirement::DiagramEiRp => "diagram_ei_rp",
        }
    }
}

/// The diagram asset required by `tag`, or `None` for the image-free version.
pub fn required_assets(tag: VersionTag) -> Option<AssetRequirement> {
    match tag {
        VersionTag::TextCentric | VersionTag::TextLimited | VersionTag::VisionDense => {
            Some(AssetRequirement::BaseDiagram)
        }
        VersionTag::TextPlus => None,
        VersionTag::VisionCentric => Some(AssetRequirement::DiagramEi),
        VersionTag::VisionPrimary => Some(AssetRequirement::DiagramEiRp),
    }
}

/// Look up the asset satisfying `requirement` on a record's assets.
pub fn asset_for(assets: &DiagramAssets, requirement: AssetRequirement) -> Option<&ImageRef> {
    match requirement {
        AssetRequirement::BaseDiagram => assets.base_diagram.as_ref(),
        AssetRequirement::DiagramEi => assets.diagram_ei.as_ref(),
        AssetRequirement::DiagramEiRp => assets.diagram_ei_rp.as_ref(),
    }
}

/// Which textual components a version keeps, as (di, rp, ei) flags; OQ is
/// always present.
fn included_components(tag: VersionTag) -> (bool, bool, bool) {
    match tag {
        VersionTag::TextCentric | VersionTag::TextPlus => (true, true, true),
        VersionTag::TextLimited => (false, true, true),
        VersionTag::VisionDense => (false, false, true),
        VersionTag::VisionCentric => (false, true, false),
        VersionTag::VisionPrimary => (false, false, false),
    }
}

/// The prompt text of `record` composed for `tag`: the included components
/// joined with newlines in DI, RP, EI, OQ order, empty ones skipped.
pub fn prompt_text_for(record: &ProblemRecord, tag: VersionTag) -> String {
    let (di, rp, ei) = included_components(tag);
    record.components.joined(di, rp, ei)
}

/// A problem composed into one version: prompt text plus the version's
/// diagram asset, if any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedProblem {
    pub problem_id: String,
    pub version: VersionTag,
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub question_type: QuestionType,
}

/// Composition failure: the record lacks the asset the version needs.
#[derive(Debug, PartialEq, Eq)]
pub struct ComposeError {
    pub version: VersionTag,
    pub asset: AssetRequirement,
}

impl fmt::Display for ComposeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "version {} requires asset {} but the record does not provide it",
            self.version,
            self.asset.field_name()
        )
    }
}

impl std::error::Error for ComposeError {}

/// Compose `record` into the version named by `tag`. Pure: identical inputs
/// yield byte-identical output.
pub fn compose_version(
    record: &ProblemRecord,
    tag: VersionTag,
) -> Result<RenderedProblem, ComposeError> {
    let image = match required_assets(tag) {
        None => None,
        Some(requirement) => match asset_for(&record.assets, requirement) {
            Some(image) => Some(image.clone()),
            None => {
                return Err(ComposeError {
                    version: tag,
                    asset: requirement,
                })
            }
        },
    };
    Ok(RenderedProblem {
        problem_id: record.id.clone(),
        version: tag,
        prompt_text: prompt_text_for(record, tag),
        image,
        question_type: record.question_type,
    })
}

/// Compose all six versions, in canonical order. The first missing asset
/// aborts with its version named.
pub fn compose_all(
    record: &ProblemRecord,
) -> Result<BTreeMap<VersionTag, RenderedProblem>, ComposeError> {
    let mut out = BTreeMap::new();
    for tag in VersionTag::ALL {
        out.insert(tag, compose_version(record, tag)?);
    }
    Ok(out)
}
