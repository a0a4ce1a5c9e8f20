//! Review items and their lifecycle.

use std::fmt;
use std::str::FromStr;

use expert_cfg::annotation::{ExpertAnnotation, HighlightSpan};
use expert_cfg::dataset::VisualRef;
use expert_cfg::guidance::StepSummary;
use expert_cfg::retrieval::MatchedFeature;
use expert_cfg::{EntropyReport, GatePolicy, GuidanceConfig};
use serde::{Deserialize, Serialize};

/// Lifecycle: `pending → annotated → regenerated → delivered`, or
/// `pending → delivered`. Items that bypass review are created delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Annotated,
    Regenerated,
    Delivered,
}

impl Status {
    pub fn can_move_to(self, next: Status) -> bool {
        use Status::*;
        matches!(
            (self, next),
            (Pending, Annotated) | (Annotated, Regenerated) | (Regenerated, Delivered) | (Pending, Delivered)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::Annotated => "annotated",
            Status::Regenerated => "regenerated",
            Status::Delivered => "delivered",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(Status::Pending),
            "annotated" => Ok(Status::Annotated),
            "regenerated" => Ok(Status::Regenerated),
            "delivered" => Ok(Status::Delivered),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub prob: f64,
}

/// A decoded answer with one probability per emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub text: String,
    pub tokens: Vec<TokenProb>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    pub caption: String,
    pub keywords: Vec<String>,
    pub similarity: f64,
    pub matched_feature: MatchedFeature,
    /// Automatic highlight suggestions over `caption`.
    pub suggested_spans: Vec<HighlightSpan>,
}

/// Token-level footprint of an annotation over the regeneration prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPreview {
    pub tokens: Vec<String>,
    pub bits: Vec<u8>,
}

pub const FLAG_NO_GUIDANCE: &str = "no_guidance_signal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotation: ExpertAnnotation,
    pub mask: MaskPreview,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regeneration {
    pub answer: AnswerRecord,
    pub cfg: GuidanceConfig<f64>,
    pub max_len: usize,
    pub steps: Vec<StepSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Initial,
    Regenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub answer: String,
    pub source: AnswerSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_ref: Option<VisualRef>,
    pub model_id: String,
    pub initial: AnswerRecord,
    pub entropy: EntropyReport<f64>,
    pub policy: GatePolicy,
    pub status: Status,
    pub references: Vec<Reference>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regeneration: Option<Regeneration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered: Option<Delivery>,
}

/// Queue row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub id: String,
    pub question: String,
    pub entropy: f64,
    pub status: Status,
}

impl From<&ReviewItem> for ItemSummary {
    fn from(item: &ReviewItem) -> Self {
        Self {
            id: item.id.clone(),
            question: item.question.clone(),
            entropy: item.entropy.normalized_pe,
            status: item.status,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Status::*;

    #[test]
    fn only_forward_moves() {
        let all = [Pending, Annotated, Regenerated, Delivered];
        let allowed: Vec<(Status, Status)> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a.can_move_to(*b))
            .collect();
        assert_eq!(
            allowed,
            [(Pending, Annotated), (Pending, Delivered), (Annotated, Regenerated), (Regenerated, Delivered)]
        );
        for (a, b) in allowed {
            assert!(a < b);
        }
    }

    #[test]
    fn status_strings_round_trip() {
        for s in [Pending, Annotated, Regenerated, Delivered] {
            assert_eq!(s.as_str().parse::<Status>().unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), s.as_str());
        }
        assert!("done".parse::<Status>().is_err());
    }
}
