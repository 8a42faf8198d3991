//! The structured action language spoken between the engine and the chat
//! model: prompt assembly, the JSON action schema, strict parsing, and
//! format-error classification that feeds recovery.
//!
//! The wire contract is one JSON action object on the final lines of the
//! model's reply; free-text reasoning may precede it and is stored in the
//! trace verbatim but never interpreted.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::EditOp;

/// Version string of the action schema, embedded in every system prompt so
/// traces are replayable against the exact contract they used.
pub const SCHEMA_VERSION: &str = "vasa-tools/v1";

/// High-level construction plan chosen by the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DirectRetrieval,
    UndersegmentAndAdd,
    OversegmentAndRemove,
    CoarseToFineRefinement,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::DirectRetrieval,
        Strategy::UndersegmentAndAdd,
        Strategy::OversegmentAndRemove,
        Strategy::CoarseToFineRefinement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DirectRetrieval => "direct_retrieval",
            Strategy::UndersegmentAndAdd => "undersegment_and_add",
            Strategy::OversegmentAndRemove => "oversegment_and_remove",
            Strategy::CoarseToFineRefinement => "coarse_to_fine_refinement",
        }
    }

    /// Loose keyword match for constrained replies; tolerates hyphen,
    /// space, and underscore spellings.
    pub fn from_reply(text: &str) -> Option<Strategy> {
        let lower = text.to_lowercase();
        if lower.contains("oversegment") {
            Some(Strategy::OversegmentAndRemove)
        } else if lower.contains("undersegment") {
            Some(Strategy::UndersegmentAndAdd)
        } else if lower.contains("coarse") {
            Some(Strategy::CoarseToFineRefinement)
        } else if lower.contains("direct") {
            Some(Strategy::DirectRetrieval)
        } else {
            None
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One structured decision emitted by the model per turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AgentAction {
    /// Ask the segmenter for candidate masks matching a short noun phrase.
    SegmentPhrase { prompt: String },
    /// Edit the working mask with candidates from the current pool.
    UpdateWorkingMask {
        op: EditOp,
        candidate_ids: Vec<u32>,
    },
    /// Revise the construction strategy; affects prompting only.
    SetStrategy { strategy: Strategy, reason: String },
    /// Declare the construction finished (or abandoned when unverified).
    Finalize { verified: bool, reason: String },
}

/// Serialize an action to its wire form (one JSON object).
pub fn serialize_action(action: &AgentAction) -> String {
    serde_json::to_string(action).expect("actions always serialize")
}

/// Why a model reply failed to yield an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatErrorKind {
    NotParsable,
    UnknownAction,
    SchemaViolation,
    UnknownCandidateId,
}

/// A classified reply-format failure; the raw text is preserved verbatim
/// for the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub raw_text: String,
    pub detail: String,
}

impl FormatError {
    fn new(kind: FormatErrorKind, raw_text: &str, detail: impl Into<String>) -> Self {
        Self {
            kind,
            raw_text: raw_text.to_string(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("query must be non-empty")]
    EmptyQuery,
}

/// Scan for top-level balanced `{...}` spans, respecting JSON strings and
/// escapes, and return them in order of appearance.
fn json_object_spans(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' if depth > 0 => in_string = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    spans
}

fn validate_action(
    value: &serde_json::Value,
    raw: &str,
    pool_ids: &BTreeSet<u32>,
) -> Result<AgentAction, FormatError> {
    let obj = value.as_object().ok_or_else(|| {
        FormatError::new(FormatErrorKind::SchemaViolation, raw, "not a JSON object")
    })?;
    let name = obj
        .get("action")
        .and_then(|v| v.as_str())
        .ok_or_else(|| {
            FormatError::new(
                FormatErrorKind::SchemaViolation,
                raw,
                "missing string field 'action'",
            )
        })?;
    if !matches!(
        name,
        "segment_phrase" | "update_working_mask" | "set_strategy" | "finalize"
    ) {
        return Err(FormatError::new(
            FormatErrorKind::UnknownAction,
            raw,
            format!("unknown action '{name}'"),
        ));
    }
    let action: AgentAction = serde_json::from_value(value.clone()).map_err(|e| {
        FormatError::new(
            FormatErrorKind::SchemaViolation,
            raw,
            format!("schema violation for '{name}': {e}"),
        )
    })?;
    match &action {
        AgentAction::SegmentPhrase { prompt } => {
            if prompt.trim().is_empty() {
                return Err(FormatError::new(
                    FormatErrorKind::SchemaViolation,
                    raw,
                    "segment_phrase prompt must be non-empty",
                ));
            }
        }
        AgentAction::UpdateWorkingMask { candidate_ids, .. } => {
            if candidate_ids.is_empty() {
                return Err(FormatError::new(
                    FormatErrorKind::SchemaViolation,
                    raw,
                    "candidate_ids must be non-empty",
                ));
            }
            let mut seen = BTreeSet::new();
            for id in candidate_ids {
                if !seen.insert(*id) {
                    return Err(FormatError::new(
                        FormatErrorKind::SchemaViolation,
                        raw,
                        format!("duplicate candidate id {id}"),
                    ));
                }
                if !pool_ids.contains(id) {
                    return Err(FormatError::new(
                        FormatErrorKind::UnknownCandidateId,
                        raw,
                        format!("candidate id {id} not in the current pool"),
                    ));
                }
            }
        }
        AgentAction::SetStrategy { .. } | AgentAction::Finalize { .. } => {}
    }
    Ok(action)
}

/// Extract and validate the single action object from a model reply.
///
/// The reply may contain reasoning prose; the last parseable JSON object
/// wins. Never panics: malformed input comes back as a classified
/// [`FormatError`].
pub fn parse_action(vlm_text: &str, pool_ids: &BTreeSet<u32>) -> Result<AgentAction, FormatError> {
    let spans = json_object_spans(vlm_text);
    let mut last_parsed: Option<serde_json::Value> = None;
    for span in &spans {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(span) {
            last_parsed = Some(value);
        }
    }
    match last_parsed {
        Some(value) => validate_action(&value, vlm_text, pool_ids),
        None => Err(FormatError::new(
            FormatErrorKind::NotParsable,
            vlm_text,
            "no JSON action object found in reply",
        )),
    }
}

/// Deterministic system prompt: the query, the strategy catalog, the action
/// schema, and the output contract. Identical inputs yield identical bytes.
pub fn render_system_prompt(
    query: &str,
    strategy: Strategy,
    tool_schema_version: &str,
) -> Result<String, ProtocolError> {
    if query.trim().is_empty() {
        return Err(ProtocolError::EmptyQuery);
    }
    let quoted_query = serde_json::to_string(query).expect("strings always serialize");
    Ok(format!(
        "You are a segmentation agent. You construct a binary mask for a query by \
calling a text-prompted segmenter and editing a persistent working mask with \
Boolean operations. The working mask carries over between rounds; build the \
answer step by step instead of retrying one-shot prompts.\n\
\n\
schema_version: {tool_schema_version}\n\
query: {quoted_query}\n\
current_strategy: {strategy}\n\
\n\
Strategies:\n\
- direct_retrieval: one segmentation call is expected to match the target; replace the working mask with the best candidate.\n\
- undersegment_and_add: collect the target from several smaller pieces; add each relevant candidate.\n\
- oversegment_and_remove: grab a superset region first, then remove the parts the query excludes.\n\
- coarse_to_fine_refinement: replace a coarse mask with progressively better candidates.\n\
\n\
Actions (reply with exactly one JSON object on the final line; free-text \
reasoning may precede it):\n\
{{\"action\":\"segment_phrase\",\"prompt\":\"<short noun phrase>\"}}\n\
{{\"action\":\"update_working_mask\",\"op\":\"add|remove|replace\",\"candidate_ids\":[<ids from the current pool>]}}\n\
{{\"action\":\"set_strategy\",\"strategy\":\"<one of the four strategy names>\",\"reason\":\"<why>\"}}\n\
{{\"action\":\"finalize\",\"verified\":true|false,\"reason\":\"<why>\"}}\n\
\n\
Rules:\n\
- one action per reply\n\
- candidate ids are only valid for the most recent segment_phrase call\n\
- update_working_mask needs a non-empty, duplicate-free candidate_ids list\n\
- finalize with verified=true only when the working mask satisfies every \
inclusion, exclusion, structural, and relational constraint in the query\n"
    ))
}

/// Who authored a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One piece of a multimodal message.
#[derive(Debug, Clone, PartialEq)]
pub enum MessagePart {
    Text(String),
    /// PNG-encoded image bytes.
    ImagePng(Vec<u8>),
}

/// A multimodal chat message.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<MessagePart>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![MessagePart::Text(text.into())],
        }
    }
}

/// Snapshot of engine state exposed to the model each round.
#[derive(Debug, Clone)]
pub struct RoundDigest {
    pub round: u32,
    pub max_rounds: u32,
    pub strategy: Strategy,
    pub working_area: u64,
    pub candidate_count: usize,
    /// Compact one-line summaries of prior actions, oldest first.
    pub history_lines: Vec<String>,
    pub remaining_budget: u32,
}

impl RoundDigest {
    /// The textual state digest sent ahead of the overlay images.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "round: {}/{} (remaining segmentation budget: {})\n",
            self.round, self.max_rounds, self.remaining_budget
        ));
        out.push_str(&format!("strategy: {}\n", self.strategy));
        if self.working_area == 0 {
            out.push_str("working mask: empty\n");
        } else {
            out.push_str(&format!("working mask: {} px\n", self.working_area));
        }
        if self.candidate_count == 0 {
            out.push_str("candidate pool: empty (call segment_phrase to fill it)\n");
        } else {
            out.push_str(&format!(
                "candidate pool: ids 1..{}\n",
                self.candidate_count
            ));
        }
        if self.history_lines.is_empty() {
            out.push_str("history: (none)\n");
        } else {
            out.push_str("history:\n");
            for line in &self.history_lines {
                out.push_str("  ");
                out.push_str(line);
                out.push('\n');
            }
        }
        if self.remaining_budget == 1 {
            out.push_str(
                "FINAL ROUND: only one segmentation call remains; finalize as soon as the mask satisfies the query.\n",
            );
        }
        out
    }
}

/// Assemble the per-round message bundle: the state digest first, then one
/// captioned overlay image per entry in `overlays`.
pub fn render_round_context(digest: &RoundDigest, overlays: &[(String, Vec<u8>)]) -> Vec<Message> {
    let mut parts = vec![MessagePart::Text(digest.render_text())];
    for (caption, png) in overlays {
        parts.push(MessagePart::Text(format!("overlay: {caption}")));
        parts.push(MessagePart::ImagePng(png.clone()));
    }
    vec![Message {
        role: Role::User,
        parts,
    }]
}

/// Corrective message appended after a reply-format failure, restating the
/// contract.
pub fn render_format_reminder(error: &FormatError) -> String {
    format!(
        "Your previous reply was not a valid action ({detail}). Reply again with \
exactly one JSON object on the final line, one of:\n\
{{\"action\":\"segment_phrase\",\"prompt\":\"...\"}}\n\
{{\"action\":\"update_working_mask\",\"op\":\"add|remove|replace\",\"candidate_ids\":[...]}}\n\
{{\"action\":\"set_strategy\",\"strategy\":\"...\",\"reason\":\"...\"}}\n\
{{\"action\":\"finalize\",\"verified\":true|false,\"reason\":\"...\"}}",
        detail = error.detail
    )
}
