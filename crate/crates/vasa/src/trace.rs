//! Trace persistence and replay: a session trace serializes to JSONL (one
//! line per history entry plus a terminal summary record) and replays
//! offline, recomputing every mask edit to prove the final mask was
//! constructed exactly as recorded. A single tampered operation diverges
//! at its round.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    count_reasoning_steps_in, EngineConfig, HistoryEntry, HistoryEvent, TerminationReason, Trace,
};
use crate::mask::{apply_edit, rle_decode, rle_encode, RasterMask, Rle};
use crate::protocol::AgentAction;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("trace parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("trace has no terminal summary record")]
    MissingSummary,
    #[error("replay diverged at round {round}: {detail}")]
    Divergence { round: u32, detail: String },
    #[error("trace cannot be replayed: {0}")]
    Unreplayable(String),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine {
    Entry(HistoryEntry),
    Summary {
        schema_version: String,
        image_id: String,
        query: String,
        width: u32,
        height: u32,
        termination: TerminationReason,
        termination_note: String,
        final_rle: Rle,
        reasoning_steps: u32,
        wall_time_ms: u64,
        config: EngineConfig,
    },
}

/// Serialize a trace to JSONL, entries first, summary last.
pub fn to_jsonl(trace: &Trace) -> String {
    let mut out = String::new();
    for entry in &trace.entries {
        let line = TraceLine::Entry(entry.clone());
        out.push_str(&serde_json::to_string(&line).expect("entries always serialize"));
        out.push('\n');
    }
    let summary = TraceLine::Summary {
        schema_version: trace.schema_version.clone(),
        image_id: trace.image_id.clone(),
        query: trace.query.clone(),
        width: trace.width,
        height: trace.height,
        termination: trace.termination,
        termination_note: trace.termination_note.clone(),
        final_rle: trace.final_rle.clone(),
        reasoning_steps: trace.reasoning_steps,
        wall_time_ms: trace.wall_time_ms,
        config: trace.config.clone(),
    };
    out.push_str(&serde_json::to_string(&summary).expect("summary always serializes"));
    out.push('\n');
    out
}

/// JSONL with the wall time zeroed: the byte-comparable form for
/// determinism checks (wall time is the one field that varies between
/// otherwise identical runs).
pub fn to_canonical_jsonl(trace: &Trace) -> String {
    let mut normalized = trace.clone();
    normalized.wall_time_ms = 0;
    to_jsonl(&normalized)
}

/// Parse a JSONL trace; the last line must be the summary.
pub fn from_jsonl(text: &str) -> Result<Trace, TraceError> {
    let mut entries = Vec::new();
    let mut summary: Option<TraceLine> = None;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(TraceError::Parse {
                line: idx + 1,
                detail: "records after the terminal summary".into(),
            });
        }
        let parsed: TraceLine = serde_json::from_str(line).map_err(|e| TraceError::Parse {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        match parsed {
            TraceLine::Entry(entry) => entries.push(entry),
            line @ TraceLine::Summary { .. } => summary = Some(line),
        }
    }
    let Some(TraceLine::Summary {
        schema_version,
        image_id,
        query,
        width,
        height,
        termination,
        termination_note,
        final_rle,
        reasoning_steps,
        wall_time_ms,
        config,
    }) = summary
    else {
        return Err(TraceError::MissingSummary);
    };
    Ok(Trace {
        schema_version,
        image_id,
        query,
        width,
        height,
        entries,
        termination,
        termination_note,
        final_rle,
        reasoning_steps,
        wall_time_ms,
        config,
    })
}

pub fn write_trace(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    std::fs::write(path, to_jsonl(trace)).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_trace(path: &Path) -> Result<Trace, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    from_jsonl(&text)
}

/// What a successful replay verified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub entries: usize,
    pub updates_verified: usize,
    pub final_area: u64,
}

/// Recompute the working mask from an empty start through every recorded
/// edit and check the trace against itself: per-entry pixel deltas, edit
/// monotonicity, snapshots when present, the final mask, and the
/// reasoning-step count.
pub fn replay_trace(trace: &Trace) -> Result<ReplayReport, TraceError> {
    let mut mask = RasterMask::empty(trace.width, trace.height)
        .map_err(|e| TraceError::Unreplayable(e.to_string()))?;
    let mut updates_verified = 0usize;
    for entry in &trace.entries {
        let HistoryEvent::Action { action } = &entry.event else {
            continue;
        };
        let AgentAction::UpdateWorkingMask { op, candidate_ids } = action else {
            continue;
        };
        let round = entry.round;
        let edit = entry.edit.as_ref().ok_or_else(|| {
            TraceError::Unreplayable(format!("round {round}: update entry lacks an edit record"))
        })?;
        if edit.op != *op || &edit.candidate_ids != candidate_ids {
            return Err(TraceError::Divergence {
                round,
                detail: "edit record disagrees with the recorded action".into(),
            });
        }
        if entry.selected_rles.is_empty() {
            return Err(TraceError::Unreplayable(format!(
                "round {round}: update entry carries no selected masks"
            )));
        }
        let mut selected = Vec::with_capacity(entry.selected_rles.len());
        for rle in &entry.selected_rles {
            if (rle.width(), rle.height()) != (trace.width, trace.height) {
                return Err(TraceError::Divergence {
                    round,
                    detail: format!(
                        "selected mask is {}x{}, trace is {}x{}",
                        rle.width(),
                        rle.height(),
                        trace.width,
                        trace.height
                    ),
                });
            }
            selected.push(
                rle_decode(rle, rle.width(), rle.height())
                    .map_err(|e| TraceError::Unreplayable(e.to_string()))?,
            );
        }
        let new_mask = apply_edit(&mask, edit.op, &selected).map_err(|e| TraceError::Divergence {
            round,
            detail: e.to_string(),
        })?;
        let added = new_mask.subtract(&mask).expect("same dims").area();
        let removed = mask.subtract(&new_mask).expect("same dims").area();
        if added != entry.pixels_added || removed != entry.pixels_removed {
            return Err(TraceError::Divergence {
                round,
                detail: format!(
                    "recomputed deltas (+{added}, -{removed}) disagree with recorded \
                     (+{}, -{})",
                    entry.pixels_added, entry.pixels_removed
                ),
            });
        }
        if let Some(snapshot) = &entry.working_rle {
            if &rle_encode(&new_mask) != snapshot {
                return Err(TraceError::Divergence {
                    round,
                    detail: "recomputed working mask disagrees with the snapshot".into(),
                });
            }
        }
        mask = new_mask;
        updates_verified += 1;
    }
    if rle_encode(&mask) != trace.final_rle {
        return Err(TraceError::Divergence {
            round: trace.entries.iter().map(|e| e.round).max().unwrap_or(0),
            detail: "reconstructed final mask disagrees with the recorded final mask".into(),
        });
    }
    let recount = count_reasoning_steps_in(&trace.entries);
    if recount != trace.reasoning_steps {
        return Err(TraceError::Divergence {
            round: trace.entries.iter().map(|e| e.round).max().unwrap_or(0),
            detail: format!(
                "recounted {recount} reasoning steps, trace claims {}",
                trace.reasoning_steps
            ),
        });
    }
    Ok(ReplayReport {
        entries: trace.entries.len(),
        updates_verified,
        final_area: mask.area(),
    })
}
