//! The inference loop: a persistent working mask driven across rounds by
//! model-proposed actions, with strategy selection, post-edit scrutiny,
//! stall detection, failure recovery, and budget-bounded termination.
//!
//! One session is strictly sequential; independent sessions share nothing
//! but the backends. Every run produces a [`Trace`] sufficient to
//! reconstruct the final mask offline.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{segment_phrase, CandidateMask, ClientError, ImageRef, SegmenterBackend, VlmBackend};
use crate::mask::{apply_edit, rle_encode, EditOp, RasterMask, Rle};
use crate::overlay::{
    compose_grid, downscale_to_max_side, encode_png, examine_each_mask, OverlayConfig,
    OverlayLayout,
};
use crate::protocol::{
    parse_action, render_format_reminder, render_round_context, render_system_prompt, AgentAction,
    FormatError, FormatErrorKind, Message, MessagePart, Role, RoundDigest, Strategy,
    SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("query must be non-empty")]
    EmptyQuery,
}

/// All knobs for one inference session. Loadable from a JSON config file;
/// unspecified fields take the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Maximum segmentation rounds (budget T).
    pub max_rounds: u32,
    /// Rounds of stagnation before the run is declared stalled (W).
    pub stall_window: u32,
    /// Largest total pixel change over the stall window still counted as
    /// stagnation (D).
    pub stall_min_delta: u64,
    /// Consecutive reply-format failures tolerated before aborting (F).
    pub failure_limit: u32,
    /// Largest candidate pool returned per segmentation call.
    pub candidate_cap: usize,
    /// Longest image side sent to the chat model; larger images are
    /// downscaled together with their overlays.
    pub image_max_side: u32,
    pub overlay: OverlayConfig,
    /// Store a working-mask snapshot on every update entry so a trace can
    /// be verified round by round.
    pub snapshot_masks: bool,
    /// Wall-clock cap per session; exceeded runs stop with their partial
    /// mask and a budget-exhausted termination.
    pub max_wall_time_ms: Option<u64>,
    /// When set, every overlay shown to the model is also written here.
    pub dump_overlays: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_rounds: 20,
            stall_window: 3,
            stall_min_delta: 0,
            failure_limit: 3,
            candidate_cap: 8,
            image_max_side: 1024,
            overlay: OverlayConfig::default(),
            snapshot_masks: true,
            max_wall_time_ms: None,
            dump_overlays: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_rounds == 0 {
            return Err(EngineError::InvalidConfig("max_rounds must be >= 1".into()));
        }
        if self.stall_window == 0 {
            return Err(EngineError::InvalidConfig("stall_window must be >= 1".into()));
        }
        if self.failure_limit == 0 {
            return Err(EngineError::InvalidConfig(
                "failure_limit must be >= 1".into(),
            ));
        }
        if self.candidate_cap == 0 {
            return Err(EngineError::InvalidConfig(
                "candidate_cap must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Hard cap on chat turns per session, segmentation budget aside.
    pub fn vlm_turn_valve(&self) -> u32 {
        self.max_rounds * 3
    }
}

/// Why a session ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Verified,
    Stalled,
    BudgetExhausted,
    Unrecoverable,
}

/// A failure recorded in the history; drives recovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureEvent {
    Format { error: FormatError },
    Backend { detail: String },
}

/// What happened on one turn: a parsed action or a classified failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryEvent {
    Action { action: AgentAction },
    Failure { failure: FailureEvent },
}

/// A successful edit as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub op: EditOp,
    pub candidate_ids: Vec<u32>,
}

/// One auditable step of the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Segmentation round the step belongs to; 0 before the first call.
    pub round: u32,
    pub event: HistoryEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditRecord>,
    pub pixels_added: u64,
    pub pixels_removed: u64,
    pub note: String,
    /// The model's reply verbatim, reasoning prose included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
    /// Masks the edit actually consumed; lets a replay recompute the edit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected_rles: Vec<Rle>,
    /// Working mask after the edit, when snapshots are enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_rle: Option<Rle>,
}

impl HistoryEntry {
    fn new(round: u32, event: HistoryEvent) -> Self {
        Self {
            round,
            event,
            segment_prompt: None,
            edit: None,
            pixels_added: 0,
            pixels_removed: 0,
            note: String::new(),
            raw_reply: None,
            selected_rles: Vec::new(),
            working_rle: None,
        }
    }

    fn action(round: u32, action: AgentAction, raw_reply: Option<String>) -> Self {
        let mut e = Self::new(round, HistoryEvent::Action { action });
        e.raw_reply = raw_reply;
        e
    }

    fn failure(round: u32, failure: FailureEvent) -> Self {
        Self::new(round, HistoryEvent::Failure { failure })
    }
}

/// The persistent visual state carried across rounds.
#[derive(Debug, Clone)]
pub struct WorkingState {
    pub query: String,
    pub strategy: Strategy,
    pub working_mask: RasterMask,
    /// Completed segmentation rounds.
    pub round: u32,
    pub max_rounds: u32,
    pub candidate_pool: Vec<CandidateMask>,
    pub history: Vec<HistoryEntry>,
}

/// Complete record of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub schema_version: String,
    pub image_id: String,
    pub query: String,
    pub width: u32,
    pub height: u32,
    pub entries: Vec<HistoryEntry>,
    pub termination: TerminationReason,
    pub termination_note: String,
    pub final_rle: Rle,
    pub reasoning_steps: u32,
    pub wall_time_ms: u64,
    pub config: EngineConfig,
}

impl PartialEq for EngineConfig {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_string(self).unwrap() == serde_json::to_string(other).unwrap()
    }
}

/// Scrutiny classification of the working mask against the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyOutcome {
    Satisfied,
    MissingRegions,
    ExtraRegions,
    ConceptConfusion,
    Continue,
}

impl VerifyOutcome {
    pub fn label(self) -> &'static str {
        match self {
            VerifyOutcome::Satisfied => "satisfied",
            VerifyOutcome::MissingRegions => "missing_regions",
            VerifyOutcome::ExtraRegions => "extra_regions",
            VerifyOutcome::ConceptConfusion => "concept_confusion",
            VerifyOutcome::Continue => "continue",
        }
    }
}

/// Parse a constrained scrutiny reply; earliest keyword wins, and explicit
/// negations of "satisfied" are discarded before matching.
pub fn parse_verify_reply(text: &str) -> Option<VerifyOutcome> {
    let lower = text
        .to_lowercase()
        .replace("not satisfied", " ")
        .replace("unsatisfied", " ");
    let keywords: [(&str, VerifyOutcome); 5] = [
        ("satisf", VerifyOutcome::Satisfied),
        ("missing", VerifyOutcome::MissingRegions),
        ("extra", VerifyOutcome::ExtraRegions),
        ("confus", VerifyOutcome::ConceptConfusion),
        ("continue", VerifyOutcome::Continue),
    ];
    keywords
        .iter()
        .filter_map(|(kw, outcome)| lower.find(kw).map(|pos| (pos, *outcome)))
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, outcome)| outcome)
}

/// How the engine reacts to a recorded failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryAction {
    /// Re-ask the model with a corrective message restating the schema.
    RetryWithReminder,
    /// Clear the candidate pool and the current turn; mask and history
    /// stay intact.
    ReinitLocalStep,
    /// Stop the session as unrecoverable.
    Abort,
}

/// Decide the next recovery step for the just-recorded failure (which must
/// already be the last history entry). Format failures tolerate
/// `failure_limit` consecutive occurrences; backend failures get one local
/// reinit before aborting.
pub fn recover(
    failure: &FailureEvent,
    history: &[HistoryEntry],
    failure_limit: u32,
) -> RecoveryAction {
    let mut format_run = 0u32;
    let mut backend_run = 0u32;
    for entry in history.iter().rev() {
        match &entry.event {
            HistoryEvent::Failure { failure } => match failure {
                FailureEvent::Format { .. } => format_run += 1,
                FailureEvent::Backend { .. } => backend_run += 1,
            },
            HistoryEvent::Action { .. } => break,
        }
    }
    match failure {
        FailureEvent::Format { .. } => {
            if format_run <= failure_limit {
                RecoveryAction::RetryWithReminder
            } else {
                RecoveryAction::Abort
            }
        }
        FailureEvent::Backend { .. } => {
            if backend_run <= 1 {
                RecoveryAction::ReinitLocalStep
            } else {
                RecoveryAction::Abort
            }
        }
    }
}

/// True when the last `window` rounds moved the working mask by at most
/// `min_delta` pixels in total and introduced no segment prompt that was
/// not already tried before the window.
pub fn detect_stall(history: &[HistoryEntry], window: u32, min_delta: u64) -> bool {
    let last_round = history.iter().map(|e| e.round).max().unwrap_or(0);
    if last_round < window {
        return false;
    }
    let window_start = last_round - window + 1;
    let mut total_delta = 0u64;
    let mut earlier_prompts: Vec<&str> = Vec::new();
    let mut window_prompts: Vec<&str> = Vec::new();
    for entry in history {
        if let Some(prompt) = &entry.segment_prompt {
            if entry.round < window_start {
                earlier_prompts.push(prompt);
            } else {
                window_prompts.push(prompt);
            }
        }
        if entry.round >= window_start {
            total_delta += entry.pixels_added + entry.pixels_removed;
        }
    }
    if total_delta > min_delta {
        return false;
    }
    !window_prompts
        .iter()
        .any(|p| !earlier_prompts.contains(p))
}

/// Compact one-line-per-entry summaries for the round digest.
pub fn history_summary_lines(entries: &[HistoryEntry]) -> Vec<String> {
    entries
        .iter()
        .map(|e| {
            let r = e.round;
            match &e.event {
                HistoryEvent::Action { action } => match action {
                    AgentAction::SegmentPhrase { prompt } => {
                        format!("r{r} segment {prompt:?}: {}", e.note)
                    }
                    AgentAction::UpdateWorkingMask { op, candidate_ids } => format!(
                        "r{r} {op} {candidate_ids:?} (+{} px, -{} px){}",
                        e.pixels_added,
                        e.pixels_removed,
                        if e.note.is_empty() {
                            String::new()
                        } else {
                            format!(" [{}]", e.note)
                        }
                    ),
                    AgentAction::SetStrategy { strategy, .. } => {
                        format!("r{r} strategy -> {strategy}")
                    }
                    AgentAction::Finalize { verified, .. } => format!(
                        "r{r} finalize(verified={verified}){}",
                        if e.note.is_empty() {
                            String::new()
                        } else {
                            format!(" [{}]", e.note)
                        }
                    ),
                },
                HistoryEvent::Failure { failure } => match failure {
                    FailureEvent::Format { error } => {
                        format!("r{r} format error: {:?}", error.kind)
                    }
                    FailureEvent::Backend { .. } => format!("r{r} backend error"),
                },
            }
        })
        .collect()
}

/// Count work done: segmentation calls plus successful mask updates.
pub fn count_reasoning_steps_in(entries: &[HistoryEntry]) -> u32 {
    entries
        .iter()
        .filter(|e| {
            matches!(
                e.event,
                HistoryEvent::Action {
                    action: AgentAction::SegmentPhrase { .. }
                } | HistoryEvent::Action {
                    action: AgentAction::UpdateWorkingMask { .. }
                }
            )
        })
        .count() as u32
}

/// Count reasoning steps recorded in a finished trace.
pub fn count_reasoning_steps(trace: &Trace) -> u32 {
    count_reasoning_steps_in(&trace.entries)
}

fn render_strategy_prompt(query: &str) -> String {
    let quoted = serde_json::to_string(query).expect("strings always serialize");
    format!(
        "Query: {quoted}\n\
Choose one construction strategy for segmenting this query and reply with \
the strategy name only:\n\
- direct_retrieval: one segmentation call should match the target directly\n\
- undersegment_and_add: build the target by adding several smaller pieces\n\
- oversegment_and_remove: take a superset region, then remove excluded parts\n\
- coarse_to_fine_refinement: start coarse and replace with refined masks\n"
    )
}

fn render_verify_prompt(query: &str) -> String {
    let quoted = serde_json::to_string(query).expect("strings always serialize");
    format!(
        "Inspect the working-mask overlay against the query {quoted}.\n\
Check the inclusion, exclusion, structural, and relational constraints.\n\
Reply with exactly one of: satisfied / missing regions / extra regions / \
concept confusion / continue\n"
    )
}

/// Result of one strategy-selection exchange.
#[derive(Debug, Clone)]
pub struct StrategySelection {
    pub strategy: Strategy,
    /// Raw reply and parse result per attempt, in order.
    pub attempts: Vec<(String, Option<Strategy>)>,
    /// The fallback kicked in after every attempt failed to parse.
    pub fell_back: bool,
}

/// Ask the model for an initial strategy; after `failure_limit` unparsable
/// replies the selection falls back to direct retrieval.
pub fn select_strategy(
    vlm: &dyn VlmBackend,
    image: &ImageRef,
    query: &str,
    config: &EngineConfig,
) -> Result<StrategySelection, ClientError> {
    let small = downscale_to_max_side(&image.rgb, config.image_max_side);
    let mut attempts = Vec::new();
    for _ in 0..config.failure_limit {
        let messages = vec![Message {
            role: Role::User,
            parts: vec![
                MessagePart::Text(render_strategy_prompt(query)),
                MessagePart::ImagePng(encode_png(&small)),
            ],
        }];
        let reply = vlm.chat(&messages)?;
        let parsed = Strategy::from_reply(&reply);
        attempts.push((reply, parsed));
        if let Some(strategy) = parsed {
            return Ok(StrategySelection {
                strategy,
                attempts,
                fell_back: false,
            });
        }
    }
    Ok(StrategySelection {
        strategy: Strategy::DirectRetrieval,
        attempts,
        fell_back: true,
    })
}

/// Scrutiny result plus the evidence needed to record it.
#[derive(Debug, Clone)]
pub struct Scrutiny {
    pub outcome: VerifyOutcome,
    pub raw_reply: String,
    /// Set when the reply did not parse and the outcome defaulted to
    /// continue.
    pub parse_failure: Option<FormatError>,
}

/// Show the model the working-mask overlay and ask whether the query is
/// satisfied. Unparsable replies default to [`VerifyOutcome::Continue`].
pub fn verify_progress(
    vlm: &dyn VlmBackend,
    image: &ImageRef,
    query: &str,
    working: &RasterMask,
    config: &EngineConfig,
) -> Result<Scrutiny, ClientError> {
    let views = examine_each_mask(&image.rgb, &[], working, &config.overlay)
        .expect("working mask dimensions match the image");
    let (_, view) = &views[0];
    let small = downscale_to_max_side(view, config.image_max_side);
    let messages = vec![Message {
        role: Role::User,
        parts: vec![
            MessagePart::Text(render_verify_prompt(query)),
            MessagePart::ImagePng(encode_png(&small)),
        ],
    }];
    let raw_reply = vlm.chat(&messages)?;
    match parse_verify_reply(&raw_reply) {
        Some(outcome) => Ok(Scrutiny {
            outcome,
            raw_reply,
            parse_failure: None,
        }),
        None => {
            let parse_failure = Some(FormatError {
                kind: FormatErrorKind::NotParsable,
                raw_text: raw_reply.clone(),
                detail: "scrutiny reply matched no known classification".into(),
            });
            Ok(Scrutiny {
                outcome: VerifyOutcome::Continue,
                raw_reply,
                parse_failure,
            })
        }
    }
}

struct Session<'a> {
    image: &'a ImageRef,
    vlm: &'a dyn VlmBackend,
    seg: &'a dyn SegmenterBackend,
    config: &'a EngineConfig,
    state: WorkingState,
    budget_used: u32,
    vlm_turns: u32,
    pending_reminder: Option<String>,
    started: Instant,
    termination: Option<(TerminationReason, String)>,
}

impl<'a> Session<'a> {
    fn terminate(&mut self, reason: TerminationReason, note: impl Into<String>) {
        if self.termination.is_none() {
            self.termination = Some((reason, note.into()));
        }
    }

    fn over_hard_limits(&self) -> Option<String> {
        if self.vlm_turns >= self.config.vlm_turn_valve() {
            return Some(format!(
                "chat turn valve reached ({} turns)",
                self.vlm_turns
            ));
        }
        if let Some(cap) = self.config.max_wall_time_ms {
            let elapsed = self.started.elapsed().as_millis() as u64;
            if elapsed > cap {
                return Some(format!("wall clock budget exceeded ({elapsed} ms)"));
            }
        }
        None
    }

    fn history_lines(&self) -> Vec<String> {
        history_summary_lines(&self.state.history)
    }

    fn dump_views(&self, views: &[(String, Vec<u8>)]) {
        let Some(dir) = &self.config.dump_overlays else {
            return;
        };
        if std::fs::create_dir_all(dir).is_err() {
            return;
        }
        for (caption, png) in views {
            let name = format!(
                "turn_{:03}_{}.png",
                self.vlm_turns,
                caption.replace(' ', "_")
            );
            let _ = std::fs::write(dir.join(name), png);
        }
    }

    fn round_views(&self) -> Vec<(String, Vec<u8>)> {
        let views = examine_each_mask(
            &self.image.rgb,
            &self.state.candidate_pool,
            &self.state.working_mask,
            &self.config.overlay,
        )
        .expect("pool and working mask dimensions match the image");
        let encoded: Vec<(String, Vec<u8>)> = match self.config.overlay.layout {
            OverlayLayout::PerCandidate => views
                .into_iter()
                .map(|(caption, img)| {
                    let small = downscale_to_max_side(&img, self.config.image_max_side);
                    (caption, encode_png(&small))
                })
                .collect(),
            OverlayLayout::Grid => {
                let grid = compose_grid(&views);
                let small = downscale_to_max_side(&grid, self.config.image_max_side);
                vec![("grid".to_string(), encode_png(&small))]
            }
        };
        self.dump_views(&encoded);
        encoded
    }

    /// Record a backend failure and apply recovery. Returns false when the
    /// session must abort.
    fn note_backend_failure(&mut self, round: u32, detail: String, context: &str) -> bool {
        let failure = FailureEvent::Backend {
            detail: detail.clone(),
        };
        let mut entry = HistoryEntry::failure(round, failure.clone());
        entry.note = format!("{context}: {detail}");
        self.state.history.push(entry);
        match recover(&failure, &self.state.history, self.config.failure_limit) {
            RecoveryAction::ReinitLocalStep => {
                self.state.candidate_pool.clear();
                self.pending_reminder = None;
                true
            }
            RecoveryAction::Abort | RecoveryAction::RetryWithReminder => {
                self.terminate(
                    TerminationReason::Unrecoverable,
                    format!("backend failure during {context}: {detail}"),
                );
                false
            }
        }
    }

    /// Record a format failure and apply recovery. Returns false when the
    /// session must abort.
    fn note_format_failure(&mut self, round: u32, error: FormatError, context: &str) -> bool {
        let failure = FailureEvent::Format {
            error: error.clone(),
        };
        let mut entry = HistoryEntry::failure(round, failure.clone());
        entry.note = format!("{context}: {}", error.detail);
        self.state.history.push(entry);
        match recover(&failure, &self.state.history, self.config.failure_limit) {
            RecoveryAction::RetryWithReminder => {
                self.pending_reminder = Some(render_format_reminder(&error));
                true
            }
            RecoveryAction::Abort | RecoveryAction::ReinitLocalStep => {
                self.terminate(
                    TerminationReason::Unrecoverable,
                    format!("consecutive format failures exceeded the limit during {context}"),
                );
                false
            }
        }
    }

    fn choose_initial_strategy(&mut self, query: &str) {
        for reinit in 0..2 {
            match select_strategy(self.vlm, self.image, query, self.config) {
                Ok(selection) => {
                    self.vlm_turns += selection.attempts.len() as u32;
                    for (raw, parsed) in &selection.attempts {
                        if parsed.is_none() {
                            let mut entry = HistoryEntry::failure(
                                0,
                                FailureEvent::Format {
                                    error: FormatError {
                                        kind: FormatErrorKind::NotParsable,
                                        raw_text: raw.clone(),
                                        detail: "no strategy keyword in reply".into(),
                                    },
                                },
                            );
                            entry.note = "strategy selection".into();
                            self.state.history.push(entry);
                        }
                    }
                    self.state.strategy = selection.strategy;
                    let mut entry = HistoryEntry::action(
                        0,
                        AgentAction::SetStrategy {
                            strategy: selection.strategy,
                            reason: "initial selection".into(),
                        },
                        selection.attempts.last().map(|(raw, _)| raw.clone()),
                    );
                    entry.note = if selection.fell_back {
                        format!(
                            "fallback to direct_retrieval after {} unparsable replies",
                            selection.attempts.len()
                        )
                    } else {
                        "initial strategy".into()
                    };
                    self.state.history.push(entry);
                    return;
                }
                Err(err) => {
                    self.vlm_turns += 1;
                    if !self.note_backend_failure(0, err.to_string(), "strategy selection")
                        || reinit == 1
                    {
                        self.terminate(
                            TerminationReason::Unrecoverable,
                            "backend failure during strategy selection",
                        );
                        return;
                    }
                }
            }
        }
    }

    /// Run scrutiny after an update or on a verified finalize. Returns the
    /// outcome, or None when the session aborted while checking.
    fn run_scrutiny(&mut self, query: &str) -> Option<VerifyOutcome> {
        if let Some(note) = self.over_hard_limits() {
            self.terminate(TerminationReason::BudgetExhausted, note);
            return None;
        }
        match verify_progress(
            self.vlm,
            self.image,
            query,
            &self.state.working_mask,
            self.config,
        ) {
            Ok(scrutiny) => {
                self.vlm_turns += 1;
                if let Some(parse_failure) = scrutiny.parse_failure {
                    if !self.note_format_failure(self.state.round, parse_failure, "scrutiny") {
                        return None;
                    }
                    // unparsable scrutiny defaults to continue, no retry
                    self.pending_reminder = None;
                }
                Some(scrutiny.outcome)
            }
            Err(err) => {
                self.vlm_turns += 1;
                if self.note_backend_failure(self.state.round, err.to_string(), "scrutiny") {
                    Some(VerifyOutcome::Continue)
                } else {
                    None
                }
            }
        }
    }

    fn pool_ids(&self) -> std::collections::BTreeSet<u32> {
        self.state
            .candidate_pool
            .iter()
            .map(|c| c.candidate_id)
            .collect()
    }
}

/// Execute one full inference session and return the final mask with its
/// trace. Recoverable trouble never surfaces as an error: aborted runs
/// come back with the last good working mask and a trace explaining why.
pub fn run_inference(
    image: &ImageRef,
    query: &str,
    vlm: &dyn VlmBackend,
    seg: &dyn SegmenterBackend,
    config: &EngineConfig,
) -> Result<(RasterMask, Trace), EngineError> {
    config.validate()?;
    if query.trim().is_empty() {
        return Err(EngineError::EmptyQuery);
    }
    let empty = RasterMask::empty(image.width(), image.height())
        .map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
    let mut session = Session {
        image,
        vlm,
        seg,
        config,
        state: WorkingState {
            query: query.to_string(),
            strategy: Strategy::DirectRetrieval,
            working_mask: empty,
            round: 0,
            max_rounds: config.max_rounds,
            candidate_pool: Vec::new(),
            history: Vec::new(),
        },
        budget_used: 0,
        vlm_turns: 0,
        pending_reminder: None,
        started: Instant::now(),
        termination: None,
    };

    session.choose_initial_strategy(query);

    while session.termination.is_none() {
        if let Some(note) = session.over_hard_limits() {
            session.terminate(TerminationReason::BudgetExhausted, note);
            break;
        }

        // assemble this turn's context
        let system = render_system_prompt(query, session.state.strategy, SCHEMA_VERSION)
            .expect("query verified non-empty");
        let digest = RoundDigest {
            round: session.state.round,
            max_rounds: config.max_rounds,
            strategy: session.state.strategy,
            working_area: session.state.working_mask.area(),
            candidate_count: session.state.candidate_pool.len(),
            history_lines: session.history_lines(),
            remaining_budget: config.max_rounds - session.budget_used,
        };
        let views = session.round_views();
        let mut messages = vec![Message::text(Role::System, system)];
        messages.extend(render_round_context(&digest, &views));
        if let Some(reminder) = session.pending_reminder.take() {
            messages.push(Message::text(Role::User, reminder));
        }

        let reply = match session.vlm.chat(&messages) {
            Ok(reply) => {
                session.vlm_turns += 1;
                reply
            }
            Err(err) => {
                session.vlm_turns += 1;
                if session.note_backend_failure(session.state.round, err.to_string(), "chat") {
                    continue;
                }
                break;
            }
        };

        let action = match parse_action(&reply, &session.pool_ids()) {
            Ok(action) => action,
            Err(format_error) => {
                if session.note_format_failure(session.state.round, format_error, "action") {
                    continue;
                }
                break;
            }
        };

        match action {
            AgentAction::SegmentPhrase { ref prompt } => {
                if session.budget_used >= config.max_rounds {
                    session.terminate(
                        TerminationReason::BudgetExhausted,
                        format!(
                            "segmentation budget of {} rounds spent; further segment refused",
                            config.max_rounds
                        ),
                    );
                    break;
                }
                match segment_phrase(session.seg, image, prompt, config.candidate_cap) {
                    Ok(candidates) => {
                        session.budget_used += 1;
                        session.state.round += 1;
                        let mut entry = HistoryEntry::action(
                            session.state.round,
                            action.clone(),
                            Some(reply.clone()),
                        );
                        entry.segment_prompt = Some(prompt.clone());
                        entry.note = format!("{} candidate(s)", candidates.len());
                        session.state.history.push(entry);
                        session.state.candidate_pool = candidates;
                    }
                    Err(err) => {
                        let round = session.state.round;
                        let recovered =
                            session.note_backend_failure(round, err.to_string(), "segment");
                        // keep the attempted prompt on the failure entry
                        if let Some(last) = session.state.history.last_mut() {
                            last.segment_prompt = Some(prompt.clone());
                        }
                        if !recovered {
                            break;
                        }
                    }
                }
            }
            AgentAction::UpdateWorkingMask {
                op,
                ref candidate_ids,
            } => {
                let selected: Vec<RasterMask> = session
                    .state
                    .candidate_pool
                    .iter()
                    .filter(|c| candidate_ids.contains(&c.candidate_id))
                    .map(|c| c.mask.clone())
                    .collect();
                let new_mask = apply_edit(&session.state.working_mask, op, &selected)
                    .expect("pool ids validated and dimensions uniform");
                let added = new_mask.subtract(&session.state.working_mask).unwrap().area();
                let removed = session.state.working_mask.subtract(&new_mask).unwrap().area();
                let mut entry = HistoryEntry::action(
                    session.state.round,
                    action.clone(),
                    Some(reply.clone()),
                );
                entry.edit = Some(EditRecord {
                    op,
                    candidate_ids: candidate_ids.clone(),
                });
                entry.pixels_added = added;
                entry.pixels_removed = removed;
                entry.selected_rles = selected.iter().map(rle_encode).collect();
                if config.snapshot_masks {
                    entry.working_rle = Some(rle_encode(&new_mask));
                }
                session.state.history.push(entry);
                let entry_idx = session.state.history.len() - 1;
                session.state.working_mask = new_mask;

                match session.run_scrutiny(query) {
                    Some(outcome) => {
                        let note = format!("scrutiny={}", outcome.label());
                        let entry = &mut session.state.history[entry_idx];
                        if entry.note.is_empty() {
                            entry.note = note;
                        } else {
                            entry.note = format!("{}; {}", entry.note, note);
                        }
                    }
                    None => break,
                }
            }
            AgentAction::SetStrategy { strategy, .. } => {
                session.state.strategy = strategy;
                session
                    .state
                    .history
                    .push(HistoryEntry::action(
                        session.state.round,
                        action.clone(),
                        Some(reply.clone()),
                    ));
            }
            AgentAction::Finalize { verified, .. } => {
                let mut entry = HistoryEntry::action(
                    session.state.round,
                    action.clone(),
                    Some(reply.clone()),
                );
                if !verified {
                    entry.note = "agent finalized unverified; treated as stalled".into();
                    session.state.history.push(entry);
                    session.terminate(
                        TerminationReason::Stalled,
                        "agent declared the construction finished without verification",
                    );
                    break;
                }
                session.state.history.push(entry);
                let entry_idx = session.state.history.len() - 1;
                match session.run_scrutiny(query) {
                    Some(VerifyOutcome::Satisfied) => {
                        session.state.history[entry_idx].note = "accepted: scrutiny=satisfied".into();
                        session.terminate(
                            TerminationReason::Verified,
                            "finalize accepted after scrutiny",
                        );
                        break;
                    }
                    Some(outcome) => {
                        session.state.history[entry_idx].note =
                            format!("rejected: scrutiny={}", outcome.label());
                    }
                    None => break,
                }
            }
        }

        if detect_stall(
            &session.state.history,
            config.stall_window,
            config.stall_min_delta,
        ) {
            session.terminate(
                TerminationReason::Stalled,
                format!(
                    "no mask change and no novel prompt for {} round(s)",
                    config.stall_window
                ),
            );
            break;
        }
    }

    let (termination, termination_note) = session
        .termination
        .unwrap_or((TerminationReason::Unrecoverable, "loop exited unexpectedly".into()));
    let reasoning_steps = count_reasoning_steps_in(&session.state.history);
    let trace = Trace {
        schema_version: SCHEMA_VERSION.to_string(),
        image_id: image.image_id.clone(),
        query: query.to_string(),
        width: image.width(),
        height: image.height(),
        entries: session.state.history,
        termination,
        termination_note,
        final_rle: rle_encode(&session.state.working_mask),
        reasoning_steps,
        wall_time_ms: session.started.elapsed().as_millis() as u64,
        config: config.clone(),
    };
    Ok((session.state.working_mask, trace))
}
