//! Agentic construction of binary segmentation masks.
//!
//! The crate couples a multimodal chat model and a text-prompted segmenter
//! behind a deterministic orchestration engine: the agent plans a strategy,
//! requests candidate masks for short noun phrases, inspects them as image
//! overlays, and edits a persistent working mask with Boolean operations
//! until the result verifies, progress stalls, or the round budget runs
//! out. Every run yields a replayable trace that proves how the final mask
//! was constructed.
//!
//! Module map:
//! - [`mask`]: raster masks, RLE codec, Boolean edits
//! - [`metrics`]: gIoU / cIoU / xIoU and report aggregation
//! - [`protocol`]: the JSON action language and prompt rendering
//! - [`clients`]: segmenter and chat-model backends (scripted + HTTP)
//! - [`overlay`]: candidate/working-mask overlay rendering
//! - [`engine`]: the inference loop, stall detection, error recovery
//! - [`trace`]: trace persistence (JSONL) and replay verification
//! - [`bench`]: dataset manifests, batch evaluation, report emission

pub mod bench;
pub mod clients;
pub mod engine;
pub mod mask;
pub mod metrics;
pub mod overlay;
pub mod protocol;
pub mod trace;
