//! Benchmark ingestion and batch evaluation: load a dataset manifest,
//! drive one inference session per item over a bounded worker pool, score
//! the results, and emit deterministic CSV / markdown / JSONL reports.
//!
//! Items never share mutable state, so aggregate results are independent
//! of the worker count.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ImageRef, SegmenterBackend, VlmBackend};
use crate::engine::{run_inference, EngineConfig, EngineError, TerminationReason};
use crate::mask::{rle_decode, rle_encode, RasterMask, Rle};
use crate::metrics::{evaluate, iou, xiou_item, EvalPair, MetricsError, MetricsReport, SplitTag};
use crate::trace::{write_trace, TraceError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("missing image: {0}")]
    MissingImage(String),
    #[error("empty input: the manifest has no items")]
    EmptyInput,
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Which query column drives the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueryField {
    Short,
    #[default]
    Long,
}

/// One benchmark example, fully validated against its image.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub item_id: String,
    pub image_path: PathBuf,
    pub query_short: String,
    pub query_long: String,
    pub gt: RasterMask,
    pub others: Option<RasterMask>,
    pub split: SplitTag,
}

impl EvalItem {
    pub fn query(&self, field: QueryField) -> &str {
        match field {
            QueryField::Short => &self.query_short,
            QueryField::Long => &self.query_long,
        }
    }
}

#[derive(Deserialize)]
struct ManifestItem {
    item_id: String,
    image: String,
    query_short: String,
    query_long: String,
    gt: Rle,
    #[serde(default)]
    others: Option<Rle>,
    #[serde(default)]
    split: Option<SplitTag>,
}

#[derive(Deserialize)]
struct ManifestFile {
    #[allow(dead_code)]
    #[serde(default)]
    version: u32,
    items: Vec<ManifestItem>,
}

/// Load and validate a dataset manifest. Image paths resolve relative to
/// the manifest's directory; every mask must match its image's dimensions.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<EvalItem>, BenchError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| BenchError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    let manifest: ManifestFile =
        serde_json::from_str(&text).map_err(|e| BenchError::MalformedManifest(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen_ids = HashSet::new();
    let mut items = Vec::with_capacity(manifest.items.len());
    for (idx, item) in manifest.items.into_iter().enumerate() {
        let describe = |detail: String| {
            BenchError::MalformedManifest(format!(
                "item {} ('{}'): {detail}",
                idx, item.item_id
            ))
        };
        if item.item_id.trim().is_empty() {
            return Err(describe("item_id is empty".into()));
        }
        if !seen_ids.insert(item.item_id.clone()) {
            return Err(describe("duplicate item_id".into()));
        }
        if item.query_short.trim().is_empty() || item.query_long.trim().is_empty() {
            return Err(describe("both query_short and query_long are required".into()));
        }
        let image_path = base.join(&item.image);
        if !image_path.is_file() {
            return Err(BenchError::MissingImage(image_path.display().to_string()));
        }
        let (img_w, img_h) = image::image_dimensions(&image_path)
            .map_err(|e| describe(format!("cannot read image: {e}")))?;
        if (item.gt.width(), item.gt.height()) != (img_w, img_h) {
            return Err(describe(format!(
                "gt mask is {}x{} but the image is {img_w}x{img_h}",
                item.gt.width(),
                item.gt.height()
            )));
        }
        let gt = rle_decode(&item.gt, img_w, img_h).map_err(|e| describe(e.to_string()))?;
        let others = match item.others {
            Some(rle) => {
                if (rle.width(), rle.height()) != (img_w, img_h) {
                    return Err(describe(format!(
                        "others mask is {}x{} but the image is {img_w}x{img_h}",
                        rle.width(),
                        rle.height()
                    )));
                }
                Some(rle_decode(&rle, img_w, img_h).map_err(|e| describe(e.to_string()))?)
            }
            None => None,
        };
        items.push(EvalItem {
            item_id: item.item_id,
            image_path,
            query_short: item.query_short,
            query_long: item.query_long,
            gt,
            others,
            split: item.split.unwrap_or(SplitTag::None),
        });
    }
    Ok(items)
}

/// Hands each worker its own chat backend. Scripted backends must replay
/// from turn zero per item; stateless live clients can be shared.
pub trait VlmSource: Send + Sync {
    fn vlm(&self) -> Box<dyn VlmBackend>;
}

impl VlmSource for crate::clients::ScriptedVlm {
    fn vlm(&self) -> Box<dyn VlmBackend> {
        Box::new(self.fresh())
    }
}

/// Share one thread-safe backend across all items.
pub struct SharedVlm(pub Arc<dyn VlmBackend>);

impl VlmSource for SharedVlm {
    fn vlm(&self) -> Box<dyn VlmBackend> {
        Box::new(self.0.clone())
    }
}

/// Batch-run settings on top of the per-session engine config.
#[derive(Debug, Clone, Default)]
pub struct BenchConfig {
    pub engine: EngineConfig,
    pub query_field: QueryField,
    /// Worker count; 0 means one worker.
    pub jobs: usize,
    /// Every session trace is written here as `<item_id>.jsonl` when set.
    pub trace_dir: Option<PathBuf>,
}

/// Outcome of one benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item_id: String,
    pub split: SplitTag,
    pub prediction: Rle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    pub iou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xiou: Option<f64>,
    pub reasoning_steps: u32,
    pub termination: TerminationReason,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn run_one(
    item: &EvalItem,
    vlm: &dyn VlmBackend,
    seg: &dyn SegmenterBackend,
    config: &BenchConfig,
) -> Result<(RunRecord, EvalPair), BenchError> {
    let empty = || RasterMask::empty(item.gt.width(), item.gt.height()).expect("gt is non-zero");
    let (prediction, reasoning_steps, termination, note) =
        match ImageRef::load(&item.image_path) {
            Ok(image) => match run_inference(
                &image,
                item.query(config.query_field),
                vlm,
                seg,
                &config.engine,
            ) {
                Ok((mask, trace)) => {
                    let mut note = String::new();
                    if let Some(dir) = &config.trace_dir {
                        std::fs::create_dir_all(dir).map_err(|e| BenchError::Io {
                            path: dir.display().to_string(),
                            source: e,
                        })?;
                        let path = dir.join(format!("{}.jsonl", sanitize_id(&item.item_id)));
                        write_trace(&trace, &path)?;
                        note = path.display().to_string();
                    }
                    (mask, trace.reasoning_steps, trace.termination, note)
                }
                Err(err) => (
                    empty(),
                    0,
                    TerminationReason::Unrecoverable,
                    format!("engine error: {err}"),
                ),
            },
            Err(err) => (
                empty(),
                0,
                TerminationReason::Unrecoverable,
                format!("image load failed: {err}"),
            ),
        };

    let item_iou = iou(&prediction, &item.gt).map_err(MetricsError::from)?;
    let item_xiou = match &item.others {
        Some(o) => Some(xiou_item(&prediction, o).map_err(MetricsError::from)?),
        None => None,
    };
    let trace_path = (!note.is_empty() && note.ends_with(".jsonl")).then(|| note.clone());
    let record = RunRecord {
        item_id: item.item_id.clone(),
        split: item.split,
        prediction: rle_encode(&prediction),
        trace_path,
        iou: item_iou,
        xiou: item_xiou,
        reasoning_steps,
        termination,
        note: if note.ends_with(".jsonl") { String::new() } else { note },
    };
    let pair = EvalPair::new(
        item.item_id.clone(),
        prediction,
        item.gt.clone(),
        item.others.clone(),
        item.split,
    )?;
    Ok((record, pair))
}

/// Run every item through the agent and aggregate the metrics. Per-item
/// trouble never aborts the batch: a failed item scores whatever partial
/// mask came back (or an empty one) with the failure noted on its record.
pub fn run_benchmark(
    items: &[EvalItem],
    vlm_source: &dyn VlmSource,
    seg: &dyn SegmenterBackend,
    config: &BenchConfig,
) -> Result<(MetricsReport, Vec<RunRecord>), BenchError> {
    if items.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    config.engine.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    let results: Vec<Result<(RunRecord, EvalPair), BenchError>> = pool.install(|| {
        items
            .par_iter()
            .map(|item| run_one(item, vlm_source.vlm().as_ref(), seg, config))
            .collect()
    });
    let mut records = Vec::with_capacity(items.len());
    let mut pairs = Vec::with_capacity(items.len());
    for result in results {
        let (record, pair) = result?;
        records.push(record);
        pairs.push(pair);
    }
    let report = evaluate(&pairs)?;
    Ok((report, records))
}

/// Report serialization targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Jsonl,
}

/// Write one report format under `out_dir` and return the files written.
/// The CSV format also emits a per-item table for downstream analysis.
pub fn emit_report(
    report: &MetricsReport,
    records: &[RunRecord],
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, BenchError> {
    if report.per_item.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| BenchError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let write = |name: &str, contents: String| -> Result<PathBuf, BenchError> {
        let path = out_dir.join(name);
        std::fs::write(&path, contents).map_err(|e| BenchError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(path)
    };
    match format {
        ReportFormat::Csv => {
            let mut per_item =
                String::from("item_id,split,iou,xiou,reasoning_steps,termination\n");
            for r in records {
                per_item.push_str(&format!(
                    "{},{},{:.4},{},{},{}\n",
                    r.item_id,
                    r.split.label(),
                    r.iou,
                    r.xiou.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
                    r.reasoning_steps,
                    serde_json::to_value(r.termination)
                        .expect("termination serializes")
                        .as_str()
                        .expect("termination is a string")
                ));
            }
            Ok(vec![
                write("report.csv", report.to_csv())?,
                write("per_item.csv", per_item)?,
            ])
        }
        ReportFormat::Markdown => Ok(vec![write("report.md", report.to_markdown())?]),
        ReportFormat::Jsonl => {
            let mut out = String::new();
            for r in records {
                out.push_str(&serde_json::to_string(r).expect("records serialize"));
                out.push('\n');
            }
            Ok(vec![write("records.jsonl", out)?])
        }
    }
}

#[derive(Deserialize)]
struct PredictionEntry {
    item_id: String,
    mask: Rle,
}

#[derive(Deserialize)]
struct PredictionsFile {
    #[allow(dead_code)]
    #[serde(default)]
    version: u32,
    predictions: Vec<PredictionEntry>,
}

/// Score a precomputed prediction manifest against the dataset, no agent
/// involved. Every item must have exactly one prediction of matching size.
pub fn evaluate_predictions(
    items: &[EvalItem],
    predictions_path: &Path,
) -> Result<MetricsReport, BenchError> {
    if items.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    let text = std::fs::read_to_string(predictions_path).map_err(|e| BenchError::Io {
        path: predictions_path.display().to_string(),
        source: e,
    })?;
    let file: PredictionsFile =
        serde_json::from_str(&text).map_err(|e| BenchError::MalformedManifest(e.to_string()))?;
    let mut by_id: HashMap<String, Rle> = HashMap::new();
    for entry in file.predictions {
        if by_id.insert(entry.item_id.clone(), entry.mask).is_some() {
            return Err(BenchError::MalformedManifest(format!(
                "duplicate prediction for item '{}'",
                entry.item_id
            )));
        }
    }
    let mut pairs = Vec::with_capacity(items.len());
    for item in items {
        let rle = by_id.remove(&item.item_id).ok_or_else(|| {
            BenchError::MalformedManifest(format!("no prediction for item '{}'", item.item_id))
        })?;
        let (w, h) = (item.gt.width(), item.gt.height());
        if (rle.width(), rle.height()) != (w, h) {
            return Err(BenchError::MalformedManifest(format!(
                "prediction for '{}' is {}x{}, expected {w}x{h}",
                item.item_id,
                rle.width(),
                rle.height()
            )));
        }
        let prediction = rle_decode(&rle, w, h)
            .map_err(|e| BenchError::MalformedManifest(format!("item '{}': {e}", item.item_id)))?;
        pairs.push(EvalPair::new(
            item.item_id.clone(),
            prediction,
            item.gt.clone(),
            item.others.clone(),
            item.split,
        )?);
    }
    Ok(evaluate(&pairs)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::clients::{ClientError, ScoredMask, ScriptedVlm};
    use crate::mask::EditOp;
    use crate::protocol::{serialize_action, AgentAction};
    use image::{Rgb, RgbImage};

    pub(crate) fn rows_mask(width: u32, height: u32, rows: &[u32]) -> RasterMask {
        RasterMask::from_fn(width, height, |r, _| rows.contains(&r)).unwrap()
    }

    /// Write a dataset of `n` items into `dir`: one 8x8 image per item, a
    /// distinct gt stripe, and an `others` stripe disjoint from gt.
    pub(crate) fn write_synthetic_dataset(dir: &Path, n: usize) -> PathBuf {
        let image_dir = dir.join("images");
        std::fs::create_dir_all(&image_dir).unwrap();
        let mut items = Vec::new();
        for i in 0..n {
            let name = format!("item{i}");
            let img = RgbImage::from_fn(8, 8, |x, y| {
                Rgb([((x * 30 + i as u32) % 255) as u8, (y * 30 % 255) as u8, 120])
            });
            img.save(image_dir.join(format!("{name}.png"))).unwrap();
            let gt_row = (i % 4) as u32;
            let gt = rows_mask(8, 8, &[gt_row]);
            let others = rows_mask(8, 8, &[gt_row + 4]);
            items.push(serde_json::json!({
                "item_id": name,
                "image": format!("images/{name}.png"),
                "query_short": format!("stripe {i}"),
                "query_long": format!("Segment the horizontal stripe number {i}, nothing else."),
                "gt": rle_encode(&gt),
                "others": rle_encode(&others),
                "split": if i % 2 == 0 { "ad-hoc" } else { "common" },
            }));
        }
        let manifest = dir.join("manifest.json");
        std::fs::write(
            &manifest,
            serde_json::json!({"version": 1, "items": items}).to_string(),
        )
        .unwrap();
        manifest
    }

    /// Segmenter that answers the phrase "target" with each item's gt (as
    /// recorded in the dataset construction above).
    pub(crate) struct GtSegmenter;

    impl SegmenterBackend for GtSegmenter {
        fn segment(
            &self,
            image: &ImageRef,
            phrase: &str,
        ) -> Result<Vec<ScoredMask>, ClientError> {
            if phrase != "target" {
                return Ok(vec![]);
            }
            let i: usize = image.image_id.trim_start_matches("item").parse().unwrap();
            Ok(vec![ScoredMask {
                score: 0.9,
                mask: rows_mask(8, 8, &[(i % 4) as u32]),
            }])
        }
    }

    /// Segmenter that always returns each item's others-union stripe.
    pub(crate) struct OthersSegmenter;

    impl SegmenterBackend for OthersSegmenter {
        fn segment(
            &self,
            image: &ImageRef,
            _phrase: &str,
        ) -> Result<Vec<ScoredMask>, ClientError> {
            let i: usize = image.image_id.trim_start_matches("item").parse().unwrap();
            Ok(vec![ScoredMask {
                score: 0.9,
                mask: rows_mask(8, 8, &[(i % 4) as u32 + 4]),
            }])
        }
    }

    /// Script reproducing the segmenter's first candidate, then finalizing.
    pub(crate) fn replicate_script() -> ScriptedVlm {
        ScriptedVlm::new(vec![
            "direct retrieval".into(),
            serialize_action(&AgentAction::SegmentPhrase {
                prompt: "target".into(),
            }),
            serialize_action(&AgentAction::UpdateWorkingMask {
                op: EditOp::Replace,
                candidate_ids: vec![1],
            }),
            "continue".into(),
            serialize_action(&AgentAction::Finalize {
                verified: true,
                reason: "matches".into(),
            }),
            "satisfied".into(),
        ])
    }

    #[test]
    fn load_dataset_validates_items() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 3);
        let items = load_dataset(&manifest).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].split, SplitTag::AdHoc);
        assert_eq!(items[1].split, SplitTag::Common);
        assert_eq!(items[0].gt.area(), 8);
    }

    #[test]
    fn load_dataset_rejects_wrong_size_rle() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 1);
        let mut doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
        doc["items"][0]["gt"] = serde_json::to_value(rle_encode(&rows_mask(4, 4, &[0]))).unwrap();
        std::fs::write(&manifest, doc.to_string()).unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        match err {
            BenchError::MalformedManifest(msg) => assert!(msg.contains("item0"), "{msg}"),
            other => panic!("expected MalformedManifest, got {other}"),
        }
    }

    #[test]
    fn load_dataset_rejects_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 1);
        std::fs::remove_file(dir.path().join("images/item0.png")).unwrap();
        assert!(matches!(
            load_dataset(&manifest).unwrap_err(),
            BenchError::MissingImage(_)
        ));
    }

    #[test]
    fn empty_manifest_yields_empty_list_and_runner_rejects_it() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.json");
        std::fs::write(&manifest, r#"{"version":1,"items":[]}"#).unwrap();
        let items = load_dataset(&manifest).unwrap();
        assert!(items.is_empty());
        let config = BenchConfig::default();
        assert!(matches!(
            run_benchmark(&items, &replicate_script(), &GtSegmenter, &config),
            Err(BenchError::EmptyInput)
        ));
    }

    #[test]
    fn perfect_replication_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 6);
        let items = load_dataset(&manifest).unwrap();
        let config = BenchConfig {
            jobs: 1,
            ..BenchConfig::default()
        };
        let (report, records) =
            run_benchmark(&items, &replicate_script(), &GtSegmenter, &config).unwrap();
        assert_eq!(report.total.giou, 1.0);
        assert_eq!(report.total.ciou, 1.0);
        assert_eq!(report.total.xiou, Some(0.0));
        assert_eq!(records.len(), 6);
        assert!(records
            .iter()
            .all(|r| r.termination == TerminationReason::Verified));
        assert!(records.iter().all(|r| r.reasoning_steps == 2));
    }

    #[test]
    fn others_returning_backend_scores_full_confusion() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 4);
        let items = load_dataset(&manifest).unwrap();
        let config = BenchConfig::default();
        let (report, records) =
            run_benchmark(&items, &replicate_script(), &OthersSegmenter, &config).unwrap();
        assert_eq!(report.total.xiou, Some(1.0));
        assert!(records.iter().all(|r| r.xiou == Some(1.0)));
        assert_eq!(report.total.giou, 0.0);
    }

    #[test]
    fn results_are_independent_of_worker_count() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 6);
        let items = load_dataset(&manifest).unwrap();
        let run = |jobs: usize| {
            let config = BenchConfig {
                jobs,
                ..BenchConfig::default()
            };
            run_benchmark(&items, &replicate_script(), &GtSegmenter, &config).unwrap()
        };
        let (report1, records1) = run(1);
        let (report4, records4) = run(4);
        assert_eq!(report1, report4);
        assert_eq!(records1, records4);
    }

    #[test]
    fn report_matches_freestanding_evaluation_of_stored_masks() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 5);
        let items = load_dataset(&manifest).unwrap();
        let config = BenchConfig::default();
        let (report, records) =
            run_benchmark(&items, &replicate_script(), &GtSegmenter, &config).unwrap();
        let pairs: Vec<EvalPair> = records
            .iter()
            .zip(&items)
            .map(|(r, item)| {
                let p = rle_decode(&r.prediction, 8, 8).unwrap();
                EvalPair::new(
                    item.item_id.clone(),
                    p,
                    item.gt.clone(),
                    item.others.clone(),
                    item.split,
                )
                .unwrap()
            })
            .collect();
        assert_eq!(evaluate(&pairs).unwrap(), report);
    }

    #[test]
    fn emitted_files_are_deterministic_and_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 6);
        let items = load_dataset(&manifest).unwrap();
        let config = BenchConfig::default();
        let (report, records) =
            run_benchmark(&items, &replicate_script(), &GtSegmenter, &config).unwrap();

        let out1 = dir.path().join("out1");
        let out2 = dir.path().join("out2");
        for fmt in [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Jsonl] {
            emit_report(&report, &records, fmt, &out1).unwrap();
            emit_report(&report, &records, fmt, &out2).unwrap();
        }
        for name in ["report.csv", "per_item.csv", "report.md", "records.jsonl"] {
            let a = std::fs::read(out1.join(name)).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        let csv = std::fs::read_to_string(out1.join("report.csv")).unwrap();
        // header + ad-hoc + common + total
        assert_eq!(csv.lines().count(), 4);
        let md = std::fs::read_to_string(out1.join("report.md")).unwrap();
        assert!(md.contains("| Total | 1.0000 | 1.0000 | 0.0000 |"));
        let jsonl = std::fs::read_to_string(out1.join("records.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 6);
    }

    #[test]
    fn short_and_long_queries_produce_distinct_runs() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 2);
        let items = load_dataset(&manifest).unwrap();
        for field in [QueryField::Short, QueryField::Long] {
            let config = BenchConfig {
                query_field: field,
                trace_dir: Some(dir.path().join(format!("traces-{field:?}"))),
                ..BenchConfig::default()
            };
            let (_, records) =
                run_benchmark(&items, &replicate_script(), &GtSegmenter, &config).unwrap();
            let trace_text = std::fs::read_to_string(
                dir.path().join(format!("traces-{field:?}/item0.jsonl")),
            )
            .unwrap();
            let expect = match field {
                QueryField::Short => items[0].query_short.clone(),
                QueryField::Long => items[0].query_long.clone(),
            };
            assert!(trace_text.contains(&serde_json::to_string(&expect).unwrap()[1..5]));
            assert!(records[0].trace_path.is_some());
        }
    }

    #[test]
    fn precomputed_predictions_score_without_an_agent() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 3);
        let items = load_dataset(&manifest).unwrap();
        let preds: Vec<serde_json::Value> = items
            .iter()
            .map(|item| {
                serde_json::json!({
                    "item_id": item.item_id,
                    "mask": rle_encode(&item.gt),
                })
            })
            .collect();
        let pred_path = dir.path().join("preds.json");
        std::fs::write(
            &pred_path,
            serde_json::json!({"version": 1, "predictions": preds}).to_string(),
        )
        .unwrap();
        let report = evaluate_predictions(&items, &pred_path).unwrap();
        assert_eq!(report.total.giou, 1.0);
        assert_eq!(report.total.xiou, Some(0.0));

        // a missing prediction is named
        let partial = serde_json::json!({"version": 1, "predictions": [preds[0]]});
        std::fs::write(&pred_path, partial.to_string()).unwrap();
        match evaluate_predictions(&items, &pred_path).unwrap_err() {
            BenchError::MalformedManifest(msg) => assert!(msg.contains("item1")),
            other => panic!("unexpected error {other}"),
        }
    }
}
