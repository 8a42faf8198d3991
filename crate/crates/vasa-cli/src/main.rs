//! Command-line front end for the vasa engine: single-image segmentation,
//! batch evaluation, trace replay, and agent-free metric scoring.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vasa::bench::{
    emit_report, evaluate_predictions, load_dataset, run_benchmark, BenchConfig, QueryField,
    ReportFormat, SharedVlm, VlmSource,
};
use vasa::clients::{
    load_fixture_oracle, HttpSegmenter, HttpVlm, ImageRef, ScriptedVlm, SegmenterBackend,
    VlmBackend,
};
use vasa::engine::{run_inference, EngineConfig};
use vasa::mask::RasterMask;
use vasa::trace::{read_trace, replay_trace, write_trace, TraceError};

#[derive(Debug, Parser)]
#[command(
    name = "vasa",
    version,
    about = "Agentic segmentation: construct masks by iterative Boolean edits over segmenter candidates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment one image for one query; writes mask.png and trace.jsonl.
    Segment(SegmentArgs),
    /// Run a dataset manifest through the agent and emit metric reports.
    Eval(EvalArgs),
    /// Verify that a trace reconstructs its final mask round by round.
    Replay(ReplayArgs),
    /// Score a precomputed prediction manifest against a dataset (no agent).
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum QueryFieldArg {
    Short,
    Long,
}

impl From<QueryFieldArg> for QueryField {
    fn from(v: QueryFieldArg) -> Self {
        match v {
            QueryFieldArg::Short => QueryField::Short,
            QueryFieldArg::Long => QueryField::Long,
        }
    }
}

/// Backend and engine flags shared by `segment` and `eval`.
#[derive(Debug, Args)]
struct RunArgs {
    /// Replay chat replies from a JSON script instead of a live model.
    #[arg(long, value_name = "FILE", conflicts_with = "vlm_endpoint")]
    scripted_vlm: Option<PathBuf>,
    /// Chat-completions-compatible endpoint base URL (e.g. http://host:8000/v1).
    #[arg(long, value_name = "URL")]
    vlm_endpoint: Option<String>,
    /// Model name sent to the live chat endpoint.
    #[arg(long, value_name = "NAME")]
    vlm_model: Option<String>,
    /// Bearer token for the chat endpoint (falls back to $VASA_VLM_API_KEY).
    #[arg(long, value_name = "TOKEN")]
    vlm_api_key: Option<String>,
    /// Serve segmentation requests from a fixture manifest instead of a
    /// live service.
    #[arg(long, value_name = "FILE", conflicts_with = "seg_endpoint")]
    scripted_seg: Option<PathBuf>,
    /// Segmenter service base URL (POST {url}/segment).
    #[arg(long, value_name = "URL")]
    seg_endpoint: Option<String>,
    /// Segmentation-round budget per item (default 20).
    #[arg(long)]
    max_rounds: Option<u32>,
    /// Run config file (JSON): engine knobs plus optional vlm_endpoint,
    /// vlm_model, vlm_api_key, seg_endpoint. Explicit flags win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Write every overlay shown to the model into this directory.
    #[arg(long, value_name = "DIR")]
    dump_overlays: Option<PathBuf>,
    /// HTTP timeout per backend request, seconds.
    #[arg(long, default_value_t = 60)]
    request_timeout_secs: u64,
    /// Wall-clock cap per item in seconds (default 300 for live backends,
    /// unlimited for scripted ones).
    #[arg(long, value_name = "SECS")]
    item_timeout_secs: Option<u64>,
}

/// On-disk run configuration: endpoints alongside the flattened engine
/// knobs, all optional.
#[derive(Debug, Default, serde::Deserialize)]
struct FileConfig {
    #[serde(default)]
    vlm_endpoint: Option<String>,
    #[serde(default)]
    vlm_model: Option<String>,
    #[serde(default)]
    vlm_api_key: Option<String>,
    #[serde(default)]
    seg_endpoint: Option<String>,
    #[serde(flatten)]
    engine: EngineConfig,
}

/// Fully resolved backends and engine settings for one invocation.
struct ResolvedRun {
    engine: EngineConfig,
    seg: Arc<dyn SegmenterBackend>,
    vlm: Arc<dyn VlmBackend>,
    scripted_vlm: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ResolvedRun> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str::<FileConfig>(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => FileConfig {
                engine: EngineConfig::default(),
                ..FileConfig::default()
            },
        };
        let vlm_endpoint = self.vlm_endpoint.clone().or(file.vlm_endpoint);
        let vlm_model = self.vlm_model.clone().or(file.vlm_model);
        let vlm_api_key = self
            .vlm_api_key
            .clone()
            .or(file.vlm_api_key)
            .or_else(|| std::env::var("VASA_VLM_API_KEY").ok());
        let seg_endpoint = self.seg_endpoint.clone().or(file.seg_endpoint);
        let live = vlm_endpoint.is_some() || seg_endpoint.is_some();

        let mut engine = file.engine;
        if let Some(rounds) = self.max_rounds {
            engine.max_rounds = rounds;
        }
        if let Some(dir) = &self.dump_overlays {
            engine.dump_overlays = Some(dir.clone());
        }
        match self.item_timeout_secs {
            Some(secs) => engine.max_wall_time_ms = Some(secs * 1000),
            None if live && engine.max_wall_time_ms.is_none() => {
                engine.max_wall_time_ms = Some(300_000);
            }
            None => {}
        }

        let timeout = Duration::from_secs(self.request_timeout_secs);
        let seg: Arc<dyn SegmenterBackend> = if let Some(path) = &self.scripted_seg {
            Arc::new(load_fixture_oracle(path)?)
        } else if let Some(endpoint) = seg_endpoint {
            Arc::new(HttpSegmenter::new(endpoint, timeout))
        } else {
            bail!("a segmenter is required: pass --scripted-seg <fixture> or --seg-endpoint <url>");
        };
        let vlm: Arc<dyn VlmBackend> = if let Some(path) = &self.scripted_vlm {
            Arc::new(ScriptedVlm::from_file(path)?)
        } else if let Some(endpoint) = vlm_endpoint {
            let model = vlm_model
                .ok_or_else(|| anyhow::anyhow!("--vlm-model is required with --vlm-endpoint"))?;
            Arc::new(HttpVlm::new(endpoint, model, vlm_api_key, timeout))
        } else {
            bail!("a chat model is required: pass --scripted-vlm <script> or --vlm-endpoint <url>");
        };
        Ok(ResolvedRun {
            engine,
            seg,
            vlm,
            scripted_vlm: self.scripted_vlm.clone(),
        })
    }
}

impl ResolvedRun {
    fn vlm_source(&self) -> Result<Box<dyn VlmSource>> {
        if let Some(path) = &self.scripted_vlm {
            return Ok(Box::new(ScriptedVlm::from_file(path)?));
        }
        Ok(Box::new(SharedVlm(self.vlm.clone())))
    }
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Input image (PNG/JPEG); the file stem is the image id fixtures key on.
    image: PathBuf,
    /// The concept to segment.
    query: String,
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for mask.png and trace.jsonl.
    #[arg(long, default_value = "vasa-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Which query column drives the agent.
    #[arg(long, value_enum, default_value_t = QueryFieldArg::Long)]
    query_field: QueryFieldArg,
    /// Worker count for the batch.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for reports and traces.
    #[arg(long, default_value = "vasa-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Trace JSONL produced by `segment` or `eval`.
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Dataset manifest (JSON) with ground truth.
    #[arg(long)]
    manifest: PathBuf,
    /// Prediction manifest: {"predictions":[{"item_id","mask"}...]}.
    #[arg(long)]
    predictions: PathBuf,
    /// Output directory for report.csv and report.md.
    #[arg(long, default_value = "vasa-out")]
    out: PathBuf,
}

fn mask_to_png(mask: &RasterMask, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        image::Luma([if mask.get(y, x) { 255u8 } else { 0 }])
    });
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let run = args.run.resolve()?;
    let image = ImageRef::load(&args.image)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let (mask, trace) = run_inference(&image, &args.query, &run.vlm, &run.seg, &run.engine)?;
    let mask_path = args.out.join("mask.png");
    let trace_path = args.out.join("trace.jsonl");
    mask_to_png(&mask, &mask_path)?;
    write_trace(&trace, &trace_path)?;
    println!(
        "termination: {}  mask area: {} px  reasoning steps: {}",
        serde_json::to_value(trace.termination)?
            .as_str()
            .unwrap_or("?"),
        mask.area(),
        trace.reasoning_steps
    );
    println!("wrote {}", mask_path.display());
    println!("wrote {}", trace_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let items = load_dataset(&args.manifest)?;
    let run = args.run.resolve()?;
    let config = BenchConfig {
        engine: run.engine.clone(),
        query_field: args.query_field.into(),
        jobs: args.jobs,
        trace_dir: Some(args.out.join("traces")),
    };
    let vlm_source = run.vlm_source()?;
    let (report, records) = run_benchmark(&items, vlm_source.as_ref(), &run.seg, &config)?;
    for fmt in [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Jsonl] {
        for path in emit_report(&report, &records, fmt, &args.out)? {
            println!("wrote {}", path.display());
        }
    }
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let trace = read_trace(&args.trace)?;
    match replay_trace(&trace) {
        Ok(report) => {
            println!(
                "trace verified: {} entries, {} updates recomputed, final area {} px",
                report.entries, report.updates_verified, report.final_area
            );
            Ok(())
        }
        Err(TraceError::Divergence { round, detail }) => {
            bail!("trace verification failed at round {round}: {detail}")
        }
        Err(other) => Err(other.into()),
    }
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let items = load_dataset(&args.manifest)?;
    let report = evaluate_predictions(&items, &args.predictions)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let csv_path = args.out.join("report.csv");
    let md_path = args.out.join("report.md");
    std::fs::write(&csv_path, report.to_csv())?;
    std::fs::write(&md_path, report.to_markdown())?;
    println!("wrote {}", csv_path.display());
    println!("wrote {}", md_path.display());
    print!("{}", report.to_markdown());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Segment(args) => cmd_segment(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Metrics(args) => cmd_metrics(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
