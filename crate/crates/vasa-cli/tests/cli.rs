//! End-to-end CLI checks driven through the compiled binary with scripted
//! backends and synthetic fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vasa::mask::{rle_encode, EditOp, RasterMask};
use vasa::protocol::{serialize_action, AgentAction};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vasa"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn disk_mask(w: u32, h: u32, cx: i64, cy: i64, radius: i64) -> RasterMask {
    RasterMask::from_fn(w, h, |r, c| {
        let dr = r as i64 - cy;
        let dc = c as i64 - cx;
        dr * dr + dc * dc <= radius * radius
    })
    .unwrap()
}

struct CatFixture {
    image: PathBuf,
    fixture: PathBuf,
    script: PathBuf,
    expected: RasterMask,
}

/// Build the exclusion scenario: a head disk, two ear blobs, one eye pair;
/// the script replaces with the head, removes the ears, removes the eyes,
/// then finalizes.
fn write_cat_fixture(dir: &Path) -> CatFixture {
    let (w, h) = (64, 64);
    let head = disk_mask(w, h, 32, 36, 20);
    let ear_left = disk_mask(w, h, 16, 18, 6);
    let ear_right = disk_mask(w, h, 48, 18, 6);
    let eyes = disk_mask(w, h, 24, 32, 3)
        .union(&disk_mask(w, h, 40, 32, 3))
        .unwrap();
    let ears = ear_left.union(&ear_right).unwrap();
    let expected = head.subtract(&ears.union(&eyes).unwrap()).unwrap();

    let image = dir.join("cat.png");
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 3) as u8, (y * 3) as u8, 90]))
        .save(&image)
        .unwrap();

    let fixture = dir.join("fixture.json");
    std::fs::write(
        &fixture,
        serde_json::json!({
            "version": 1,
            "images": {
                "cat": {
                    "cat head": [{"score": 0.95, "rle": rle_encode(&head)}],
                    "cat ears": [
                        {"score": 0.9, "rle": rle_encode(&ear_left)},
                        {"score": 0.85, "rle": rle_encode(&ear_right)},
                    ],
                    "cat eyes": [{"score": 0.8, "rle": rle_encode(&eyes)}],
                }
            }
        })
        .to_string(),
    )
    .unwrap();

    let seg = |p: &str| serialize_action(&AgentAction::SegmentPhrase { prompt: p.into() });
    let update = |op: EditOp, ids: &[u32]| {
        serialize_action(&AgentAction::UpdateWorkingMask {
            op,
            candidate_ids: ids.to_vec(),
        })
    };
    let script = dir.join("script.json");
    std::fs::write(
        &script,
        serde_json::json!({
            "version": 1,
            "replies": [
                "oversegment-and-remove",
                seg("cat head"),
                update(EditOp::Replace, &[1]),
                "extra regions: the ears and eyes are still included",
                seg("cat ears"),
                update(EditOp::Remove, &[1, 2]),
                "extra regions: the eyes remain",
                seg("cat eyes"),
                update(EditOp::Remove, &[1]),
                "satisfied",
                serialize_action(&AgentAction::Finalize { verified: true, reason: "constructed".into() }),
                "satisfied",
            ]
        })
        .to_string(),
    )
    .unwrap();

    CatFixture {
        image,
        fixture,
        script,
        expected,
    }
}

#[test]
fn segment_writes_mask_and_replayable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_cat_fixture(dir.path());
    let out_dir = dir.path().join("out");

    let out = run(bin()
        .arg("segment")
        .arg(&fx.image)
        .arg("the cat's head without the ears and eyes")
        .arg("--scripted-vlm")
        .arg(&fx.script)
        .arg("--scripted-seg")
        .arg(&fx.fixture)
        .arg("--out")
        .arg(&out_dir));
    assert!(
        out.status.success(),
        "segment failed: {}",
        stderr_of(&out)
    );

    // mask.png is a binary 0/255 image matching the expected construction
    let mask_img = image::open(out_dir.join("mask.png")).unwrap().to_luma8();
    assert_eq!(mask_img.dimensions(), (64, 64));
    for y in 0..64u32 {
        for x in 0..64u32 {
            let px = mask_img.get_pixel(x, y).0[0];
            assert!(px == 0 || px == 255);
            assert_eq!(px == 255, fx.expected.get(y, x), "pixel ({x},{y})");
        }
    }

    // the written trace replays clean through the CLI
    let trace_path = out_dir.join("trace.jsonl");
    let replay = run(bin().arg("replay").arg("--trace").arg(&trace_path));
    assert!(replay.status.success(), "{}", stderr_of(&replay));

    // tampering one op is caught with a nonzero exit naming the round
    let tampered_path = dir.path().join("tampered.jsonl");
    let text = std::fs::read_to_string(&trace_path).unwrap();
    std::fs::write(&tampered_path, text.replace("\"remove\"", "\"add\"")).unwrap();
    let replay = run(bin().arg("replay").arg("--trace").arg(&tampered_path));
    assert_eq!(replay.status.code(), Some(1));
    assert!(stderr_of(&replay).contains("round"), "{}", stderr_of(&replay));
}

#[test]
fn dump_overlays_writes_round_views() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_cat_fixture(dir.path());
    let overlays = dir.path().join("overlays");
    let out = run(bin()
        .arg("segment")
        .arg(&fx.image)
        .arg("the cat's head without the ears and eyes")
        .arg("--scripted-vlm")
        .arg(&fx.script)
        .arg("--scripted-seg")
        .arg(&fx.fixture)
        .arg("--out")
        .arg(dir.path().join("out2"))
        .arg("--dump-overlays")
        .arg(&overlays));
    assert!(out.status.success(), "{}", stderr_of(&out));
    let dumped: Vec<_> = std::fs::read_dir(&overlays).unwrap().collect();
    assert!(!dumped.is_empty(), "expected overlay PNGs");
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let out = run(bin().arg("segment").arg("--definitely-not-a-flag"));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).to_lowercase().contains("usage"));
}

#[test]
fn missing_backend_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_cat_fixture(dir.path());
    let out = run(bin().arg("segment").arg(&fx.image).arg("query"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("segmenter"));
}

fn write_eval_dataset(dir: &Path, n: usize) -> (PathBuf, PathBuf, PathBuf) {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).unwrap();
    let mut items = Vec::new();
    let mut fixture_images = serde_json::Map::new();
    for i in 0..n {
        let name = format!("item{i}");
        image::RgbImage::from_pixel(8, 8, image::Rgb([40, 80, (10 * i) as u8]))
            .save(image_dir.join(format!("{name}.png")))
            .unwrap();
        let gt = RasterMask::from_fn(8, 8, |r, _| r == (i % 4) as u32).unwrap();
        let others = RasterMask::from_fn(8, 8, |r, _| r == (i % 4) as u32 + 4).unwrap();
        items.push(serde_json::json!({
            "item_id": name,
            "image": format!("images/{name}.png"),
            "query_short": "stripe",
            "query_long": format!("Segment stripe number {i} and exclude everything else."),
            "gt": rle_encode(&gt),
            "others": rle_encode(&others),
            "split": if i % 2 == 0 { "ad-hoc" } else { "common" },
        }));
        fixture_images.insert(
            name,
            serde_json::json!({
                "target": [{"score": 0.9, "rle": rle_encode(&gt)}],
            }),
        );
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(
        &manifest,
        serde_json::json!({"version": 1, "items": items}).to_string(),
    )
    .unwrap();
    let fixture = dir.join("fixture.json");
    std::fs::write(
        &fixture,
        serde_json::json!({"version": 1, "images": fixture_images}).to_string(),
    )
    .unwrap();
    let script = dir.join("script.json");
    std::fs::write(
        &script,
        serde_json::json!({
            "version": 1,
            "replies": [
                "direct retrieval",
                serialize_action(&AgentAction::SegmentPhrase { prompt: "target".into() }),
                serialize_action(&AgentAction::UpdateWorkingMask {
                    op: EditOp::Replace,
                    candidate_ids: vec![1],
                }),
                "continue",
                serialize_action(&AgentAction::Finalize { verified: true, reason: "ok".into() }),
                "satisfied",
            ]
        })
        .to_string(),
    )
    .unwrap();
    (manifest, fixture, script)
}

#[test]
fn eval_emits_reports_and_query_fields_differ() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, fixture, script) = write_eval_dataset(dir.path(), 4);

    let run_eval = |field: &str, out: &Path| {
        let o = run(bin()
            .arg("eval")
            .arg("--manifest")
            .arg(&manifest)
            .arg("--scripted-vlm")
            .arg(&script)
            .arg("--scripted-seg")
            .arg(&fixture)
            .arg("--query-field")
            .arg(field)
            .arg("--jobs")
            .arg("2")
            .arg("--out")
            .arg(out));
        assert!(o.status.success(), "{}", stderr_of(&o));
    };
    let out_short = dir.path().join("short");
    let out_long = dir.path().join("long");
    run_eval("short", &out_short);
    run_eval("long", &out_long);

    for name in ["report.csv", "report.md", "records.jsonl", "per_item.csv"] {
        assert!(out_short.join(name).is_file(), "{name} missing");
    }
    let csv = std::fs::read_to_string(out_short.join("report.csv")).unwrap();
    assert!(csv.contains("total,4,1.0000,1.0000,0.0000"));

    // the two query fields drive distinct runs: traces embed different queries
    let t_short = std::fs::read_to_string(out_short.join("traces/item0.jsonl")).unwrap();
    let t_long = std::fs::read_to_string(out_long.join("traces/item0.jsonl")).unwrap();
    assert_ne!(t_short, t_long);
    assert!(t_short.contains("\"stripe\""));
    assert!(t_long.contains("Segment stripe number 0"));
}

#[test]
fn config_file_drives_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_cat_fixture(dir.path());
    let config_path = dir.path().join("engine.json");
    // snapshots off: the trace must omit working-mask snapshots
    std::fs::write(
        &config_path,
        serde_json::json!({"snapshot_masks": false, "stall_window": 5}).to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(bin()
        .arg("segment")
        .arg(&fx.image)
        .arg("the cat's head without the ears and eyes")
        .arg("--scripted-vlm")
        .arg(&fx.script)
        .arg("--scripted-seg")
        .arg(&fx.fixture)
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success(), "{}", stderr_of(&out));
    let trace = std::fs::read_to_string(out_dir.join("trace.jsonl")).unwrap();
    assert!(!trace.contains("working_rle"));
    assert!(trace.contains("\"stall_window\":5"));
}

#[test]
fn metrics_scores_precomputed_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _, _) = write_eval_dataset(dir.path(), 3);
    let preds: Vec<serde_json::Value> = (0..3)
        .map(|i| {
            let gt = RasterMask::from_fn(8, 8, |r, _| r == (i % 4) as u32).unwrap();
            serde_json::json!({"item_id": format!("item{i}"), "mask": rle_encode(&gt)})
        })
        .collect();
    let pred_path = dir.path().join("preds.json");
    std::fs::write(
        &pred_path,
        serde_json::json!({"version": 1, "predictions": preds}).to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("metrics-out");
    let out = run(bin()
        .arg("metrics")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--predictions")
        .arg(&pred_path)
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success(), "{}", stderr_of(&out));
    let md = std::fs::read_to_string(out_dir.join("report.md")).unwrap();
    assert!(md.contains("| Total | 1.0000 | 1.0000 | 0.0000 |"));
}
