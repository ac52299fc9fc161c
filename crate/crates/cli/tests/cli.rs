use std::path::Path;
use std::process::Command;

use glacio::dataset::{write_labeled, ClassLegend, LabeledFrame};
use glacio::model::{argmax_mask, image_batch, save_checkpoint, NetworkSpec, ParameterSet};
use glacio::synth::generate_scene_set;

fn glacio(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_glacio"))
        .args(args)
        .current_dir(dir)
        .env_remove("GLACIO_SEED")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn labelme(image: &str, shapes: &[(&str, [[f64; 2]; 4])]) -> String {
    let shapes: Vec<serde_json::Value> = shapes
        .iter()
        .map(|(label, pts)| serde_json::json!({"label": label, "points": pts, "shape_type": "polygon"}))
        .collect();
    serde_json::json!({"imagePath": image, "imageHeight": 8, "imageWidth": 8, "shapes": shapes}).to_string()
}

const SQUARE: [[f64; 2]; 4] = [[1.0, 1.0], [5.0, 1.0], [5.0, 5.0], [1.0, 5.0]];

#[test]
fn ingest_contract() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann");
    std::fs::create_dir_all(&ann).unwrap();
    let (code, _, err) = glacio(dir.path(), &["ingest", "--annotations", "ann", "--out", "ds"]);
    assert_eq!(code, 2);
    assert!(err.contains("no annotations found"), "{err}");

    for (i, label) in ["water", "ice", "snow"].iter().enumerate() {
        let doc = labelme(&format!("cam0_2017012{i}_1030.jpg"), &[(label, SQUARE)]);
        std::fs::write(ann.join(format!("doc{i}.json")), doc).unwrap();
    }
    let (code, out, err) = glacio(
        dir.path(),
        &["ingest", "--annotations", "ann", "--out", "ds", "--camera-id", "cam0"],
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("ingested 3 annotations"));
    let index = std::fs::read_to_string(dir.path().join("ds/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 4);
    assert!(index.contains("2017-01-21T10:30:00,cam0"));
    assert_eq!(std::fs::read_dir(dir.path().join("ds/masks")).unwrap().count(), 3);
    let freqs = std::fs::read_to_string(dir.path().join("ds/class_frequencies.csv")).unwrap();
    assert!(freqs.starts_with("class,frequency\nbackground,"));

    std::fs::write(ann.join("doc9.json"), labelme("cam0_20170130.jpg", &[("slush", SQUARE)])).unwrap();
    let (code, _, err) = glacio(dir.path(), &["ingest", "--annotations", "ann", "--out", "ds2"]);
    assert_eq!(code, 2);
    assert!(err.contains("slush") && err.contains("doc9.json"), "{err}");
}

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        base_channels: 8,
        aspp_channels: 16,
        decoder_channels: 16,
        low_level_channels: 8,
        ..NetworkSpec::with_classes(5)
    }
}

fn ready_model(seed: u64) -> ParameterSet<f32> {
    let mut p = ParameterSet::<f32>::build(&small_spec(), seed).unwrap();
    let stats = p
        .running_stats()
        .iter()
        .map(|(_, s)| {
            let mut s = s.clone();
            s.initialized = true;
            s
        })
        .collect();
    p.set_running_stats(stats).unwrap();
    p
}

/// Scenes whose ground truth is the model's own prediction, split over two
/// cameras.
fn self_labeled_fixture(dir: &Path) -> usize {
    let model = ready_model(3);
    let mut frames: Vec<LabeledFrame> = generate_scene_set(6, 32, 11).unwrap();
    for (i, f) in frames.iter_mut().enumerate() {
        let logits = model.predict(&image_batch::<f32>(&[&f.image]).unwrap()).unwrap();
        f.mask = argmax_mask(&logits, 0);
        f.meta.camera_id = if i < 4 { "cam0".into() } else { "cam1".into() };
    }
    write_labeled(&dir.join("data"), &frames, &ClassLegend::ice_segmentation()).unwrap();
    save_checkpoint(&dir.join("model.ckpt"), &model, Default::default()).unwrap();
    frames.iter().filter(|f| f.meta.camera_id == "cam1").count()
}

#[test]
fn eval_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cam1 = self_labeled_fixture(dir.path());
    let (code, out, err) = glacio(
        dir.path(),
        &["eval", "--checkpoint", "model.ckpt", "--index", "data/index.csv", "--out", "ev"],
    );
    assert_eq!(code, 0, "{err}");
    let row = out.lines().nth(1).unwrap();
    for cell in row.split_whitespace() {
        assert!(cell == "1.00" || cell == "-", "{out}");
    }
    assert!(row.trim_end().ends_with("1.00"));
    assert!(out.contains("6 test frames"));

    let (code, out, err) = glacio(
        dir.path(),
        &[
            "eval", "--checkpoint", "model.ckpt", "--index", "data/index.csv", "--out", "ev2", "--split",
            "cross_camera", "--train", "cam0", "--test", "cam1",
        ],
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains(&format!("{cam1} test frames")), "{out}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev2/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pixels"], (cam1 * 32 * 32) as u64);
    assert!(summary["weighted_miou"].is_number());
    let pr = std::fs::read_to_string(dir.path().join("ev2/pr.csv")).unwrap();
    assert!(pr.starts_with("class,threshold,precision,recall\n"));

    let (code, _, err) = glacio(dir.path(), &["eval", "--checkpoint", "nope.ckpt", "--index", "data/index.csv"]);
    assert_eq!(code, 2);
    assert!(err.contains("nope.ckpt"), "{err}");
}

#[test]
fn config_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (code, dumped, _) = glacio(dir.path(), &["--set", "train.base_lr=0.5", "config"]);
    assert_eq!(code, 0);
    std::fs::write(dir.path().join("run.toml"), &dumped).unwrap();
    let (code, again, _) = glacio(dir.path(), &["--config", "run.toml", "config"]);
    assert_eq!(code, 0);
    assert_eq!(again, dumped);
    assert!(dumped.contains("base_lr = 0.5"));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nlr = 1\n").unwrap();
    let (code, _, err) = glacio(dir.path(), &["--config", "bad.toml", "config"]);
    assert_eq!(code, 2);
    assert!(err.contains("lr"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_glacio"))
        .args(["config"])
        .env("GLACIO_SEED", "42")
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.matches("seed = 42").count() >= 4, "{text}");

    for sub in ["ingest", "synth", "train", "eval", "infer", "series", "plot"] {
        let (code, out, _) = glacio(dir.path(), &[sub, "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("Usage"), "{sub}");
    }
}

#[test]
fn season_series_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let season_args = [
        "--set", "synth.season.n_days=40",
        "--set", "synth.season.freeze_events=[[8, 18], [25, 35]]",
        "--set", "synth.season.gap_days=[12, 13]",
        "--set", "synth.season.frames_per_day=2",
        "synth", "season", "--out", "season",
    ];
    let (code, _, err) = glacio(dir.path(), &season_args);
    assert_eq!(code, 0, "{err}");
    let series = |out: &str| {
        glacio(
            dir.path(),
            &[
                "--jobs", "1", "series", "--index", "season/index.csv", "--lake-mask", "season/lake_region.png",
                "--out", out, "--date-format", "paper",
            ],
        )
    };
    let (code, out, err) = series("s1");
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("2 events"), "{out}");
    let events = std::fs::read_to_string(dir.path().join("s1/events.json")).unwrap();
    assert!(events.contains("\"ice_on\": \"08.11.16\""), "{events}");
    assert!(events.contains("\"ice_off\": \"05.12.16\""), "{events}");
    series("s2");
    for f in ["series.csv", "events.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("s1").join(f)).unwrap(),
            std::fs::read(dir.path().join("s2").join(f)).unwrap()
        );
    }

    let (code, _, err) = glacio(dir.path(), &["plot", "series", "--input", "s1/series.csv", "--out", "fig/series.png"]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("fig/series.png").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fig/series.json")).unwrap()).unwrap();
    assert_eq!(manifest["gap_spans"], serde_json::json!([["2016-11-12", "2016-11-13"]]));

    let mut pr = String::from("class,threshold,precision,recall\n");
    for class in ["water", "ice", "snow", "clutter"] {
        for t in [0.0, 0.5, 1.0] {
            pr.push_str(&format!("{class},{t},{},{}\n", 0.5 + t / 2.0, 1.0 - t));
        }
    }
    std::fs::write(dir.path().join("pr.csv"), pr).unwrap();
    let (code, _, err) = glacio(dir.path(), &["plot", "pr", "--input", "pr.csv", "--out", "fig/pr.png"]);
    assert_eq!(code, 0, "{err}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fig/pr.json")).unwrap()).unwrap();
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 4);

    let freqs = "class,frequency\nbackground,0.61\nwater,0.2\nice,0.1\nsnow,0.07\nclutter,0.02\n";
    std::fs::write(dir.path().join("freq.csv"), freqs).unwrap();
    let (code, _, err) = glacio(dir.path(), &["plot", "imbalance", "--input", "freq.csv", "--out", "fig/imb.png"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read_to_string(dir.path().join("fig/imb.csv")).unwrap(), freqs);

    std::fs::write(dir.path().join("broken.csv"), "class,frequency\nwater,0.5\nice,abc\n").unwrap();
    let (code, _, err) = glacio(dir.path(), &["plot", "imbalance", "--input", "broken.csv", "--out", "fig/b.png"]);
    assert_eq!(code, 2);
    assert!(err.contains("row 3"), "{err}");
}

#[test]
fn monitoring_with_fixed_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = glacio(
        dir.path(),
        &["--set", "synth.season.n_days=6", "--set", "synth.season.size=32", "synth", "season", "--out", "season"],
    );
    assert_eq!(code, 0, "{err}");
    save_checkpoint(&dir.path().join("ice.ckpt"), &ready_model(5), Default::default()).unwrap();
    let args = [
        "--jobs", "1",
        "--set", "pipeline.ice_model=\"ice.ckpt\"",
        "--set", "pipeline.lake_mask_source=\"fixed_mask_file\"",
        "--set", "pipeline.lake_mask_file=\"season/lake_region.png\"",
        "infer", "--index", "season/index.csv", "--out", "mon",
    ];
    let (code, out, err) = glacio(dir.path(), &args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("processed 24/24 frames"), "{out}");
    let first = std::fs::read(dir.path().join("mon/synth_cam/series.csv")).unwrap();
    let manifest = std::fs::read(dir.path().join("mon/manifest.json")).unwrap();
    glacio(dir.path(), &args);
    assert_eq!(std::fs::read(dir.path().join("mon/synth_cam/series.csv")).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("mon/manifest.json")).unwrap(), manifest);

    let (code, _, err) = glacio(dir.path(), &["--set", "pipeline.ice_model=\"missing.ckpt\"", "--set", "pipeline.lake_model=\"x.ckpt\"", "infer", "--index", "season/index.csv"]);
    assert_eq!(code, 2);
    assert!(err.contains("missing.ckpt"), "{err}");
}

#[test]
fn synth_scenes_write_frequencies() {
    let dir = tempfile::tempdir().unwrap();
    for (task, classes) in [("ice_segmentation", 5), ("lake_detection", 2)] {
        let out = format!("scenes_{task}");
        let (code, _, err) = glacio(
            dir.path(),
            &["--set", &format!("task={task}"), "synth", "scenes", "--n", "3", "--size", "32", "--out", &out],
        );
        assert_eq!(code, 0, "{err}");
        let text = std::fs::read_to_string(dir.path().join(&out).join("class_frequencies.csv")).unwrap();
        let total: f64 = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
        assert_eq!(text.lines().count(), classes + 1, "{text}");
        assert!((total - 1.0).abs() < 1e-9);
        let input = format!("{out}/class_frequencies.csv");
        let (code, _, err) = glacio(dir.path(), &["plot", "imbalance", "--input", &input, "--out", "imb.png"]);
        assert_eq!(code, 0, "{err}");
    }
}
