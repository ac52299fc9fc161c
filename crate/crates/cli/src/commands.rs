use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use glacio::dataset::{
    class_frequencies, load_labeled, make_split, parse_timestamp, rasterize_annotation, read_index, read_mask,
    write_index, write_labeled, AnnotationDocument, ClassLegend, FrameMeta, FrameSource, LabeledFrame, SplitMode,
    SplitSpec, Task,
};
use glacio::evaluation::{default_thresholds, write_reports, ConfusionMatrix, PrAccumulator};
use glacio::fsio;
use glacio::model::{argmax_mask, image_batch, load_checkpoint};
use glacio::phenology::{self, events_json, frozen_fraction, series_csv, DateFormat};
use glacio::pipeline::{self, MonitoringOptions, Pipeline};
use glacio::synth::{generate_scene_set, generate_season};
use glacio::training;

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, InferArgs, IngestArgs, SeriesArgs, SourceArg, SplitArg, SplitArgs, SynthArgs, SynthKind, TrainArgs};

type CliResult = Result<(), CliError>;

/// `class,frequency` rows.
pub fn frequencies_csv(legend: &ClassLegend, freqs: &[f64]) -> String {
    let mut out = String::from("class,frequency\n");
    for (name, f) in legend.names().into_iter().zip(freqs) {
        writeln!(out, "{name},{f}").unwrap();
    }
    out
}

/// Finds `YYYYMMDD[_-]HHMM[SS]`, `YYYYMMDD` or `YYYY-MM-DD` in a file name.
pub fn timestamp_from_name(name: &str) -> Option<NaiveDateTime> {
    let b = name.as_bytes();
    let digits = |s: usize, n: usize| s + n <= b.len() && b[s..s + n].iter().all(u8::is_ascii_digit);
    let boundary = |i: usize| i == 0 || !b[i - 1].is_ascii_digit();
    for i in 0..b.len() {
        if !boundary(i) {
            continue;
        }
        if digits(i, 4) && i + 10 <= b.len() && b[i + 4] == b'-' && digits(i + 5, 2) && b[i + 7] == b'-' && digits(i + 8, 2) {
            if let Ok(d) = NaiveDate::parse_from_str(&name[i..i + 10], "%Y-%m-%d") {
                return Some(d.and_time(NaiveTime::MIN));
            }
        }
        if digits(i, 8) && (i + 8 == b.len() || !b[i + 8].is_ascii_digit()) {
            let Ok(d) = NaiveDate::parse_from_str(&name[i..i + 8], "%Y%m%d") else {
                continue;
            };
            let t = i + 9;
            let time = if i + 8 < b.len() && matches!(b[i + 8], b'_' | b'-' | b'T') && digits(t, 4) {
                let secs = if digits(t + 4, 2) { &name[t + 4..t + 6] } else { "00" };
                NaiveTime::parse_from_str(&format!("{}{secs}", &name[t..t + 4]), "%H%M%S").ok()
            } else {
                None
            };
            return Some(d.and_time(time.unwrap_or(NaiveTime::MIN)));
        }
    }
    None
}

pub fn ingest(cfg: &RunConfig, a: IngestArgs) -> CliResult {
    if !a.annotations.is_dir() {
        return Err(CliError::config(format!("{}: not a directory", a.annotations.display())));
    }
    let mut docs: Vec<PathBuf> = std::fs::read_dir(&a.annotations)
        .map_err(|e| CliError::config(format!("{}: {e}", a.annotations.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    docs.sort();
    if docs.is_empty() {
        return Err(CliError::config(format!(
            "no annotations found in {}",
            a.annotations.display()
        )));
    }
    let legend = ClassLegend::for_task(cfg.task);
    let base = std::path::absolute(&a.annotations).map_err(|e| CliError::runtime(e.to_string()))?;
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    for path in &docs {
        let context = |e: glacio::Error| CliError::config(format!("{}: {e}", path.display()));
        let doc = AnnotationDocument::load(path).map_err(CliError::from)?;
        let mask = rasterize_annotation(&doc, &legend).map_err(context)?;
        let name = Path::new(&doc.image_path)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| doc.image_path.clone());
        let timestamp = timestamp_from_name(&name).ok_or_else(|| {
            CliError::config(format!(
                "{}: cannot read a date from image name `{name}` (expected e.g. cam0_20170129_1030.jpg)",
                path.display()
            ))
        })?;
        let meta = FrameMeta {
            path: base.join(&doc.image_path).display().to_string(),
            timestamp,
            camera_id: a.camera_id.clone(),
            lake_id: a.lake_id.clone(),
            winter_id: a.winter_id.clone(),
            source: match a.source {
                SourceArg::Webcam => FrameSource::Webcam,
                SourceArg::Crowd => FrameSource::Crowd,
            },
        };
        fsio::write_atomic(&meta.mask_path(&a.out), &glacio::dataset::encode_mask(&mask, &legend)?)?;
        rows.push(meta);
        masks.push(mask);
    }
    write_index(&a.out.join("index.csv"), &rows)?;
    let freqs = class_frequencies(&masks, &legend)?;
    fsio::write_atomic(
        &a.out.join("class_frequencies.csv"),
        frequencies_csv(&legend, &freqs).as_bytes(),
    )?;
    println!("ingested {} annotations into {}", rows.len(), a.out.display());
    for (name, f) in legend.names().into_iter().zip(&freqs) {
        println!("  {name:<12} {f:.4}");
    }
    Ok(())
}

pub fn synth(cfg: RunConfig, a: SynthArgs) -> CliResult {
    let out = a.out.unwrap_or_else(|| cfg.paths.out_dir.join("synth"));
    match a.kind {
        SynthKind::Scenes => {
            let n = a.n.unwrap_or(cfg.synth.n_scenes);
            let size = a.size.unwrap_or(cfg.synth.size);
            let frames = generate_scene_set(n, size, cfg.synth.seed)?;
            let legend = ClassLegend::for_task(cfg.task);
            write_labeled(&out, &frames, &legend)?;
            let masks: Vec<_> = frames
                .iter()
                .map(|f| match cfg.task {
                    Task::LakeDetection => f.mask.to_lake_mask(),
                    Task::IceSegmentation => f.mask.clone(),
                })
                .collect();
            let freqs = class_frequencies(&masks, &legend)?;
            fsio::write_atomic(
                &out.join("class_frequencies.csv"),
                frequencies_csv(&legend, &freqs).as_bytes(),
            )?;
            println!("wrote {n} {size}x{size} scenes to {}", out.display());
        }
        SynthKind::Season => {
            let mut params = cfg.synth.season.clone();
            if let Some(size) = a.size {
                params.size = size;
            }
            let season = generate_season(&params)?;
            let frames: Vec<LabeledFrame> = season.frames.into_iter().map(|f| f.frame).collect();
            write_labeled(&out, &frames, &ClassLegend::ice_segmentation())?;
            let lake_legend = ClassLegend::lake_detection();
            fsio::write_atomic(
                &out.join("lake_region.png"),
                &glacio::dataset::encode_mask(&season.lake_region, &lake_legend)?,
            )?;
            fsio::write_json(&out.join("truth.json"), &season.truth)?;
            println!(
                "wrote {} frames over {} days ({} freeze events) to {}",
                frames.len(),
                params.n_days,
                season.truth.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn apply_split_args(cfg: &mut RunConfig, a: &SplitArgs) -> Option<SplitSpec> {
    let s = &mut cfg.split;
    match a.split {
        Some(SplitArg::None) => s.mode = None,
        Some(SplitArg::SameCamera) => s.mode = Some(SplitMode::SameCamera),
        Some(SplitArg::CrossCamera) => s.mode = Some(SplitMode::CrossCamera),
        Some(SplitArg::CrossWinter) => s.mode = Some(SplitMode::CrossWinter),
        None => {}
    }
    if s.mode == Some(SplitMode::CrossWinter) {
        s.train_winter = a.train_sel.clone().or(s.train_winter.take());
        s.test_winter = a.test_sel.clone().or(s.test_winter.take());
    } else {
        s.train_camera = a.train_sel.clone().or(s.train_camera.take());
        s.test_camera = a.test_sel.clone().or(s.test_camera.take());
    }
    s.resolve()
}

fn load_dataset(index: &Path, legend: &ClassLegend) -> Result<Vec<LabeledFrame>, CliError> {
    let rows = read_index(index).map_err(|e| CliError::config(e.to_string()))?;
    let base = index.parent().unwrap_or(Path::new("."));
    let (frames, skipped) = load_labeled(&rows, base, legend);
    if !skipped.is_empty() {
        log::warn!("{} of {} frames skipped", skipped.len(), rows.len());
    }
    if frames.is_empty() {
        return Err(CliError::runtime(format!("{}: no loadable frames", index.display())));
    }
    Ok(frames)
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> CliResult {
    let index = a.index.clone().unwrap_or_else(|| cfg.paths.index.clone());
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("train"));
    let split = apply_split_args(&mut cfg, &a.split);
    let tc = cfg.train.resolve(cfg.task);
    tc.validate()?;
    cfg.network.validate()?;
    let legend = ClassLegend::for_task(cfg.task);
    let frames = load_dataset(&index, &legend)?;
    let train_frames = match &split {
        Some(spec) => make_split(&frames, spec)?.0,
        None => frames,
    };
    fsio::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let outcome = training::train(&train_frames, &cfg.network, &tc, Some(&out))?;
    println!(
        "trained {} on {} frames: best epoch {} (val mIoU {}), final loss {:.4}",
        cfg.task,
        train_frames.len() - outcome.validation_frames,
        outcome.best_epoch,
        outcome.log[outcome.best_epoch - 1]
            .val_miou
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "n/a".into()),
        outcome.log.last().map(|l| l.loss).unwrap_or(f64::NAN),
    );
    if let Some(p) = &outcome.best_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

/// One IoU column per non-background class, then mIoU.
pub fn iou_table(cm: &ConfusionMatrix, legend: &ClassLegend) -> Result<String, CliError> {
    let ious = cm.iou();
    let mut header = String::new();
    let mut row = String::new();
    for (id, name) in legend.names().into_iter().enumerate().skip(1) {
        let mut title = name.to_string();
        title[..1].make_ascii_uppercase();
        write!(header, "{title:>8}").unwrap();
        match ious[id] {
            Some(v) => write!(row, "{v:>8.2}").unwrap(),
            None => write!(row, "{:>8}", "-").unwrap(),
        }
    }
    write!(header, "{:>8}", "mIoU").unwrap();
    write!(row, "{:>8.2}", cm.miou()?).unwrap();
    Ok(format!("{header}\n{row}\n"))
}

pub fn eval(mut cfg: RunConfig, a: EvalArgs) -> CliResult {
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let index = a.index.clone().unwrap_or_else(|| cfg.paths.index.clone());
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("eval"));
    let split = apply_split_args(&mut cfg, &a.split);
    if !checkpoint.exists() {
        return Err(CliError::config(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let params = load_checkpoint(&checkpoint).map_err(|e| CliError::config(e.to_string()))?;
    let k = params.spec().num_classes;
    let legend = [Task::IceSegmentation, Task::LakeDetection]
        .into_iter()
        .map(ClassLegend::for_task)
        .find(|l| l.num_classes() == k)
        .ok_or_else(|| CliError::config(format!("checkpoint has {k} classes; no legend matches")))?;
    let frames = load_dataset(&index, &legend)?;
    let (train_frames, test_frames) = match &split {
        Some(spec) => make_split(&frames, spec)?,
        None => (Vec::new(), frames),
    };
    let mut cm = ConfusionMatrix::new(k);
    let mut pr = PrAccumulator::new(k, &default_thresholds())?;
    for f in &test_frames {
        let logits = params.predict(&image_batch::<f32>(&[&f.image])?)?;
        cm.accumulate(&argmax_mask(&logits, 0), &f.mask)?;
        pr.add(&glacio::autodiff::softmax_channels(&logits), &f.mask)?;
    }
    let train_freqs = if train_frames.is_empty() {
        None
    } else {
        Some(class_frequencies(train_frames.iter().map(|f| &f.mask), &legend)?)
    };
    let curves = pr.curves();
    let summary = write_reports(&out, &cm, &legend, train_freqs.as_deref(), Some(&curves))?;
    print!("{}", iou_table(&cm, &legend)?);
    if let Some(w) = summary.weighted_miou {
        println!("weighted mIoU {w:.2}");
    }
    println!("{} test frames; reports in {}", test_frames.len(), out.display());
    Ok(())
}

fn date_format(arg: Option<&str>, cfg: &RunConfig) -> Result<DateFormat, CliError> {
    match arg {
        Some(s) => s.parse().map_err(CliError::from),
        None => Ok(cfg.output.date_format),
    }
}

pub fn infer(mut cfg: RunConfig, a: InferArgs) -> CliResult {
    if let Some(out) = &a.out {
        cfg.pipeline.output_dir = out.clone();
    }
    let format = date_format(a.date_format.as_deref(), &cfg)?;
    let out = cfg.pipeline.output_dir.clone();
    let pipeline = Pipeline::load(&cfg.pipeline).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(index) = &a.index {
        let options = MonitoringOptions {
            phenology: cfg.phenology.clone(),
            date_format: format,
            write_masks: true,
        };
        let report = pipeline::run_monitoring(index, &pipeline, &options, &out)?;
        println!(
            "processed {}/{} frames ({} skipped)",
            report.frames_processed,
            report.frames_total,
            report.skipped.len()
        );
        for cam in &report.cameras {
            for e in &cam.events {
                let off = e.ice_off.map(|d| format.format(d)).unwrap_or_else(|| "open".into());
                println!("  {}: ice-on {} ice-off {off}", cam.camera_id, format.format(e.ice_on));
            }
        }
        return Ok(());
    }
    if a.images.is_empty() {
        return Err(CliError::config("infer needs --index or --images"));
    }
    let ice_legend = ClassLegend::ice_segmentation();
    let lake_legend = ClassLegend::lake_detection();
    let mut failures = 0;
    for path in &a.images {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        match pipeline::process_crowd_file(path, &pipeline) {
            Ok(r) => {
                fsio::write_atomic(
                    &out.join(format!("{stem}.png")),
                    &glacio::dataset::encode_mask(&r.segmentation.mask, &ice_legend)?,
                )?;
                fsio::write_atomic(
                    &out.join(format!("{stem}.lake.png")),
                    &glacio::dataset::encode_mask(&r.lake_mask, &lake_legend)?,
                )?;
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", path.display());
            }
        }
    }
    if failures == a.images.len() {
        return Err(CliError::runtime("no image could be processed"));
    }
    println!("segmented {} images into {}", a.images.len() - failures, out.display());
    Ok(())
}

fn read_fractions(path: &Path) -> Result<Vec<(NaiveDateTime, f64)>, CliError> {
    let bad = |row: usize, m: String| CliError::config(format!("{}: row {row}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::config(format!("{}: missing column `{name}`", path.display())))
    };
    let (ti, fi) = (col("timestamp")?, col("frozen_fraction")?);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        let t = parse_timestamp(rec.get(ti).unwrap_or("")).map_err(|e| bad(row, e))?;
        let f: f64 = rec
            .get(fi)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| bad(row, format!("invalid frozen_fraction `{}`", rec.get(fi).unwrap_or(""))))?;
        if !(0.0..=1.0).contains(&f) {
            return Err(bad(row, format!("frozen_fraction {f} outside [0, 1]")));
        }
        out.push((t, f));
    }
    Ok(out)
}

fn fractions_from_masks(index: &Path, lake_mask: &Path, cfg: &RunConfig) -> Result<Vec<(NaiveDateTime, f64)>, CliError> {
    let legend = ClassLegend::ice_segmentation();
    let lake = read_mask(lake_mask, &ClassLegend::lake_detection())
        .map_err(|e| CliError::config(e.to_string()))?
        .to_lake_mask();
    let rows = read_index(index).map_err(|e| CliError::config(e.to_string()))?;
    let base = index.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for meta in &rows {
        let frac = read_mask(&meta.mask_path(base), &legend)
            .and_then(|m| frozen_fraction(&m, &lake, cfg.phenology.clutter_policy));
        match frac {
            Ok(f) => samples.push((meta.timestamp, f)),
            Err(e) => log::warn!("skipping {}: {e}", meta.path),
        }
    }
    Ok(samples)
}

pub fn series(cfg: RunConfig, a: SeriesArgs) -> CliResult {
    let format = date_format(a.date_format.as_deref(), &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("series"));
    let samples = match (&a.fractions, &a.index, &a.lake_mask) {
        (Some(f), _, _) => read_fractions(f)?,
        (None, Some(i), Some(m)) => fractions_from_masks(i, m, &cfg)?,
        _ => return Err(CliError::config("series needs --fractions, or --index with --lake-mask")),
    };
    if samples.is_empty() {
        return Err(CliError::runtime("no frozen-fraction samples"));
    }
    let result = phenology::analyze(&samples, &cfg.phenology)?;
    fsio::write_atomic(
        &out.join("series.csv"),
        series_csv(&result.raw, &result.smoothed, format).as_bytes(),
    )?;
    fsio::write_atomic(&out.join("events.json"), events_json(&result.events, format).as_bytes())?;
    println!(
        "{} observed days, {} gap days, {} events",
        result.raw.len(),
        result.raw.gaps.len(),
        result.events.len()
    );
    for e in &result.events {
        let off = e.ice_off.map(|d| format.format(d)).unwrap_or_else(|| "open".into());
        println!("  ice-on {} ice-off {off}", format.format(e.ice_on));
    }
    Ok(())
}
