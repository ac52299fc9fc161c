//! Two-stage inference: lake detection, then ice segmentation restricted to
//! the lake, for webcam streams and single crowd-sourced images.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use image::imageops::FilterType;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_channels;
use crate::dataset::legend::{BACKGROUND, LAKE};
use crate::dataset::{
    encode_mask, load_frame, read_index, read_mask, ClassLegend, FrameMeta, SegmentationMask, Skipped, IGNORE,
};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{argmax_mask, image_batch, load_checkpoint, ParameterSet};
use crate::phenology::{self, events_json, series_csv, DateFormat, PhenologyConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LakeMaskSource {
    #[default]
    Model,
    FixedMaskFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Two-class lake detector checkpoint; required for `model` source.
    pub lake_model: Option<PathBuf>,
    pub ice_model: Option<PathBuf>,
    pub lake_mask_source: LakeMaskSource,
    /// Stored lake mask (lake-detection palette) for `fixed_mask_file`.
    pub lake_mask_file: Option<PathBuf>,
    /// Side of the square crowd images are resized to.
    pub crowd_resize: u32,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lake_model: None,
            ice_model: None,
            lake_mask_source: LakeMaskSource::Model,
            lake_mask_file: None,
            crowd_resize: 512,
            output_dir: PathBuf::from("out/monitoring"),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ice_model.is_none() {
            return Err(Error::Config("pipeline.ice_model is not set".into()));
        }
        match self.lake_mask_source {
            LakeMaskSource::Model if self.lake_model.is_none() => Err(Error::Config(
                "pipeline.lake_model is required when lake_mask_source = \"model\"".into(),
            )),
            LakeMaskSource::FixedMaskFile if self.lake_mask_file.is_none() => Err(Error::Config(
                "pipeline.lake_mask_file is required when lake_mask_source = \"fixed_mask_file\"".into(),
            )),
            _ if self.crowd_resize < 16 => Err(Error::Config(format!(
                "pipeline.crowd_resize must be at least 16, got {}",
                self.crowd_resize
            ))),
            _ => Ok(()),
        }
    }
}

/// Where the lake mask of each frame comes from.
#[derive(Debug, Clone)]
pub enum LakeStage {
    Model(ParameterSet<f32>),
    Fixed(SegmentationMask),
}

/// Loaded models ready for inference.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub lake: LakeStage,
    pub ice: ParameterSet<f32>,
    pub crowd_resize: u32,
    /// `path -> sha256` of every file the pipeline was loaded from.
    pub inputs: BTreeMap<String, String>,
}

impl Pipeline {
    pub fn new(lake: LakeStage, ice: ParameterSet<f32>, crowd_resize: u32) -> Result<Self> {
        if let LakeStage::Model(m) = &lake {
            check_classes(m, 2, "lake detector")?;
        }
        Ok(Self {
            lake,
            ice,
            crowd_resize,
            inputs: BTreeMap::new(),
        })
    }

    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut inputs = BTreeMap::new();
        let mut record = |p: &Path| -> Result<()> {
            inputs.insert(p.display().to_string(), fsio::sha256_hex(&fsio::read(p)?));
            Ok(())
        };
        let ice_path = cfg.ice_model.as_deref().expect("validated");
        let ice = load_checkpoint(ice_path)?;
        record(ice_path)?;
        let lake = match cfg.lake_mask_source {
            LakeMaskSource::Model => {
                let p = cfg.lake_model.as_deref().expect("validated");
                let m = load_checkpoint(p)?;
                record(p)?;
                LakeStage::Model(m)
            }
            LakeMaskSource::FixedMaskFile => {
                let p = cfg.lake_mask_file.as_deref().expect("validated");
                let m = read_mask(p, &ClassLegend::lake_detection())?;
                record(p)?;
                LakeStage::Fixed(m.to_lake_mask())
            }
        };
        let mut pipeline = Self::new(lake, ice, cfg.crowd_resize)?;
        pipeline.inputs = inputs;
        Ok(pipeline)
    }

    pub fn lake_mask(&self, image: &RgbImage) -> Result<SegmentationMask> {
        match &self.lake {
            LakeStage::Model(m) => detect_lake(image, m),
            LakeStage::Fixed(mask) => {
                let dims = (image.width() as usize, image.height() as usize);
                if mask.dims() != dims {
                    return Err(Error::shape(
                        "fixed lake mask vs image",
                        &[mask.height(), mask.width()],
                        &[dims.1, dims.0],
                    ));
                }
                Ok(mask.clone())
            }
        }
    }

    /// Lake mask plus lake-restricted segmentation of one frame.
    pub fn process(&self, image: &RgbImage) -> Result<(SegmentationMask, Segmentation)> {
        let lake = self.lake_mask(image)?;
        let seg = segment_ice(image, &self.ice, &lake)?;
        Ok((lake, seg))
    }
}

fn check_classes(model: &ParameterSet<f32>, k: usize, what: &str) -> Result<()> {
    let got = model.spec().num_classes;
    if got != k {
        return Err(Error::Config(format!("{what} must have {k} classes, checkpoint has {got}")));
    }
    Ok(())
}

/// Per-pixel argmax of a two-class network: `LAKE` or `BACKGROUND`.
pub fn detect_lake(image: &RgbImage, lake_model: &ParameterSet<f32>) -> Result<SegmentationMask> {
    check_classes(lake_model, 2, "lake detector")?;
    let logits = lake_model.predict(&image_batch(&[image])?)?;
    Ok(argmax_mask(&logits, 0).map(|l| if l == 1 { LAKE } else { BACKGROUND }))
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Class labels, background outside the lake.
    pub mask: SegmentationMask,
    /// `1 x K x H x W` softmax scores over the whole frame.
    pub scores: Tensor<f32>,
}

/// Sets every pixel outside the lake to background.
pub fn apply_lake_mask(mask: &SegmentationMask, lake_mask: &SegmentationMask) -> Result<SegmentationMask> {
    mask.ensure_same_dims(lake_mask, "segmentation vs lake mask")?;
    let labels = mask
        .labels()
        .iter()
        .zip(lake_mask.labels())
        .map(|(&m, &l)| if l == BACKGROUND || l == IGNORE { BACKGROUND } else { m })
        .collect();
    SegmentationMask::from_vec(mask.width(), mask.height(), labels)
}

pub fn segment_ice(image: &RgbImage, ice_model: &ParameterSet<f32>, lake_mask: &SegmentationMask) -> Result<Segmentation> {
    let dims = (image.width() as usize, image.height() as usize);
    if lake_mask.dims() != dims {
        return Err(Error::shape(
            "lake mask vs image",
            &[lake_mask.height(), lake_mask.width()],
            &[dims.1, dims.0],
        ));
    }
    let logits = ice_model.predict(&image_batch(&[image])?)?;
    let mask = apply_lake_mask(&argmax_mask(&logits, 0), lake_mask)?;
    Ok(Segmentation {
        mask,
        scores: softmax_channels(&logits),
    })
}

/// Bilinear resize to `size x size`, ignoring the aspect ratio. Images that
/// already have that size are returned unchanged.
pub fn resize_square(image: &RgbImage, size: u32) -> RgbImage {
    if image.dimensions() == (size, size) {
        return image.clone();
    }
    image::imageops::resize(image, size, size, FilterType::Triangle)
}

#[derive(Debug, Clone)]
pub struct CrowdResult {
    pub image: RgbImage,
    pub lake_mask: SegmentationMask,
    pub segmentation: Segmentation,
}

pub fn process_crowd_image(image: &RgbImage, pipeline: &Pipeline) -> Result<CrowdResult> {
    let image = resize_square(image, pipeline.crowd_resize);
    let (lake_mask, segmentation) = pipeline.process(&image)?;
    Ok(CrowdResult {
        image,
        lake_mask,
        segmentation,
    })
}

pub fn process_crowd_file(path: &Path, pipeline: &Pipeline) -> Result<CrowdResult> {
    process_crowd_image(&crate::dataset::frame::load_image(path)?, pipeline)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitoringOptions {
    pub phenology: PhenologyConfig,
    pub date_format: DateFormat,
    pub write_masks: bool,
}

impl Default for MonitoringOptions {
    fn default() -> Self {
        Self {
            phenology: PhenologyConfig::default(),
            date_format: DateFormat::Iso,
            write_masks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub path: String,
    pub timestamp: NaiveDateTime,
    pub camera_id: String,
    pub frozen_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraReport {
    pub camera_id: String,
    pub frames: usize,
    pub observed_days: usize,
    pub gap_days: usize,
    pub events: Vec<phenology::IceEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringReport {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub frames_total: usize,
    pub frames_processed: usize,
    pub skipped: Vec<Skipped>,
    pub cameras: Vec<CameraReport>,
}

/// Runs the pipeline over every frame of an index and writes, per camera,
/// `<camera>/frames.csv`, `<camera>/series.csv` and `<camera>/events.json`,
/// plus `masks/<stem>.png` and `manifest.json` at the top of `output_dir`.
/// Frames that cannot be processed are logged and skipped.
pub fn run_monitoring(
    index: &Path,
    pipeline: &Pipeline,
    options: &MonitoringOptions,
    output_dir: &Path,
) -> Result<MonitoringReport> {
    options.phenology.validate()?;
    let rows = read_index(index)?;
    let base = index.parent().unwrap_or(Path::new("."));
    let legend = ClassLegend::ice_segmentation();
    let policy = options.phenology.clutter_policy;

    let outcomes: Vec<std::result::Result<FrameResult, Skipped>> = rows
        .par_iter()
        .map(|meta| {
            process_frame(meta, base, pipeline, policy, &legend, options.write_masks, output_dir).map_err(|e| {
                log::warn!("skipping frame {}: {e}", meta.path);
                Skipped {
                    path: meta.path.clone(),
                    reason: e.to_string(),
                }
            })
        })
        .collect();
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(s) => skipped.push(s),
        }
    }
    if results.is_empty() {
        return Err(Error::NoFrames);
    }

    let mut by_camera: BTreeMap<&str, Vec<&FrameResult>> = BTreeMap::new();
    for r in &results {
        by_camera.entry(r.camera_id.as_str()).or_default().push(r);
    }
    let mut cameras = Vec::new();
    for (camera, mut frames) in by_camera {
        frames.sort_by(|a, b| (a.timestamp, &a.path).cmp(&(b.timestamp, &b.path)));
        let dir = output_dir.join(camera);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "timestamp", "frozen_fraction"])?;
        for f in &frames {
            w.write_record([
                f.path.clone(),
                f.timestamp.format(crate::dataset::frame::TIMESTAMP_FORMAT).to_string(),
                f.frozen_fraction.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(dir.join("frames.csv"), e.into_error()))?;
        fsio::write_atomic(&dir.join("frames.csv"), &bytes)?;

        let samples: Vec<(NaiveDateTime, f64)> = frames.iter().map(|f| (f.timestamp, f.frozen_fraction)).collect();
        let result = phenology::analyze(&samples, &options.phenology)?;
        fsio::write_atomic(
            &dir.join("series.csv"),
            series_csv(&result.raw, &result.smoothed, options.date_format).as_bytes(),
        )?;
        fsio::write_atomic(
            &dir.join("events.json"),
            events_json(&result.events, options.date_format).as_bytes(),
        )?;
        cameras.push(CameraReport {
            camera_id: camera.to_string(),
            frames: frames.len(),
            observed_days: result.raw.len(),
            gap_days: result.raw.gaps.len(),
            events: result.events,
        });
    }

    let config_hash = fsio::sha256_hex(
        serde_json::json!({
            "phenology": options.phenology,
            "date_format": options.date_format,
            "crowd_resize": pipeline.crowd_resize,
            "ice_spec": pipeline.ice.spec().hash(),
        })
        .to_string()
        .as_bytes(),
    );
    let report = MonitoringReport {
        config_hash,
        inputs: pipeline.inputs.clone(),
        frames_total: rows.len(),
        frames_processed: results.len(),
        skipped,
        cameras,
    };
    fsio::write_json(&output_dir.join("manifest.json"), &report)?;
    Ok(report)
}

fn process_frame(
    meta: &FrameMeta,
    base: &Path,
    pipeline: &Pipeline,
    policy: phenology::ClutterPolicy,
    legend: &ClassLegend,
    write_masks: bool,
    output_dir: &Path,
) -> Result<FrameResult> {
    let frame = load_frame(meta, base)?;
    let (lake, seg) = pipeline.process(&frame.image)?;
    if lake.labels().iter().all(|&l| l != LAKE) {
        return Err(Error::Validation("no lake detected".into()));
    }
    let fraction = phenology::frozen_fraction(&seg.mask, &lake, policy)?;
    if write_masks {
        let path = output_dir.join("masks").join(format!("{}.png", meta.stem()));
        fsio::write_atomic(&path, &encode_mask(&seg.mask, legend)?)?;
    }
    Ok(FrameResult {
        path: meta.path.clone(),
        timestamp: meta.timestamp,
        camera_id: meta.camera_id.clone(),
        frozen_fraction: fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::legend::{ICE, WATER};
    use crate::model::NetworkSpec;

    fn small_spec(k: usize) -> NetworkSpec {
        NetworkSpec {
            base_channels: 8,
            aspp_channels: 16,
            decoder_channels: 16,
            low_level_channels: 8,
            ..NetworkSpec::with_classes(k)
        }
    }

    /// Zeroes the classifier and puts a constant bias on class `c`, so the
    /// network predicts `c` everywhere.
    fn constant_model(k: usize, c: usize) -> ParameterSet<f32> {
        let mut p = ParameterSet::<f32>::build(&small_spec(k), 1).unwrap();
        for t in p.params_mut() {
            if t.name == "classifier.weight" {
                t.value.data_mut().fill(0.0);
            }
            if t.name == "classifier.bias" {
                t.value.data_mut().fill(0.0);
                t.value.data_mut()[c] = 5.0;
            }
        }
        let stats: Vec<_> = p
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

    fn image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 5) as u8, 90]))
    }

    #[test]
    fn masking_rules() {
        let img = image(32, 32);
        let ice = constant_model(5, ICE as usize);
        let empty = SegmentationMask::filled(32, 32, BACKGROUND);
        let seg = segment_ice(&img, &ice, &empty).unwrap();
        assert!(seg.mask.labels().iter().all(|&l| l == BACKGROUND));
        assert_eq!(seg.scores.shape(), [1, 5, 32, 32]);
        let full = SegmentationMask::filled(32, 32, LAKE);
        let seg = segment_ice(&img, &ice, &full).unwrap();
        assert!(seg.mask.labels().iter().all(|&l| l == ICE));

        let half = SegmentationMask::from_vec(4, 1, vec![LAKE, LAKE, BACKGROUND, IGNORE]).unwrap();
        let m = SegmentationMask::from_vec(4, 1, vec![WATER, ICE, ICE, ICE]).unwrap();
        let once = apply_lake_mask(&m, &half).unwrap();
        assert_eq!(once.labels(), &[WATER, ICE, BACKGROUND, BACKGROUND]);
        assert_eq!(apply_lake_mask(&once, &half).unwrap(), once);
        assert!(segment_ice(&img, &ice, &SegmentationMask::filled(8, 8, LAKE)).is_err());
    }

    #[test]
    fn lake_detector_requires_two_classes() {
        let img = image(32, 32);
        assert!(matches!(detect_lake(&img, &constant_model(5, 1)), Err(Error::Config(_))));
        let none = detect_lake(&img, &constant_model(2, 0)).unwrap();
        assert!(none.labels().iter().all(|&l| l == BACKGROUND));
        let all = detect_lake(&img, &constant_model(2, 1)).unwrap();
        assert_eq!(all.count(LAKE), 32 * 32);
    }

    #[test]
    fn crowd_images_are_resized() {
        let pipeline = Pipeline::new(LakeStage::Model(constant_model(2, 1)), constant_model(5, 3), 64).unwrap();
        let out = process_crowd_image(&image(128, 96), &pipeline).unwrap();
        assert_eq!(out.image.dimensions(), (64, 64));
        assert_eq!(out.segmentation.mask.dims(), (64, 64));
        let same = image(64, 64);
        assert_eq!(resize_square(&same, 64), same);
        assert_eq!(resize_square(&image(1024, 768), 512).dimensions(), (512, 512));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_err());
        let cfg = PipelineConfig {
            ice_model: Some("ice.ckpt".into()),
            lake_mask_source: LakeMaskSource::FixedMaskFile,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            lake_mask_file: Some("lake.png".into()),
            ..cfg
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn monitoring_skips_bad_frames_and_is_repeatable() {
        use crate::dataset::{write_index, FrameSource};
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for day in 1..=4u32 {
            let path = format!("images/f{day}.png");
            if day != 3 {
                let p = dir.path().join(&path);
                std::fs::create_dir_all(p.parent().unwrap()).unwrap();
                image(32, 32).save(&p).unwrap();
            }
            rows.push(FrameMeta {
                path,
                timestamp: chrono::NaiveDate::from_ymd_opt(2017, 1, day).unwrap().and_hms_opt(9, 0, 0).unwrap(),
                camera_id: "cam0".into(),
                lake_id: "lake".into(),
                winter_id: "w".into(),
                source: FrameSource::Webcam,
            });
        }
        let index = dir.path().join("index.csv");
        write_index(&index, &rows).unwrap();
        let lake = SegmentationMask::from_vec(32, 32, (0..32 * 32).map(|i| if i % 32 < 16 { LAKE } else { BACKGROUND }).collect()).unwrap();
        let pipeline = Pipeline::new(LakeStage::Fixed(lake), constant_model(5, ICE as usize), 512).unwrap();
        let out = dir.path().join("out");
        let report = run_monitoring(&index, &pipeline, &MonitoringOptions::default(), &out).unwrap();
        assert_eq!((report.frames_total, report.frames_processed), (4, 3));
        assert_eq!(report.skipped[0].path, "images/f3.png");
        let cam = &report.cameras[0];
        assert_eq!((cam.observed_days, cam.gap_days), (3, 1));
        assert_eq!(cam.events, vec![phenology::IceEvent {
            ice_on: chrono::NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(),
            ice_off: None,
        }]);
        let series = std::fs::read_to_string(out.join("cam0/series.csv")).unwrap();
        assert!(series.contains("2017-01-03,,,0"));
        let mask = crate::dataset::read_mask(&out.join("masks/f1.png"), &ClassLegend::ice_segmentation()).unwrap();
        assert_eq!((mask.get(0, 0), mask.get(31, 0)), (ICE, BACKGROUND));

        let first: Vec<Vec<u8>> = ["cam0/series.csv", "cam0/events.json", "cam0/frames.csv", "manifest.json"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect();
        run_monitoring(&index, &pipeline, &MonitoringOptions::default(), &out).unwrap();
        let second: Vec<Vec<u8>> = ["cam0/series.csv", "cam0/events.json", "cam0/frames.csv", "manifest.json"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect();
        assert_eq!(first, second);
    }
}
