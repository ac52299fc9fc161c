//! Frame metadata, the dataset index CSV, and image loading.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use super::legend::ClassLegend;
use super::mask::{read_mask, SegmentationMask};
use crate::error::{Error, Result};
use crate::fsio;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    Webcam,
    Crowd,
}

/// One row of the dataset index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    /// Image path, relative to the index file's directory unless absolute.
    pub path: String,
    #[serde(with = "iso_timestamp")]
    pub timestamp: NaiveDateTime,
    pub camera_id: String,
    pub lake_id: String,
    pub winter_id: String,
    pub source: FrameSource,
}

mod iso_timestamp {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format(super::TIMESTAMP_FORMAT).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_timestamp(&raw).map_err(serde::de::Error::custom)
    }
}

/// Accepts `YYYY-MM-DDTHH:MM:SS` (optionally with fractional seconds or a
/// space separator) and bare dates, which map to midnight.
pub fn parse_timestamp(raw: &str) -> std::result::Result<NaiveDateTime, String> {
    let raw = raw.trim();
    for fmt in [TIMESTAMP_FORMAT, "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(t);
        }
    }
    chrono::NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight"))
        .map_err(|_| format!("invalid ISO-8601 timestamp `{raw}`"))
}

impl FrameMeta {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    pub fn stem(&self) -> String {
        Path::new(&self.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.clone())
    }

    /// Ground-truth mask location: `masks/<stem>.png` next to the index.
    pub fn mask_path(&self, base: &Path) -> PathBuf {
        base.join("masks").join(format!("{}.png", self.stem()))
    }
}

/// Anything carrying frame metadata (index rows, loaded frames, samples).
pub trait Framed {
    fn meta(&self) -> &FrameMeta;
}

impl Framed for FrameMeta {
    fn meta(&self) -> &FrameMeta {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub meta: FrameMeta,
    pub image: RgbImage,
}

impl Framed for FrameRecord {
    fn meta(&self) -> &FrameMeta {
        &self.meta
    }
}

/// A frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub meta: FrameMeta,
    pub image: RgbImage,
    pub mask: SegmentationMask,
}

impl Framed for LabeledFrame {
    fn meta(&self) -> &FrameMeta {
        &self.meta
    }
}

pub fn read_index(path: &Path) -> Result<Vec<FrameMeta>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let row: FrameMeta = row.map_err(|e| Error::format(path, format!("row {}: {e}", i + 2)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_index(path: &Path, rows: &[FrameMeta]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["path", "timestamp", "camera_id", "lake_id", "winter_id", "source"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fsio::write_atomic(path, &bytes)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = fsio::read(path)?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn load_frame(meta: &FrameMeta, base: &Path) -> Result<FrameRecord> {
    Ok(FrameRecord {
        meta: meta.clone(),
        image: load_image(&meta.resolve(base))?,
    })
}

/// PNG-encodes an image.
pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes).write_image(
        image.as_raw(),
        image.width(),
        image.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(bytes)
}

/// Writes frames as `<dir>/<meta.path>` images, `<dir>/masks/<stem>.png`
/// masks (remapped to the legend's task) and `<dir>/index.csv`.
pub fn write_labeled(dir: &Path, frames: &[LabeledFrame], legend: &ClassLegend) -> Result<()> {
    for f in frames {
        fsio::write_atomic(&f.meta.resolve(dir), &encode_png(&f.image)?)?;
        let mask = match legend.task() {
            super::Task::LakeDetection => f.mask.to_lake_mask(),
            super::Task::IceSegmentation => f.mask.clone(),
        };
        fsio::write_atomic(&f.meta.mask_path(dir), &super::encode_mask(&mask, legend)?)?;
    }
    let rows: Vec<FrameMeta> = frames.iter().map(|f| f.meta.clone()).collect();
    write_index(&dir.join("index.csv"), &rows)
}

/// A frame that could not be used, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: String,
    pub reason: String,
}

/// Loads every frame and its mask. Missing or corrupt files are skipped with
/// a logged warning rather than failing the whole load.
pub fn load_labeled(
    rows: &[FrameMeta],
    base: &Path,
    legend: &ClassLegend,
) -> (Vec<LabeledFrame>, Vec<Skipped>) {
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for meta in rows {
        let loaded = load_frame(meta, base).and_then(|f| {
            let mask = read_mask(&meta.mask_path(base), legend)?;
            mask.validate(legend)?;
            if (mask.width(), mask.height()) != (f.image.width() as usize, f.image.height() as usize) {
                return Err(Error::shape(
                    "image vs mask",
                    &[f.image.height() as usize, f.image.width() as usize],
                    &[mask.height(), mask.width()],
                ));
            }
            Ok(LabeledFrame {
                meta: f.meta,
                image: f.image,
                mask,
            })
        });
        match loaded {
            Ok(f) => frames.push(f),
            Err(e) => {
                log::warn!("skipping frame {}: {e}", meta.path);
                skipped.push(Skipped {
                    path: meta.path.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    (frames, skipped)
}
