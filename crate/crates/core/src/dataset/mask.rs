use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::legend::{ClassLegend, BACKGROUND, IGNORE, LAKE};
use crate::error::{Error, Result};
use crate::fsio;

/// `height x width` grid of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentationMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape("mask buffer", &[height, width], &[labels.len()]));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Every label must be a legend class or [`IGNORE`].
    pub fn validate(&self, legend: &ClassLegend) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| !legend.is_valid_label(l)) {
            return Err(Error::Validation(format!(
                "label {bad} is neither a {} class nor the ignore value",
                legend.task()
            )));
        }
        Ok(())
    }

    pub fn ensure_same_dims(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                context,
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Applies `f` to every label.
    pub fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }

    /// Collapses a surface-state mask to lake detection labels: every class
    /// other than background becomes the lake class.
    pub fn to_lake_mask(&self) -> Self {
        self.map(|l| match l {
            BACKGROUND | IGNORE => l,
            _ => LAKE,
        })
    }

    /// Nearest-neighbour resize with half-pixel centers:
    /// `src = floor((dst + 0.5) * in / out)`.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let sx: Vec<usize> = (0..width)
            .map(|x| (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1))
            .collect();
        let mut out = Self::new(width, height);
        for y in 0..height {
            let syy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for (x, &sxx) in sx.iter().enumerate() {
                out.set(x, y, self.get(sxx, syy));
            }
        }
        out
    }
}

/// Encodes a mask as a single-channel indexed PNG. Palette slot `i < K`
/// holds the color of class `i`; slot `K` holds the ignore color.
pub fn encode_mask(mask: &SegmentationMask, legend: &ClassLegend) -> Result<Vec<u8>> {
    mask.validate(legend)?;
    let k = legend.num_classes();
    let mut palette = Vec::with_capacity(3 * (k + 1));
    for e in legend.entries() {
        palette.extend_from_slice(&e.color);
    }
    palette.extend_from_slice(&legend.color(IGNORE));
    let indices: Vec<u8> = mask
        .labels()
        .iter()
        .map(|&l| if l == IGNORE { k as u8 } else { l })
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Validation(format!("png encode: {e}")))?;
        writer
            .write_image_data(&indices)
            .map_err(|e| Error::Validation(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Decodes an indexed or RGB(A)/gray PNG by mapping every pixel color back
/// through the legend palette.
pub fn decode_mask(bytes: &[u8], legend: &ClassLegend) -> Result<SegmentationMask> {
    let dec_err = |e: png::DecodingError| Error::Validation(format!("png decode: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(dec_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Validation("png decode: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(dec_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut labels = Vec::with_capacity(w * h);
    let mut offending: Vec<[u8; 3]> = Vec::new();
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            let color = match channels {
                1 | 2 => [px[0], px[0], px[0]],
                _ => [px[0], px[1], px[2]],
            };
            match legend.class_of_color(color) {
                Some(l) => labels.push(l),
                None => {
                    if !offending.contains(&color) {
                        offending.push(color);
                    }
                    labels.push(IGNORE);
                }
            }
        }
    }
    if !offending.is_empty() {
        offending.sort_unstable();
        return Err(Error::OffPalette { colors: offending });
    }
    SegmentationMask::from_vec(w, h, labels)
}

pub fn write_mask(path: &Path, mask: &SegmentationMask, legend: &ClassLegend) -> Result<()> {
    fsio::write_atomic(path, &encode_mask(mask, legend)?)
}

pub fn read_mask(path: &Path, legend: &ClassLegend) -> Result<SegmentationMask> {
    let bytes = fsio::read(path)?;
    decode_mask(&bytes, legend).map_err(|e| match e {
        Error::OffPalette { .. } => e,
        other => Error::format(path, other.to_string()),
    })
}
