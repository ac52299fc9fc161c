//! LabelMe polygon annotations and their rasterization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::legend::ClassLegend;
use super::mask::SegmentationMask;
use crate::error::{Error, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub label: String,
    /// Vertices in pixel coordinates, `(x, y)`.
    pub polygon: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDocument {
    pub image_path: String,
    pub image_width: usize,
    pub image_height: usize,
    pub shapes: Vec<Shape>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct LabelMeFile {
    image_path: String,
    image_height: usize,
    image_width: usize,
    #[serde(default)]
    shapes: Vec<LabelMeShape>,
}

#[derive(Deserialize)]
struct LabelMeShape {
    label: String,
    points: Vec<[f64; 2]>,
    #[serde(default = "default_shape_type")]
    shape_type: Option<String>,
}

fn default_shape_type() -> Option<String> {
    Some("polygon".to_string())
}

impl AnnotationDocument {
    /// Parses a LabelMe JSON document; only `polygon` shapes are accepted.
    pub fn from_labelme_json(text: &str) -> Result<Self> {
        let raw: LabelMeFile = serde_json::from_str(text)?;
        let mut shapes = Vec::with_capacity(raw.shapes.len());
        for (i, s) in raw.shapes.into_iter().enumerate() {
            let kind = s.shape_type.as_deref().unwrap_or("polygon");
            if kind != "polygon" {
                return Err(Error::Validation(format!(
                    "shape {i} (`{}`) has shape_type `{kind}`; only polygons are supported",
                    s.label
                )));
            }
            shapes.push(Shape {
                label: s.label,
                polygon: s.points.into_iter().map(|[x, y]| (x, y)).collect(),
            });
        }
        Ok(Self {
            image_path: raw.image_path,
            image_width: raw.image_width,
            image_height: raw.image_height,
            shapes,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        Self::from_labelme_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Serializes back to the LabelMe key layout.
    pub fn to_labelme_json(&self) -> serde_json::Value {
        serde_json::json!({
            "imagePath": self.image_path,
            "imageHeight": self.image_height,
            "imageWidth": self.image_width,
            "shapes": self.shapes.iter().map(|s| serde_json::json!({
                "label": s.label,
                "points": s.polygon.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>(),
                "shape_type": "polygon",
            })).collect::<Vec<_>>(),
        })
    }
}

/// x-coordinates where the polygon boundary crosses the horizontal line at
/// `y`, using the half-open rule `(y_i > y) != (y_j > y)`.
fn crossings(polygon: &[(f64, f64)], y: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = polygon.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = polygon[i];
        let (xj, yj) = polygon[j];
        if (yi > y) != (yj > y) {
            out.push((xj - xi) * (y - yi) / (yj - yi) + xi);
        }
        j = i;
    }
    out.sort_by(f64::total_cmp);
}

/// Burns the document's polygons into a mask of the document's size.
///
/// Pixels whose center lies inside no polygon are background (0). Insideness
/// is the even-odd rule evaluated at pixel centers `(x + 0.5, y + 0.5)`.
/// Shapes are painted in document order, so later shapes win on overlaps.
pub fn rasterize_annotation(doc: &AnnotationDocument, legend: &ClassLegend) -> Result<SegmentationMask> {
    if doc.image_width == 0 || doc.image_height == 0 {
        return Err(Error::Validation(format!(
            "annotation for `{}` has empty dimensions {}x{}",
            doc.image_path, doc.image_width, doc.image_height
        )));
    }
    let mut resolved = Vec::with_capacity(doc.shapes.len());
    for (i, s) in doc.shapes.iter().enumerate() {
        if s.polygon.len() < 3 {
            return Err(Error::Validation(format!(
                "shape {i} (`{}`) is a degenerate polygon with {} points",
                s.label,
                s.polygon.len()
            )));
        }
        resolved.push((legend.id_of(&s.label)?, &s.polygon));
    }
    let mut mask = SegmentationMask::new(doc.image_width, doc.image_height);
    let mut xs = Vec::new();
    for (class, polygon) in resolved {
        for y in 0..doc.image_height {
            crossings(polygon, y as f64 + 0.5, &mut xs);
            if xs.is_empty() {
                continue;
            }
            for x in 0..doc.image_width {
                let cx = x as f64 + 0.5;
                // number of crossings strictly to the right of the center
                let right = xs.len() - xs.partition_point(|&c| c <= cx);
                if right % 2 == 1 {
                    mask.set(x, y, class);
                }
            }
        }
    }
    Ok(mask)
}
