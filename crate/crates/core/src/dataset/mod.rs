//! Class legends, masks, annotations, dataset indexes and splits.

pub mod annotation;
pub mod frame;
pub mod legend;
pub mod mask;
pub mod split;

pub use annotation::{rasterize_annotation, AnnotationDocument, Shape};
pub use frame::{
    encode_png, load_frame, load_image, load_labeled, parse_timestamp, read_index, write_index, write_labeled, FrameMeta,
    FrameRecord, FrameSource, Framed, LabeledFrame, Skipped,
};
pub use legend::{ClassEntry, ClassLegend, Task, IGNORE};
pub use mask::{decode_mask, encode_mask, read_mask, write_mask, SegmentationMask};
pub use split::{make_split, Selector, SplitMode, SplitSpec};

use crate::error::{Error, Result};

/// Per-class pixel counts over a mask collection, ignoring [`IGNORE`].
pub fn class_counts<'a>(
    masks: impl IntoIterator<Item = &'a SegmentationMask>,
    num_classes: usize,
) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; num_classes];
    for m in masks {
        for &l in m.labels() {
            if l == IGNORE {
                continue;
            }
            let slot = counts.get_mut(l as usize).ok_or_else(|| {
                Error::Validation(format!("label {l} outside a {num_classes}-class legend"))
            })?;
            *slot += 1;
        }
    }
    Ok(counts)
}

/// Relative class frequencies `f_c = n_c / n_labeled`.
pub fn class_frequencies<'a>(
    masks: impl IntoIterator<Item = &'a SegmentationMask>,
    legend: &ClassLegend,
) -> Result<Vec<f64>> {
    let counts = class_counts(masks, legend.num_classes())?;
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}
