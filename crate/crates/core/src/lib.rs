//! Lake-ice monitoring from webcam imagery.
//!
//! The crate turns timestamped frames into per-pixel surface-state maps
//! (background, water, ice, snow, clutter) with a Deeplab-v3+-style network,
//! and turns sequences of maps into frozen-area time series and
//! ice-on / ice-off dates.
//!
//! * [`dataset`]: class legends, masks, annotation rasterization, indexes, splits.
//! * [`synth`]: procedural lake scenes and whole freeze seasons.
//! * [`autodiff`]: the differentiable tensor ops the network is built from.
//! * [`model`]: encoder, ASPP, decoder and the extra-skip variant.
//! * [`training`]: weighted cross-entropy, poly-decayed SGD, the epoch loop.
//! * [`evaluation`]: confusion matrices, IoU family, precision-recall curves.
//! * [`phenology`]: frozen-fraction series and ice-on/off event detection.
//! * [`pipeline`]: lake detection followed by ice segmentation on real frames.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fsio;
pub mod model;
pub mod phenology;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
