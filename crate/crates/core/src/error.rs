use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label `{label}` (not in the {task} legend)")]
    UnknownLabel { label: String, task: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Shape {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("no labeled pixels")]
    NoLabeledPixels,

    #[error("no contributing pixels")]
    NoContributingPixels,

    #[error("all classes absent from the confusion matrix")]
    AllClassesAbsent,

    #[error("mask decode error: colors outside the palette: {}", format_colors(.colors))]
    OffPalette { colors: Vec<[u8; 3]> },

    #[error("non-finite gradient in `{layer}` (norm {norm})")]
    NonFiniteGradient { layer: String, norm: f64 },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no processable frames")]
    NoFrames,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

fn format_colors(colors: &[[u8; 3]]) -> String {
    colors
        .iter()
        .map(|c| format!("#{:02X}{:02X}{:02X}", c[0], c[1], c[2]))
        .collect::<Vec<_>>()
        .join(", ")
}
