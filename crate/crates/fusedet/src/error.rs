//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("registration error for pair '{id}': swir is {sw_w}x{sw_h}, lwir is {lw_w}x{lw_h}")]
    Registration {
        id: String,
        sw_w: u32,
        sw_h: u32,
        lw_w: u32,
        lw_h: u32,
    },

    #[error("label parse error at {path}:{line}: {msg}")]
    LabelParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint version mismatch: file has {found}, this build expects {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint at {path}: {msg}")]
    CheckpointCorrupt { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
