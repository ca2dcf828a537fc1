use std::path::PathBuf;

use panoseg_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("window plan does not tile: width {width}, patch {patch}, stride {stride}")]
    NonTiling {
        width: usize,
        patch: usize,
        stride: usize,
    },
    #[error("degenerate patch or stride: {0}")]
    DegeneratePatch(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("crop removes every row")]
    EmptyResult,
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("label value {value} out of range in {path}")]
    BadLabelValue { path: PathBuf, value: u8 },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("no predictions to fuse")]
    EmptyPredictionSet,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0} self-checks failed")]
    SelfTest(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
