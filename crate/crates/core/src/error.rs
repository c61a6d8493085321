use std::path::PathBuf;

use thiserror::Error;

/// Failures while parsing an FVL1 feature/displacement file.
#[derive(Debug, Error, PartialEq)]
pub enum Fvl1Error {
    #[error("bad magic {found:?}, expected \"FVL1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported FVL1 version {0}")]
    Version(u32),
    #[error("unsupported FVL1 dtype code {0}")]
    Dtype(u8),
    #[error("header truncated: {0} bytes")]
    TruncatedHeader(usize),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("{count} non-finite payload values")]
    NonFinite { count: usize },
    #[error("invalid header: {0}")]
    Header(String),
}

/// Failures while parsing a NIfTI-1 file.
#[derive(Debug, Error, PartialEq)]
pub enum NiftiError {
    #[error("file too short for a NIfTI-1 header ({0} bytes)")]
    ShortHeader(usize),
    #[error("sizeof_hdr is {0}, expected 348")]
    HeaderSize(i32),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality: dim[0]={ndim}, dim[4]={nt}")]
    Dimensionality { ndim: i16, nt: i16 },
    #[error("payload truncated: expected {expected} bytes from offset {offset}, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{count} non-finite voxel values")]
    NonFinite { count: usize },
    #[error("file holds scaled or floating data, not labels")]
    NotLabels,
    #[error("label value {0} cannot be stored")]
    LabelRange(i64),
    #[error("invalid header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite data: {0}")]
    NonFinite(String),
    #[error("non-finite loss at iteration {iteration} (data {data}, reg {reg})")]
    NonFiniteLoss {
        iteration: usize,
        data: f64,
        reg: f64,
    },
    #[error("could not generate a folding-free field after {attempts} halvings")]
    FoldingFree { attempts: usize },
    #[error("missing input: {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Fvl1 {
        path: PathBuf,
        #[source]
        source: Fvl1Error,
    },
    #[error("{path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: NiftiError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::FoldingFree { .. }
        )
    }

    /// True for errors caused by files on disk (reading, writing, parsing).
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Fvl1 { .. } | Error::Nifti { .. } | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
