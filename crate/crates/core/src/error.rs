use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic bytes {found:02x?}, expected \"SPF1\"")]
    BadMagic { found: [u8; 4] },

    #[error("truncated frame file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("invalid sensor geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("statistics need at least {needed} frames, have {have}")]
    NotEnoughFrames { needed: u64, have: u64 },

    #[error("pixel {pixel} out of bounds for a sensor of {n_pixels} pixels")]
    PixelOutOfBounds { pixel: usize, n_pixels: usize },

    #[error("oracle size guard exceeded: {0}")]
    OracleTooLarge(String),

    #[error("fit did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("unit mismatch: {0}")]
    UnitMismatch(String),

    #[error("mode grid does not fit: {0}")]
    GridOverflow(String),

    #[error("malformed input: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
