use thiserror::Error;

/// Errors raised by the perception pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate rotation axis: normals are antiparallel")]
    DegenerateAxis,

    #[error("degenerate convex hull: fewer than 3 non-collinear points")]
    DegenerateHull,

    #[error("degenerate circle fit: {0}")]
    DegenerateFit(&'static str),

    #[error("no circle reached the minimum inlier count")]
    NoCircle,

    #[error("no candidate hole survived selection")]
    NoHole,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("invalid pixel ({0}, {1})")]
    InvalidPixel(usize, usize),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
