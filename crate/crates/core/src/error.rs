use std::path::PathBuf;

use crate::annotate::SurfaceClass;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of the pipeline.
///
/// The variant name doubles as the machine-readable error class printed by
/// the command-line front end, see [`Error::class`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point lies behind the camera (camera-frame depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("depth must be positive, got {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("depth image has no valid pixel")]
    EmptyDepthImage,
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid tracklet: {0}")]
    InvalidTracklet(String),
    #[error("too few usable points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("no pixel of the frame falls inside the map")]
    FrameOutsideMap,
    #[error("too few observed patches to triangulate: {got}")]
    TooFewPatches { got: usize },
    #[error("cost table has no entry for {0:?}")]
    MissingClassCost(SurfaceClass),
    #[error("no path between start and goal")]
    NoPath,
    #[error("invalid path endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("grids do not overlap")]
    GridMismatch,
    #[error("infeasible world layout: {0}")]
    InfeasibleLayout(String),
    #[error("route leaves the legal ego surfaces at ({x:.3}, {y:.3})")]
    RouteOffSurface { x: f64, y: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable, machine-parseable name of the error class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::BehindCamera { .. } => "BehindCamera",
            Error::NonPositiveDepth { .. } => "NonPositiveDepth",
            Error::EmptyDepthImage => "EmptyDepthImage",
            Error::DegenerateCloud(_) => "DegenerateCloud",
            Error::InvalidIntrinsics(_) => "InvalidIntrinsics",
            Error::InvalidTransform(_) => "InvalidTransform",
            Error::InvalidTracklet(_) => "InvalidTracklet",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::FrameOutsideMap => "FrameOutsideMap",
            Error::TooFewPatches { .. } => "TooFewPatches",
            Error::MissingClassCost(_) => "MissingClassCost",
            Error::NoPath => "NoPath",
            Error::InvalidEndpoint(_) => "InvalidEndpoint",
            Error::GridMismatch => "GridMismatch",
            Error::InfeasibleLayout(_) => "InfeasibleLayout",
            Error::RouteOffSurface { .. } => "RouteOffSurface",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::MissingInput(_) => "MissingInput",
            Error::Parse { .. } => "ParseError",
            Error::Format(_) => "FormatError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
            Error::Image(_) => "ImageError",
        }
    }
}

pub(crate) fn check_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
