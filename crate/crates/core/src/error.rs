use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed IDX magic: expected {expected:#010x}, found {found:#010x}")]
    MalformedMagic { expected: u32, found: u32 },
    #[error("truncated IDX payload: header declares {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("IDX header has a zero dimension (rows={rows}, cols={cols})")]
    ZeroDimension { rows: usize, cols: usize },
    #[error("split totals {requested} exceed dataset size {available}")]
    SpecExceedsDataset { requested: usize, available: usize },
    #[error("label {label} at index {index} is not below n_classes={n_classes}")]
    LabelOutOfRange { index: usize, label: usize, n_classes: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("rotation angle {0} degrees outside [-45, 45]")]
    AngleOutOfRange(f64),
    #[error("shift ({dx}, {dy}) exceeds a quarter of the image extent")]
    ShiftOutOfRange { dx: i64, dy: i64 },
    #[error("sigma must be positive, got {0}")]
    NonpositiveSigma(f64),
    #[error("invalid augmentation parameter: {0}")]
    InvalidAugment(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sample weights are all zero")]
    DegenerateWeights,
    #[error("rate {0} outside [0, 1)")]
    RateOutOfRange(f64),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("model container: {0}")]
    ModelFormat(String),

    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("column {column} out of range for a matrix with {columns} columns")]
    ColumnOutOfRange { column: usize, columns: usize },
    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("output {value} at index {index} outside [-1, 1]")]
    OutputOutOfRange { index: usize, value: f64 },
    #[error("invalid target {value} at index {index}; targets must be -1 or +1")]
    InvalidTarget { index: usize, value: i8 },
    #[error("parameter {name}={value} outside [0, 1]")]
    ParamOutOfRange { name: &'static str, value: f64 },

    #[error("cannot resample an empty dataset")]
    EmptyInput,
    #[error("unresolved dataset reference '{0}'")]
    UnresolvedDataset(String),
    #[error("invalid fusion tree: {0}")]
    InvalidTree(String),

    #[error("vote tally is empty")]
    EmptyTally,
    #[error("degree-of-certainty needs at least two tallies, got {0}")]
    FewerThanTwoTallies(usize),
    #[error("tally {0} has size zero")]
    SizeZero(usize),
    #[error("missing pairwise decision for classes ({0}, {1})")]
    MissingPair(usize, usize),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("cannot read data from {path}: {reason}")]
    DataUnreadable { path: PathBuf, reason: String },
    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("grid axis '{0}' has fewer than two points")]
    AxisTooShort(String),
    #[error("run {index} failed: {source}")]
    Run {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
