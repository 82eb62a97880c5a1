use std::path::PathBuf;

use nopt_diff::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("format version {found} is not readable (this build reads {supported}.x)")]
    Version { found: String, supported: u32 },

    #[error("byte order {0:?} is not supported; payloads are little-endian")]
    ByteOrder(String),

    #[error("payload has {found} bytes but the manifest describes {expected}")]
    Truncated { expected: u64, found: u64 },

    #[error("sample {index} offset {offset} lies outside the {len}-byte payload")]
    OffsetOutOfBounds { index: usize, offset: u64, len: u64 },

    #[error("manifest offsets are inconsistent at sample {0}")]
    Offsets(usize),

    #[error("invalid grid {h}x{w}: both axes must be even and at least 8")]
    Grid { h: usize, w: usize },

    #[error("{what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("resolution mismatch: {0}x{1} vs {2}x{3}")]
    Resolution(usize, usize, usize, usize),

    #[error("union of zero datasets")]
    EmptyUnion,

    #[error("split fraction {0} is outside [0, 1]")]
    Fraction(f64),

    #[error("split fractions sum to {0}, not 1")]
    FractionSum(f64),

    #[error("raw file has {found} bytes; the descriptor needs {expected}")]
    RawLength { expected: u64, found: u64 },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("time step {dt:e} exceeds the stability bound {bound:e}")]
    Stability { dt: f64, bound: f64 },

    #[error("CFL step {dt:e} fell below the floor {floor:e}")]
    Cfl { dt: f64, floor: f64 },

    #[error("model has no pretraining decoder")]
    DecoderAbsent,

    #[error("model has no projection head")]
    HeadAbsent,

    #[error("modes {modes1}x{modes2} exceed the {h}x{w} grid")]
    ModesTooLarge {
        modes1: usize,
        modes2: usize,
        h: usize,
        w: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset has unlabeled samples")]
    Unlabeled,

    #[error("budget {n} exceeds the {available} training samples")]
    Budget { n: usize, available: usize },

    #[error("target has zero norm")]
    ZeroNorm,

    #[error("target has zero variance")]
    ZeroVariance,

    #[error("field is identically zero")]
    AllZero,

    #[error("k = {k} is outside 1..={max}")]
    TopK { k: usize, max: usize },

    #[error("demo pool holds {available} samples; {requested} requested")]
    PoolExhausted { available: usize, requested: usize },

    #[error("ground truth has {available} frames past the window; {steps} steps requested")]
    RolloutTooLong { available: usize, steps: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn shape_err(what: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Shape {
        what,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
