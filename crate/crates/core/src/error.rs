use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid size {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("grid expects {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("grid size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),

    #[error("pixel scale mismatch: {0} vs {1} mas/px")]
    PixelScaleMismatch(f64, f64),

    #[error("invalid observation set: {0}")]
    InvalidObservation(String),

    #[error("no signal above background (flux constant {0})")]
    NoSignal(f64),

    #[error("PSF is not normalized: sum = {0}")]
    NotNormalized(f64),

    #[error("infeasible constraint: {0}")]
    InfeasibleConstraint(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inverse FFT left an imaginary residue of {residue:e} (max real {max:e})")]
    ImaginaryResidue { residue: f64, max: f64 },

    #[error("model pixel {index} is negative ({value:e}): corrupted background?")]
    NegativeModel { index: usize, value: f64 },

    #[error("projection failed to bracket the multiplier")]
    NoBracket,

    #[error("line search exhausted {0} backtracks without sufficient decrease")]
    LineSearchExhausted(usize),

    #[error("invariant breach: {0}")]
    InvariantBreach(String),

    #[error("star at ({x}, {y}) mas is outside the field of view")]
    OutOfField { x: f64, y: f64 },

    #[error("pixel scale {pixel_scale} mas undersamples the fringe period (Nyquist limit {limit:.3} mas)")]
    Undersampled { pixel_scale: f64, limit: f64 },

    #[error("requested Strehl {strehl} is below the halo-only floor {floor:.4}")]
    StrehlBelowFloor { strehl: f64, floor: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("FITS: {0}")]
    Fits(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
