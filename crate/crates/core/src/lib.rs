//! Volumetric domain-adaptation toolkit.
//!
//! Building blocks: dense `f64` volumes with a binary segmentation channel
//! ([`volume`]), 3-D FFT utilities and Fourier-amplitude style transfer with a
//! homocentric-square Gaussian mask ([`spectral`]), segmentation /
//! consistency / transwarp-contrastive losses with analytic gradients
//! ([`losses`]), a small encoder-decoder network with hand-written
//! reverse-mode backprop, Adam and EMA updates ([`model`]), a student-teacher
//! training loop on synthetic two-modality vessel phantoms ([`trainer`]), and
//! a command-line front end ([`cli`]).

pub mod cli;
pub mod losses;
pub mod model;
pub mod spectral;
pub mod trainer;
pub mod volume;

use thiserror::Error;

/// Unified error type for every fallible operation in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },
    #[error("payload size mismatch: expected {expected} bytes, got {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("dims overflow: {nx} x {ny} x {nz} does not fit in memory bounds")]
    DimsOverflow { nx: u64, ny: u64, nz: u64 },
    #[error("invalid dims: {nx} x {ny} x {nz} ({reason})")]
    InvalidDims { nx: u64, ny: u64, nz: u64, reason: &'static str },
    #[error("dims mismatch for {what}: expected {expected:?}, got {got:?}")]
    DimsMismatch {
        what: &'static str,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LenMismatch { what: &'static str, expected: usize, got: usize },
    #[error("unsupported size: {nx} x {ny} x {nz} (each dim must be a power of two >= 2)")]
    UnsupportedSize { nx: usize, ny: usize, nz: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("zero-norm vector in {what}")]
    ZeroNorm { what: &'static str },
    #[error("invalid argument {arg}: {reason}")]
    InvalidArg { arg: &'static str, reason: String },
    #[error("phantom foreground fraction {got:.5} outside [{lo}, {hi}] after {attempts} attempts")]
    ForegroundFraction { got: f64, lo: f64, hi: f64, attempts: u32 },
    #[error("training step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::InvalidArg`].
    pub fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArg { arg, reason: reason.into() }
    }
}
