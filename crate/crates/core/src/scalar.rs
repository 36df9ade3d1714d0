use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Numeric mode of a tensor computation.
///
/// `Wide` (f64) is used for gradient checking and oracle comparisons;
/// `Narrow` (f32) is the runtime mode for benchmarks and toy training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericMode {
    Wide,
    Narrow,
}

impl NumericMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(NumericMode::Wide),
            "narrow" => Ok(NumericMode::Narrow),
            other => Err(Error::param(format!(
                "unknown numeric mode `{other}` (expected wide|narrow)"
            ))),
        }
    }
}

impl fmt::Display for NumericMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericMode::Wide => write!(f, "wide"),
            NumericMode::Narrow => write!(f, "narrow"),
        }
    }
}

/// Element type for tensors. Implemented by `f32` (narrow) and `f64` (wide).
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const MODE: NumericMode;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const MODE: NumericMode = NumericMode::Narrow;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const MODE: NumericMode = NumericMode::Wide;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
