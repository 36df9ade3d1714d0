//! Geometry-prior self-attention for RGB-D semantic segmentation.
//!
//! The crate is organized around a small tape-based autodiff engine
//! ([`autodiff`]) on dense tensors ([`tensor`]), the depth/spatial geometry
//! priors ([`prior`]), decay-modulated attention in full and axial forms
//! ([`attention`]), a four-stage pyramid encoder/decoder toy model
//! ([`model`]), analytic parameter/FLOP accounting ([`flops`]), RGB-D data
//! tooling ([`data`], [`netpbm`]), and toy training ([`train`]).

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod flops;
pub mod kernels;
pub mod model;
pub mod netpbm;
pub mod prior;
pub mod scalar;
pub mod tensor;

pub use autodiff::{gradcheck, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{NumericMode, Scalar};
pub use tensor::{max_abs_diff, Tensor};
