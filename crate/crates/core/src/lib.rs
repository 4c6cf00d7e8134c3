//! Tooth segmentation with a masked shallow-fusion transformer, cross/self
//! gating, permutation upscalers, multi-scale aggregation and an anatomical
//! prior-knowledge layer, on a small from-scratch autodiff engine.

pub mod apk;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod msa;
pub mod nn;
pub mod params;
pub mod run;
pub mod tensor;
pub mod train;
pub mod upscale;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
