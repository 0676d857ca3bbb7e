//! Evidential deep regression for volumetric dose prediction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod baselines;
pub mod bundle;
pub mod dvh;
pub mod eval;
pub mod evidential;
pub mod exec;
pub mod experiment;
pub mod io;
pub mod loss;
pub mod openkbp;
pub mod phantom;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
