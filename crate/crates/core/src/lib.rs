//! PAC-Bayesian mixtures of transparent local linear models.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod dataio;
pub mod distrib;
pub mod error;
pub mod lossmodel;
pub mod objective;
pub mod optimizer;
pub mod predictor;
pub mod specfn;
pub mod trainer;

pub use error::{Error, Result};
