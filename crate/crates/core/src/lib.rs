//! Regional tree regularization for small multilayer perceptrons.
//!
//! A target network is trained with a penalty on the average decision path length
//! (APL) of decision trees that mimic it inside each region of the input space. The
//! APL is not differentiable, so per-region surrogate networks regress it from the
//! target's flattened parameters and supply the gradient.

pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod regions;
pub mod regularizer;
pub mod tree;

pub use error::{Error, Result};
pub use matrix::Matrix;
