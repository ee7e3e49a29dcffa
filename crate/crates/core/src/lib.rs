//! Numerical complex query answering over knowledge graphs.
//!
//! The crate covers the whole pipeline: loading and splitting graphs that
//! carry entity relations, numerical attributes and value-to-value
//! comparisons ([`kg`]); the s-expression query language ([`dsl`]);
//! benchmark sampling with exact answers from graph search ([`sampler`]);
//! deterministic numeric encodings ([`encoding`]); the two-phase neural
//! query encoder and its training loop ([`model`], backed by the small
//! reverse-mode engine in [`autodiff`]); and ranking metrics ([`eval`]).
//! [`pipeline`] wires these into the commands exposed by the CLI.

pub mod autodiff;
pub mod dsl;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
