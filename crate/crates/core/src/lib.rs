//! Random conductance models with stable-like jumps on lattice boxes.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision, clippy::needless_range_loop)]

pub mod assumptions;
pub mod env;
pub mod error;
pub mod green;
pub mod heat;
pub mod lattice;
pub mod linalg;
pub mod law;
pub mod markov;
pub mod quad;
pub mod stable;
pub mod stats;
pub mod trap;
pub mod walk;

pub use error::{Error, Result};
