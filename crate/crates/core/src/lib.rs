//! Numerical laboratory for multilinear square functions: kernels, operators,
//! maximal functions, Calderón–Zygmund decompositions, Muckenhoupt weights,
//! and an inequality harness that measures implicit constants.

pub mod cli;
pub mod czd;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod maximal;
pub mod operators;
pub mod stats;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
