//! Multiple generalized additive models with automatic smoothing.

pub mod basis;
pub mod design;
pub mod em;
pub mod error;
pub mod families;
pub mod inference;
pub mod simulate;
pub mod solver;
