//! Composition ranking core.
//!
//! Mines (image, crop) ranking units, scores views with a small convolutional
//! ranker trained on a pairwise hinge loss, and searches candidate windows for
//! the best-composed view. Everything here is pure computation over value
//! types; file formats, decoding and orchestration live in the `vfn` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod checkpoint;
mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod ranker;
mod real;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;

/// Side length of the square network input.
pub const INPUT_SIDE: usize = 227;
/// Spatial side of the backbone output for an `INPUT_SIDE` input.
pub const MAP_SIDE: usize = 13;
