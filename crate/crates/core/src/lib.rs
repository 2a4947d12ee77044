//! Cross-modal knowledge distillation for vectorized HD-map construction at
//! toy scale.
//!
//! A camera+LiDAR fusion teacher and a camera-only student with a dual BEV
//! transform are trained on synthetic scenes. The student is distilled
//! through cross-modal attention relations, dual-level BEV features and
//! map-head pseudo-labels, and evaluated with Chamfer-matched average
//! precision.
//!
//! The crate is `no_std` (with `alloc`): it performs no IO. File formats,
//! the command-line interface and threading live in the `mapdistill` crate.

#![no_std]

extern crate alloc;

pub mod assignment;
pub mod audit;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod map;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
