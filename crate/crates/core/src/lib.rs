//! Lusin-type derivative prescription on finite metric measure spaces.
//!
//! The crate builds, on a finite discretization of a doubling metric
//! measure space, the objects needed to construct functions whose chart
//! derivatives match a prescribed target field off a small exceptional
//! set:
//!
//! - [`space`]: finite metric measure spaces, generators and measured constants
//! - [`cubes`]: nested dyadic-type cube decompositions
//! - [`charts`]: chart atlases and the windowed chart differential
//! - [`lipfield`]: pointwise and global Lipschitz constants
//! - [`prescribe`]: the Alberti-type construction
//! - [`lusin`]: the Moonens–Pfeffer-type construction with boundary decay
//! - [`verify`]: independent checks, epsilon sweeps and reports
//! - [`cli`]: the command-line driver used by the `cheeger-lusin` binary
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod charts;
pub mod cli;
pub mod cubes;
pub mod error;
pub mod lipfield;
pub mod lusin;
pub mod prescribe;
pub mod space;
pub mod verify;

pub use error::{Error, Result};
pub use space::{PointSet, Space};
