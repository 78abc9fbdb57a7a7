// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod compositing;
pub mod crossnet;
pub mod error;
pub mod geometry;
pub mod grad;
pub mod optim;
pub mod render;
pub mod scene_io;
pub mod shading;

pub use error::{Error, Result};
