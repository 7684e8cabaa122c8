//! Reliability-aware multi-teacher distillation at desk scale.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod distmath;
pub mod evalmetrics;
pub mod longdoc;
pub mod losses;
pub mod reliability;
pub mod teachercache;
pub mod toytrain;
