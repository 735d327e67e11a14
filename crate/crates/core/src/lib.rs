//! Particle picking in cryo-electron tomograms with Gaussian heatmaps.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod coords;
pub mod losses;
pub mod metric;
pub mod net;
pub mod postproc;
pub mod real;
pub mod synth;
pub mod tiler;
pub mod train;
pub mod volgrid;
