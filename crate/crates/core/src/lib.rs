//! Detection of intact virus particles in TEM-style micrographs.
//!
//! Two pipelines share the raster and geometry layer:
//!
//! * [`classical`]: contrast stretch, median filter, bright-region masking,
//!   gradient-voting circular Hough transform and a dark-halo check. It
//!   proposes circle candidates for semi-automatic annotation.
//! * [`nnet`] + [`training`] + [`postdetect`]: a U-Net trained on 2-class
//!   patches, whose stitched masks are cleaned and split into instances.
//!
//! [`evalmetrics`] scores either against ground truth and [`synthgen`]
//! produces scenes with exact truth to score against.

pub mod classical;
pub mod error;
pub mod evalmetrics;
pub mod morph;
pub mod nnet;
pub mod postdetect;
pub mod raster;
pub mod rng;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
