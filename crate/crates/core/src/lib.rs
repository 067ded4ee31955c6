//! Privacy scrubbing for sequences of depth-annotated equirectangular
//! panoramas: find moving objects by comparing each frame with its
//! depth-guarded neighbor reprojections, then remove and refill them from
//! the other views or with a small multi-view-conditioned inpainting GAN.

pub mod dataset;
mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod inpaint;
pub mod moving;
pub mod pipeline;
pub mod raster;
pub mod reprojection;
pub mod sequence;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
