//! Region-aware face swapping: mask algebra, style encoder and generator,
//! swap pipeline, recoloring, inpainting, losses, training and evaluation.

pub mod blend;
pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod identity;
pub mod imaging;
pub mod inpaint;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod recolor;
pub mod swap;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
