//! Unsupervised foreground segmentation by moving masked objects.
//!
//! A segmenter predicts a soft mask from frozen transformer features. The mask is
//! used to inpaint the background with a frozen masked autoencoder and to paste
//! the masked object back at a random shift; a discriminator that tells shifted
//! composites from real images supplies the only training signal.

pub mod compose;
pub mod error;
pub mod eval;
pub mod inpaint;
pub mod losses;
pub mod nn;
pub mod render;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Graph, Tensor, Var};
