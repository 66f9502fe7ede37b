//! Desk-scale volumetric segmentation engine: a V-Net-style feature
//! extractor with a voxel-wise classifier, regularized by a supervised
//! contrastive loss against a trainable proxy memory bank, trained and
//! evaluated on synthetic lifespan phantoms.
//!
//! Everything runs on CPU in `f64` on top of a small tape-based autodiff
//! engine ([`tensor`]). See the `examples/` directory for runnable entry
//! points per capability, and the `voxseg` binary for the pipeline CLI.

pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod losses;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, ValueId};
