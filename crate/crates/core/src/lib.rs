//! Input-invex neural networks and connected-set classifiers for small
//! (mostly 2D) problems.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors and a differentiable tape.
//! - [`nn`]: dense, convex and invertible residual networks.
//! - [`gcgp`]: gradient-clipped gradient penalty training.
//! - [`invex`]: cone heads over invertible backbones.
//! - [`classifier`]: the multi-invex (Voronoi) classifier.
//! - [`morph`]: scripted and logged edits of that classifier.
//! - [`verify`]: invexity, Lipschitz and connectedness checks.
//! - [`datasets`]: toy generators and CSV loading.
//! - [`checkpoint`]: JSON model files.

pub mod autodiff;
pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod datasets;
pub mod gcgp;
pub mod invex;
pub mod classifier;
pub mod morph;
pub mod verify;
pub mod checkpoint;
