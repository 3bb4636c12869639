//! Saliency-guided image transformation at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`ops`], [`gradcheck`]: dense `f64` tensors with
//!   reverse-mode differentiation and the network primitives.
//! - [`backbone`]: a frozen, seeded convolutional feature hierarchy.
//! - [`saliency`]: the fixation-density model built on the backbone.
//! - [`target`]: target saliency maps from local shifts and global scaling.
//! - [`loss`]: saliency, feature, texture, and least-squares adversarial losses.
//! - [`transformer`]: the feature-guided generator and the patch discriminator.
//! - [`trainer`]: Adam, joint training, evaluation, and ablations.
//! - [`fixation`]: empirical fixation densities and behavioural metrics.
//! - [`dataset`], [`gzt`], [`pnm`], [`manifest`], [`commands`]: files and the
//!   command-line surface.

pub mod autodiff;
pub mod backbone;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod fixation;
pub mod gradcheck;
pub mod gzt;
mod kernels;
pub mod loss;
pub mod manifest;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod saliency;
pub mod target;
pub mod trainer;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::NetworkParams;
pub use tensor::Tensor;
