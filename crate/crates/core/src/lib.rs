//! Local multi-head channel self-attention (LHC) for convolutional networks.
//!
//! The crate bundles everything needed to build, train and inspect LHC
//! blocks at desk scale:
//!
//! - [`tensor`], [`ops`], [`tape`]: dense tensors, kernels and reverse-mode autodiff
//! - [`gradcheck`]: finite-difference gradient checks
//! - [`lhc`]: the attention block
//! - [`backbone`]: ResNet-style host networks with LHC insertion points
//! - [`heads`]: head efficiency calculus, correlation and ablation tools
//! - [`data`]: FER2013 ingestion, preprocessing, augmentation and TTA
//! - [`train`]: losses, optimizers, staged training and evaluation
//! - [`container`], [`config`]: checkpoint container and plain-text configs

pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod lhc;
pub mod ops;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod train;

pub use backbone::{BackboneSpec, TinyNet};
pub use error::{Error, Result};
pub use lhc::{LhcBlock, LhcConfig, LhcParams, LhcWeights};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
