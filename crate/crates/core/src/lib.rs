//! Mean Teacher self-ensembling for unsupervised domain adaptation of 2-D
//! binary segmentation.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autograd`]), a group-normalized U-Net ([`unet`]), segmentation and
//! consistency losses ([`losses`]), Adam with ramp schedules ([`optim`],
//! [`schedule`]), prediction-aligned spatial augmentation ([`augment`]), a
//! synthetic multi-domain corpus ([`data`]), the student/teacher training
//! engine ([`teacher`]), evaluation metrics ([`metrics`]) and the
//! experiment harness used by the command-line tool ([`config`],
//! [`checkpoint`], [`experiment`]).

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod teacher;
pub mod tensor;
pub mod unet;

pub use autograd::{Graph, NodeId};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
