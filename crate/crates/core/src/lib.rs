//! Multimodal fusion of image embeddings and categorical clinical features.
//!
//! * [`tensor`]: vector/matrix autodiff tape and a finite-difference checker
//! * [`clinical`]: 36-wide block one-hot encoding and modality masking
//! * [`fusion`]: concat, co-attention and cross-attention fusion networks
//! * [`trainer`]: Adam over a three-stage schedule, masked evaluation
//! * [`metrics`]: one-vs-rest ROC / PR curves and AUCs
//! * [`data`], [`synth`], [`persist`], [`config`], [`cli`]: files and the command line

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clinical;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod persist;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
