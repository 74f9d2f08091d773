//! Test-time domain generalization by generating layer parameters.
//!
//! A small convolutional backbone is trained on several source domains
//! together with a transformer that, for each unlabeled target batch, emits
//! new Batch-Normalization affine parameters and classifier rows in a single
//! feedforward pass. Stored weights are never modified at test time.
//!
//! Module map:
//! - [`synthdata`]: rotated, category-shift and subpopulation domains; streams.
//! - [`backbone`]: the CNN, its generatable slots, functional forward.
//! - [`objectives`]: unsupervised losses and per-slot gradients.
//! - [`paramgen`]: the parameter-generating transformer.
//! - [`metatrain`]: episodic meta-source / meta-target training.
//! - [`ttg`]: the test-time engine and the baseline strategies.
//! - [`harness`]: experiment drivers, metrics, reports, checkpoints, CLI.

pub mod autograd;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod metatrain;
pub mod objectives;
pub mod optim;
pub mod paramgen;
pub mod synthdata;
pub mod tensor;
pub mod ttg;

pub use error::{Error, Result};
pub use tensor::Tensor;
