//! Procurement fraud auditing toolkit.
//!
//! Procurement events are described by eight numeric columns plus a fraud
//! type label. This crate min-max normalizes them and trains two
//! dense-dropout-softmax classifiers: a binary "is this procurement
//! suspicious" model and a multiclass "which kind of fraud" model. Both are
//! evaluated with k-fold cross-validation. A seeded generator produces
//! synthetic ledgers with planted fraud patterns and a known accuracy
//! ceiling.
//!
//! Modules, bottom-up:
//!
//! - [`math`]: dense matrices, activations, softmax, cross-entropy, and a
//!   central-difference gradient.
//! - [`data`]: the record type, CSV I/O, label derivation, class balancing.
//! - [`normalize`]: per-column min-max statistics.
//! - [`mlp`]: the network, backpropagation and optimizers.
//! - [`model`]: the persisted model container.
//! - [`train`]: epoch loop, cross-validation and reports.
//! - [`synthgen`]: synthetic ledgers.

pub mod data;
pub mod error;
pub mod math;
pub mod mlp;
pub mod model;
pub mod normalize;
pub mod synthgen;
pub mod train;

pub use data::{Dataset, LabelMode, ProcurementRecord};
pub use error::{Error, Result};
pub use math::{Matrix, Vector};
pub use mlp::{Activation, NetworkConfig, NetworkParameters, Optimizer};
pub use model::Model;
pub use normalize::NormalizationStats;
pub use synthgen::GeneratorConfig;
pub use train::{CrossValConfig, CrossValReport, NormalizationScope, TrainConfig};
