//! Neuron-level probing of a small attention classifier on synthetic
//! motif data: corpus generation, training, attribution (activation
//! magnitude and integrated gradients), neuron ablation, and reporting.
//!
//! The typical flow is [`pipeline::cmd_all`], or step by step:
//! generate a corpus, train, score neurons, select keep-masks at fixed
//! preservation fractions, evaluate the ablated submodels, and emit a
//! CSV/SVG report. Every artifact is a pure function of the config, so
//! reruns are byte-identical.

pub mod ablation;
pub mod attribution;
pub mod corpus;
pub mod error;
pub mod grad;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
