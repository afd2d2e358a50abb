//! Model-based confidence estimation for speech recogniser output.
//!
//! The crate covers the whole desk-scale workflow: a JSONL corpus format for
//! n-best lists with per-token decoder features, edit-distance labelling,
//! back-off n-gram language models used as extra features, a bidirectional
//! gated recurrent confidence network with a per-token head (CEM) and a
//! pooled utterance head (R-EBM), ranking and calibration metrics,
//! piece-wise linear calibration, confidence-based data selection, and a
//! synthetic decoder simulator that stands in for a real recogniser.

pub mod align;
pub mod calibrate;
pub mod data_model;
pub mod error;
pub mod features;
pub mod json;
pub mod lm;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod select;
pub mod simulate;

pub use error::{Error, Result};
