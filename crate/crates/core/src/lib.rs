//! Scene-graph report generation for surgical video frames.
//!
//! Per-frame detections are completed by class-level node tracking, turned
//! into a tissue-centered scene graph, embedded as node features, refined by
//! a gated graph-convolution layer with node reservation, and decoded into a
//! textual report by a transformer. Reports are scored with BLEU, METEOR,
//! ROUGE-L and CIDEr.

pub mod autograd;
pub mod checkpoint;
pub mod container;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perception;
pub mod relational;
pub mod scenegraph;
pub mod tensor;
pub mod tracking;
pub mod trainkit;

pub use error::{Error, Result};
