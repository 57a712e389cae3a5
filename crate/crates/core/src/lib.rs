//! Inference-graph toolkit for FCN-32s/16s/8s semantic segmentation networks.
//!
//! The crate builds the networks as explicit dataflow graphs, rewrites them
//! with size and latency oriented passes, executes them with a reference
//! interpreter, and measures memory, accuracy, latency and energy.

pub mod analysis;
pub mod bench;
pub mod error;
pub mod executor;
pub mod graph;
pub mod metrics;
pub mod modelfile;
pub mod optimizer;
pub mod synth;
pub mod tensor;
pub mod zoo;

pub use error::{Error, ModelFileError, Result};
