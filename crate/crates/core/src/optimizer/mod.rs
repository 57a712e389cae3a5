//! Graph rewrite passes and the pipeline driver.
//!
//! Every pass is a pure function from a graph to a new graph plus a
//! [`PassReport`]. Byte figures in reports are `.sgm` file sizes computed by
//! [`crate::modelfile::measure`], so they line up with saved model sizes.

mod passes;

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::modelfile;

pub use passes::{
    add_default_attributes, dequantize_weights, fold_batch_norms, fold_constants, fuse_conv_bias_relu,
    fuse_resize_and_conv, merge_duplicate_nodes, quantize_weights, quantize_weights_with, remove_identity_nodes,
    sort_by_execution_order, strip_unused_nodes, DEFAULT_QUANT_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PassReport {
    pub pass: String,
    pub nodes_before: usize,
    pub nodes_after: usize,
    /// Serialized model bytes.
    pub bytes_before: usize,
    pub bytes_after: usize,
    /// Constant payload bytes only.
    pub payload_before: usize,
    pub payload_after: usize,
    pub rewrites: usize,
    pub notes: Vec<String>,
}

impl PassReport {
    pub(crate) fn new(pass: &str, before: &Graph, after: &Graph, rewrites: usize, notes: Vec<String>) -> Self {
        PassReport {
            pass: pass.to_string(),
            nodes_before: before.len(),
            nodes_after: after.len(),
            bytes_before: modelfile::measure(before).total,
            bytes_after: modelfile::measure(after).total,
            payload_before: before.payload_bytes(),
            payload_after: after.payload_bytes(),
            rewrites,
            notes,
        }
    }
}

impl fmt::Display for PassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} nodes {:>4} -> {:<4} size {:>10.6} MB -> {:<10.6} MB rewrites {}",
            self.pass,
            self.nodes_before,
            self.nodes_after,
            self.bytes_before as f64 / 1e6,
            self.bytes_after as f64 / 1e6,
            self.rewrites
        )?;
        for n in &self.notes {
            write!(f, "\n    {n}")?;
        }
        Ok(())
    }
}

/// Exact pass names accepted by [`run_pipeline`].
pub const PASS_NAMES: [&str; 11] = [
    "add_default_attributes",
    "strip_unused_nodes",
    "remove_identity_nodes",
    "merge_duplicate_nodes",
    "fold_constants",
    "fold_batch_norms",
    "fuse_resize_and_conv",
    "fuse_conv_bias_relu",
    "quantize_weights",
    "sort_by_execution_order",
    "all",
];

/// What `all` expands to: the size-transform catalogue in its published row order.
/// Batch-norm folding covers both the current and legacy batch-norm rows.
pub const ALL_PASSES: [&str; 9] = [
    "add_default_attributes",
    "fold_constants",
    "fold_batch_norms",
    "fuse_resize_and_conv",
    "quantize_weights",
    "strip_unused_nodes",
    "sort_by_execution_order",
    "remove_identity_nodes",
    "merge_duplicate_nodes",
];

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    pub quant_threshold: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            quant_threshold: DEFAULT_QUANT_THRESHOLD,
        }
    }
}

pub fn run_pass(g: &Graph, name: &str, cfg: &PipelineConfig) -> Result<(Graph, PassReport)> {
    match name {
        "add_default_attributes" => add_default_attributes(g),
        "strip_unused_nodes" => strip_unused_nodes(g),
        "remove_identity_nodes" => remove_identity_nodes(g),
        "merge_duplicate_nodes" => merge_duplicate_nodes(g),
        "fold_constants" => fold_constants(g),
        "fold_batch_norms" => fold_batch_norms(g),
        "fuse_resize_and_conv" => fuse_resize_and_conv(g),
        "fuse_conv_bias_relu" => fuse_conv_bias_relu(g),
        "quantize_weights" => quantize_weights_with(g, cfg.quant_threshold),
        "sort_by_execution_order" => sort_by_execution_order(g),
        _ => Err(unknown(name)),
    }
}

fn unknown(name: &str) -> Error {
    Error::UnknownPass {
        name: name.to_string(),
        valid: PASS_NAMES.to_vec(),
    }
}

/// Expands `all` and rejects unknown names before anything runs.
pub fn expand_passes<S: AsRef<str>>(names: &[S]) -> Result<Vec<&'static str>> {
    let mut out = Vec::new();
    for n in names {
        let n = n.as_ref().trim();
        if n == "all" {
            out.extend_from_slice(&ALL_PASSES);
        } else {
            out.push(*PASS_NAMES.iter().find(|p| **p == n).ok_or_else(|| unknown(n))?);
        }
    }
    Ok(out)
}

pub fn run_pipeline<S: AsRef<str>>(g: &Graph, names: &[S]) -> Result<(Graph, Vec<PassReport>)> {
    run_pipeline_with(g, names, &PipelineConfig::default())
}

pub fn run_pipeline_with<S: AsRef<str>>(
    g: &Graph,
    names: &[S],
    cfg: &PipelineConfig,
) -> Result<(Graph, Vec<PassReport>)> {
    let passes = expand_passes(names)?;
    let mut cur = g.clone();
    let mut reports = Vec::with_capacity(passes.len());
    for p in passes {
        let (next, report) = run_pass(&cur, p, cfg)?;
        log::debug!("{report}");
        reports.push(report);
        cur = next;
    }
    Ok((cur, reports))
}
