//! Static memory estimates for activations and parameters.
//!
//! One row per layer: conv-like nodes, pools, adds and other shape-changing
//! operators. Bias adds, ReLUs, batch norms and identities are epilogues of
//! the layer that feeds them, so their constant inputs count toward that
//! layer's parameters and they get no activation row of their own. The input
//! image is not counted.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{infer_shapes, Graph, NodeId, OpKind, TensorSpec};

pub const MIB: f64 = (1u64 << 20) as f64;
pub const MB: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub node: NodeId,
    pub name: String,
    pub kind: OpKind,
    pub shape: Vec<usize>,
    pub act_elems: usize,
    pub act_bytes: usize,
    pub params: usize,
    pub param_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub rows: Vec<LayerRow>,
    pub act_bytes: usize,
    pub param_bytes: usize,
    pub batch: usize,
}

fn is_epilogue(kind: OpKind) -> bool {
    matches!(kind, OpKind::BiasAdd | OpKind::Relu | OpKind::Identity | OpKind::BatchNormFrozen)
}

pub fn estimate_memory(g: &Graph, input_spec: &TensorSpec, batch: usize) -> Result<MemoryReport> {
    if batch == 0 {
        return Err(Error::invalid("batch must be at least 1"));
    }
    let specs = infer_shapes(g, input_spec)?;
    let order = g.topo_sort()?;

    // Every epilogue belongs to the nearest non-epilogue producer on its data input.
    let mut owner: HashMap<NodeId, NodeId> = HashMap::new();
    let mut rows: BTreeMap<NodeId, LayerRow> = BTreeMap::new();
    for &id in &order {
        let n = g.node(id);
        if matches!(n.kind, OpKind::Const | OpKind::Input) {
            continue;
        }
        let row_id = if is_epilogue(n.kind) {
            let src = n.inputs[0];
            owner.get(&src).copied().unwrap_or(src)
        } else {
            id
        };
        owner.insert(id, row_id);
        let owned = g.node(row_id);
        let spec = &specs[&row_id];
        let row = rows.entry(row_id).or_insert_with(|| LayerRow {
            node: row_id,
            name: owned.name.clone(),
            kind: owned.kind,
            shape: spec.shape.clone(),
            act_elems: if matches!(owned.kind, OpKind::Input | OpKind::Const) { 0 } else { spec.elements() },
            act_bytes: 0,
            params: 0,
            param_bytes: 0,
        });
        row.params += n
            .inputs
            .iter()
            .filter_map(|&i| g.get(i).and_then(|p| p.payload.as_ref()))
            .map(|t| t.len())
            .sum::<usize>();
    }

    let mut rows: Vec<LayerRow> = order.iter().filter_map(|id| rows.remove(id)).collect();
    for r in &mut rows {
        r.act_bytes = r.act_elems * 4 * batch;
        r.param_bytes = r.params * 4;
    }
    Ok(MemoryReport {
        act_bytes: rows.iter().map(|r| r.act_bytes).sum(),
        param_bytes: rows.iter().map(|r| r.param_bytes).sum(),
        rows,
        batch,
    })
}

impl MemoryReport {
    pub fn act_mib(&self) -> f64 {
        self.act_bytes as f64 / MIB
    }

    pub fn param_mib(&self) -> f64 {
        self.param_bytes as f64 / MIB
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn row(&self, name: &str) -> Option<&LayerRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "act_elems", "act_bytes", "params", "param_bytes"])?;
        for r in &self.rows {
            w.serialize((&r.name, r.act_elems, r.act_bytes, r.params, r.param_bytes))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("×");
        writeln!(
            f,
            "{:<16} {:>16} {:>12} {:>14} {:>12} {:>12}",
            "layer", "activation", "act_elems", "act MiB", "params", "param MiB"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<16} {:>16} {:>12} {:>14.3} {:>12} {:>12.3}",
                r.name,
                shape(&r.shape),
                r.act_elems,
                r.act_bytes as f64 / MIB,
                r.params,
                r.param_bytes as f64 / MIB
            )?;
        }
        writeln!(
            f,
            "total (batch {}): activations {:.2} MiB ({:.2} MB), parameters {:.2} MiB ({:.2} MB), {} params",
            self.batch,
            self.act_mib(),
            self.act_bytes as f64 / MB,
            self.param_mib(),
            self.param_bytes as f64 / MB,
            self.total_params()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchAdvice {
    pub per_image_bytes: usize,
    pub max_batch: usize,
    pub note: String,
}

/// Training memory per image is activations × `fwd_bwd_factor` (forward
/// values plus their gradients) and parameters × `optimizer_factor`
/// (weights, gradients and two Adam moments).
pub fn recommend_batch(
    report: &MemoryReport,
    budget_bytes: usize,
    fwd_bwd_factor: usize,
    optimizer_factor: usize,
) -> Result<BatchAdvice> {
    if budget_bytes == 0 {
        return Err(Error::invalid("memory budget must be positive"));
    }
    let per_image_act = report.act_bytes / report.batch;
    let per_image_bytes = per_image_act * fwd_bwd_factor + report.param_bytes * optimizer_factor;
    let max_batch = budget_bytes.checked_div(per_image_bytes).unwrap_or(usize::MAX);
    let note = if max_batch == 0 {
        format!(
            "one image needs {:.1} MB but the budget is {:.1} MB",
            per_image_bytes as f64 / MB,
            budget_bytes as f64 / MB
        )
    } else {
        format!(
            "{:.1} MB per image fits {max_batch} images in {:.1} MB",
            per_image_bytes as f64 / MB,
            budget_bytes as f64 / MB
        )
    };
    Ok(BatchAdvice {
        per_image_bytes,
        max_batch,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_encoder, InitSpec};

    fn report(act: usize, params: usize) -> MemoryReport {
        MemoryReport {
            rows: vec![],
            act_bytes: act,
            param_bytes: params,
            batch: 1,
        }
    }

    #[test]
    fn batch_advice_examples() {
        let a = recommend_batch(&report(170_000_000, 135_000_000), 16_000_000_000, 2, 4).unwrap();
        assert_eq!(a.per_image_bytes, 880_000_000);
        assert_eq!(a.max_batch, 18);
        let a = recommend_batch(&report(250_000_000, 125_000_000), 16_000_000_000, 2, 4).unwrap();
        assert_eq!(a.max_batch, 16);
        let a = recommend_batch(&report(170_000_000, 135_000_000), 1_000, 2, 4).unwrap();
        assert_eq!(a.max_batch, 0);
        assert!(a.note.contains("budget"));
        assert!(recommend_batch(&report(1, 1), 0, 2, 4).is_err());
    }

    #[test]
    fn batch_scales_activations_only() {
        let g = build_encoder(64, 64, 35, InitSpec::zeros()).unwrap();
        let spec = TensorSpec::f32(vec![64, 64, 3]);
        let one = estimate_memory(&g, &spec, 1).unwrap();
        let two = estimate_memory(&g, &spec, 2).unwrap();
        assert_eq!(two.act_bytes, 2 * one.act_bytes);
        assert_eq!(two.param_bytes, one.param_bytes);
        assert!(estimate_memory(&g, &spec, 0).is_err());
    }

    #[test]
    fn params_match_graph() {
        let g = build_encoder(32, 32, 35, InitSpec::zeros()).unwrap();
        let r = estimate_memory(&g, &TensorSpec::f32(vec![32, 32, 3]), 1).unwrap();
        assert_eq!(r.total_params(), g.parameter_count());
        assert_eq!(r.row("conv7").unwrap().params, (4096 + 1) * 4096);
        assert_eq!(r.row("pool1").unwrap().params, 0);
        assert!(r.to_csv().unwrap().starts_with("name,act_elems,act_bytes,params,param_bytes\n"));
        assert_eq!(r.rows.len(), 13 + 5 + 3);
    }
}
