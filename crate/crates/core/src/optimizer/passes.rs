use std::collections::{BTreeMap, HashMap, HashSet};

use super::PassReport;
use crate::error::{Error, Result};
use crate::executor::{eval_node, ConvKernel};
use crate::graph::{AttrValue, Attrs, Graph, Node, NodeId, OpKind};
use crate::tensor::{DType, Tensor};

/// Float constants with at least this many elements are quantized.
pub const DEFAULT_QUANT_THRESHOLD: usize = 1024;

fn unique_name(g: &Graph, base: &str) -> String {
    let taken: HashSet<&str> = g.nodes.values().map(|n| n.name.as_str()).collect();
    if !taken.contains(base) {
        return base.to_string();
    }
    (1..).map(|i| format!("{base}_{i}")).find(|n| !taken.contains(n.as_str())).unwrap()
}

/// Removes `candidates` (and, transitively, their inputs) once nothing uses them.
fn remove_dead(g: &mut Graph, candidates: impl IntoIterator<Item = NodeId>) -> usize {
    let mut stack: Vec<NodeId> = candidates.into_iter().collect();
    let mut removed = 0;
    while let Some(id) = stack.pop() {
        if !g.nodes.contains_key(&id) || g.outputs.contains(&id) {
            continue;
        }
        if g.nodes.values().any(|n| n.inputs.contains(&id)) {
            continue;
        }
        let n = g.nodes.remove(&id).unwrap();
        removed += 1;
        stack.extend(n.inputs);
    }
    removed
}

fn single_consumer(consumers: &HashMap<NodeId, Vec<NodeId>>, g: &Graph, id: NodeId) -> Option<NodeId> {
    match consumers.get(&id).map(Vec::as_slice) {
        Some(&[c]) if !g.outputs.contains(&id) && g.node(c).inputs.iter().filter(|&&i| i == id).count() == 1 => Some(c),
        _ => None,
    }
}

fn const_payload(g: &Graph, id: NodeId) -> Option<&Tensor> {
    g.get(id).filter(|n| n.kind == OpKind::Const).and_then(|n| n.payload.as_ref())
}

pub fn add_default_attributes(g: &Graph) -> Result<(Graph, PassReport)> {
    let mut out = g.clone();
    let mut rewrites = 0;
    for n in out.nodes.values_mut() {
        let mut defaults: Vec<(&str, AttrValue)> = Vec::new();
        match n.kind {
            OpKind::Conv2D | OpKind::ConvTranspose2D => {
                defaults.push(("strides", AttrValue::Int(1)));
                defaults.push(("padding", AttrValue::Str("same".into())));
            }
            OpKind::FusedConvBiasRelu => {
                defaults.push(("strides", AttrValue::Int(1)));
                defaults.push(("padding", AttrValue::Str("same".into())));
                defaults.push(("relu", AttrValue::Bool(true)));
            }
            OpKind::BatchNormFrozen => defaults.push(("epsilon", AttrValue::Float(1e-3))),
            _ => {}
        }
        for (k, v) in defaults {
            if !n.attrs.contains_key(k) {
                n.attrs.insert(k.to_string(), v);
                rewrites += 1;
            }
        }
    }
    let report = PassReport::new("add_default_attributes", g, &out, rewrites, vec![]);
    Ok((out, report))
}

pub fn strip_unused_nodes(g: &Graph) -> Result<(Graph, PassReport)> {
    let mut out = g.clone();
    let removed = out.prune_unreachable();
    let report = PassReport::new("strip_unused_nodes", g, &out, removed, vec![]);
    Ok((out, report))
}

pub fn remove_identity_nodes(g: &Graph) -> Result<(Graph, PassReport)> {
    let mut out = g.clone();
    let ids: Vec<NodeId> = out.nodes.values().filter(|n| n.kind == OpKind::Identity).map(|n| n.id).collect();
    for &id in &ids {
        let src = out.node(id).inputs[0];
        out.rewire(id, src);
        out.nodes.remove(&id);
    }
    let report = PassReport::new("remove_identity_nodes", g, &out, ids.len(), vec![]);
    Ok((out, report))
}

/// Structural identity of a node: kind, attributes, (remapped) inputs and payload metadata.
fn merge_key(n: &Node) -> String {
    let attrs: Vec<String> = n.attrs.iter().map(|(k, v)| format!("{k}={}", v.canonical())).collect();
    let payload = n.payload.as_ref().map(|t| {
        let q = t.quant().map(|p| (p.scale.to_bits(), p.minimum.to_bits()));
        format!("{}{:?}{:?}{:08x}", t.dtype(), t.shape(), q, crc32fast::hash(&t.payload_bytes()))
    });
    format!("{}|{}|{:?}|{:?}", n.kind.code(), attrs.join(","), n.inputs, payload)
}

pub fn merge_duplicate_nodes(g: &Graph) -> Result<(Graph, PassReport)> {
    let mut out = g.clone();
    let order = out.topo_sort()?;
    let mut seen: HashMap<String, Vec<NodeId>> = HashMap::new();
    let mut merged = 0;
    for id in order {
        if out.node(id).kind == OpKind::Input {
            continue;
        }
        let key = merge_key(out.node(id));
        let survivor = seen.get(&key).and_then(|cands| {
            cands.iter().copied().find(|&c| match (&out.node(c).payload, &out.node(id).payload) {
                (Some(a), Some(b)) => a.bitwise_eq(b),
                (None, None) => true,
                _ => false,
            })
        });
        match survivor {
            Some(s) => {
                out.rewire(id, s);
                out.nodes.remove(&id);
                merged += 1;
            }
            None => seen.entry(key).or_default().push(id),
        }
    }
    let report = PassReport::new("merge_duplicate_nodes", g, &out, merged, vec![]);
    Ok((out, report))
}

pub fn fold_constants(g: &Graph) -> Result<(Graph, PassReport)> {
    let mut out = g.clone();
    let order = out.topo_sort()?;
    let mut foldable: HashSet<NodeId> = HashSet::new();
    for &id in &order {
        let n = out.node(id);
        if n.kind != OpKind::Const
            && n.kind != OpKind::Input
            && n.inputs.iter().all(|i| foldable.contains(i) || out.node(*i).kind == OpKind::Const)
        {
            foldable.insert(id);
        }
    }
    let consumers = out.consumers();
    // Roots: foldable nodes whose value escapes the constant region.
    let roots: Vec<NodeId> = order
        .iter()
        .copied()
        .filter(|id| foldable.contains(id))
        .filter(|id| {
            out.outputs.contains(id)
                || consumers.get(id).is_some_and(|cs| cs.iter().any(|c| !foldable.contains(c)))
        })
        .collect();

    let mut values: HashMap<NodeId, Tensor> = HashMap::new();
    let mut notes = Vec::new();
    let mut rewrites = 0;
    let mut dead = Vec::new();
    for root in roots {
        let value = match eval_const(&out, root, &mut values) {
            Ok(v) => v,
            Err(e) => {
                notes.push(format!("skipped {} ({}): {e}", root, out.node(root).name));
                continue;
            }
        };
        let feed_bytes: usize = const_sources(&out, root).iter().map(|&c| out.node(c).payload.as_ref().unwrap().nbytes()).sum();
        if value.nbytes() > feed_bytes {
            notes.push(format!(
                "skipped {} ({}): folded value ({} B) larger than its constant inputs ({} B)",
                root,
                out.node(root).name,
                value.nbytes(),
                feed_bytes
            ));
            continue;
        }
        let n = out.nodes.get_mut(&root).unwrap();
        dead.append(&mut n.inputs);
        n.kind = OpKind::Const;
        n.attrs = Attrs::new();
        n.payload = Some(value);
        rewrites += 1;
    }
    remove_dead(&mut out, dead);
    let report = PassReport::new("fold_constants", g, &out, rewrites, notes);
    Ok((out, report))
}

fn eval_const(g: &Graph, id: NodeId, cache: &mut HashMap<NodeId, Tensor>) -> Result<Tensor> {
    if let Some(v) = cache.get(&id) {
        return Ok(v.clone());
    }
    let n = g.node(id);
    let ins = n.inputs.iter().map(|&i| eval_const(g, i, cache)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = ins.iter().collect();
    let v = eval_node(n, &refs, ConvKernel::Direct)?;
    if n.kind != OpKind::Const && v.as_f32().is_some_and(|d| d.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite {
            node: id,
            name: n.name.clone(),
        });
    }
    cache.insert(id, v.clone());
    Ok(v)
}

fn const_sources(g: &Graph, root: NodeId) -> Vec<NodeId> {
    let mut seen = HashSet::new();
    let mut stack = vec![root];
    let mut out = Vec::new();
    while let Some(id) = stack.pop() {
        if seen.insert(id) {
            let n = g.node(id);
            if n.kind == OpKind::Const {
                out.push(id);
            }
            stack.extend(n.inputs.iter().copied());
        }
    }
    out
}

pub fn fold_batch_norms(g: &Graph) -> Result<(Graph, PassReport)> {
    let mut out = g.clone();
    let mut notes = Vec::new();
    let mut rewrites = 0;
    let bns: Vec<NodeId> = out.nodes.values().filter(|n| n.kind == OpKind::BatchNormFrozen).map(|n| n.id).collect();
    for bn_id in bns {
        let consumers = out.consumers();
        let bn = out.node(bn_id).clone();
        let params: Option<Vec<Vec<f32>>> = bn.inputs[1..].iter().map(|&i| const_payload(&out, i).map(Tensor::to_f32_vec)).collect();
        let Some(params) = params else {
            notes.push(format!("{} ({}): batch-norm parameters are not constant", bn_id, bn.name));
            continue;
        };
        // Conv2D -> BatchNorm, or Conv2D -> BiasAdd -> BatchNorm.
        let prev = bn.inputs[0];
        let (conv_id, old_bias) = match out.node(prev).kind {
            OpKind::Conv2D => (Some(prev), None),
            OpKind::BiasAdd => {
                let inner = out.node(prev).inputs[0];
                let bias = const_payload(&out, out.node(prev).inputs[1]).map(Tensor::to_f32_vec);
                match (out.node(inner).kind, bias) {
                    (OpKind::Conv2D, Some(b)) if single_consumer(&consumers, &out, prev) == Some(bn_id) => {
                        (Some(inner), Some(b))
                    }
                    _ => (None, None),
                }
            }
            _ => (None, None),
        };
        let conv_id = match conv_id {
            Some(c) if single_consumer(&consumers, &out, c).is_some() => c,
            _ => {
                notes.push(format!("{} ({}): not preceded by an exclusively-owned Conv2D; left untouched", bn_id, bn.name));
                continue;
            }
        };
        let conv = out.node(conv_id).clone();
        let Some(w) = const_payload(&out, conv.inputs[1]).cloned() else {
            notes.push(format!("{} ({}): convolution weights are not constant", bn_id, bn.name));
            continue;
        };
        let [gamma, beta, mean, var] = [&params[0], &params[1], &params[2], &params[3]];
        let eps = bn.attr_float("epsilon").unwrap_or(1e-3);
        let cout = *w.shape().last().unwrap();
        if gamma.len() != cout {
            notes.push(format!("{} ({}): {} channels vs {cout} filters", bn_id, bn.name, gamma.len()));
            continue;
        }
        let scale: Vec<f32> = (0..cout).map(|c| gamma[c] / (var[c] + eps).sqrt()).collect();
        let folded_w: Vec<f32> = w.to_f32_vec().iter().enumerate().map(|(i, v)| v * scale[i % cout]).collect();
        let b0 = old_bias.unwrap_or_else(|| vec![0.0; cout]);
        let folded_b: Vec<f32> = (0..cout).map(|c| (b0[c] - mean[c]) * scale[c] + beta[c]).collect();

        let w_name = unique_name(&out, &format!("{}/folded_weights", conv.name));
        let w_id = out.add_const(w_name, Tensor::from_f32(w.shape().to_vec(), folded_w)?);
        let b_name = unique_name(&out, &format!("{}/folded_bias", bn.name));
        let b_id = out.add_const(b_name, Tensor::from_f32(vec![cout], folded_b)?);
        let old_w = conv.inputs[1];
        out.nodes.get_mut(&conv_id).unwrap().inputs[1] = w_id;
        let mut dead = vec![old_w];
        dead.extend_from_slice(&bn.inputs[1..]);
        if prev != conv_id {
            dead.push(prev);
        }
        let node = out.nodes.get_mut(&bn_id).unwrap();
        node.kind = OpKind::BiasAdd;
        node.inputs = vec![conv_id, b_id];
        node.attrs = Attrs::new();
        remove_dead(&mut out, dead);
        rewrites += 1;
    }
    let report = PassReport::new("fold_batch_norms", g, &out, rewrites, notes);
    Ok((out, report))
}

/// Reports `ResizeNearest → Conv2D` adjacencies without rewriting them.
pub fn fuse_resize_and_conv(g: &Graph) -> Result<(Graph, PassReport)> {
    let matches = g
        .nodes
        .values()
        .filter(|n| n.kind == OpKind::Conv2D)
        .filter(|n| g.get(n.inputs[0]).is_some_and(|p| p.kind == OpKind::ResizeNearest))
        .count();
    let out = g.clone();
    let report = PassReport::new(
        "fuse_resize_and_conv",
        g,
        &out,
        0,
        vec![format!("{matches} resize->conv matches (detected, not rewritten)")],
    );
    Ok((out, report))
}

pub fn fuse_conv_bias_relu(g: &Graph) -> Result<(Graph, PassReport)> {
    let mut out = g.clone();
    let consumers = g.consumers();
    let mut rewrites = 0;
    let convs: Vec<NodeId> = g.nodes.values().filter(|n| n.kind == OpKind::Conv2D).map(|n| n.id).collect();
    for conv_id in convs {
        let Some(bias_add) = single_consumer(&consumers, g, conv_id) else { continue };
        let ba = g.node(bias_add);
        if ba.kind != OpKind::BiasAdd || ba.inputs[0] != conv_id {
            continue;
        }
        let relu = single_consumer(&consumers, g, bias_add).filter(|&r| g.node(r).kind == OpKind::Relu);
        let conv = g.node(conv_id);
        let target = relu.unwrap_or(bias_add);
        let mut attrs = conv.attrs.clone();
        attrs.insert("relu".into(), AttrValue::Bool(relu.is_some()));
        let node = out.nodes.get_mut(&target).unwrap();
        node.kind = OpKind::FusedConvBiasRelu;
        node.inputs = vec![conv.inputs[0], conv.inputs[1], ba.inputs[1]];
        node.attrs = attrs;
        out.nodes.remove(&conv_id);
        if relu.is_some() {
            out.nodes.remove(&bias_add);
        }
        rewrites += 1;
    }
    let report = PassReport::new("fuse_conv_bias_relu", g, &out, rewrites, vec![]);
    Ok((out, report))
}

pub fn quantize_weights(g: &Graph) -> Result<(Graph, PassReport)> {
    quantize_weights_with(g, DEFAULT_QUANT_THRESHOLD)
}

/// Per-tensor min/max 8-bit quantization of float constants with at least
/// `threshold` elements.
pub fn quantize_weights_with(g: &Graph, threshold: usize) -> Result<(Graph, PassReport)> {
    let mut out = g.clone();
    let mut rewrites = 0;
    let mut kept_small = 0;
    for n in out.nodes.values_mut() {
        let Some(t) = n.payload.as_ref() else { continue };
        if t.dtype() != DType::F32 {
            continue;
        }
        if t.len() < threshold {
            kept_small += 1;
            continue;
        }
        let q = t.quantize().map_err(|_| Error::NonFiniteWeight {
            node: n.id,
            name: n.name.clone(),
        })?;
        n.payload = Some(q);
        rewrites += 1;
    }
    let notes = vec![format!("{kept_small} constants below {threshold} elements kept as float32")];
    let report = PassReport::new("quantize_weights", g, &out, rewrites, notes);
    Ok((out, report))
}

/// Expands every quant8 constant back to float32.
pub fn dequantize_weights(g: &Graph) -> Graph {
    let mut out = g.clone();
    for n in out.nodes.values_mut() {
        if let Some(t) = n.payload.as_mut() {
            if t.dtype() == DType::Q8 {
                *t = t.to_f32();
            }
        }
    }
    out
}

/// Renumbers node ids so that id order is a valid execution order.
pub fn sort_by_execution_order(g: &Graph) -> Result<(Graph, PassReport)> {
    let order = g.topo_sort()?;
    let remap: HashMap<NodeId, NodeId> = order.iter().enumerate().map(|(i, &id)| (id, NodeId(i as u32))).collect();
    let rewrites = remap.iter().filter(|(a, b)| a != b).count();
    let nodes: BTreeMap<NodeId, Node> = g
        .nodes
        .values()
        .map(|n| {
            let mut m = n.clone();
            m.id = remap[&n.id];
            m.inputs = n.inputs.iter().map(|i| remap.get(i).copied().unwrap_or(*i)).collect();
            (m.id, m)
        })
        .collect();
    let out = Graph {
        name: g.name.clone(),
        nodes,
        outputs: g.outputs.iter().map(|o| remap.get(o).copied().unwrap_or(*o)).collect(),
    };
    let report = PassReport::new("sort_by_execution_order", g, &out, rewrites, vec![]);
    Ok((out, report))
}
