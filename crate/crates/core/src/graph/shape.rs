use std::collections::BTreeMap;

use super::{Graph, Node, NodeId, OpKind, TensorSpec};
use crate::error::{Error, Result};
use crate::tensor::DType;

/// Same-padding geometry for a strided convolution: `(out, pad_before)`.
pub fn conv_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Transposed-convolution geometry with output exactly `input * stride`:
/// `(out, pad_before)` where `pad_before` is cropped from the full output.
pub fn transpose_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    (input * stride, kernel.saturating_sub(stride) / 2)
}

fn hwc(node: &Node, spec: &TensorSpec) -> Result<[usize; 3]> {
    match spec.shape[..] {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::Shape {
            node: node.id,
            msg: format!("{} needs an H×W×C input, got {spec}", node.kind),
        }),
    }
}

fn conv_weight(node: &Node, spec: &TensorSpec, in_c: usize) -> Result<[usize; 4]> {
    match spec.shape[..] {
        [kh, kw, ci, co] if ci == in_c && kh > 0 && kw > 0 => Ok([kh, kw, ci, co]),
        _ => Err(Error::Shape {
            node: node.id,
            msg: format!("weight {spec} incompatible with {in_c} input channels (want KH×KW×{in_c}×Cout)"),
        }),
    }
}

fn vector_of(node: &Node, spec: &TensorSpec, len: usize, what: &str) -> Result<()> {
    if spec.shape != [len] {
        return Err(Error::Shape {
            node: node.id,
            msg: format!("{what} {spec} does not match {len} channels"),
        });
    }
    Ok(())
}

/// Infers the output spec of every node. All `Input` nodes take `input_spec`.
pub fn infer_shapes(g: &Graph, input_spec: &TensorSpec) -> Result<BTreeMap<NodeId, TensorSpec>> {
    let order = g.topo_sort()?;
    let mut specs: BTreeMap<NodeId, TensorSpec> = BTreeMap::new();
    for id in order {
        let node = g.node(id);
        let mut ins = Vec::with_capacity(node.inputs.len());
        for i in &node.inputs {
            ins.push(specs.get(i).ok_or_else(|| Error::Shape {
                node: id,
                msg: format!("input {i} is missing"),
            })?);
        }
        if ins.len() != node.kind.arity() {
            return Err(Error::Shape {
                node: id,
                msg: format!("{} expects {} inputs, has {}", node.kind, node.kind.arity(), ins.len()),
            });
        }
        let spec = infer_node(node, &ins, input_spec)?;
        specs.insert(id, spec);
    }
    Ok(specs)
}

fn infer_node(node: &Node, ins: &[&TensorSpec], input_spec: &TensorSpec) -> Result<TensorSpec> {
    let f32_spec = |shape: Vec<usize>| Ok(TensorSpec::f32(shape));
    let shape_err = |msg: String| Error::Shape { node: node.id, msg };
    if let Some(pad) = node.attr_str("padding") {
        if pad != "same" {
            return Err(shape_err(format!("unsupported padding `{pad}`")));
        }
    }
    match node.kind {
        OpKind::Const => {
            let t = node.payload.as_ref().ok_or_else(|| shape_err("Const without payload".into()))?;
            Ok(TensorSpec {
                shape: t.shape().to_vec(),
                dtype: t.dtype(),
            })
        }
        OpKind::Input => Ok(input_spec.clone()),
        OpKind::Conv2D | OpKind::FusedConvBiasRelu => {
            let [h, w, c] = hwc(node, ins[0])?;
            let [kh, kw, _, co] = conv_weight(node, ins[1], c)?;
            if node.kind == OpKind::FusedConvBiasRelu {
                vector_of(node, ins[2], co, "bias")?;
            }
            let s = node.stride();
            let (oh, _) = conv_padding(h, kh, s);
            let (ow, _) = conv_padding(w, kw, s);
            f32_spec(vec![oh, ow, co])
        }
        OpKind::ConvTranspose2D => {
            let [h, w, c] = hwc(node, ins[0])?;
            let [kh, kw, _, co] = conv_weight(node, ins[1], c)?;
            let s = node.stride();
            f32_spec(vec![transpose_padding(h, kh, s).0, transpose_padding(w, kw, s).0, co])
        }
        OpKind::BiasAdd => {
            let [_, _, c] = hwc(node, ins[0])?;
            vector_of(node, ins[1], c, "bias")?;
            f32_spec(ins[0].shape.clone())
        }
        OpKind::BatchNormFrozen => {
            let [_, _, c] = hwc(node, ins[0])?;
            for (spec, what) in ins[1..].iter().zip(["gamma", "beta", "mean", "variance"]) {
                vector_of(node, spec, c, what)?;
            }
            f32_spec(ins[0].shape.clone())
        }
        OpKind::Relu | OpKind::Identity => Ok(TensorSpec {
            shape: ins[0].shape.clone(),
            dtype: if node.kind == OpKind::Identity { ins[0].dtype } else { DType::F32 },
        }),
        OpKind::Softmax => {
            hwc(node, ins[0])?;
            f32_spec(ins[0].shape.clone())
        }
        OpKind::ArgMax => {
            let [h, w, _] = hwc(node, ins[0])?;
            f32_spec(vec![h, w, 1])
        }
        OpKind::MaxPool2x2 => {
            let [h, w, c] = hwc(node, ins[0])?;
            if h < 2 || w < 2 {
                return Err(shape_err(format!("2×2 pool on {}", ins[0])));
            }
            f32_spec(vec![h / 2, w / 2, c])
        }
        OpKind::Add => {
            if ins[0].shape != ins[1].shape {
                return Err(shape_err(format!(
                    "Add operands differ: {} (node {}) vs {} (node {})",
                    ins[0], node.inputs[0], ins[1], node.inputs[1]
                )));
            }
            f32_spec(ins[0].shape.clone())
        }
        OpKind::ResizeNearest => {
            let [_, _, c] = hwc(node, ins[0])?;
            match node.attr_ints("size") {
                Some(&[h, w]) if h > 0 && w > 0 => f32_spec(vec![h as usize, w as usize, c]),
                _ => Err(shape_err("ResizeNearest needs a positive `size` = [h, w] attribute".into())),
            }
        }
    }
}
