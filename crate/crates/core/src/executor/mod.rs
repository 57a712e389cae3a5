//! Reference interpreter, kernel auto-tuner and tensor memory planner.

mod autotune;
pub mod kernels;
mod planner;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeId, OpKind};
use crate::tensor::{resize_nearest, Tensor};

pub use autotune::{autotune, autotune_with_report, KernelTiming};
pub use planner::{execute_planned, plan_memory, verify_plan, MemoryPlan, PlannedTensor};

use kernels::ConvGeom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConvKernel {
    #[default]
    Direct,
    Im2col,
}

impl ConvKernel {
    pub const ALL: [ConvKernel; 2] = [ConvKernel::Direct, ConvKernel::Im2col];
}

impl fmt::Display for ConvKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvKernel::Direct => "direct",
            ConvKernel::Im2col => "im2col",
        })
    }
}

/// Kernel selection per convolution-like node; nodes not listed run `Direct`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KernelChoice {
    pub kernels: BTreeMap<NodeId, ConvKernel>,
}

impl KernelChoice {
    /// The same kernel for every conv-like node of `g`.
    pub fn uniform(g: &Graph, kernel: ConvKernel) -> Self {
        KernelChoice {
            kernels: g
                .nodes
                .values()
                .filter(|n| n.kind.is_conv_like())
                .map(|n| (n.id, kernel))
                .collect(),
        }
    }

    pub fn get(&self, id: NodeId) -> ConvKernel {
        self.kernels.get(&id).copied().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn covers(&self, g: &Graph) -> bool {
        g.nodes
            .values()
            .filter(|n| n.kind.is_conv_like())
            .all(|n| self.kernels.contains_key(&n.id))
    }
}

/// Graph outputs in declaration order.
#[derive(Debug, Clone)]
pub struct Outputs(pub Vec<(String, Tensor)>);

impl Outputs {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.0.iter().map(|(_, t)| t)
    }

    pub fn first(&self) -> &Tensor {
        &self.0[0].1
    }

    /// Positional bitwise comparison (names may differ after rewrites).
    pub fn bitwise_eq(&self, other: &Outputs) -> bool {
        self.0.len() == other.0.len() && self.tensors().zip(other.tensors()).all(|(a, b)| a.bitwise_eq(b))
    }

    pub fn max_abs_diff(&self, other: &Outputs) -> f32 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f32::max)
    }
}

fn exec_err(node: &Node, msg: impl Into<String>) -> Error {
    Error::Exec {
        node: node.id,
        msg: msg.into(),
    }
}

fn shape_err(node: &Node, msg: impl Into<String>) -> Error {
    Error::Shape {
        node: node.id,
        msg: msg.into(),
    }
}

fn f32s(t: &Tensor) -> std::borrow::Cow<'_, [f32]> {
    match t.as_f32() {
        Some(d) => std::borrow::Cow::Borrowed(d),
        None => std::borrow::Cow::Owned(t.to_f32_vec()),
    }
}

fn hwc_of(node: &Node, t: &Tensor) -> Result<[usize; 3]> {
    t.hwc().map_err(|_| shape_err(node, format!("expected H×W×C input, got {:?}", t.shape())))
}

fn conv_geom(node: &Node, x: &Tensor, w: &Tensor) -> Result<ConvGeom> {
    let [h, wd, cin] = hwc_of(node, x)?;
    match *w.shape() {
        [kh, kw, ci, cout] if ci == cin && kh > 0 && kw > 0 => Ok(ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            stride: node.stride(),
        }),
        _ => Err(shape_err(
            node,
            format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape()),
        )),
    }
}

fn channel_vec<'a>(node: &Node, t: &'a Tensor, c: usize, what: &str) -> Result<std::borrow::Cow<'a, [f32]>> {
    if t.shape() != [c] {
        return Err(shape_err(node, format!("{what} {:?} does not match {c} channels", t.shape())));
    }
    Ok(f32s(t))
}

fn add_bias(data: &mut [f32], bias: &[f32], relu: bool) {
    let c = bias.len();
    if c == 0 {
        return;
    }
    for px in data.chunks_mut(c) {
        for (v, &b) in px.iter_mut().zip(bias) {
            *v += b;
            if relu {
                *v = relu_scalar(*v);
            }
        }
    }
}

#[inline]
fn relu_scalar(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Evaluates one non-`Input` node on already-computed inputs.
pub fn eval_node(node: &Node, inputs: &[&Tensor], kernel: ConvKernel) -> Result<Tensor> {
    if inputs.len() != node.kind.arity() {
        return Err(exec_err(node, format!("expected {} inputs, got {}", node.kind.arity(), inputs.len())));
    }
    let out = match node.kind {
        OpKind::Const => node
            .payload
            .as_ref()
            .ok_or_else(|| exec_err(node, "Const without payload"))?
            .to_f32(),
        OpKind::Input => return Err(exec_err(node, "Input nodes are bound by the caller")),
        OpKind::Conv2D | OpKind::FusedConvBiasRelu => {
            let g = conv_geom(node, inputs[0], inputs[1])?;
            let (x, w) = (f32s(inputs[0]), f32s(inputs[1]));
            let mut y = match kernel {
                ConvKernel::Direct => kernels::conv2d_direct(&x, &w, &g),
                ConvKernel::Im2col => kernels::conv2d_im2col(&x, &w, &g),
            };
            if node.kind == OpKind::FusedConvBiasRelu {
                let b = channel_vec(node, inputs[2], g.cout, "bias")?;
                add_bias(&mut y, &b, node.attr_bool("relu").unwrap_or(true));
            }
            let (oh, ow, _, _) = g.conv_out();
            Tensor::from_f32(vec![oh, ow, g.cout], y)?
        }
        OpKind::ConvTranspose2D => {
            let g = conv_geom(node, inputs[0], inputs[1])?;
            let (x, w) = (f32s(inputs[0]), f32s(inputs[1]));
            let y = match kernel {
                ConvKernel::Direct => kernels::conv_transpose_direct(&x, &w, &g),
                ConvKernel::Im2col => kernels::conv_transpose_col2im(&x, &w, &g),
            };
            let (oh, ow, _, _) = g.transpose_out();
            Tensor::from_f32(vec![oh, ow, g.cout], y)?
        }
        OpKind::BiasAdd => {
            let [_, _, c] = hwc_of(node, inputs[0])?;
            let b = channel_vec(node, inputs[1], c, "bias")?;
            let mut y = inputs[0].to_f32_vec();
            add_bias(&mut y, &b, false);
            Tensor::from_f32(inputs[0].shape().to_vec(), y)?
        }
        OpKind::BatchNormFrozen => {
            let [_, _, c] = hwc_of(node, inputs[0])?;
            let eps = node.attr_float("epsilon").unwrap_or(1e-3);
            let gamma = channel_vec(node, inputs[1], c, "gamma")?;
            let beta = channel_vec(node, inputs[2], c, "beta")?;
            let mean = channel_vec(node, inputs[3], c, "mean")?;
            let var = channel_vec(node, inputs[4], c, "variance")?;
            let mut y = inputs[0].to_f32_vec();
            if c > 0 {
                for px in y.chunks_mut(c) {
                    for ch in 0..c {
                        px[ch] = (px[ch] - mean[ch]) / (var[ch] + eps).sqrt() * gamma[ch] + beta[ch];
                    }
                }
            }
            Tensor::from_f32(inputs[0].shape().to_vec(), y)?
        }
        OpKind::Relu => {
            let y = f32s(inputs[0]).iter().map(|&v| relu_scalar(v)).collect();
            Tensor::from_f32(inputs[0].shape().to_vec(), y)?
        }
        OpKind::Identity => inputs[0].clone(),
        OpKind::MaxPool2x2 => {
            let [h, w, c] = hwc_of(node, inputs[0])?;
            if h < 2 || w < 2 {
                return Err(shape_err(node, format!("2×2 pool on {:?}", inputs[0].shape())));
            }
            Tensor::from_f32(vec![h / 2, w / 2, c], kernels::max_pool_2x2(&f32s(inputs[0]), h, w, c))?
        }
        OpKind::Add => {
            if inputs[0].shape() != inputs[1].shape() {
                return Err(shape_err(
                    node,
                    format!("Add operands differ: {:?} vs {:?}", inputs[0].shape(), inputs[1].shape()),
                ));
            }
            let (a, b) = (f32s(inputs[0]), f32s(inputs[1]));
            Tensor::from_f32(inputs[0].shape().to_vec(), a.iter().zip(b.iter()).map(|(x, y)| x + y).collect())?
        }
        OpKind::Softmax => {
            let [_, _, c] = hwc_of(node, inputs[0])?;
            Tensor::from_f32(inputs[0].shape().to_vec(), kernels::softmax(&f32s(inputs[0]), c))?
        }
        OpKind::ArgMax => {
            let [h, w, c] = hwc_of(node, inputs[0])?;
            Tensor::from_f32(vec![h, w, 1], kernels::argmax(&f32s(inputs[0]), c))?
        }
        OpKind::ResizeNearest => {
            let (h, w) = match node.attr_ints("size") {
                Some(&[h, w]) if h > 0 && w > 0 => (h as usize, w as usize),
                _ => return Err(exec_err(node, "ResizeNearest needs `size` = [h, w]")),
            };
            resize_nearest(&inputs[0].to_f32(), h, w)?
        }
    };
    Ok(out)
}

fn check_finite(node: &Node, t: &Tensor) -> Result<()> {
    if t.as_f32().is_some_and(|d| d.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            node: node.id,
            name: node.name.clone(),
        });
    }
    Ok(())
}

/// Binds `Input` nodes by name, converting them to float.
fn bind_inputs(g: &Graph, inputs: &HashMap<String, Tensor>) -> Result<HashMap<NodeId, Tensor>> {
    let mut bound = HashMap::new();
    for n in g.inputs() {
        let t = inputs
            .get(&n.name)
            .ok_or_else(|| exec_err(n, format!("missing input `{}`", n.name)))?;
        bound.insert(n.id, t.to_f32());
    }
    Ok(bound)
}

/// Runs `g` once. Intermediate tensors are dropped after their last use.
pub fn execute(g: &Graph, inputs: &HashMap<String, Tensor>, choice: Option<&KernelChoice>) -> Result<Outputs> {
    g.ensure_valid()?;
    let order = g.topo_sort()?;
    let mut remaining: HashMap<NodeId, usize> = HashMap::new();
    for n in g.nodes.values() {
        for &i in &n.inputs {
            *remaining.entry(i).or_default() += 1;
        }
    }
    let mut values = bind_inputs(g, inputs)?;
    for id in order {
        let node = g.node(id);
        if node.kind != OpKind::Input {
            let kernel = choice.map_or(ConvKernel::Direct, |c| c.get(id));
            let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i]).collect();
            let out = eval_node(node, &ins, kernel)?;
            if node.kind != OpKind::Const {
                check_finite(node, &out)?;
            }
            values.insert(id, out);
        }
        for i in &node.inputs {
            let r = remaining.get_mut(i).unwrap();
            *r -= 1;
            if *r == 0 && !g.outputs.contains(i) {
                values.remove(i);
            }
        }
    }
    Ok(Outputs(
        g.outputs
            .iter()
            .map(|o| (g.node(*o).name.clone(), values[o].clone()))
            .collect(),
    ))
}

/// Convenience for single-input graphs.
pub fn execute_single(g: &Graph, input: &Tensor, choice: Option<&KernelChoice>) -> Result<Outputs> {
    let name = g
        .inputs()
        .next()
        .ok_or_else(|| Error::InvalidGraph("graph has no Input node".into()))?
        .name
        .clone();
    execute(g, &HashMap::from([(name, input.clone())]), choice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs;
    use crate::graph::AttrValue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_f32(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pointwise_permutation_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![3, 4, 3]);
        let perm = [2usize, 0, 1];
        let mut w = vec![0.0; 9];
        for (co, &ci) in perm.iter().enumerate() {
            w[ci * 3 + co] = 1.0;
        }
        let mut g = Graph::new("p");
        let i = g.add_input("x");
        let wc = g.add_const("w", Tensor::from_f32(vec![1, 1, 3, 3], w).unwrap());
        let c = g.add(OpKind::Conv2D, "c", &[i, wc], attrs! {});
        g.outputs = vec![c];
        for kernel in ConvKernel::ALL {
            let out = execute_single(&g, &x, Some(&KernelChoice::uniform(&g, kernel))).unwrap();
            let y = out.first().to_f32_vec();
            let xv = x.to_f32_vec();
            for px in 0..12 {
                for co in 0..3 {
                    assert_eq!(y[px * 3 + co], xv[px * 3 + perm[co]]);
                }
            }
        }
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let mut g = Graph::new("s");
        let i = g.add_input("x");
        let s = g.add(OpKind::Softmax, "s", &[i], attrs! {});
        g.outputs = vec![s];
        let out = execute_single(&g, &Tensor::zeros(vec![2, 3, 35]), None).unwrap();
        for &p in out.first().as_f32().unwrap() {
            assert!((p - 1.0 / 35.0).abs() < 1e-7);
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::from_f32(vec![1, 2, 3], vec![1.0, 3.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let mut g = Graph::new("a");
        let i = g.add_input("x");
        let a = g.add(OpKind::ArgMax, "a", &[i], attrs! {});
        g.outputs = vec![a];
        let out = execute_single(&g, &t, None).unwrap();
        assert_eq!(out.first().to_f32_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn missing_input_and_shape_mismatch() {
        let mut g = Graph::new("m");
        let i = g.add_input("x");
        let j = g.add_input("y");
        let a = g.add(OpKind::Add, "a", &[i, j], attrs! {});
        g.outputs = vec![a];
        let x = Tensor::zeros(vec![2, 2, 1]);
        let err = execute(&g, &HashMap::from([("x".to_string(), x.clone())]), None).unwrap_err();
        assert!(err.to_string().contains("missing input"), "{err}");
        let y = Tensor::zeros(vec![2, 2, 2]);
        let err = execute(&g, &HashMap::from([("x".to_string(), x), ("y".to_string(), y)]), None).unwrap_err();
        assert!(matches!(err, Error::Shape { node, .. } if node == a));
    }

    #[test]
    fn non_finite_output_reports_node() {
        let mut g = Graph::new("n");
        let i = g.add_input("x");
        let b = g.add_const("b", Tensor::from_f32(vec![1], vec![f32::INFINITY]).unwrap());
        let ba = g.add(OpKind::BiasAdd, "ba", &[i, b], attrs! {});
        g.outputs = vec![ba];
        let err = execute_single(&g, &Tensor::zeros(vec![1, 1, 1]), None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node, .. } if node == ba));
    }

    #[test]
    fn quantized_consts_execute_dequantized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, vec![1, 1, 2, 2]);
        let q = w.quantize().unwrap();
        let build = |wt: Tensor| {
            let mut g = Graph::new("q");
            let i = g.add_input("x");
            let c = g.add_const("w", wt);
            let conv = g.add(OpKind::Conv2D, "c", &[i, c], attrs! { "strides" => AttrValue::Int(1) });
            g.outputs = vec![conv];
            g
        };
        let x = rand_tensor(&mut rng, vec![2, 2, 2]);
        let a = execute_single(&build(q.clone()), &x, None).unwrap();
        let b = execute_single(&build(q.to_f32()), &x, None).unwrap();
        assert!(a.bitwise_eq(&b));
    }
}
