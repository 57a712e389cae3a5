use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{eval_node, ConvKernel, KernelChoice};
use crate::error::{Error, Result};
use crate::graph::{infer_shapes, Graph, NodeId, TensorSpec};
use crate::tensor::Tensor;

/// Measurements behind one node's kernel choice.
#[derive(Debug, Clone)]
pub struct KernelTiming {
    pub node: NodeId,
    pub name: String,
    /// Median per kernel, in `ConvKernel::ALL` order.
    pub medians: Vec<(ConvKernel, Duration)>,
    /// Max abs difference between the two kernels on the probe input.
    pub max_abs_diff: f32,
    /// False if the kernels disagreed; the node then falls back to `Direct`.
    pub gate_ok: bool,
    pub chosen: ConvKernel,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    v[v.len() / 2]
}

pub fn autotune(g: &Graph, input_spec: &TensorSpec, repeats: usize) -> Result<KernelChoice> {
    autotune_with_report(g, input_spec, repeats).map(|(c, _)| c)
}

/// Times every kernel variant on each conv-like node with a seeded probe input
/// of the node's real input shape and its real weights, keeping the variant
/// with the smallest median.
pub fn autotune_with_report(
    g: &Graph,
    input_spec: &TensorSpec,
    repeats: usize,
) -> Result<(KernelChoice, Vec<KernelTiming>)> {
    if repeats < 3 {
        return Err(Error::invalid(format!("autotune needs at least 3 repeats, got {repeats}")));
    }
    let specs = infer_shapes(g, input_spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut choice = KernelChoice::default();
    let mut report = Vec::new();
    for node in g.nodes.values().filter(|n| n.kind.is_conv_like()) {
        let probe_shape = specs[&node.inputs[0]].shape.clone();
        let fan_in: usize = specs[&node.inputs[1]].shape[..3].iter().product();
        let amp = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = probe_shape.iter().product();
        let probe = Tensor::from_f32(probe_shape, (0..n).map(|_| rng.random_range(-amp..amp)).collect())?;
        let params: Vec<Tensor> = node.inputs[1..]
            .iter()
            .map(|i| match &g.node(*i).payload {
                Some(t) => t.to_f32(),
                None => Tensor::zeros(specs[i].shape.clone()),
            })
            .collect();
        let mut ins: Vec<&Tensor> = vec![&probe];
        ins.extend(params.iter());

        let outs: Vec<Tensor> = ConvKernel::ALL
            .iter()
            .map(|&k| eval_node(node, &ins, k))
            .collect::<Result<_>>()?;
        let diff = outs[0].max_abs_diff(&outs[1]);
        let scale = outs[0].to_f32_vec().iter().fold(1.0f32, |m, v| m.max(v.abs()));
        let gate_ok = diff <= 1e-6 * scale;

        let mut medians = Vec::new();
        for &k in &ConvKernel::ALL {
            let times = (0..repeats)
                .map(|_| {
                    let t0 = Instant::now();
                    let out = eval_node(node, &ins, k);
                    let dt = t0.elapsed();
                    std::hint::black_box(out).map(|_| dt)
                })
                .collect::<Result<Vec<_>>>()?;
            medians.push((k, median(times)));
        }
        let chosen = if gate_ok {
            // First minimum wins, so ties keep the reference kernel.
            medians.iter().min_by_key(|(_, d)| *d).unwrap().0
        } else {
            log::warn!("kernel mismatch {diff} on {}; keeping direct", node.name);
            ConvKernel::Direct
        };
        choice.kernels.insert(node.id, chosen);
        report.push(KernelTiming {
            node: node.id,
            name: node.name.clone(),
            medians,
            max_abs_diff: diff,
            gate_ok,
            chosen,
        });
    }
    Ok((choice, report))
}
