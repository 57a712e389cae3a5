//! Seeded random graphs and inputs for property tests and fixtures.
//!
//! The generated graphs are small but exercise every rewrite: conv/bias/relu
//! chains, batch norms, duplicated nodes, identity caps, constant-only
//! subgraphs, dead branches and resize-to-conv adjacencies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::attrs;
use crate::graph::{Graph, NodeId, OpKind, TensorSpec};
use crate::tensor::Tensor;

pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng, scale: f32) -> Tensor {
    let n = shape.iter().product();
    let d = Uniform::new_inclusive(-scale, scale).unwrap();
    Tensor::from_f32(shape, (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

pub fn random_input(spec: &TensorSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tensor(spec.shape.clone(), &mut rng, 1.0)
}

struct Builder {
    g: Graph,
    rng: ChaCha8Rng,
    /// Live values with their H×W×C shapes.
    values: Vec<(NodeId, [usize; 3])>,
}

impl Builder {
    fn name(&self, prefix: &str) -> String {
        format!("{prefix}_{}", self.g.next_id().0)
    }

    fn konst(&mut self, prefix: &str, shape: Vec<usize>, scale: f32) -> NodeId {
        let t = random_tensor(shape, &mut self.rng, scale);
        let name = self.name(prefix);
        self.g.add_const(name, t)
    }

    fn op(&mut self, kind: OpKind, prefix: &str, inputs: &[NodeId], attrs: crate::graph::Attrs) -> NodeId {
        let name = self.name(prefix);
        self.g.add(kind, name, inputs, attrs)
    }

    fn pick(&mut self) -> (NodeId, [usize; 3]) {
        // Favor recent values so graphs grow deep rather than wide.
        let n = self.values.len();
        let lo = n.saturating_sub(3);
        self.values[self.rng.random_range(lo..n)]
    }

    fn conv(&mut self, x: NodeId, [h, w, c]: [usize; 3], full_attrs: bool) -> (NodeId, [usize; 3]) {
        let k = if self.rng.random_bool(0.5) { 1 } else { 3 };
        let cout = self.rng.random_range(1..=4);
        let wt = self.konst("w", vec![k, k, c, cout], 1.0 / ((k * k * c) as f32).sqrt());
        let a = if full_attrs {
            attrs! { "strides" => 1i64, "padding" => "same", "kernel" => vec![k as i64, k as i64], "filters" => cout as i64 }
        } else {
            attrs! { "kernel" => vec![k as i64, k as i64] }
        };
        (self.op(OpKind::Conv2D, "conv", &[x, wt], a), [h, w, cout])
    }

    fn step(&mut self) {
        let (x, s) = self.pick();
        let [h, w, c] = s;
        match self.rng.random_range(0..11) {
            0 | 1 => {
                let full = self.rng.random_bool(0.7);
                let (y, ys) = self.conv(x, s, full);
                let b = self.konst("b", vec![ys[2]], 0.5);
                let y = self.op(OpKind::BiasAdd, "bias", &[y, b], attrs! {});
                self.values.push((y, ys));
                if self.rng.random_bool(0.6) {
                    let r = self.op(OpKind::Relu, "relu", &[y], attrs! {});
                    self.values.push((r, ys));
                }
            }
            2 => {
                let (y, ys) = self.conv(x, s, true);
                let mut y = y;
                if self.rng.random_bool(0.5) {
                    let b = self.konst("b", vec![ys[2]], 0.5);
                    y = self.op(OpKind::BiasAdd, "bias", &[y, b], attrs! {});
                }
                let c = ys[2];
                let gamma = self.konst("gamma", vec![c], 1.0);
                let beta = self.konst("beta", vec![c], 1.0);
                let mean = self.konst("mean", vec![c], 1.0);
                let var = {
                    let v: Vec<f32> = (0..c).map(|_| self.rng.random_range(0.25..2.0)).collect();
                    let name = self.name("var");
                    self.g.add_const(name, Tensor::from_f32(vec![c], v).unwrap())
                };
                let bn = self.op(
                    OpKind::BatchNormFrozen,
                    "bn",
                    &[y, gamma, beta, mean, var],
                    attrs! { "epsilon" => 1e-3f32 },
                );
                self.values.push((bn, ys));
            }
            3 => {
                let r = self.op(OpKind::Relu, "relu", &[x], attrs! {});
                let r2 = self.op(OpKind::Relu, "relu", &[x], attrs! {});
                let y = self.op(OpKind::Add, "add", &[r, r2], attrs! {});
                self.values.push((y, s));
            }
            4 => {
                let y = self.op(OpKind::Identity, "identity", &[x], attrs! {});
                self.values.push((y, s));
            }
            5 => {
                // Constant-only subgraph feeding a bias.
                let a = self.konst("ca", vec![c], 1.0);
                let b = self.konst("cb", vec![c], 1.0);
                let sum = self.op(OpKind::Add, "cadd", &[a, b], attrs! {});
                let r = self.op(OpKind::Relu, "crelu", &[sum], attrs! {});
                let y = self.op(OpKind::BiasAdd, "bias", &[x, r], attrs! {});
                self.values.push((y, s));
            }
            6 if h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 => {
                let y = self.op(OpKind::MaxPool2x2, "pool", &[x], attrs! {});
                self.values.push((y, [h / 2, w / 2, c]));
            }
            7 => {
                // Dead side branch.
                let k = self.konst("dead", vec![c], 1.0);
                let y = self.op(OpKind::BiasAdd, "dead_bias", &[x, k], attrs! {});
                self.op(OpKind::Relu, "dead_relu", &[y], attrs! {});
            }
            8 => {
                if let Some(&(o, _)) = self.values.iter().rev().skip(1).find(|(id, os)| *os == s && *id != x) {
                    let y = self.op(OpKind::Add, "add", &[x, o], attrs! {});
                    self.values.push((y, s));
                }
            }
            9 => {
                let size = vec![h as i64, w as i64];
                let r = self.op(OpKind::ResizeNearest, "resize", &[x], attrs! { "size" => size });
                let (y, ys) = self.conv(r, s, true);
                self.values.push((y, ys));
            }
            _ => {
                // Duplicate constant with identical bytes.
                let t = random_tensor(vec![c], &mut self.rng, 1.0);
                let n1 = self.name("dup");
                let k1 = self.g.add_const(n1, t.clone());
                let n2 = self.name("dup");
                let k2 = self.g.add_const(n2, t);
                let y = self.op(OpKind::BiasAdd, "bias", &[x, k1], attrs! {});
                let y = self.op(OpKind::BiasAdd, "bias", &[y, k2], attrs! {});
                self.values.push((y, s));
            }
        }
    }
}

/// A valid random graph with one input named `x` and its input spec.
pub fn random_graph(seed: u64) -> (Graph, TensorSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 2 * rng.random_range(1..=4);
    let w = 2 * rng.random_range(1..=4);
    let c = rng.random_range(1..=3);
    let mut b = Builder {
        g: Graph::new(format!("random_{seed}")),
        rng,
        values: Vec::new(),
    };
    let x = b.g.add_input("x");
    b.values.push((x, [h, w, c]));
    let steps = b.rng.random_range(3..=10);
    for _ in 0..steps {
        b.step();
    }
    let (last, _) = *b.values.last().unwrap();
    let out = if b.rng.random_bool(0.3) {
        b.op(OpKind::Softmax, "softmax", &[last], attrs! {})
    } else {
        last
    };
    b.g.outputs = vec![out];
    if b.rng.random_bool(0.3) && b.values.len() > 2 {
        let (extra, _) = b.values[b.values.len() / 2];
        if extra != out {
            b.g.outputs.push(extra);
        }
    }
    (b.g, TensorSpec::f32(vec![h, w, c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::execute_single;

    #[test]
    fn random_graphs_are_valid_and_run() {
        for seed in 0..50 {
            let (g, spec) = random_graph(seed);
            g.ensure_valid().unwrap();
            execute_single(&g, &random_input(&spec, seed), None).unwrap();
        }
    }

    #[test]
    fn deterministic() {
        let (a, _) = random_graph(7);
        let (b, _) = random_graph(7);
        assert_eq!(crate::modelfile::to_bytes(&a), crate::modelfile::to_bytes(&b));
    }
}
