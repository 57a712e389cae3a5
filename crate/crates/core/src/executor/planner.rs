//! Static arena planning from tensor live intervals.
//!
//! Steps are positions in `topo_sort` order. A tensor is live from the step
//! that defines it through the last step that reads it; graph outputs stay
//! live to the end. Constants stay resident and never enter the arena.

use std::collections::{BTreeMap, HashMap};

use super::{bind_inputs, eval_node, ConvKernel, KernelChoice, Outputs};
use crate::error::{Error, Result};
use crate::graph::{infer_shapes, Graph, NodeId, OpKind, TensorSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedTensor {
    pub node: NodeId,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub size: usize,
    pub first_def: usize,
    pub last_use: usize,
}

impl PlannedTensor {
    pub fn end(&self) -> usize {
        self.offset + self.size
    }

    fn lives_with(&self, other: &PlannedTensor) -> bool {
        self.first_def <= other.last_use && other.first_def <= self.last_use
    }
}

#[derive(Debug, Clone)]
pub struct MemoryPlan {
    pub order: Vec<NodeId>,
    pub tensors: BTreeMap<NodeId, PlannedTensor>,
    pub arena_size: usize,
}

impl MemoryPlan {
    /// Sum of all planned tensor sizes (what allocating each tensor separately costs).
    pub fn naive_size(&self) -> usize {
        self.tensors.values().map(|t| t.size).sum()
    }
}

pub fn plan_memory(g: &Graph, input_spec: &TensorSpec) -> Result<MemoryPlan> {
    let order = g.topo_sort()?;
    let specs = infer_shapes(g, input_spec)?;
    let step: HashMap<NodeId, usize> = order.iter().enumerate().map(|(s, &id)| (id, s)).collect();
    let last_step = order.len().saturating_sub(1);

    let mut tensors: Vec<PlannedTensor> = order
        .iter()
        .filter(|id| g.node(**id).kind != OpKind::Const)
        .map(|&id| PlannedTensor {
            node: id,
            shape: specs[&id].shape.clone(),
            offset: 0,
            size: specs[&id].elements() * 4,
            first_def: step[&id],
            last_use: step[&id],
        })
        .collect();
    let index: HashMap<NodeId, usize> = tensors.iter().enumerate().map(|(i, t)| (t.node, i)).collect();
    for n in g.nodes.values() {
        for i in &n.inputs {
            if let Some(&ti) = index.get(i) {
                let t = &mut tensors[ti];
                t.last_use = t.last_use.max(step[&n.id]);
            }
        }
    }
    for o in &g.outputs {
        if let Some(&ti) = index.get(o) {
            tensors[ti].last_use = last_step;
        }
    }

    // Greedy first-fit, largest tensors first.
    let mut by_size: Vec<usize> = (0..tensors.len()).collect();
    by_size.sort_by_key(|&i| (std::cmp::Reverse(tensors[i].size), tensors[i].first_def, tensors[i].node));
    let mut placed: Vec<usize> = Vec::new();
    let mut arena_size = 0;
    for i in by_size {
        let mut conflicts: Vec<(usize, usize)> = placed
            .iter()
            .filter(|&&p| tensors[p].lives_with(&tensors[i]))
            .map(|&p| (tensors[p].offset, tensors[p].end()))
            .collect();
        conflicts.sort_unstable();
        let size = tensors[i].size;
        let mut offset = 0;
        for (start, end) in conflicts {
            if offset + size <= start {
                break;
            }
            offset = offset.max(end);
        }
        tensors[i].offset = offset;
        arena_size = arena_size.max(offset + size);
        placed.push(i);
    }

    Ok(MemoryPlan {
        order,
        tensors: tensors.into_iter().map(|t| (t.node, t)).collect(),
        arena_size,
    })
}

/// Interval sweep: every pair of simultaneously live tensors must occupy
/// disjoint byte ranges inside the arena.
pub fn verify_plan(plan: &MemoryPlan) -> Result<()> {
    let mut by_start: Vec<&PlannedTensor> = plan.tensors.values().collect();
    by_start.sort_by_key(|t| (t.first_def, t.node));
    let mut active: Vec<&PlannedTensor> = Vec::new();
    for t in by_start {
        if t.end() > plan.arena_size {
            return Err(Error::invalid(format!("tensor {} exceeds the arena", t.node)));
        }
        active.retain(|a| a.last_use >= t.first_def);
        for a in &active {
            if a.size > 0 && t.size > 0 && a.offset < t.end() && t.offset < a.end() {
                return Err(Error::invalid(format!(
                    "live tensors {} [{}, {}) and {} [{}, {}) overlap",
                    a.node,
                    a.offset,
                    a.end(),
                    t.node,
                    t.offset,
                    t.end()
                )));
            }
        }
        active.push(t);
    }
    Ok(())
}

/// Executes `g` with every activation stored at its planned arena offset, so a
/// faulty plan corrupts values that are still needed.
pub fn execute_planned(
    g: &Graph,
    plan: &MemoryPlan,
    inputs: &std::collections::HashMap<String, Tensor>,
    choice: Option<&KernelChoice>,
) -> Result<Outputs> {
    g.ensure_valid()?;
    let mut arena = vec![0.0f32; plan.arena_size.div_ceil(4)];
    let bound = bind_inputs(g, inputs)?;
    let read = |arena: &[f32], id: NodeId| -> Result<Tensor> {
        let n = g.node(id);
        if n.kind == OpKind::Const {
            return eval_node(n, &[], ConvKernel::Direct);
        }
        let t = &plan.tensors[&id];
        let off = t.offset / 4;
        Tensor::from_f32(t.shape.clone(), arena[off..off + t.size / 4].to_vec())
    };
    for &id in &plan.order {
        let node = g.node(id);
        let value = match node.kind {
            OpKind::Const => continue,
            OpKind::Input => bound[&id].clone(),
            _ => {
                let ins = node
                    .inputs
                    .iter()
                    .map(|&i| read(&arena, i))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor> = ins.iter().collect();
                let kernel = choice.map_or(ConvKernel::Direct, |c| c.get(id));
                eval_node(node, &refs, kernel)?
            }
        };
        let slot = &plan.tensors[&id];
        if value.shape() != slot.shape.as_slice() {
            return Err(Error::Shape {
                node: id,
                msg: format!("planned {:?}, produced {:?}", slot.shape, value.shape()),
            });
        }
        let off = slot.offset / 4;
        arena[off..off + slot.size / 4].copy_from_slice(&value.to_f32_vec());
    }
    Ok(Outputs(
        g.outputs
            .iter()
            .map(|&o| Ok((g.node(o).name.clone(), read(&arena, o)?)))
            .collect::<Result<_>>()?,
    ))
}
