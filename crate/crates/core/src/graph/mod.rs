//! Dataflow graph IR shared by the model builders, passes, executor and planners.

mod shape;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub use shape::{conv_padding, infer_shapes, transpose_padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Const,
    Input,
    Conv2D,
    ConvTranspose2D,
    BiasAdd,
    Relu,
    MaxPool2x2,
    Add,
    Identity,
    Softmax,
    ArgMax,
    ResizeNearest,
    BatchNormFrozen,
    FusedConvBiasRelu,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Const,
        OpKind::Input,
        OpKind::Conv2D,
        OpKind::ConvTranspose2D,
        OpKind::BiasAdd,
        OpKind::Relu,
        OpKind::MaxPool2x2,
        OpKind::Add,
        OpKind::Identity,
        OpKind::Softmax,
        OpKind::ArgMax,
        OpKind::ResizeNearest,
        OpKind::BatchNormFrozen,
        OpKind::FusedConvBiasRelu,
    ];

    /// Stable code used by the model file format.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Const | OpKind::Input => 0,
            OpKind::Relu
            | OpKind::MaxPool2x2
            | OpKind::Identity
            | OpKind::Softmax
            | OpKind::ArgMax
            | OpKind::ResizeNearest => 1,
            OpKind::Conv2D | OpKind::ConvTranspose2D | OpKind::BiasAdd | OpKind::Add => 2,
            OpKind::FusedConvBiasRelu => 3,
            OpKind::BatchNormFrozen => 5,
        }
    }

    /// Convolution-like nodes the auto-tuner chooses kernels for.
    pub fn is_conv_like(self) -> bool {
        matches!(
            self,
            OpKind::Conv2D | OpKind::ConvTranspose2D | OpKind::FusedConvBiasRelu
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f32),
    Str(String),
    Ints(Vec<i64>),
    Bool(bool),
}

impl AttrValue {
    /// Bitwise-stable key for duplicate detection.
    pub(crate) fn canonical(&self) -> String {
        match self {
            AttrValue::Int(v) => format!("i{v}"),
            AttrValue::Float(v) => format!("f{:08x}", v.to_bits()),
            AttrValue::Str(s) => format!("s{s:?}"),
            AttrValue::Ints(v) => format!("l{v:?}"),
            AttrValue::Bool(b) => format!("b{b}"),
        }
    }
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<f32> for AttrValue {
    fn from(v: f32) -> Self {
        AttrValue::Float(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_string())
    }
}

impl From<Vec<i64>> for AttrValue {
    fn from(v: Vec<i64>) -> Self {
        AttrValue::Ints(v)
    }
}

impl From<bool> for AttrValue {
    fn from(v: bool) -> Self {
        AttrValue::Bool(v)
    }
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: OpKind,
    pub name: String,
    pub inputs: Vec<NodeId>,
    pub attrs: Attrs,
    pub payload: Option<Tensor>,
}

impl Node {
    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_float(&self, key: &str) -> Option<f32> {
        match self.attrs.get(key) {
            Some(AttrValue::Float(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        match self.attrs.get(key) {
            Some(AttrValue::Str(v)) => Some(v),
            _ => None,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<&[i64]> {
        match self.attrs.get(key) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn attr_bool(&self, key: &str) -> Option<bool> {
        match self.attrs.get(key) {
            Some(AttrValue::Bool(v)) => Some(*v),
            _ => None,
        }
    }

    /// Stride with the implicit default of 1.
    pub fn stride(&self) -> usize {
        self.attr_int("strides").unwrap_or(1).max(1) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl TensorSpec {
    pub fn f32(shape: Vec<usize>) -> Self {
        TensorSpec {
            shape,
            dtype: DType::F32,
        }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn nbytes(&self) -> usize {
        self.elements() * self.dtype.size_of()
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        write!(f, "{}:{}", dims.join("×"), self.dtype)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub reason: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "node {id}: {}", self.reason),
            None => f.write_str(&self.reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub name: String,
    pub nodes: BTreeMap<NodeId, Node>,
    pub outputs: Vec<NodeId>,
}

impl Graph {
    pub fn new(name: impl Into<String>) -> Self {
        Graph {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[&id]
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |id| id.0 + 1))
    }

    /// Appends a node and returns its id.
    pub fn add(
        &mut self,
        kind: OpKind,
        name: impl Into<String>,
        inputs: &[NodeId],
        attrs: Attrs,
    ) -> NodeId {
        let id = self.next_id();
        self.nodes.insert(
            id,
            Node {
                id,
                kind,
                name: name.into(),
                inputs: inputs.to_vec(),
                attrs,
                payload: None,
            },
        );
        id
    }

    pub fn add_const(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.add(OpKind::Const, name, &[], Attrs::new());
        self.nodes.get_mut(&id).unwrap().payload = Some(value);
        id
    }

    pub fn add_input(&mut self, name: impl Into<String>) -> NodeId {
        self.add(OpKind::Input, name, &[], Attrs::new())
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.values().find(|n| n.name == name).map(|n| n.id)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values().filter(|n| n.kind == OpKind::Input)
    }

    /// Spec recorded in the single `Input` node's `shape` attribute, if any.
    pub fn input_spec(&self) -> Option<TensorSpec> {
        let mut inputs = self.inputs();
        let n = inputs.next()?;
        if inputs.next().is_some() {
            return None;
        }
        let dims = n.attr_ints("shape")?;
        dims.iter()
            .map(|&d| usize::try_from(d).ok().filter(|&d| d > 0))
            .collect::<Option<Vec<_>>>()
            .map(TensorSpec::f32)
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }

    /// Consumers of every node, in ascending id order.
    pub fn consumers(&self) -> HashMap<NodeId, Vec<NodeId>> {
        let mut map: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for n in self.nodes.values() {
            for &i in &n.inputs {
                let entry = map.entry(i).or_default();
                if entry.last() != Some(&n.id) {
                    entry.push(n.id);
                }
            }
        }
        map
    }

    /// Total bytes held by `Const` payloads.
    pub fn payload_bytes(&self) -> usize {
        self.nodes
            .values()
            .filter_map(|n| n.payload.as_ref())
            .map(Tensor::nbytes)
            .sum()
    }

    /// Total number of constant elements.
    pub fn parameter_count(&self) -> usize {
        self.nodes
            .values()
            .filter_map(|n| n.payload.as_ref())
            .map(Tensor::len)
            .sum()
    }

    /// Replaces every use of `from` (including graph outputs) with `to`.
    pub fn rewire(&mut self, from: NodeId, to: NodeId) {
        for n in self.nodes.values_mut() {
            for i in n.inputs.iter_mut() {
                if *i == from {
                    *i = to;
                }
            }
        }
        for o in self.outputs.iter_mut() {
            if *o == from {
                *o = to;
            }
        }
    }

    /// Removes nodes not reachable backwards from the outputs; returns how many went.
    pub fn prune_unreachable(&mut self) -> usize {
        let mut live = HashSet::new();
        let mut stack: Vec<NodeId> = self.outputs.clone();
        while let Some(id) = stack.pop() {
            if live.insert(id) {
                if let Some(n) = self.nodes.get(&id) {
                    stack.extend(n.inputs.iter().copied());
                }
            }
        }
        let before = self.nodes.len();
        self.nodes.retain(|id, _| live.contains(id));
        before - self.nodes.len()
    }

    /// Checks the structural invariants; an empty list means the graph is valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut push = |node: Option<NodeId>, reason: String| diags.push(Diagnostic { node, reason });
        if self.outputs.is_empty() {
            push(None, "no outputs".into());
        }
        for &o in &self.outputs {
            if !self.nodes.contains_key(&o) {
                push(Some(o), format!("output references missing node id {}", o.0));
            }
        }
        let mut names: HashMap<&str, NodeId> = HashMap::new();
        for (id, n) in &self.nodes {
            if *id != n.id {
                push(Some(*id), format!("stored under id {} but carries id {}", id.0, n.id.0));
            }
            if let Some(prev) = names.insert(n.name.as_str(), n.id) {
                push(Some(n.id), format!("name `{}` already used by node {prev}", n.name));
            }
            for &i in &n.inputs {
                if !self.nodes.contains_key(&i) {
                    push(Some(n.id), format!("input references missing node id {}", i.0));
                }
            }
            if n.inputs.len() != n.kind.arity() {
                push(
                    Some(n.id),
                    format!("{} expects {} inputs, has {}", n.kind, n.kind.arity(), n.inputs.len()),
                );
            }
            match (n.kind == OpKind::Const, n.payload.is_some()) {
                (true, false) => push(Some(n.id), "Const without payload".into()),
                (false, true) => push(Some(n.id), format!("{} carries a payload", n.kind)),
                _ => {}
            }
            if let Some(pad) = n.attr_str("padding") {
                if pad != "same" {
                    push(Some(n.id), format!("unsupported padding `{pad}` (only `same`)"));
                }
            }
        }
        if let Err(Error::Cycle(cycle)) = self.topo_sort() {
            push(cycle.first().copied(), format!("cycle through {cycle:?}"));
        }
        diags
    }

    /// Kahn's algorithm with ascending-id tie breaking. References to missing
    /// nodes are ignored here; `validate` reports them.
    pub fn topo_sort(&self) -> Result<Vec<NodeId>> {
        let mut indegree: BTreeMap<NodeId, usize> = self.nodes.keys().map(|&id| (id, 0)).collect();
        let mut consumers: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for n in self.nodes.values() {
            for &i in &n.inputs {
                if self.nodes.contains_key(&i) {
                    *indegree.get_mut(&n.id).unwrap() += 1;
                    consumers.entry(i).or_default().push(n.id);
                }
            }
        }
        let mut ready: BTreeSet<NodeId> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &c in consumers.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                let d = indegree.get_mut(&c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() == self.nodes.len() {
            return Ok(order);
        }
        Err(Error::Cycle(self.find_cycle(&indegree)))
    }

    fn find_cycle(&self, indegree: &BTreeMap<NodeId, usize>) -> Vec<NodeId> {
        // Every unsorted node has an unsorted input; walk inputs until one repeats.
        let stuck: HashSet<NodeId> = indegree.iter().filter(|(_, &d)| d > 0).map(|(&id, _)| id).collect();
        let mut cur = *stuck.iter().min().unwrap();
        let mut seen: Vec<NodeId> = Vec::new();
        loop {
            if let Some(pos) = seen.iter().position(|&s| s == cur) {
                let mut cycle = seen[pos..].to_vec();
                cycle.reverse();
                return cycle;
            }
            seen.push(cur);
            cur = *self.nodes[&cur]
                .inputs
                .iter()
                .filter(|i| stuck.contains(i))
                .min()
                .unwrap();
        }
    }

    /// Fails with the first diagnostic if the graph is invalid.
    pub fn ensure_valid(&self) -> Result<()> {
        match self.validate().into_iter().next() {
            None => Ok(()),
            Some(d) => Err(Error::InvalidGraph(d.to_string())),
        }
    }
}

/// Attribute-map literal: `attrs! { "strides" => AttrValue::Int(1) }`.
#[macro_export]
macro_rules! attrs {
    () => { $crate::graph::Attrs::new() };
    ($($k:expr => $v:expr),+ $(,)?) => {{
        let mut m = $crate::graph::Attrs::new();
        $( m.insert($k.to_string(), $crate::graph::AttrValue::from($v)); )+
        m
    }};
}
