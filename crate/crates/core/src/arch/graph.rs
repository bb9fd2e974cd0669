use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ArchError;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    BatchNorm,
    ReLU,
    Add,
    Concat,
    Dense,
    Softmax,
}

impl LayerKind {
    /// Keyword used for this kind in the architecture DSL.
    pub fn keyword(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv => "conv",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::BatchNorm => "bn",
            LayerKind::ReLU => "relu",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::Dense => "dense",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Self> {
        Some(match word {
            "input" => LayerKind::Input,
            "conv" => LayerKind::Conv,
            "maxpool" => LayerKind::MaxPool,
            "avgpool" => LayerKind::AvgPool,
            "gap" => LayerKind::GlobalAvgPool,
            "bn" => LayerKind::BatchNorm,
            "relu" => LayerKind::ReLU,
            "add" => LayerKind::Add,
            "concat" => LayerKind::Concat,
            "dense" => LayerKind::Dense,
            "softmax" => LayerKind::Softmax,
            _ => return None,
        })
    }

    /// Kinds that slide a window over the feature map.
    pub fn is_windowed(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::MaxPool | LayerKind::AvgPool)
    }

    /// Kinds whose output still has spatial extent.
    pub fn is_spatial(self) -> bool {
        !matches!(
            self,
            LayerKind::GlobalAvgPool | LayerKind::Dense | LayerKind::Softmax
        )
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            LayerKind::Input => n == 0,
            LayerKind::Add | LayerKind::Concat => n >= 2,
            _ => n == 1,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// One layer of an architecture. Window attributes are 1 (padding 0) for kinds
/// that do not carry them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerNode {
    /// Spatial extent covered by one application of the window, dilation included.
    pub fn effective_kernel(&self) -> usize {
        if self.kind.is_windowed() {
            self.dilation * (self.kernel - 1) + 1
        } else {
            1
        }
    }

    pub fn effective_stride(&self) -> usize {
        if self.kind.is_windowed() {
            self.stride
        } else {
            1
        }
    }
}

/// Unvalidated node declaration, as produced by the DSL parser or the builtin
/// catalog. Turned into an [`ArchGraph`] by [`ArchGraph::from_specs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    /// Input channels for `Input`, output channels for `Conv`, output width for `Dense`.
    pub channels: Option<usize>,
    pub from: Vec<String>,
}

impl NodeSpec {
    pub fn new(kind: LayerKind, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            kernel: 1,
            stride: 1,
            dilation: 1,
            padding: 0,
            channels: None,
            from: Vec::new(),
        }
    }

    pub fn input(channels: usize) -> Self {
        Self {
            channels: Some(channels),
            ..Self::new(LayerKind::Input, "input")
        }
    }

    pub fn conv(name: &str, k: usize, s: usize, d: usize, p: usize, ch: usize, from: &str) -> Self {
        Self {
            kernel: k,
            stride: s,
            dilation: d,
            padding: p,
            channels: Some(ch),
            from: vec![from.to_string()],
            ..Self::new(LayerKind::Conv, name)
        }
    }

    pub fn pool(kind: LayerKind, name: &str, k: usize, s: usize, p: usize, from: &str) -> Self {
        Self {
            kernel: k,
            stride: s,
            padding: p,
            from: vec![from.to_string()],
            ..Self::new(kind, name)
        }
    }

    pub fn unary(kind: LayerKind, name: &str, from: &str) -> Self {
        Self {
            from: vec![from.to_string()],
            ..Self::new(kind, name)
        }
    }

    pub fn dense(name: &str, out: usize, from: &str) -> Self {
        Self {
            channels: Some(out),
            from: vec![from.to_string()],
            ..Self::new(LayerKind::Dense, name)
        }
    }

    pub fn merge(kind: LayerKind, name: &str, from: &[&str]) -> Self {
        Self {
            from: from.iter().map(|s| s.to_string()).collect(),
            ..Self::new(kind, name)
        }
    }
}

/// A validated CNN architecture: nodes in declaration order plus predecessor lists.
#[derive(Debug, Clone)]
pub struct ArchGraph {
    pub name: String,
    nodes: Vec<LayerNode>,
    preds: Vec<Vec<NodeId>>,
    succs: Vec<Vec<NodeId>>,
    order: Vec<NodeId>,
}

/// Structural equality: nodes and edges. The metadata name is ignored.
impl PartialEq for ArchGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.preds == other.preds
    }
}

impl ArchGraph {
    pub fn from_specs(name: impl Into<String>, specs: &[NodeSpec]) -> Result<Self, ArchError> {
        let mut index: HashMap<&str, NodeId> = HashMap::with_capacity(specs.len());
        for (id, spec) in specs.iter().enumerate() {
            if index.insert(spec.name.as_str(), id).is_some() {
                return Err(ArchError::DuplicateName(spec.name.clone()));
            }
        }

        let inputs: Vec<_> = specs
            .iter()
            .filter(|s| s.kind == LayerKind::Input)
            .collect();
        match inputs.len() {
            0 => return Err(ArchError::MissingInput),
            1 => {}
            _ => return Err(ArchError::MultipleInputs(inputs[1].name.clone())),
        }

        let mut preds = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut p = Vec::with_capacity(spec.from.len());
            for src in &spec.from {
                let id = *index.get(src.as_str()).ok_or_else(|| ArchError::DanglingReference {
                    node: spec.name.clone(),
                    target: src.clone(),
                })?;
                p.push(id);
            }
            if !spec.kind.arity_ok(p.len()) {
                return Err(ArchError::Invalid {
                    node: spec.name.clone(),
                    reason: format!("{} cannot take {} inputs", spec.kind, p.len()),
                });
            }
            if spec.kind.is_windowed() && (spec.kernel == 0 || spec.stride == 0 || spec.dilation == 0) {
                return Err(ArchError::Invalid {
                    node: spec.name.clone(),
                    reason: "kernel, stride and dilation must be at least 1".into(),
                });
            }
            preds.push(p);
        }

        let mut succs = vec![Vec::new(); specs.len()];
        for (id, p) in preds.iter().enumerate() {
            for &q in p {
                succs[q].push(id);
            }
        }

        let order = kahn(&preds, &succs).map_err(|id| ArchError::Cycle(specs[id].name.clone()))?;

        // Reachability from the single input.
        let input = index[inputs[0].name.as_str()];
        let mut seen = vec![false; specs.len()];
        let mut stack = vec![input];
        seen[input] = true;
        while let Some(u) = stack.pop() {
            for &v in &succs[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(ArchError::Orphan(specs[id].name.clone()));
        }

        let mut nodes: Vec<LayerNode> = specs
            .iter()
            .enumerate()
            .map(|(id, s)| {
                let windowed = s.kind.is_windowed();
                LayerNode {
                    id,
                    name: s.name.clone(),
                    kind: s.kind,
                    kernel: if windowed { s.kernel } else { 1 },
                    stride: if windowed { s.stride } else { 1 },
                    dilation: if s.kind == LayerKind::Conv { s.dilation } else { 1 },
                    padding: if windowed { s.padding } else { 0 },
                    in_channels: 0,
                    out_channels: 0,
                }
            })
            .collect();

        for &id in &order {
            let spec = &specs[id];
            let pred_ch: Vec<usize> = preds[id].iter().map(|&p| nodes[p].out_channels).collect();
            let need = |what: &str| {
                spec.channels.filter(|&c| c > 0).ok_or_else(|| ArchError::Invalid {
                    node: spec.name.clone(),
                    reason: format!("{what} must be at least 1"),
                })
            };
            let (cin, cout) = match spec.kind {
                LayerKind::Input => {
                    let c = need("channel count")?;
                    (c, c)
                }
                LayerKind::Conv => (pred_ch[0], need("ch")?),
                LayerKind::Dense => (pred_ch[0], need("out")?),
                LayerKind::Add => {
                    if pred_ch.iter().any(|&c| c != pred_ch[0]) {
                        return Err(ArchError::Invalid {
                            node: spec.name.clone(),
                            reason: format!("add inputs have unequal channels {pred_ch:?}"),
                        });
                    }
                    (pred_ch[0], pred_ch[0])
                }
                LayerKind::Concat => {
                    let total = pred_ch.iter().sum();
                    (total, total)
                }
                _ => (pred_ch[0], pred_ch[0]),
            };
            nodes[id].in_channels = cin;
            nodes[id].out_channels = cout;
        }

        Ok(Self {
            name: name.into(),
            nodes,
            preds,
            succs,
            order,
        })
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn preds(&self, id: NodeId) -> &[NodeId] {
        &self.preds[id]
    }

    pub fn succs(&self, id: NodeId) -> &[NodeId] {
        &self.succs[id]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input(&self) -> NodeId {
        self.order[0]
    }

    /// Deterministic topological order; ties broken by ascending id.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.order
    }

    /// Conv nodes in topological order.
    pub fn conv_nodes(&self) -> Vec<NodeId> {
        self.order
            .iter()
            .copied()
            .filter(|&id| self.nodes[id].kind == LayerKind::Conv)
            .collect()
    }

    /// True when no node has more than one predecessor.
    pub fn is_sequential(&self) -> bool {
        self.preds.iter().all(|p| p.len() <= 1)
    }

    /// Returns the declarations this graph was built from, in id order.
    pub fn to_specs(&self) -> Vec<NodeSpec> {
        self.nodes
            .iter()
            .map(|n| NodeSpec {
                name: n.name.clone(),
                kind: n.kind,
                kernel: n.kernel,
                stride: n.stride,
                dilation: n.dilation,
                padding: n.padding,
                channels: match n.kind {
                    LayerKind::Input | LayerKind::Conv | LayerKind::Dense => Some(n.out_channels),
                    _ => None,
                },
                from: self.preds[n.id]
                    .iter()
                    .map(|&p| self.nodes[p].name.clone())
                    .collect(),
            })
            .collect()
    }
}

/// Kahn's algorithm with a min-heap. On a cycle returns the smallest id left over.
fn kahn(preds: &[Vec<NodeId>], succs: &[Vec<NodeId>]) -> Result<Vec<NodeId>, NodeId> {
    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut heap: BinaryHeap<Reverse<NodeId>> = indeg
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| Reverse(i))
        .collect();
    let mut order = Vec::with_capacity(preds.len());
    while let Some(Reverse(u)) = heap.pop() {
        order.push(u);
        for &v in &succs[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                heap.push(Reverse(v));
            }
        }
    }
    if order.len() == preds.len() {
        Ok(order)
    } else {
        Err(indeg.iter().position(|&d| d > 0).unwrap_or(0))
    }
}
