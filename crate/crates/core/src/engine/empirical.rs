//! Receptive fields measured as gradient support.
//!
//! The network is linearized: batch norm and ReLU become identities, max pools
//! become average pools and every conv kernel is all ones. Nothing can cancel
//! and no unit is dead, so the input region reached by backpropagating from one
//! output position is exactly that position's receptive field. Channels carry
//! identical support under constant weights, so the pass runs on one channel.

use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom, PoolGeom};
use super::{EngineError, Tensor};
use crate::arch::{ArchGraph, LayerKind, NodeId};
use crate::rf::spatial_sizes;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmpiricalEntry {
    pub name: String,
    /// Bounding-box side of the nonzero input gradient.
    pub width: usize,
    /// The support touched the input border, so `width` may be truncated.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmpiricalRf {
    pub input_size: usize,
    /// Indexed by node id; `None` for nodes that were not measured.
    pub nodes: Vec<Option<EmpiricalEntry>>,
}

impl EmpiricalRf {
    pub fn width(&self, id: NodeId) -> Option<usize> {
        self.nodes[id].as_ref().map(|e| e.width)
    }
}

/// Measures every spatial node (everything before global pooling or dense
/// layers).
pub fn empirical_rf(graph: &ArchGraph, input_size: usize) -> Result<EmpiricalRf, EngineError> {
    let targets: Vec<NodeId> = graph
        .topo_order()
        .iter()
        .copied()
        .filter(|&id| is_spatial_map(graph, id))
        .collect();
    empirical_rf_for(graph, input_size, &targets)
}

fn is_spatial_map(graph: &ArchGraph, id: NodeId) -> bool {
    fn walk(graph: &ArchGraph, id: NodeId, memo: &mut Vec<Option<bool>>) -> bool {
        if let Some(v) = memo[id] {
            return v;
        }
        let v = match graph.node(id).kind {
            LayerKind::GlobalAvgPool | LayerKind::Dense | LayerKind::Softmax => false,
            _ => graph.preds(id).iter().all(|&p| walk(graph, p, memo)),
        };
        memo[id] = Some(v);
        v
    }
    walk(graph, id, &mut vec![None; graph.len()])
}

fn shape_err(graph: &ArchGraph, id: NodeId, reason: String) -> EngineError {
    EngineError::Shape {
        node: graph.node(id).name.clone(),
        reason,
    }
}

pub fn empirical_rf_for(graph: &ArchGraph, input_size: usize, targets: &[NodeId]) -> Result<EmpiricalRf, EngineError> {
    let sizes = spatial_sizes(graph, input_size).map_err(|e| EngineError::Shape {
        node: graph.name.clone(),
        reason: e.to_string(),
    })?;
    let mut nodes = vec![None; graph.len()];
    for &t in targets {
        if !is_spatial_map(graph, t) {
            return Err(shape_err(graph, t, "has no spatial map to probe".into()));
        }
        let support = input_support(graph, &sizes, t)?;
        nodes[t] = Some(measure(&graph.node(t).name, &support, input_size));
    }
    Ok(EmpiricalRf { input_size, nodes })
}

fn binarize(t: &mut Tensor) {
    for v in &mut t.data {
        *v = if *v != 0.0 { 1.0 } else { 0.0 };
    }
}

fn plane(size: usize) -> [usize; 4] {
    [1, 1, size, size]
}

/// Support at the input of a unit gradient placed at the center of `target`.
fn input_support(graph: &ArchGraph, sizes: &[usize], target: NodeId) -> Result<Tensor, EngineError> {
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    let s = sizes[target];
    let mut seed = Tensor::zeros(plane(s));
    let c = (s - 1) / 2;
    seed.data[c * s + c] = 1.0;
    grads[target] = Some(seed);

    let add_into = |grads: &mut Vec<Option<Tensor>>, p: NodeId, d: Tensor| match &mut grads[p] {
        Some(acc) => acc.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b),
        slot => *slot = Some(d),
    };

    for &id in graph.topo_order().iter().rev() {
        let Some(mut dy) = grads[id].take() else { continue };
        binarize(&mut dy);
        let node = graph.node(id);
        let preds = graph.preds(id);
        match node.kind {
            LayerKind::Input => return Ok(dy),
            LayerKind::Conv => {
                let n_in = sizes[preds[0]];
                let g = ConvGeom::new(1, 1, node.kernel, node.stride, node.padding, node.dilation, n_in, n_in)
                    .ok_or_else(|| shape_err(graph, id, format!("window does not fit {n_in}px")))?;
                let ones = vec![1.0f32; node.kernel * node.kernel];
                add_into(&mut grads, preds[0], ops::conv_backward_input(&g, &ones, &dy));
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                let n_in = sizes[preds[0]];
                let g = PoolGeom::new(node.kernel, node.stride, node.padding, n_in, n_in)
                    .ok_or_else(|| shape_err(graph, id, format!("window does not fit {n_in}px")))?;
                add_into(&mut grads, preds[0], ops::avgpool_backward(&g, &dy, plane(n_in)));
            }
            LayerKind::BatchNorm | LayerKind::ReLU | LayerKind::Add | LayerKind::Concat => {
                for &p in preds {
                    add_into(&mut grads, p, dy.clone());
                }
            }
            LayerKind::GlobalAvgPool | LayerKind::Dense | LayerKind::Softmax => {
                return Err(shape_err(graph, id, "has no spatial map to probe".into()));
            }
        }
    }
    Err(shape_err(graph, target, "not connected to the input".into()))
}

fn measure(name: &str, support: &Tensor, n: usize) -> EmpiricalEntry {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..n {
        for j in 0..n {
            if support.data[i * n + j] != 0.0 {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if r0 == usize::MAX {
        return EmpiricalEntry {
            name: name.to_string(),
            width: 0,
            clipped: true,
        };
    }
    EmpiricalEntry {
        name: name.to_string(),
        width: (r1 - r0 + 1).max(c1 - c0 + 1),
        clipped: r0 == 0 || c0 == 0 || r1 == n - 1 || c1 == n - 1,
    }
}
