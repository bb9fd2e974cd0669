//! Receptive-field propagation over architecture graphs.
//!
//! For a node with a single predecessor `p`:
//!
//! ```text
//! r    = r(p) + (k_eff - 1) * jump(p)      k_eff = dilation * (kernel - 1) + 1
//! jump = jump(p) * stride
//! ```
//!
//! Non-windowed kinds have `k_eff = 1` and stride 1. Merge nodes take the largest
//! predecessor field and require all predecessors to share one jump. Padding
//! never enters `r`; it only affects spatial sizes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchGraph, LayerKind, NodeId, NodeSpec};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RfError {
    #[error("merge node `{node}` joins pathways with different jumps {first} and {second}")]
    JumpMismatch {
        node: String,
        first: usize,
        second: usize,
    },
    #[error("node `{node}`: window {window} does not fit a {size}px feature map")]
    SpatialCollapse {
        node: String,
        size: usize,
        window: usize,
    },
    #[error("merge node `{node}` joins feature maps of sizes {sizes:?}")]
    SpatialMismatch { node: String, sizes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfEntry {
    pub name: String,
    pub kind: LayerKind,
    pub r: usize,
    pub jump: usize,
    /// Output height/width for the analyzed input size, when one was given.
    pub spatial: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfResult {
    pub input_size: Option<usize>,
    /// Indexed by node id.
    pub nodes: Vec<RfEntry>,
}

impl RfResult {
    pub fn r(&self, id: NodeId) -> usize {
        self.nodes[id].r
    }

    pub fn jump(&self, id: NodeId) -> usize {
        self.nodes[id].jump
    }

    pub fn by_name(&self, name: &str) -> Option<&RfEntry> {
        self.nodes.iter().find(|e| e.name == name)
    }
}

/// Receptive field and jump for every node, on an unbounded input.
pub fn compute_rf(graph: &ArchGraph) -> Result<RfResult, RfError> {
    let mut r = vec![1usize; graph.len()];
    let mut jump = vec![1usize; graph.len()];
    for &id in graph.topo_order() {
        let node = graph.node(id);
        let preds = graph.preds(id);
        match preds {
            [] => {}
            [p] => {
                r[id] = r[*p] + (node.effective_kernel() - 1) * jump[*p];
                jump[id] = jump[*p] * node.effective_stride();
            }
            many => {
                let j0 = jump[many[0]];
                if let Some(&other) = many.iter().find(|&&p| jump[p] != j0) {
                    return Err(RfError::JumpMismatch {
                        node: node.name.clone(),
                        first: j0,
                        second: jump[other],
                    });
                }
                r[id] = many.iter().map(|&p| r[p]).max().unwrap_or(1);
                jump[id] = j0;
            }
        }
    }
    let nodes = graph
        .nodes()
        .iter()
        .map(|n| RfEntry {
            name: n.name.clone(),
            kind: n.kind,
            r: r[n.id],
            jump: jump[n.id],
            spatial: None,
        })
        .collect();
    Ok(RfResult {
        input_size: None,
        nodes,
    })
}

/// Like [`compute_rf`], and additionally propagates feature-map sizes for a
/// square `input_size` input.
pub fn compute_rf_at(graph: &ArchGraph, input_size: usize) -> Result<RfResult, RfError> {
    let mut res = compute_rf(graph)?;
    let sizes = spatial_sizes(graph, input_size)?;
    for (entry, s) in res.nodes.iter_mut().zip(sizes) {
        entry.spatial = Some(s);
    }
    res.input_size = Some(input_size);
    Ok(res)
}

/// Output height/width per node id. Vector-valued nodes report 1.
pub fn spatial_sizes(graph: &ArchGraph, input_size: usize) -> Result<Vec<usize>, RfError> {
    let mut size = vec![0usize; graph.len()];
    for &id in graph.topo_order() {
        let node = graph.node(id);
        let preds = graph.preds(id);
        size[id] = match node.kind {
            LayerKind::Input => input_size,
            LayerKind::GlobalAvgPool | LayerKind::Dense | LayerKind::Softmax => 1,
            LayerKind::Add | LayerKind::Concat => {
                let sizes: Vec<usize> = preds.iter().map(|&p| size[p]).collect();
                if sizes.iter().any(|&s| s != sizes[0]) {
                    return Err(RfError::SpatialMismatch {
                        node: node.name.clone(),
                        sizes,
                    });
                }
                sizes[0]
            }
            k if k.is_windowed() => {
                let input = size[preds[0]];
                window_output(input, node.effective_kernel(), node.stride, node.padding).ok_or(
                    RfError::SpatialCollapse {
                        node: node.name.clone(),
                        size: input,
                        window: node.effective_kernel(),
                    },
                )?
            }
            _ => size[preds[0]],
        };
    }
    Ok(size)
}

/// `floor((n + 2p - k_eff) / s) + 1`, or `None` when the window does not fit.
pub fn window_output(n: usize, k_eff: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < k_eff || stride == 0 {
        return None;
    }
    Some((padded - k_eff) / stride + 1)
}

/// Partition of the conv layers around the border layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BorderReport {
    pub border_node: Option<String>,
    pub input_size: usize,
    pub solving: Vec<String>,
    pub compressing: Vec<String>,
}

impl BorderReport {
    pub fn is_border(&self, name: &str) -> bool {
        self.border_node.as_deref() == Some(name)
    }
}

/// Finds the first conv (in topological order) that reads from a node whose
/// receptive field is strictly larger than `input_size`.
pub fn border_layer(graph: &ArchGraph, rf: &RfResult, input_size: usize) -> BorderReport {
    let convs = graph.conv_nodes();
    let border = convs
        .iter()
        .position(|&c| graph.preds(c).iter().any(|&p| rf.r(p) > input_size));
    let name = |id: &NodeId| graph.node(*id).name.clone();
    let split = border.unwrap_or(convs.len());
    BorderReport {
        border_node: border.map(|i| name(&convs[i])),
        input_size,
        solving: convs[..split].iter().map(name).collect(),
        compressing: convs[split..].iter().map(name).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum EditKind {
    StemStride { node: String, stride: usize },
    StemKernel { node: String, kernel: usize },
    /// Halve the stem kernel and stride and drop the pooling right after it.
    CompactStem {
        node: String,
        kernel: usize,
        stride: usize,
        removed_pool: Option<String>,
    },
    RemovePool { node: String },
}

/// One candidate architecture edit with its effect on the receptive field.
#[derive(Debug, Clone, Serialize)]
pub struct SurgeryEdit {
    pub description: String,
    pub kind: EditKind,
    pub final_r: usize,
    pub border_node: Option<String>,
    pub solving_convs: usize,
    #[serde(skip)]
    pub graph: ArchGraph,
}

/// Candidate single edits that move the border layer later for `input_size`,
/// best first. Empty when there is no border or no edit helps.
pub fn suggest_surgery(graph: &ArchGraph, input_size: usize) -> Result<Vec<SurgeryEdit>, RfError> {
    let rf = compute_rf(graph)?;
    let before = border_layer(graph, &rf, input_size);
    if before.border_node.is_none() {
        return Ok(Vec::new());
    }
    let baseline = before.solving.len();

    let specs = graph.to_specs();
    let order = graph.topo_order();
    let mut candidates: Vec<(String, EditKind, Vec<NodeSpec>)> = Vec::new();

    if let Some(&stem) = graph.conv_nodes().first() {
        let node = graph.node(stem);
        if node.stride > 1 {
            let mut s = specs.clone();
            s[stem].stride = 1;
            candidates.push((
                format!("set stride of `{}` to 1", node.name),
                EditKind::StemStride {
                    node: node.name.clone(),
                    stride: 1,
                },
                s,
            ));
        }
        let kernel = halve_kernel(node.kernel);
        if kernel < node.kernel {
            let mut s = specs.clone();
            s[stem].kernel = kernel;
            s[stem].padding = node.dilation * (kernel - 1) / 2;
            candidates.push((
                format!("shrink kernel of `{}` to {kernel}", node.name),
                EditKind::StemKernel {
                    node: node.name.clone(),
                    kernel,
                },
                s,
            ));
        }
        if node.stride > 1 || kernel < node.kernel {
            let stride = (node.stride / 2).max(1);
            let pos = order.iter().position(|&id| id == stem).unwrap_or(0);
            let pool = order[pos + 1..]
                .iter()
                .copied()
                .take_while(|&id| graph.node(id).kind != LayerKind::Conv)
                .find(|&id| matches!(graph.node(id).kind, LayerKind::MaxPool | LayerKind::AvgPool));
            let mut s = specs.clone();
            s[stem].kernel = kernel;
            s[stem].stride = stride;
            s[stem].padding = node.dilation * (kernel - 1) / 2;
            if let Some(p) = pool {
                s = remove_node(&s, p);
            }
            let removed_pool = pool.map(|p| graph.node(p).name.clone());
            candidates.push((
                match &removed_pool {
                    Some(p) => format!(
                        "compact stem `{}` to k={kernel} s={stride} and remove `{p}`",
                        node.name
                    ),
                    None => format!("compact stem `{}` to k={kernel} s={stride}", node.name),
                },
                EditKind::CompactStem {
                    node: node.name.clone(),
                    kernel,
                    stride,
                    removed_pool,
                },
                s,
            ));
        }
    }

    for &id in order {
        let node = graph.node(id);
        if matches!(node.kind, LayerKind::MaxPool | LayerKind::AvgPool) && node.stride > 1 {
            candidates.push((
                format!("remove pooling `{}`", node.name),
                EditKind::RemovePool {
                    node: node.name.clone(),
                },
                remove_node(&specs, id),
            ));
        }
    }

    let mut edits = Vec::new();
    for (description, kind, specs) in candidates {
        let Ok(edited) = ArchGraph::from_specs(graph.name.clone(), &specs) else {
            continue;
        };
        let Ok(rf) = compute_rf(&edited) else {
            continue;
        };
        let after = border_layer(&edited, &rf, input_size);
        if after.solving.len() <= baseline {
            continue;
        }
        let final_r = edited.conv_nodes().last().map(|&c| rf.r(c)).unwrap_or(1);
        edits.push(SurgeryEdit {
            description,
            kind,
            final_r,
            border_node: after.border_node,
            solving_convs: after.solving.len(),
            graph: edited,
        });
    }
    edits.sort_by(|a, b| {
        let rank = |e: &SurgeryEdit| (e.border_node.is_some(), usize::MAX - e.solving_convs);
        rank(a)
            .cmp(&rank(b))
            .then(a.final_r.abs_diff(input_size).cmp(&b.final_r.abs_diff(input_size)))
            .then(a.description.cmp(&b.description))
    });
    Ok(edits)
}

/// Largest odd kernel not above half of `k`, at least 1.
fn halve_kernel(k: usize) -> usize {
    let h = k / 2;
    if h <= 1 {
        1
    } else if h.is_multiple_of(2) {
        h - 1
    } else {
        h
    }
}

/// Drops a single-input node and rewires its consumers to its input.
fn remove_node(specs: &[NodeSpec], id: NodeId) -> Vec<NodeSpec> {
    let name = specs[id].name.clone();
    let src = specs[id].from[0].clone();
    specs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != id)
        .map(|(_, s)| {
            let mut s = s.clone();
            for f in &mut s.from {
                if *f == name {
                    *f = src.clone();
                }
            }
            s
        })
        .collect()
}

/// How a published receptive-field value relates to the computed one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishedBound {
    Exact,
    AtLeast,
}

/// Literature value for the final conv layer of a catalog architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedRf {
    pub arch: String,
    pub published_final_r: usize,
    pub bound: PublishedBound,
    pub computed_final_r: usize,
    pub agrees: bool,
}

/// Describes the recurrence used, for report consumers comparing against other tools.
pub const RECURRENCE_NOTE: &str = "receptive fields use r = r_prev + (k_eff - 1) * jump_prev \
with k_eff = dilation * (kernel - 1) + 1; a published variant of this recurrence with \
(k - 2) in place of (k - 1) gives r = k - 1 for a single stride-1 conv and is not used";

const PUBLISHED: &[(&str, usize, PublishedBound)] = &[
    ("vgg19", 252, PublishedBound::Exact),
    ("resnet18", 413, PublishedBound::Exact),
    ("resnet34", 800, PublishedBound::AtLeast),
    ("resnet18_cifar", 109, PublishedBound::Exact),
];

/// Compares the last conv's receptive field with the literature value, if one is known.
pub fn published_reference(graph: &ArchGraph, rf: &RfResult) -> Option<PublishedRf> {
    let &(arch, published, bound) = PUBLISHED.iter().find(|(a, _, _)| *a == graph.name)?;
    let computed = graph.conv_nodes().last().map(|&c| rf.r(c))?;
    let agrees = match bound {
        PublishedBound::Exact => computed == published,
        PublishedBound::AtLeast => computed > published,
    };
    Some(PublishedRf {
        arch: arch.to_string(),
        published_final_r: published,
        bound,
        computed_final_r: computed,
        agrees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{generate_builtin, parse_arch, BuiltinOptions};

    fn builtin(name: &str) -> ArchGraph {
        generate_builtin(name, &BuiltinOptions::default()).unwrap()
    }

    fn last_conv_r(g: &ArchGraph) -> usize {
        let rf = compute_rf(g).unwrap();
        rf.r(*g.conv_nodes().last().unwrap())
    }

    #[test]
    fn single_conv_is_kernel() {
        let g = parse_arch("input 1\nconv c k=3 s=1 ch=1 from=input").unwrap();
        let rf = compute_rf(&g).unwrap();
        assert_eq!(rf.r(0), 1);
        assert_eq!(rf.jump(0), 1);
        assert_eq!(rf.r(1), 3);
    }

    #[test]
    fn one_by_one_conv_keeps_field() {
        let g = parse_arch("input 1\nconv a k=5 s=2 ch=1 from=input\nconv b k=1 ch=1 from=a").unwrap();
        let rf = compute_rf(&g).unwrap();
        assert_eq!(rf.r(2), rf.r(1));
        assert_eq!(rf.jump(2), 2);
    }

    #[test]
    fn dilation_widens_kernel() {
        let g = parse_arch("input 1\nconv a k=3 d=2 ch=1 from=input\nconv b k=3 d=2 ch=1 from=a").unwrap();
        let rf = compute_rf(&g).unwrap();
        assert_eq!(rf.r(1), 5);
        assert_eq!(rf.r(2), 9);
    }

    #[test]
    fn catalog_anchors() {
        assert_eq!(last_conv_r(&builtin("vgg19")), 252);
        assert_eq!(last_conv_r(&builtin("resnet18_cifar")), 109);
        assert_eq!(last_conv_r(&builtin("resnet34")), 899);
        assert_eq!(last_conv_r(&builtin("resnet18")), 435);
    }

    #[test]
    fn vgg16_border_at_32() {
        let g = builtin("vgg16");
        let rf = compute_rf(&g).unwrap();
        let b = border_layer(&g, &rf, 32);
        assert_eq!(b.border_node.as_deref(), Some("conv8"));
        assert_eq!(b.solving.len(), 7);
        assert_eq!(b.compressing.len(), 6);
    }

    #[test]
    fn no_border_on_large_input() {
        let g = builtin("vgg19");
        let rf = compute_rf(&g).unwrap();
        let b = border_layer(&g, &rf, 10_000);
        assert!(b.border_node.is_none());
        assert!(b.compressing.is_empty());
        assert_eq!(b.solving.len(), 16);
    }

    #[test]
    fn jump_mismatch_is_reported() {
        let g = parse_arch(
            "input 1\nconv a k=3 s=2 p=1 ch=1 from=input\nconv b k=3 s=1 p=1 ch=1 from=input\nadd m from=a,b",
        )
        .unwrap();
        assert!(matches!(compute_rf(&g), Err(RfError::JumpMismatch { first: 2, second: 1, .. })));
    }

    #[test]
    fn spatial_sizes_for_vgg16() {
        let g = builtin("vgg16");
        let rf = compute_rf_at(&g, 32).unwrap();
        assert_eq!(rf.by_name("conv1").unwrap().spatial, Some(32));
        assert_eq!(rf.by_name("pool4").unwrap().spatial, Some(2));
        assert_eq!(rf.by_name("conv13").unwrap().spatial, Some(2));
        assert!(g.find("pool5").is_none());
        assert!(compute_rf_at(&g, 16).is_ok());
        assert!(matches!(compute_rf_at(&g, 8), Err(RfError::SpatialCollapse { .. })));
    }

    #[test]
    fn resnet_border_ignores_residual_mask() {
        let reference = {
            let g = builtin("resnet18");
            border_layer(&g, &compute_rf(&g).unwrap(), 32)
        };
        for bits in 0..16u8 {
            let mask: Vec<bool> = (0..4).map(|i| bits & (1 << i) != 0).collect();
            let opts = BuiltinOptions {
                residual_mask: Some(mask),
                ..Default::default()
            };
            let g = generate_builtin("resnet18", &opts).unwrap();
            let b = border_layer(&g, &compute_rf(&g).unwrap(), 32);
            assert_eq!(b.border_node, reference.border_node);
            let main = |v: &[String]| -> Vec<String> {
                v.iter().filter(|n| !n.contains("downsample")).cloned().collect()
            };
            assert_eq!(main(&b.solving), main(&reference.solving));
            assert_eq!(main(&b.compressing), main(&reference.compressing));
        }
    }

    #[test]
    fn surgery_on_resnet18_offers_cifar_stem() {
        let g = builtin("resnet18");
        let edits = suggest_surgery(&g, 32).unwrap();
        let compact = edits
            .iter()
            .find(|e| matches!(e.kind, EditKind::CompactStem { .. }))
            .expect("compact stem edit");
        assert_eq!(compact.final_r, 109);
        let mut cifar = builtin("resnet18_cifar");
        cifar.name = compact.graph.name.clone();
        assert_eq!(compact.graph, cifar);
    }

    #[test]
    fn surgery_empty_without_border() {
        assert!(suggest_surgery(&builtin("vgg19"), 252).unwrap().is_empty());
    }

    #[test]
    fn surgery_edits_move_border_later() {
        let g = builtin("vgg16");
        let base = border_layer(&g, &compute_rf(&g).unwrap(), 32).solving.len();
        let edits = suggest_surgery(&g, 32).unwrap();
        assert!(!edits.is_empty());
        for e in &edits {
            let after = border_layer(&e.graph, &compute_rf(&e.graph).unwrap(), 32);
            assert!(after.solving.len() > base, "{}", e.description);
            assert_eq!(
                e.graph.nodes().iter().filter(|n| n.kind == LayerKind::Conv).map(|n| n.out_channels).collect::<Vec<_>>(),
                g.nodes().iter().filter(|n| n.kind == LayerKind::Conv).map(|n| n.out_channels).collect::<Vec<_>>()
            );
        }
        // Pools after conv7 sit downstream of the border-determining field.
        for late in ["pool3", "pool4"] {
            assert!(edits.iter().all(|e| e.kind != EditKind::RemovePool { node: late.into() }));
        }
        assert!(edits.iter().any(|e| e.kind == EditKind::RemovePool { node: "pool2".into() }));
    }

    #[test]
    fn published_reference_flags_resnet18() {
        let g = builtin("resnet18");
        let p = published_reference(&g, &compute_rf(&g).unwrap()).unwrap();
        assert_eq!((p.computed_final_r, p.published_final_r, p.agrees), (435, 413, false));
        let g = builtin("resnet34");
        assert!(published_reference(&g, &compute_rf(&g).unwrap()).unwrap().agrees);
        assert!(published_reference(&builtin("vgg11"), &compute_rf(&builtin("vgg11")).unwrap()).is_none());
    }
}
