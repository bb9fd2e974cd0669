use super::graph::{ArchGraph, LayerKind, NodeSpec};
use super::ArchError;

pub const BUILTIN_NAMES: &[&str] = &[
    "vgg11",
    "vgg13",
    "vgg16",
    "vgg19",
    "desk10",
    "resnet18",
    "resnet34",
    "resnet18_cifar",
    "resnet34_cifar",
];

/// Generation options for the builtin catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltinOptions {
    pub batchnorm: bool,
    /// Per-stage residual enable flags (ResNets only, 4 entries). `None` keeps all.
    pub residual_mask: Option<Vec<bool>>,
    /// Dilation applied to every conv (VGGs only).
    pub dilation: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Divides every conv width; 1 keeps the published widths.
    pub width_divisor: usize,
}

impl Default for BuiltinOptions {
    fn default() -> Self {
        Self {
            batchnorm: true,
            residual_mask: None,
            dilation: 1,
            num_classes: 10,
            in_channels: 3,
            width_divisor: 1,
        }
    }
}

const M: usize = 0;

fn vgg_config(name: &str) -> Option<&'static [usize]> {
    Some(match name {
        "vgg11" => &[64, M, 128, M, 256, 256, M, 512, 512, M, 512, 512, M],
        "vgg13" => &[64, 64, M, 128, 128, M, 256, 256, M, 512, 512, M, 512, 512, M],
        "vgg16" => &[
            64, 64, M, 128, 128, M, 256, 256, 256, M, 512, 512, 512, M, 512, 512, 512, M,
        ],
        "vgg19" => &[
            64, 64, M, 128, 128, M, 256, 256, 256, 256, M, 512, 512, 512, 512, M, 512, 512, 512,
            512, M,
        ],
        // Ten 3×3 convs at widths that train in seconds on one core.
        "desk10" => &[8, 8, M, 16, 16, M, 32, 32, M, 64, 64, 64, 64],
        _ => return None,
    })
}

fn resnet_blocks(name: &str) -> Option<(&'static [usize; 4], bool)> {
    Some(match name {
        "resnet18" => (&[2, 2, 2, 2], false),
        "resnet34" => (&[3, 4, 6, 3], false),
        "resnet18_cifar" => (&[2, 2, 2, 2], true),
        "resnet34_cifar" => (&[3, 4, 6, 3], true),
        _ => return None,
    })
}

/// Builds one of the catalog architectures. VGGs use a global-average-pool readout;
/// `*_cifar` ResNets replace the 7×7/2 stem and max-pool with a single 3×3/1 conv.
pub fn generate_builtin(name: &str, opts: &BuiltinOptions) -> Result<ArchGraph, ArchError> {
    let width = |c: usize| (c / opts.width_divisor.max(1)).max(1);
    let mut specs = vec![NodeSpec::input(opts.in_channels)];

    if let Some(cfg) = vgg_config(name) {
        if let Some(mask) = &opts.residual_mask {
            return Err(ArchError::ResidualMaskLength {
                arch: name.into(),
                expected: 0,
                got: mask.len(),
            });
        }
        let d = opts.dilation.max(1);
        let mut prev = "input".to_string();
        let (mut conv_i, mut pool_i) = (0, 0);
        // The trailing pool of the classic configs is dropped: global average
        // pooling follows, and keeping it would reject 16px inputs.
        let cfg = cfg.strip_suffix(&[M]).unwrap_or(cfg);
        for &c in cfg {
            if c == M {
                pool_i += 1;
                let n = format!("pool{pool_i}");
                specs.push(NodeSpec::pool(LayerKind::MaxPool, &n, 2, 2, 0, &prev));
                prev = n;
                continue;
            }
            conv_i += 1;
            let n = format!("conv{conv_i}");
            specs.push(NodeSpec::conv(&n, 3, 1, d, d, width(c), &prev));
            prev = n;
            if opts.batchnorm {
                let n = format!("bn{conv_i}");
                specs.push(NodeSpec::unary(LayerKind::BatchNorm, &n, &prev));
                prev = n;
            }
            let n = format!("relu{conv_i}");
            specs.push(NodeSpec::unary(LayerKind::ReLU, &n, &prev));
            prev = n;
        }
        push_readout(&mut specs, &prev, opts.num_classes);
        return ArchGraph::from_specs(name, &specs);
    }

    let (blocks, cifar) = resnet_blocks(name).ok_or_else(|| ArchError::UnknownBuiltin(name.into()))?;
    if opts.dilation > 1 {
        return Err(ArchError::Invalid {
            node: name.into(),
            reason: "dilation applies to VGG variants only".into(),
        });
    }
    let mask = match &opts.residual_mask {
        None => vec![true; 4],
        Some(m) if m.len() == 4 => m.clone(),
        Some(m) => {
            return Err(ArchError::ResidualMaskLength {
                arch: name.into(),
                expected: 4,
                got: m.len(),
            })
        }
    };

    let stem_ch = width(64);
    let mut prev = if cifar {
        push(&mut specs, NodeSpec::conv("conv1", 3, 1, 1, 1, stem_ch, "input"))
    } else {
        push(&mut specs, NodeSpec::conv("conv1", 7, 2, 1, 3, stem_ch, "input"))
    };
    if opts.batchnorm {
        prev = push(&mut specs, NodeSpec::unary(LayerKind::BatchNorm, "bn1", &prev));
    }
    prev = push(&mut specs, NodeSpec::unary(LayerKind::ReLU, "relu1", &prev));
    if !cifar {
        prev = push(&mut specs, NodeSpec::pool(LayerKind::MaxPool, "maxpool", 3, 2, 1, &prev));
    }

    let mut in_ch = stem_ch;
    for (stage, &count) in blocks.iter().enumerate() {
        let ch = width(64 << stage);
        for b in 0..count {
            let p = format!("layer{}.{b}", stage + 1);
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let block_in = prev.clone();
            let mut cur = push(
                &mut specs,
                NodeSpec::conv(&format!("{p}.conv1"), 3, stride, 1, 1, ch, &block_in),
            );
            if opts.batchnorm {
                cur = push(&mut specs, NodeSpec::unary(LayerKind::BatchNorm, &format!("{p}.bn1"), &cur));
            }
            cur = push(&mut specs, NodeSpec::unary(LayerKind::ReLU, &format!("{p}.relu1"), &cur));
            cur = push(&mut specs, NodeSpec::conv(&format!("{p}.conv2"), 3, 1, 1, 1, ch, &cur));
            if opts.batchnorm {
                cur = push(&mut specs, NodeSpec::unary(LayerKind::BatchNorm, &format!("{p}.bn2"), &cur));
            }
            if mask[stage] {
                let mut shortcut = block_in.clone();
                if stride != 1 || in_ch != ch {
                    shortcut = push(
                        &mut specs,
                        NodeSpec::conv(&format!("{p}.downsample.conv"), 1, stride, 1, 0, ch, &block_in),
                    );
                    if opts.batchnorm {
                        shortcut = push(
                            &mut specs,
                            NodeSpec::unary(LayerKind::BatchNorm, &format!("{p}.downsample.bn"), &shortcut),
                        );
                    }
                }
                cur = push(
                    &mut specs,
                    NodeSpec::merge(LayerKind::Add, &format!("{p}.add"), &[&cur, &shortcut]),
                );
            }
            prev = push(&mut specs, NodeSpec::unary(LayerKind::ReLU, &format!("{p}.relu2"), &cur));
            in_ch = ch;
        }
    }
    push_readout(&mut specs, &prev, opts.num_classes);
    ArchGraph::from_specs(name, &specs)
}

fn push(specs: &mut Vec<NodeSpec>, spec: NodeSpec) -> String {
    let name = spec.name.clone();
    specs.push(spec);
    name
}

fn push_readout(specs: &mut Vec<NodeSpec>, prev: &str, classes: usize) {
    specs.push(NodeSpec::unary(LayerKind::GlobalAvgPool, "gap", prev));
    specs.push(NodeSpec::dense("fc", classes, "gap"));
    specs.push(NodeSpec::unary(LayerKind::Softmax, "softmax", "fc"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{parse_arch, to_dsl};

    fn count(g: &ArchGraph, kind: LayerKind) -> usize {
        g.nodes().iter().filter(|n| n.kind == kind).count()
    }

    #[test]
    fn vgg16_layout() {
        let g = generate_builtin("vgg16", &BuiltinOptions::default()).unwrap();
        assert_eq!(count(&g, LayerKind::Conv), 13);
        assert_eq!(count(&g, LayerKind::MaxPool), 4);
        let tail: Vec<_> = g.topo_order()[g.len() - 3..]
            .iter()
            .map(|&id| g.node(id).kind)
            .collect();
        assert_eq!(
            tail,
            [LayerKind::GlobalAvgPool, LayerKind::Dense, LayerKind::Softmax]
        );
    }

    #[test]
    fn vgg_conv_counts() {
        for (name, n) in [("vgg11", 8), ("vgg13", 10), ("vgg16", 13), ("vgg19", 16)] {
            let g = generate_builtin(name, &BuiltinOptions::default()).unwrap();
            assert_eq!(count(&g, LayerKind::Conv), n, "{name}");
            assert!(g.is_sequential());
        }
    }

    #[test]
    fn resnet_add_counts() {
        let g = generate_builtin("resnet18", &BuiltinOptions::default()).unwrap();
        assert_eq!(count(&g, LayerKind::Add), 8);
        let g = generate_builtin("resnet34", &BuiltinOptions::default()).unwrap();
        assert_eq!(count(&g, LayerKind::Add), 16);
    }

    #[test]
    fn residual_mask_removes_adds() {
        let opts = BuiltinOptions {
            residual_mask: Some(vec![false; 4]),
            ..Default::default()
        };
        let g = generate_builtin("resnet18", &opts).unwrap();
        assert_eq!(count(&g, LayerKind::Add), 0);
        assert!(g.is_sequential());
        let opts = BuiltinOptions {
            residual_mask: Some(vec![true, false, true, false]),
            ..Default::default()
        };
        let g = generate_builtin("resnet18", &opts).unwrap();
        assert_eq!(count(&g, LayerKind::Add), 4);
    }

    #[test]
    fn cifar_stem() {
        let g = generate_builtin("resnet18_cifar", &BuiltinOptions::default()).unwrap();
        let stem = g.node(g.find("conv1").unwrap());
        assert_eq!((stem.kernel, stem.stride), (3, 1));
        assert_eq!(count(&g, LayerKind::MaxPool), 0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            generate_builtin("alexnet", &BuiltinOptions::default()),
            Err(ArchError::UnknownBuiltin(_))
        ));
        let opts = BuiltinOptions {
            residual_mask: Some(vec![true; 3]),
            ..Default::default()
        };
        assert!(matches!(
            generate_builtin("resnet18", &opts),
            Err(ArchError::ResidualMaskLength { expected: 4, got: 3, .. })
        ));
    }

    #[test]
    fn every_builtin_round_trips_through_dsl() {
        for name in BUILTIN_NAMES {
            let g = generate_builtin(name, &BuiltinOptions::default()).unwrap();
            let back = parse_arch(&to_dsl(&g)).unwrap();
            assert_eq!(g, back, "{name}");
            assert_eq!(back.name, *name);
        }
    }

    #[test]
    fn resnet_adds_follow_both_branches() {
        for name in ["resnet18", "resnet34"] {
            let g = generate_builtin(name, &BuiltinOptions::default()).unwrap();
            let pos: Vec<usize> = {
                let mut p = vec![0; g.len()];
                for (i, &id) in g.topo_order().iter().enumerate() {
                    p[id] = i;
                }
                p
            };
            for n in g.nodes().iter().filter(|n| n.kind == LayerKind::Add) {
                for &pr in g.preds(n.id) {
                    assert!(pos[pr] < pos[n.id]);
                }
            }
        }
    }
}
