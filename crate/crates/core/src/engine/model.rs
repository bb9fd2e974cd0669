use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom, PoolGeom, BN_MOMENTUM};
use super::{EngineError, Tensor};
use crate::arch::{parse_arch, to_dsl, ArchGraph, LayerKind, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeParams {
    None,
    Conv {
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    BatchNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
    },
    Dense {
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
}

/// Per-node state kept by a forward pass for the backward pass.
#[derive(Debug, Clone)]
enum Cache {
    None,
    MaxArg(Vec<u32>),
    Bn {
        xhat: Tensor,
        inv_std: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
}

/// Every node output of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub outputs: Vec<Option<Tensor>>,
    caches: Vec<Cache>,
    pub logits_node: NodeId,
    train: bool,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.outputs[self.logits_node].as_ref().expect("logits computed")
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Captured node outputs, in the order requested.
    pub captured: Vec<(NodeId, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineModel {
    pub graph: ArchGraph,
    pub params: Vec<NodeParams>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    dsl: String,
    seed: u64,
    params: Vec<NodeParams>,
}

impl EngineModel {
    /// Fan-in scaled uniform init: `±sqrt(6/fan_in)` for convs, `±sqrt(1/fan_in)`
    /// for dense layers, zero biases, identity batch norms.
    pub fn new(graph: ArchGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, bound: f32| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let params = graph
            .nodes()
            .iter()
            .map(|n| match n.kind {
                LayerKind::Conv => {
                    let fan_in = n.in_channels * n.kernel * n.kernel;
                    NodeParams::Conv {
                        weight: uniform(n.out_channels * fan_in, (6.0 / fan_in as f32).sqrt()),
                        bias: vec![0.0; n.out_channels],
                    }
                }
                LayerKind::BatchNorm => NodeParams::BatchNorm {
                    gamma: vec![1.0; n.out_channels],
                    beta: vec![0.0; n.out_channels],
                    running_mean: vec![0.0; n.out_channels],
                    running_var: vec![1.0; n.out_channels],
                },
                LayerKind::Dense => NodeParams::Dense {
                    weight: uniform(n.out_channels * n.in_channels, (1.0 / n.in_channels as f32).sqrt()),
                    bias: vec![0.0; n.out_channels],
                },
                _ => NodeParams::None,
            })
            .collect();
        Self { graph, params, seed }
    }

    /// Node whose output is the logits: the softmax input, or the last node.
    pub fn logits_node(&self) -> NodeId {
        let last = *self.graph.topo_order().last().expect("graph has an input");
        if self.graph.node(last).kind == LayerKind::Softmax {
            self.graph.preds(last)[0]
        } else {
            last
        }
    }

    pub fn num_classes(&self) -> usize {
        self.graph.node(self.logits_node()).out_channels
    }

    /// Mutable views of all trainable tensors, in a fixed order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for p in &mut self.params {
            match p {
                NodeParams::None => {}
                NodeParams::Conv { weight, bias } | NodeParams::Dense { weight, bias } => {
                    out.push(weight.as_mut_slice());
                    out.push(bias.as_mut_slice());
                }
                NodeParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.as_mut_slice());
                    out.push(beta.as_mut_slice());
                }
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for p in &self.params {
            match p {
                NodeParams::None => {}
                NodeParams::Conv { weight, bias } | NodeParams::Dense { weight, bias } => {
                    out.push(weight.as_slice());
                    out.push(bias.as_slice());
                }
                NodeParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| match p {
            NodeParams::None => true,
            NodeParams::Conv { weight, bias } | NodeParams::Dense { weight, bias } => {
                weight.iter().chain(bias).all(|v| v.is_finite())
            }
            NodeParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => gamma
                .iter()
                .chain(beta)
                .chain(running_mean)
                .chain(running_var)
                .all(|v| v.is_finite()),
        })
    }

    fn shape_err(&self, id: NodeId, reason: impl Into<String>) -> EngineError {
        EngineError::Shape {
            node: self.graph.node(id).name.clone(),
            reason: reason.into(),
        }
    }

    fn conv_geom(&self, id: NodeId, x: &Tensor) -> Result<ConvGeom, EngineError> {
        let n = self.graph.node(id);
        ConvGeom::new(n.in_channels, n.out_channels, n.kernel, n.stride, n.padding, n.dilation, x.h(), x.w())
            .ok_or_else(|| self.shape_err(id, format!("window does not fit a {}×{} map", x.h(), x.w())))
    }

    fn pool_geom(&self, id: NodeId, x: &Tensor) -> Result<PoolGeom, EngineError> {
        let n = self.graph.node(id);
        PoolGeom::new(n.kernel, n.stride, n.padding, x.h(), x.w())
            .ok_or_else(|| self.shape_err(id, format!("window does not fit a {}×{} map", x.h(), x.w())))
    }

    /// Runs every node. In train mode batch norms use batch statistics and the
    /// trace keeps what backward needs; running statistics are not touched.
    pub fn trace(&self, batch: &Tensor, train: bool) -> Result<Trace, EngineError> {
        let g = &self.graph;
        let input = g.input();
        if batch.c() != g.node(input).out_channels {
            return Err(self.shape_err(
                input,
                format!("expected {} channels, batch has {}", g.node(input).out_channels, batch.c()),
            ));
        }
        let mut outputs: Vec<Option<Tensor>> = vec![None; g.len()];
        let mut caches = vec![Cache::None; g.len()];
        for &id in g.topo_order() {
            let node = g.node(id);
            let preds = g.preds(id);
            let x = |i: usize| outputs[preds[i]].as_ref().expect("predecessor computed");
            let y = match (node.kind, &self.params[id]) {
                (LayerKind::Input, _) => batch.clone(),
                (LayerKind::Conv, NodeParams::Conv { weight, bias }) => {
                    let geom = self.conv_geom(id, x(0))?;
                    ops::conv_forward(&geom, x(0), weight, bias)
                }
                (LayerKind::MaxPool, _) => {
                    let (y, arg) = ops::maxpool_forward(&self.pool_geom(id, x(0))?, x(0));
                    if train {
                        caches[id] = Cache::MaxArg(arg);
                    }
                    y
                }
                (LayerKind::AvgPool, _) => ops::avgpool_forward(&self.pool_geom(id, x(0))?, x(0)),
                (LayerKind::GlobalAvgPool, _) => ops::gap_forward(x(0)),
                (
                    LayerKind::BatchNorm,
                    NodeParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => {
                    if train {
                        let out = ops::bn_forward_train(x(0), gamma, beta);
                        caches[id] = Cache::Bn {
                            xhat: out.xhat,
                            inv_std: out.inv_std,
                            mean: out.mean,
                            var: out.var,
                        };
                        out.y
                    } else {
                        ops::bn_forward_eval(x(0), gamma, beta, running_mean, running_var)
                    }
                }
                (LayerKind::ReLU, _) => ops::relu_forward(x(0)),
                (LayerKind::Add, _) => {
                    let mut acc = x(0).clone();
                    for i in 1..preds.len() {
                        let other = x(i);
                        if other.shape != acc.shape {
                            return Err(self.shape_err(id, format!("adds {:?} and {:?}", acc.shape, other.shape)));
                        }
                        acc.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
                    }
                    acc
                }
                (LayerKind::Concat, _) => {
                    let parts: Vec<&Tensor> = (0..preds.len()).map(x).collect();
                    concat_channels(&parts).ok_or_else(|| self.shape_err(id, "concatenated maps differ in size"))?
                }
                (LayerKind::Dense, NodeParams::Dense { weight, bias }) => {
                    let x0 = x(0);
                    if x0.h() != 1 || x0.w() != 1 {
                        return Err(self.shape_err(id, format!("dense input must be 1×1, got {}×{}", x0.h(), x0.w())));
                    }
                    ops::dense_forward(x0, weight, bias, node.out_channels)
                }
                (LayerKind::Softmax, _) => ops::softmax_rows(x(0)),
                (kind, _) => return Err(self.shape_err(id, format!("parameters do not match kind {kind:?}"))),
            };
            if !y.is_finite() {
                return Err(EngineError::NonFinite(node.name.clone()));
            }
            outputs[id] = Some(y);
        }
        Ok(Trace {
            outputs,
            caches,
            logits_node: self.logits_node(),
            train,
        })
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, batch: &Tensor, capture: &[NodeId]) -> Result<ForwardOutput, EngineError> {
        let mut t = self.trace(batch, false)?;
        let captured = capture
            .iter()
            .map(|&id| (id, t.outputs[id].clone().expect("all nodes computed")))
            .collect();
        let logits = t.outputs[t.logits_node].take().expect("logits computed");
        Ok(ForwardOutput { logits, captured })
    }

    /// Folds the batch statistics of a train-mode trace into the running ones.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        for (p, c) in self.params.iter_mut().zip(&trace.caches) {
            if let (
                NodeParams::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                },
                Cache::Bn { mean, var, xhat, .. },
            ) = (p, c)
            {
                let m = (xhat.n() * xhat.h() * xhat.w()) as f32;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..mean.len() {
                    running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean[ch];
                    running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
            }
        }
    }

    /// Gradients of the trainable tensors, aligned with [`Self::trainable`],
    /// given the gradient at the logits.
    pub fn backward(&self, trace: &Trace, dlogits: Tensor) -> Result<Vec<Vec<f32>>, EngineError> {
        let g = &self.graph;
        let mut dys: Vec<Option<Tensor>> = vec![None; g.len()];
        dys[trace.logits_node] = Some(dlogits);
        let mut grads: Vec<Option<(Vec<f32>, Vec<f32>)>> = vec![None; g.len()];
        let out = |id: NodeId| trace.outputs[id].as_ref().expect("trace has every output");

        for &id in g.topo_order().iter().rev() {
            let Some(dy) = dys[id].take() else { continue };
            let node = g.node(id);
            let preds = g.preds(id);
            let needs = |p: NodeId| g.node(p).kind != LayerKind::Input;
            let push = |dys: &mut Vec<Option<Tensor>>, p: NodeId, d: Tensor| match &mut dys[p] {
                Some(acc) => acc.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b),
                slot => *slot = Some(d),
            };
            match (node.kind, &self.params[id]) {
                (LayerKind::Input, _) | (LayerKind::Softmax, _) => {}
                (LayerKind::Conv, NodeParams::Conv { weight, .. }) => {
                    let x = out(preds[0]);
                    let geom = self.conv_geom(id, x)?;
                    let (dx, dw, db) = ops::conv_backward(&geom, x, weight, &dy, needs(preds[0]));
                    grads[id] = Some((dw, db));
                    if let Some(dx) = dx {
                        push(&mut dys, preds[0], dx);
                    }
                }
                (LayerKind::MaxPool, _) => {
                    let Cache::MaxArg(arg) = &trace.caches[id] else {
                        return Err(self.shape_err(id, "backward needs a train-mode trace"));
                    };
                    push(&mut dys, preds[0], ops::maxpool_backward(&dy, arg, out(preds[0]).shape));
                }
                (LayerKind::AvgPool, _) => {
                    let x = out(preds[0]);
                    push(&mut dys, preds[0], ops::avgpool_backward(&self.pool_geom(id, x)?, &dy, x.shape));
                }
                (LayerKind::GlobalAvgPool, _) => push(&mut dys, preds[0], ops::gap_backward(&dy, out(preds[0]).shape)),
                (LayerKind::BatchNorm, NodeParams::BatchNorm { gamma, .. }) => {
                    let Cache::Bn { xhat, inv_std, .. } = &trace.caches[id] else {
                        return Err(self.shape_err(id, "backward needs a train-mode trace"));
                    };
                    let (dx, dg, db) = ops::bn_backward(&dy, xhat, gamma, inv_std);
                    grads[id] = Some((dg, db));
                    push(&mut dys, preds[0], dx);
                }
                (LayerKind::ReLU, _) => push(&mut dys, preds[0], ops::relu_backward(out(id), &dy)),
                (LayerKind::Add, _) => {
                    for &p in preds {
                        push(&mut dys, p, dy.clone());
                    }
                }
                (LayerKind::Concat, _) => {
                    let mut offset = 0;
                    for &p in preds {
                        let part = split_channels(&dy, offset, out(p).c());
                        offset += out(p).c();
                        push(&mut dys, p, part);
                    }
                }
                (LayerKind::Dense, NodeParams::Dense { weight, .. }) => {
                    let x = out(preds[0]);
                    let (dx, dw, db) = ops::dense_backward(x, weight, &dy, node.out_channels);
                    grads[id] = Some((dw, db));
                    push(&mut dys, preds[0], dx);
                }
                (kind, _) => return Err(self.shape_err(id, format!("parameters do not match kind {kind:?}"))),
            }
        }
        debug_assert!(trace.train || grads.iter().all(Option::is_none));

        let mut flat = Vec::new();
        for (id, p) in self.params.iter().enumerate() {
            if matches!(p, NodeParams::None) {
                continue;
            }
            let (a, b) = grads[id].take().unwrap_or_else(|| {
                let sizes: Vec<usize> = self.trainable_of(id).iter().map(|s| s.len()).collect();
                (vec![0.0; sizes[0]], vec![0.0; sizes[1]])
            });
            flat.push(a);
            flat.push(b);
        }
        Ok(flat)
    }

    fn trainable_of(&self, id: NodeId) -> Vec<&[f32]> {
        match &self.params[id] {
            NodeParams::None => vec![],
            NodeParams::Conv { weight, bias } | NodeParams::Dense { weight, bias } => vec![weight, bias],
            NodeParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    /// Mean cross-entropy of a train-mode pass and the parameter gradients.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Vec<f32>>, Trace), EngineError> {
        let trace = self.trace(batch, true)?;
        let (loss, dlogits) = ops::softmax_cross_entropy(trace.logits(), labels);
        let grads = self.backward(&trace, dlogits)?;
        Ok((loss, grads, trace))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        let file = ModelFile {
            dsl: to_dsl(&self.graph),
            seed: self.seed,
            params: self.params.clone(),
        };
        let mut text = serde_json::to_string(&file)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let graph = parse_arch(&file.dsl)?;
        let fresh = Self::new(graph, file.seed);
        if fresh.params.len() != file.params.len()
            || fresh
                .params
                .iter()
                .zip(&file.params)
                .any(|(a, b)| std::mem::discriminant(a) != std::mem::discriminant(b) || param_sizes(a) != param_sizes(b))
        {
            return Err(EngineError::Config("stored parameters do not match the stored architecture".into()));
        }
        Ok(Self {
            graph: fresh.graph,
            params: file.params,
            seed: file.seed,
        })
    }
}

fn param_sizes(p: &NodeParams) -> Vec<usize> {
    match p {
        NodeParams::None => vec![],
        NodeParams::Conv { weight, bias } | NodeParams::Dense { weight, bias } => vec![weight.len(), bias.len()],
        NodeParams::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } => vec![gamma.len(), beta.len(), running_mean.len(), running_var.len()],
    }
}

fn concat_channels(parts: &[&Tensor]) -> Option<Tensor> {
    let [n, _, h, w] = parts[0].shape;
    if parts.iter().any(|t| t.n() != n || t.h() != h || t.w() != w) {
        return None;
    }
    let c: usize = parts.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for t in parts {
            data.extend_from_slice(t.sample(i));
        }
    }
    Some(Tensor::from_vec([n, c, h, w], data))
}

fn split_channels(t: &Tensor, offset: usize, c: usize) -> Tensor {
    let plane = t.h() * t.w();
    let mut data = Vec::with_capacity(t.n() * c * plane);
    for i in 0..t.n() {
        let s = t.sample(i);
        data.extend_from_slice(&s[offset * plane..(offset + c) * plane]);
    }
    Tensor::from_vec([t.n(), c, t.h(), t.w()], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{generate_builtin, BuiltinOptions, NodeSpec};

    fn three_layer(bn: bool) -> ArchGraph {
        let mut specs = vec![NodeSpec::input(2), NodeSpec::conv("c1", 3, 1, 1, 1, 4, "input")];
        let mut prev = "c1";
        if bn {
            specs.push(NodeSpec::unary(LayerKind::BatchNorm, "b1", "c1"));
            prev = "b1";
        }
        specs.extend([
            NodeSpec::unary(LayerKind::ReLU, "r1", prev),
            NodeSpec::conv("c2", 3, 2, 1, 1, 3, "r1"),
            NodeSpec::unary(LayerKind::ReLU, "r2", "c2"),
            NodeSpec::conv("c3", 1, 1, 1, 0, 5, "r2"),
            NodeSpec::unary(LayerKind::GlobalAvgPool, "gap", "c3"),
            NodeSpec::dense("fc", 3, "gap"),
            NodeSpec::unary(LayerKind::Softmax, "sm", "fc"),
        ]);
        ArchGraph::from_specs("three", &specs).unwrap()
    }

    fn batch(seed: u64, shape: [usize; 4]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn relu_pattern(model: &EngineModel, trace: &Trace) -> Vec<bool> {
        model
            .graph
            .nodes()
            .iter()
            .filter(|n| n.kind == LayerKind::ReLU)
            .flat_map(|n| trace.outputs[n.id].as_ref().unwrap().data.iter().map(|&v| v > 0.0))
            .collect()
    }

    #[test]
    fn three_layer_gradients_match_finite_differences() {
        for bn in [false, true] {
            let mut model = EngineModel::new(three_layer(bn), 11);
            let x = batch(12, [4, 2, 6, 6]);
            let labels = [0, 1, 2, 1];
            let (_, grads, base) = model.loss_and_grads(&x, &labels).unwrap();
            let pattern = relu_pattern(&model, &base);
            let n_tensors = model.trainable().len();
            let eps = 1e-2f32;
            let mut checked = 0;
            for t in 0..n_tensors {
                let len = model.trainable()[t].len();
                for i in (0..len).step_by(3) {
                    let orig = model.trainable()[t][i];
                    model.trainable_mut()[t][i] = orig + eps;
                    let (lp, _, tp) = model.loss_and_grads(&x, &labels).unwrap();
                    model.trainable_mut()[t][i] = orig - eps;
                    let (lm, _, tm) = model.loss_and_grads(&x, &labels).unwrap();
                    model.trainable_mut()[t][i] = orig;
                    // Central differences are only valid when no ReLU switches within ±eps.
                    if relu_pattern(&model, &tp) != pattern || relu_pattern(&model, &tm) != pattern {
                        continue;
                    }
                    let fd = (lp - lm) / (2.0 * eps as f64);
                    let a = grads[t][i] as f64;
                    assert!(
                        (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()) + 2e-5,
                        "bn={bn} tensor {t} index {i}: {a} vs {fd}"
                    );
                    checked += 1;
                }
            }
            assert!(checked > 40, "too few entries checked: {checked}");
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut model = EngineModel::new(three_layer(false), 1);
        for t in model.trainable_mut() {
            t.fill(0.0);
        }
        let out = model.forward(&batch(2, [3, 2, 6, 6]), &[]).unwrap();
        let p = ops::softmax_rows(&out.logits);
        for v in &p.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn builtin_forward_shapes() {
        let g = generate_builtin(
            "resnet18_cifar",
            &BuiltinOptions {
                width_divisor: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let model = EngineModel::new(g, 3);
        let out = model.forward(&batch(4, [2, 3, 16, 16]), &[]).unwrap();
        assert_eq!(out.logits.shape, [2, 10, 1, 1]);
        let (loss, grads, _) = model.loss_and_grads(&batch(4, [2, 3, 16, 16]), &[1, 2]).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.len(), model.trainable().len());
    }

    #[test]
    fn wrong_channels_rejected() {
        let model = EngineModel::new(three_layer(false), 1);
        assert!(matches!(
            model.forward(&batch(2, [1, 3, 6, 6]), &[]),
            Err(EngineError::Shape { .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = EngineModel::new(three_layer(true), 9);
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert_eq!(EngineModel::load(&path).unwrap(), model);
    }

    #[test]
    fn concat_split_inverse() {
        let a = batch(1, [2, 2, 3, 3]);
        let b = batch(2, [2, 1, 3, 3]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(split_channels(&c, 0, 2), a);
        assert_eq!(split_channels(&c, 2, 1), b);
    }
}
