use std::path::Path;

use super::train::LabeledSet;
use super::{EngineError, EngineModel};
use crate::arch::{graph_hash, ArchGraph, LayerKind, NodeId};
use crate::store::{write_dump, LayerEntry, LayerForm, RunManifest, Split, TensorDump, MANIFEST_FILE};

const CAPTURE_BATCH: usize = 100;

/// A layer whose activations are dumped: named after the conv (or GAP node)
/// that starts it, read at `node`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturePoint {
    pub name: String,
    pub node: NodeId,
    pub form: LayerForm,
}

/// One point per conv, read after any directly following batch norm and ReLU,
/// plus one per global average pool.
pub fn capture_points(graph: &ArchGraph) -> Vec<CapturePoint> {
    let mut out = Vec::new();
    for &id in graph.topo_order() {
        match graph.node(id).kind {
            LayerKind::Conv => {
                let mut cur = id;
                while let [next] = graph.succs(cur) {
                    let kind = graph.node(*next).kind;
                    if !matches!(kind, LayerKind::BatchNorm | LayerKind::ReLU) || graph.preds(*next).len() != 1 {
                        break;
                    }
                    cur = *next;
                }
                out.push(CapturePoint {
                    name: graph.node(id).name.clone(),
                    node: cur,
                    form: LayerForm::Conv,
                });
            }
            LayerKind::GlobalAvgPool => out.push(CapturePoint {
                name: graph.node(id).name.clone(),
                node: id,
                form: LayerForm::Vector,
            }),
            _ => {}
        }
    }
    out
}

/// Runs the model over `set` in inference mode and writes one dump per capture
/// point plus the labels under `out_dir/dumps`, then `manifest.json`.
pub fn capture_run(model: &EngineModel, set: &LabeledSet, out_dir: impl AsRef<Path>) -> Result<RunManifest, EngineError> {
    let dir = out_dir.as_ref();
    if dir.join(MANIFEST_FILE).exists() {
        return Err(EngineError::ManifestExists(dir.to_path_buf()));
    }
    if set.is_empty() {
        return Err(EngineError::Dataset("nothing to capture".into()));
    }
    let points = capture_points(&model.graph);
    if points.iter().any(|p| p.name == "labels") {
        return Err(EngineError::Config("a layer named `labels` collides with the label dump".into()));
    }
    std::fs::create_dir_all(dir.join("dumps"))?;

    let nodes: Vec<NodeId> = points.iter().map(|p| p.node).collect();
    let mut buffers: Vec<Vec<f32>> = vec![Vec::new(); points.len()];
    let mut shapes: Vec<[usize; 4]> = vec![[0; 4]; points.len()];
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(CAPTURE_BATCH) {
        let out = model.forward(&set.images.gather(chunk), &nodes)?;
        let c = out.logits.sample_len();
        for (row, &i) in out.logits.data.chunks_exact(c).zip(chunk) {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            correct += (best == set.labels[i]) as usize;
        }
        for (k, (_, t)) in out.captured.into_iter().enumerate() {
            shapes[k] = t.shape;
            buffers[k].extend_from_slice(&t.data);
        }
    }

    let n = set.len();
    let mut layers = Vec::with_capacity(points.len());
    for ((p, data), s) in points.iter().zip(buffers).zip(shapes) {
        let shape = match p.form {
            LayerForm::Conv => vec![n, s[1], s[2], s[3]],
            LayerForm::Vector => vec![n, s[1] * s[2] * s[3]],
        };
        let file = format!("dumps/{}.actd", p.name);
        write_dump(&TensorDump::new(p.name.clone(), shape.clone(), data)?.with_split(Split::Test), dir.join(&file))?;
        layers.push(LayerEntry {
            name: p.name.clone(),
            file,
            shape,
            form: p.form,
        });
    }
    let labels = TensorDump::new("labels", vec![n], set.labels.iter().map(|&l| l as f32).collect())?.with_split(Split::Test);
    write_dump(&labels, dir.join("dumps/labels.actd"))?;

    let manifest = RunManifest {
        schema_version: "1".into(),
        arch: model.graph.name.clone(),
        dsl_hash: graph_hash(&model.graph),
        input_size: set.images.h(),
        split: Split::Test,
        layers,
        labels: "dumps/labels.actd".into(),
        num_classes: model.num_classes(),
        model_accuracy: correct as f64 / n as f64,
        seed: model.seed,
        threads: rayon::current_num_threads(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{generate_builtin, BuiltinOptions};

    #[test]
    fn points_follow_bn_relu_chains() {
        let g = generate_builtin("vgg11", &BuiltinOptions::default()).unwrap();
        let pts = capture_points(&g);
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0].name, "conv1");
        assert_eq!(g.node(pts[0].node).name, "relu1");
        assert_eq!(pts[8].form, LayerForm::Vector);

        let r = generate_builtin("resnet18_cifar", &BuiltinOptions::default()).unwrap();
        let pts = capture_points(&r);
        let conv2 = pts.iter().find(|p| p.name == "layer1.0.conv2").unwrap();
        assert_eq!(r.node(conv2.node).name, "layer1.0.bn2");
    }
}
