use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EngineError, EngineModel, Tensor};
use crate::store::IdxArray;

/// Random-stream ids derived from the run seed.
const SHUFFLE_STREAM: u64 = 11;
const AUGMENT_STREAM: u64 = 12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub hflip: bool,
    /// Zero-pad by this many pixels, then crop back at a random offset.
    pub crop_pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            lr: 0.1,
            momentum: 0.0,
            augment: Augment::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step schedule: divided by 10 once a third of the epochs has passed and
    /// again at two thirds.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        if epoch * 3 >= self.epochs {
            lr *= 0.1;
        }
        if epoch * 3 >= 2 * self.epochs {
            lr *= 0.1;
        }
        lr
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.epochs == 0 {
            return Err(EngineError::Config("epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(EngineError::Config("batch must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(EngineError::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(EngineError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Images and labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Grayscale IDX images scaled to [0, 1], paired with IDX labels.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Self, EngineError> {
        let (n, h, w) = match images.dims.as_slice() {
            [n, h, w] => (*n, *h, *w),
            d => return Err(EngineError::Dataset(format!("expected N×H×W images, got {d:?}"))),
        };
        if labels.dims != [n] {
            return Err(EngineError::Dataset(format!("{} labels for {n} images", labels.dims.iter().product::<usize>())));
        }
        Ok(Self {
            images: Tensor::from_vec([n, 1, h, w], images.data.iter().map(|&b| b as f32 / 255.0).collect()),
            labels: labels.data.iter().map(|&b| b as usize).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub num_classes: usize,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(EngineError::Dataset("both splits must be nonempty".into()));
        }
        if self.num_classes < 2 {
            return Err(EngineError::Dataset("need at least two classes".into()));
        }
        for set in [&self.train, &self.test] {
            if set.images.n() != set.labels.len() {
                return Err(EngineError::Dataset("image and label counts differ".into()));
            }
            if let Some(&bad) = set.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(EngineError::Dataset(format!("label {bad} out of range for {} classes", self.num_classes)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub initial_test_accuracy: f64,
    pub history: Vec<EpochStats>,
    pub final_test_accuracy: f64,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.sample_len();
    logits
        .data
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Inference-mode accuracy over a split.
pub fn evaluate(model: &EngineModel, set: &LabeledSet, batch: usize) -> Result<f64, EngineError> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let out = model.forward(&set.images.gather(chunk), &[])?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        correct += count_correct(&out.logits, &labels);
    }
    Ok(correct as f64 / set.len().max(1) as f64)
}

fn augment(x: &mut Tensor, aug: Augment, rng: &mut ChaCha8Rng) {
    if !aug.hflip && aug.crop_pad == 0 {
        return;
    }
    let (c, h, w) = (x.c(), x.h(), x.w());
    let len = x.sample_len();
    for s in x.data.chunks_exact_mut(len) {
        let flip = aug.hflip && rng.gen_bool(0.5);
        let p = aug.crop_pad as isize;
        let (dy, dx) = if p > 0 {
            (rng.gen_range(-p..=p), rng.gen_range(-p..=p))
        } else {
            (0, 0)
        };
        let src = s.to_vec();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let si = i as isize + dy;
                    let sj0 = if flip { (w - 1 - j) as isize } else { j as isize };
                    let sj = sj0 + dx;
                    s[(ch * h + i) * w + j] = if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        src[(ch * h + si as usize) * w + sj as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Minibatch SGD on mean cross-entropy with the step schedule of
/// [`TrainConfig::lr_at`]. Batch order, augmentation and therefore the whole
/// run are fixed by `cfg.seed`.
pub fn train(model: &mut EngineModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainResult, EngineError> {
    cfg.validate()?;
    data.validate()?;
    if model.num_classes() != data.num_classes {
        return Err(EngineError::Config(format!(
            "model has {} outputs, dataset has {} classes",
            model.num_classes(),
            data.num_classes
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(AUGMENT_STREAM);

    let initial_test_accuracy = evaluate(model, &data.test, 256)?;
    let mut velocity: Vec<Vec<f32>> = model.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch) as f32;
        let momentum = cfg.momentum as f32;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut x = data.train.images.gather(chunk);
            augment(&mut x, cfg.augment, &mut aug_rng);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let (loss, grads, trace) = match model.loss_and_grads(&x, &labels) {
                Ok(v) => v,
                Err(EngineError::NonFinite(_)) => {
                    return Err(EngineError::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(EngineError::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(trace.logits(), &labels);
            model.update_running_stats(&trace);
            for ((param, grad), vel) in model.trainable_mut().into_iter().zip(&grads).zip(&mut velocity) {
                for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            if !model.all_finite() {
                return Err(EngineError::Divergence { epoch, batch: b, loss });
            }
        }
        let test_accuracy = evaluate(model, &data.test, 256)?;
        history.push(EpochStats {
            epoch,
            lr: lr as f64,
            loss: loss_sum / data.train.len() as f64,
            train_accuracy: correct as f64 / data.train.len() as f64,
            test_accuracy,
        });
    }
    let final_test_accuracy = history.last().map_or(initial_test_accuracy, |h| h.test_accuracy);
    Ok(TrainResult {
        initial_test_accuracy,
        history,
        final_test_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchGraph, LayerKind, NodeSpec};

    fn small_net(classes: usize, bn: bool) -> ArchGraph {
        let mut specs = vec![NodeSpec::input(1), NodeSpec::conv("c1", 3, 1, 1, 1, 4, "input")];
        let mut prev = "c1";
        if bn {
            specs.push(NodeSpec::unary(LayerKind::BatchNorm, "b1", "c1"));
            prev = "b1";
        }
        specs.extend([
            NodeSpec::unary(LayerKind::ReLU, "r1", prev),
            NodeSpec::unary(LayerKind::GlobalAvgPool, "gap", "r1"),
            NodeSpec::dense("fc", classes, "gap"),
            NodeSpec::unary(LayerKind::Softmax, "sm", "fc"),
        ]);
        ArchGraph::from_specs("small", &specs).unwrap()
    }

    fn noise_set(n: usize, classes: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledSet {
            images: Tensor::from_vec([n, 1, 6, 6], (0..n * 36).map(|_| rng.gen_range(0.0..1.0)).collect()),
            labels: (0..n).map(|_| rng.gen_range(0..classes)).collect(),
        }
    }

    #[test]
    fn schedule_steps_at_thirds() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = [0, 9, 10, 19, 20, 29].iter().map(|&e| cfg.lr_at(e)).collect();
        let expect = [0.1, 0.1, 0.01, 0.01, 0.001, 0.001];
        for (a, e) in lrs.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = Dataset {
            train: noise_set(50, 3, 1),
            test: noise_set(30, 3, 2),
            num_classes: 3,
        };
        let mut model = EngineModel::new(small_net(3, false), 5);
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 16,
            lr: 0.0,
            ..Default::default()
        };
        let res = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model, before);
        assert_eq!(res.final_test_accuracy, res.initial_test_accuracy);
    }

    #[test]
    fn training_is_deterministic() {
        let data = Dataset {
            train: noise_set(40, 2, 3),
            test: noise_set(20, 2, 4),
            num_classes: 2,
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch: 8,
            momentum: 0.9,
            augment: Augment { hflip: true, crop_pad: 1 },
            ..Default::default()
        };
        let run = || {
            let mut m = EngineModel::new(small_net(2, true), 7);
            let r = train(&mut m, &data, &cfg).unwrap();
            (m, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let data = Dataset {
            train: noise_set(40, 2, 3),
            test: noise_set(20, 2, 4),
            num_classes: 2,
        };
        let mut model = EngineModel::new(small_net(2, false), 7);
        let cfg = TrainConfig {
            epochs: 3,
            batch: 8,
            lr: 1e30,
            ..Default::default()
        };
        assert!(matches!(train(&mut model, &data, &cfg), Err(EngineError::Divergence { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = Dataset {
            train: noise_set(10, 2, 3),
            test: noise_set(10, 2, 4),
            num_classes: 2,
        };
        let mut model = EngineModel::new(small_net(3, false), 7);
        assert!(matches!(
            train(&mut model, &data, &TrainConfig::default()),
            Err(EngineError::Config(_))
        ));
        let mut model = EngineModel::new(small_net(2, false), 7);
        let cfg = TrainConfig {
            batch: 0,
            ..Default::default()
        };
        assert!(train(&mut model, &data, &cfg).is_err());
    }
}
