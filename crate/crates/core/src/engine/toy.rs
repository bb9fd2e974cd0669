use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::train::{Dataset, LabeledSet};
use super::{EngineError, Tensor};

/// Sub-pixel samples per axis when rasterizing shapes.
const SUPERSAMPLE: usize = 4;

/// Filled shapes of equal area: a disk of diameter `s`, a square of side
/// `s·√π/2`, and a plus sign with bar width chosen to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disk,
    Square,
    Cross,
}

impl ShapeClass {
    /// Whether the point (dx, dy), relative to the shape center, is inside.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        match self {
            ShapeClass::Disk => dx * dx + dy * dy <= (size / 2.0).powi(2),
            ShapeClass::Square => {
                let half = size * std::f64::consts::PI.sqrt() / 4.0;
                dx.abs() <= half && dy.abs() <= half
            }
            ShapeClass::Cross => {
                let bar = size * (1.0 - (1.0 - std::f64::consts::PI / 4.0).sqrt());
                let half = size / 2.0;
                (dx.abs() <= half && dy.abs() <= bar / 2.0) || (dy.abs() <= half && dx.abs() <= bar / 2.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Center,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub classes: Vec<ShapeClass>,
    pub object_size: usize,
    pub canvas_size: usize,
    pub placement: Placement,
    /// Nearest-neighbour upscale of the finished canvas.
    #[serde(default)]
    pub upsample_to: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            classes: vec![ShapeClass::Disk, ShapeClass::Square],
            object_size: 16,
            canvas_size: 16,
            placement: Placement::Center,
            upsample_to: None,
            n_train: 2000,
            n_test: 500,
            noise: 0.01,
            seed: 0,
            channels: 1,
        }
    }
}

impl ToySpec {
    pub const PRESETS: [&'static str; 3] = ["default", "canvas64", "three"];

    /// `default`: disk vs square, 16 px object on a 16 px canvas.
    /// `canvas64`: the same object placed at random on a 64 px canvas.
    /// `three`: disk, square and cross, 16 px centered.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        match name {
            "default" => Some(base),
            "canvas64" => Some(Self {
                canvas_size: 64,
                placement: Placement::Random,
                ..base
            }),
            "three" => Some(Self {
                classes: vec![ShapeClass::Disk, ShapeClass::Square, ShapeClass::Cross],
                ..base
            }),
            _ => None,
        }
    }

    /// A preset name or a path to a JSON spec.
    pub fn resolve(arg: &str) -> Result<Self, EngineError> {
        if let Some(s) = Self::preset(arg) {
            return Ok(s);
        }
        let path = Path::new(arg);
        if !path.exists() {
            return Err(EngineError::Config(format!(
                "`{arg}` is neither a toy preset ({}) nor a file",
                Self::PRESETS.join(", ")
            )));
        }
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Final image side length.
    pub fn image_size(&self) -> usize {
        self.upsample_to.unwrap_or(self.canvas_size)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |m: String| Err(EngineError::Config(m));
        if self.classes.len() < 2 {
            return fail("a toy task needs at least two shape classes".into());
        }
        if self.object_size == 0 || self.object_size > self.canvas_size {
            return fail(format!(
                "object size {} must be in 1..={} (the canvas size)",
                self.object_size, self.canvas_size
            ));
        }
        if let Some(u) = self.upsample_to {
            if u < self.canvas_size {
                return fail(format!("upsample target {u} is smaller than the canvas {}", self.canvas_size));
            }
        }
        if self.n_train == 0 || self.n_test == 0 {
            return fail("both splits need at least one sample".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail(format!("noise {} must be finite and non-negative", self.noise));
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        Ok(())
    }
}

fn render(spec: &ToySpec, class: ShapeClass, rng: &mut ChaCha8Rng, noise: &Normal<f64>, out: &mut [f32]) {
    let canvas = spec.canvas_size;
    let size = spec.object_size as f64;
    let half = size / 2.0;
    let (cx, cy) = match spec.placement {
        Placement::Center => (canvas as f64 / 2.0, canvas as f64 / 2.0),
        Placement::Random => {
            let lo = half;
            let hi = canvas as f64 - half;
            if hi > lo {
                (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
            } else {
                (lo, lo)
            }
        }
    };
    let brightness = rng.gen_range(0.6..1.0);
    let mut plane = vec![0.0f64; canvas * canvas];
    let step = 1.0 / SUPERSAMPLE as f64;
    for i in 0..canvas {
        for j in 0..canvas {
            let mut hits = 0;
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let y = i as f64 + (si as f64 + 0.5) * step;
                    let x = j as f64 + (sj as f64 + 0.5) * step;
                    if class.contains(x - cx, y - cy, size) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            plane[i * canvas + j] = brightness * cover + noise.sample(rng);
        }
    }
    let side = spec.image_size();
    for c in 0..spec.channels {
        for i in 0..side {
            for j in 0..side {
                let (si, sj) = (i * canvas / side, j * canvas / side);
                out[(c * side + i) * side + j] = plane[si * canvas + sj] as f32;
            }
        }
    }
}

fn render_split(spec: &ToySpec, n: usize, stream: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let side = spec.image_size();
    let mut images = Tensor::zeros([n, spec.channels, side, side]);
    let len = images.sample_len();
    let k = spec.classes.len();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    for (sample, &label) in images.data.chunks_exact_mut(len).zip(&labels) {
        render(spec, spec.classes[label], &mut rng, &noise, sample);
    }
    LabeledSet { images, labels }
}

/// Renders both splits. Labels cycle through the classes so splits are balanced.
pub fn generate_toy(spec: &ToySpec) -> Result<Dataset, EngineError> {
    spec.validate()?;
    Ok(Dataset {
        train: render_split(spec, spec.n_train, 1),
        test: render_split(spec, spec.n_test, 2),
        num_classes: spec.classes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(class: ShapeClass, size: f64) -> f64 {
        let n = 400;
        let step = 2.0 * size / n as f64;
        let mut hits = 0;
        for i in 0..n {
            for j in 0..n {
                let x = -size + (i as f64 + 0.5) * step;
                let y = -size + (j as f64 + 0.5) * step;
                hits += class.contains(x, y, size) as usize;
            }
        }
        hits as f64 * step * step
    }

    #[test]
    fn shapes_have_equal_area() {
        let disk = area(ShapeClass::Disk, 16.0);
        for c in [ShapeClass::Square, ShapeClass::Cross] {
            assert!((area(c, 16.0) - disk).abs() / disk < 0.01, "{c:?}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = ToySpec {
            n_train: 20,
            n_test: 10,
            ..ToySpec::preset("canvas64").unwrap()
        };
        let a = generate_toy(&spec).unwrap();
        assert_eq!(a, generate_toy(&spec).unwrap());
        let b = generate_toy(&ToySpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a.train.images, b.train.images);
        assert_eq!(a.train.images.shape, [20, 1, 64, 64]);
    }

    #[test]
    fn centered_object_stays_inside_canvas() {
        let spec = ToySpec {
            n_train: 4,
            n_test: 2,
            noise: 0.0,
            canvas_size: 24,
            ..Default::default()
        };
        let d = generate_toy(&spec).unwrap();
        let img = d.train.images.sample(0);
        // Border rows of a 16px disk centered on 24px are empty.
        assert!(img[..24 * 4].iter().all(|&v| v == 0.0));
        assert!(img[12 * 24 + 12] > 0.5);
    }

    #[test]
    fn upsampling_and_channels() {
        let spec = ToySpec {
            n_train: 2,
            n_test: 2,
            upsample_to: Some(32),
            channels: 3,
            ..Default::default()
        };
        let d = generate_toy(&spec).unwrap();
        assert_eq!(d.test.images.shape, [2, 3, 32, 32]);
        let s = d.test.images.sample(0);
        assert_eq!(&s[..1024], &s[1024..2048]);
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            ToySpec {
                object_size: 20,
                ..Default::default()
            },
            ToySpec {
                classes: vec![ShapeClass::Disk],
                ..Default::default()
            },
            ToySpec {
                noise: -1.0,
                ..Default::default()
            },
        ] {
            assert!(generate_toy(&bad).is_err());
        }
        assert!(ToySpec::resolve("no-such-preset").is_err());
    }
}
