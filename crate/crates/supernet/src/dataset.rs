//! Built-in synthetic datasets.
//!
//! Everything here is generated on the fly from a seed; nothing is
//! downloaded. Two generators are provided: a two-moons point cloud
//! for 2-D classification toys, and 8x8 digit images rendered from a
//! tiny embedded glyph asset with optional augmentation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw 8x8 digit glyphs, one byte per row, MSB = leftmost pixel.
/// 10 digits x 8 rows = 80 bytes.
const DIGIT_GLYPHS: &[u8; 80] = include_bytes!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/assets/digit_glyphs.bin"
));

/// An in-memory labelled dataset. Inputs all share one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// Builds a dataset from parallel input/label vectors.
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() || classes == 0 {
            return Err(Error::EmptyInput(
                "dataset needs matching, non-empty inputs and labels".into(),
            ));
        }
        let shape = inputs[0].shape().to_vec();
        for t in &inputs {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    src: 0,
                    dst: 0,
                    detail: format!(
                        "dataset inputs must share one shape: {:?} vs {:?}",
                        shape,
                        t.shape()
                    ),
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Parse(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }

    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// One-hot target vector for example `i`, shape `[classes]`.
    pub fn one_hot(&self, i: usize) -> Tensor {
        let mut t = Tensor::zeros(&[self.classes]);
        t.data_mut()[self.labels[i]] = 1.0;
        t
    }

    /// Splits off the last `val_fraction` of a seeded shuffle as a
    /// validation set. Deterministic for a given seed.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidConfig(
                "val_fraction must lie in [0, 1)".into(),
            ));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle(&mut order, &mut rng);
        let n_val = (self.len() as f64 * val_fraction).floor() as usize;
        let n_train = self.len() - n_val;
        if n_train == 0 || n_val == 0 {
            return Err(Error::InvalidConfig(format!(
                "split {val_fraction} leaves an empty side for {} examples",
                self.len()
            )));
        }
        let take = |idxs: &[usize]| -> Dataset {
            Dataset {
                inputs: idxs.iter().map(|&i| self.inputs[i].clone()).collect(),
                labels: idxs.iter().map(|&i| self.labels[i]).collect(),
                classes: self.classes,
            }
        };
        Ok((take(&order[..n_train]), take(&order[n_train..])))
    }
}

/// Fisher-Yates shuffle with an explicit loop so the draw count stays
/// independent of rand's internals (bitwise reproducibility matters).
pub(crate) fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Standard normal draw via Box-Muller.
fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Two interleaved half-circles ("two moons"), `n` points total with
/// alternating labels, plus isotropic Gaussian noise of the given
/// standard deviation. Inputs have shape `[2]`, labels are 0/1.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::EmptyInput("two_moons needs at least 2 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (mut x, mut y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x += noise * gauss(&mut rng);
        y += noise * gauss(&mut rng);
        inputs.push(Tensor::new(vec![2], vec![x as f32, y as f32])?);
        labels.push(class);
    }
    Dataset::new(inputs, labels, 2)
}

/// Returns the ten base glyphs as `[1, 8, 8]` tensors with values in
/// {0, 1}, indexed by digit.
pub fn digit_glyphs() -> Vec<Tensor> {
    (0..10)
        .map(|d| {
            let mut t = Tensor::zeros(&[1, 8, 8]);
            for r in 0..8 {
                let row = DIGIT_GLYPHS[d * 8 + r];
                for c in 0..8 {
                    if row & (0x80 >> c) != 0 {
                        t.data_mut()[r * 8 + c] = 1.0;
                    }
                }
            }
            t
        })
        .collect()
}

/// 8x8 digit images: `per_class` samples of each digit 0-9, rendered
/// from the embedded glyphs. Each sample is independently augmented:
/// an optional +-1 pixel shift in each axis (when `shift` is set) and
/// uniform per-pixel intensity jitter of half-width `jitter`, clamped
/// to [0, 1]. With `jitter = 0` and `shift = false` every sample is
/// exactly its class glyph. Samples are ordered class-major.
pub fn digits(per_class: usize, jitter: f64, shift: bool, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::EmptyInput("digits needs per_class >= 1".into()));
    }
    if !(0.0..=1.0).contains(&jitter) {
        return Err(Error::InvalidConfig("jitter must lie in [0, 1]".into()));
    }
    let glyphs = digit_glyphs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(per_class * 10);
    let mut labels = Vec::with_capacity(per_class * 10);
    for digit in 0..10 {
        for _ in 0..per_class {
            let (dx, dy) = if shift {
                (rng.gen_range(-1isize..=1), rng.gen_range(-1isize..=1))
            } else {
                (0, 0)
            };
            let mut t = Tensor::zeros(&[1, 8, 8]);
            for r in 0..8 {
                for c in 0..8 {
                    let sr = r as isize - dy;
                    let sc = c as isize - dx;
                    let base = if (0..8).contains(&sr) && (0..8).contains(&sc) {
                        glyphs[digit].data()[(sr * 8 + sc) as usize]
                    } else {
                        0.0
                    };
                    let noisy = base as f64 + rng.gen_range(-jitter..=jitter);
                    t.data_mut()[r * 8 + c] = noisy.clamp(0.0, 1.0) as f32;
                }
            }
            inputs.push(t);
            labels.push(digit);
        }
    }
    Dataset::new(inputs, labels, 10)
}
