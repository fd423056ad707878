//! Synthetic "real" images with natural-looking low-frequency statistics and
//! "fake" images carrying a periodic generator-style artifact.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

pub const REAL: usize = 0;
pub const FAKE: usize = 1;

/// Blur width of the noise field.
pub const BLUR_SIGMA: f64 = 2.0;

/// First id of the evaluation range; train ids stay below it.
pub const EVAL_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// Axis-aligned period-2 checkerboard.
    A,
    /// Diagonal cosine stripes of period 3.
    B,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::A, Family::B];

    fn index(self) -> u64 {
        match self {
            Family::A => 0,
            Family::B => 1,
        }
    }

    /// Artifact value at pixel `(y, x)` for unit amplitude.
    pub fn pattern(self, y: usize, x: usize) -> f64 {
        match self {
            Family::A => {
                if (x + y) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Family::B => (std::f64::consts::TAU * ((x + y) % 3) as f64 / 3.0).cos(),
        }
    }
}

impl FromStr for Family {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s.trim() {
            "A" | "a" => Ok(Family::A),
            "B" | "b" => Ok(Family::B),
            other => Err(DataError::Invalid(format!("unknown artifact family '{other}'"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::A => "A",
            Family::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub family: Option<Family>,
    pub id: u64,
}

impl Sample {
    /// Rounds pixel values to the 8-bit grid so in-memory data matches PPM files.
    pub fn quantized(mut self) -> Self {
        self.image = self.image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        self
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable blur of one `n × n` plane with wrap-around boundaries.
fn blur_wrap(plane: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let n_i = n as isize;
    let idx = |i: isize| i.rem_euclid(n_i) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[y * n + idx(x as isize + k as isize - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[idx(y as isize + k as isize - r) * n + x])
                .sum();
        }
    }
    out
}

fn check_size(size: usize) -> Result<(), DataError> {
    if size == 0 || size % 8 != 0 {
        return Err(DataError::Invalid(format!("image size {size} must be a positive multiple of 8")));
    }
    Ok(())
}

/// A real image `[3, size, size]` in `[0, 1]`, fully determined by `(seed, id)`.
pub fn gen_real(seed: u64, id: u64, size: usize) -> Result<Sample, DataError> {
    check_size(size)?;
    let mut rng = Rng::stream(seed, 0, id, Purpose::Data);
    let kernel = gaussian_kernel(BLUR_SIGMA);
    // Std of blurred unit white noise.
    let noise_std = kernel.iter().map(|w| w * w).sum::<f64>();
    let n = size;
    let mut data = Vec::with_capacity(3 * n * n);
    let base = rng.uniform_range(0.3, 0.7);
    for _ in 0..3 {
        let tint = base + rng.uniform_range(-0.1, 0.1);
        let noise: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let blurred = blur_wrap(&noise, n, &kernel);
        data.extend(blurred.into_iter().map(|v| tint + 0.12 * v / noise_std));
    }
    let ellipses = 1 + rng.below(3) as usize;
    for _ in 0..ellipses {
        let cy = rng.uniform_range(0.0, n as f64);
        let cx = rng.uniform_range(0.0, n as f64);
        let ry = rng.uniform_range(0.1, 0.35) * n as f64;
        let rx = rng.uniform_range(0.1, 0.35) * n as f64;
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let colour: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(-0.3, 0.3));
        let softness = rng.uniform_range(0.1, 0.3);
        let (st, ct) = theta.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = (dx * ct + dy * st) / rx;
                let v = (-dx * st + dy * ct) / ry;
                let rr = (u * u + v * v).sqrt();
                let weight = 1.0 / (1.0 + ((rr - 1.0) / softness).exp());
                for (c, col) in colour.iter().enumerate() {
                    data[c * n * n + y * n + x] += col * weight;
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: Tensor::new(&[3, n, n], data).expect("shape matches"),
        label: REAL,
        family: None,
        id,
    })
}

/// `gen_real(seed, id)` plus the family's artifact at `amplitude`, clipped.
pub fn gen_fake(seed: u64, id: u64, size: usize, family: Family, amplitude: f64) -> Result<Sample, DataError> {
    if !(amplitude > 0.0 && amplitude <= 0.2) {
        return Err(DataError::Invalid(format!("artifact amplitude {amplitude} outside (0, 0.2]")));
    }
    let mut s = gen_real(seed, id, size)?;
    add_artifact(&mut s.image, family, amplitude);
    s.label = FAKE;
    s.family = Some(family);
    Ok(s)
}

/// Adds `amplitude · pattern` to every channel of `[3, H, W]` and clips.
pub fn add_artifact(image: &mut Tensor, family: Family, amplitude: f64) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / w) % h, i % w);
        *v = (*v + amplitude * family.pattern(y, x)).clamp(0.0, 1.0);
    }
}

/// Which part of a dataset a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Samples per class in the training split.
    pub n_train: usize,
    /// Samples per class (and per fake family) in the evaluation split.
    pub n_eval: usize,
    pub image_size: usize,
    pub train_family: Family,
    pub eval_families: Vec<Family>,
    pub amplitude: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        check_size(self.image_size)?;
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(DataError::Invalid("split sizes must be positive".into()));
        }
        if self.eval_families.is_empty() {
            return Err(DataError::Invalid("at least one evaluation family required".into()));
        }
        if self.n_train as u64 * 2 >= EVAL_ID_BASE || self.n_eval as u64 >= 1 << 28 {
            return Err(DataError::Invalid("split too large for the id layout".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 0.2) {
            return Err(DataError::Invalid(format!("amplitude {} outside (0, 0.2]", self.amplitude)));
        }
        Ok(())
    }

    /// Real training ids `0..n`, fake training ids `n..2n`; evaluation reals
    /// start at `EVAL_ID_BASE` and each fake family has its own block after them.
    pub fn real_ids(&self, split: Split) -> std::ops::Range<u64> {
        match split {
            Split::Train => 0..self.n_train as u64,
            Split::Eval => EVAL_ID_BASE..EVAL_ID_BASE + self.n_eval as u64,
        }
    }

    pub fn fake_ids(&self, split: Split, family: Family) -> std::ops::Range<u64> {
        match split {
            Split::Train => self.n_train as u64..2 * self.n_train as u64,
            Split::Eval => {
                let start = EVAL_ID_BASE + self.n_eval as u64 * (1 + family.index());
                start..start + self.n_eval as u64
            }
        }
    }

    /// Training split: `n_train` reals then `n_train` fakes of the train family.
    pub fn train_set(&self) -> Result<Vec<Sample>, DataError> {
        self.validate()?;
        self.build(Split::Train, self.train_family)
    }

    /// Evaluation split for one fake family: `n_eval` reals and `n_eval` fakes.
    pub fn eval_set(&self, family: Family) -> Result<Vec<Sample>, DataError> {
        self.validate()?;
        self.build(Split::Eval, family)
    }

    fn build(&self, split: Split, family: Family) -> Result<Vec<Sample>, DataError> {
        let mut out = Vec::new();
        for id in self.real_ids(split) {
            out.push(gen_real(self.seed, id, self.image_size)?.quantized());
        }
        for id in self.fake_ids(split, family) {
            out.push(gen_fake(self.seed, id, self.image_size, family, self.amplitude)?.quantized());
        }
        Ok(out)
    }
}
