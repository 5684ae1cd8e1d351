use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::scalar::Real;
use crate::tensor::Image;

/// Generator version; bump when the sampling procedure changes.
pub const DATASET_VERSION: u32 = 1;

// 3x3 stamp shapes, row-major.
const SHAPES: [[u8; 9]; 8] = [
    [0, 1, 0, 1, 1, 1, 0, 1, 0], // plus
    [1, 0, 1, 0, 1, 0, 1, 0, 1], // cross
    [1, 1, 1, 1, 0, 1, 1, 1, 1], // ring
    [0, 0, 0, 1, 1, 1, 0, 0, 0], // horizontal bar
    [0, 1, 0, 0, 1, 0, 0, 1, 0], // vertical bar
    [1, 0, 0, 0, 1, 0, 0, 0, 1], // diagonal
    [1, 1, 1, 1, 1, 1, 1, 1, 1], // block
    [0, 0, 0, 0, 1, 0, 0, 0, 0], // dot
];

fn default_val_fraction() -> f64 {
    0.25
}

fn default_noise() -> f64 {
    0.3
}

fn default_brightness() -> f64 {
    0.2
}

/// Parameters of the synthetic stamped-pattern classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Standard deviation of the per-pixel background noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Standard deviation of a per-image offset added to every pixel and channel.
    #[serde(default = "default_brightness")]
    pub brightness: f64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.num_classes) {
            return arg_err(format!("numClasses must be in 2..=8, got {}", self.num_classes));
        }
        if self.height < 3 || self.width < 3 {
            return arg_err("images must be at least 3x3 to hold a stamp");
        }
        if self.channels == 0 {
            return arg_err("channels must be >= 1");
        }
        if self.samples < self.num_classes {
            return arg_err("need at least one sample per class");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return arg_err("valFraction must be in [0, 1)");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0)
            || !(self.brightness.is_finite() && self.brightness >= 0.0)
        {
            return arg_err("noise and brightness must be finite and >= 0");
        }
        Ok(())
    }
}

/// Seeded synthetic dataset with a fixed train/validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset<T> {
    pub config: DatasetConfig,
    pub images: Vec<Image<T>>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl<T: Real> ToyDataset<T> {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Colour of class `c` over `channels` channels.
pub fn class_colour(c: usize, num_classes: usize, channels: usize) -> Vec<f64> {
    (0..channels)
        .map(|ch| {
            let phase = c as f64 / num_classes as f64 + ch as f64 / channels as f64;
            1.0 + 0.8 * (std::f64::consts::TAU * phase).cos()
        })
        .collect()
}

/// 3×3 shape stamped for class `c`.
pub fn class_shape(c: usize) -> [u8; 9] {
    SHAPES[c % SHAPES.len()]
}

/// Sample `i` has label `i mod numClasses`; each image is Gaussian noise plus a
/// per-image brightness offset plus the class shape, tinted with the class
/// colour, stamped at a uniformly random position.
pub fn generate_toy_dataset<T: Real>(config: &DatasetConfig) -> Result<ToyDataset<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise).expect("validated");
    let bright = Normal::new(0.0, config.brightness).expect("validated");
    let (h, w, c) = (config.height, config.width, config.channels);
    let mut images = Vec::with_capacity(config.samples);
    let mut labels = Vec::with_capacity(config.samples);
    for i in 0..config.samples {
        let label = i % config.num_classes;
        let shape = class_shape(label);
        let colour = class_colour(label, config.num_classes, c);
        let offset = bright.sample(&mut rng);
        let (r0, c0) = (rng.random_range(0..=h - 3), rng.random_range(0..=w - 3));
        let mut vals = vec![0.0f64; h * w * c];
        for v in vals.iter_mut() {
            *v = noise.sample(&mut rng) + offset;
        }
        for (s, &on) in shape.iter().enumerate() {
            if on == 0 {
                continue;
            }
            let (pi, pj) = (r0 + s / 3, c0 + s % 3);
            for (ch, col) in colour.iter().enumerate() {
                vals[(pi * w + pj) * c + ch] += col;
            }
        }
        images.push(Image::new(h, w, c, vals.into_iter().map(T::from_f64).collect())?);
        labels.push(label);
    }
    let mut order: Vec<usize> = (0..config.samples).collect();
    order.shuffle(&mut rng);
    let n_val = (config.samples as f64 * config.val_fraction).round() as usize;
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    Ok(ToyDataset {
        config: config.clone(),
        images,
        labels,
        train,
        val,
    })
}
