use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{byte_from_pixel, pixel_from_byte, Dataset, Sample, Splits};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeds::{substream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            samples_per_class: 300,
            image_size: 32,
            noise_std: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be at least 1".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Noise-free grating of class `c`: orientation `π·c/K`, spatial
    /// frequency cycling through 2–4 periods per image.
    pub fn template(&self, class: usize) -> Vec<f64> {
        let s = self.image_size;
        let theta = PI * class as f64 / self.num_classes as f64;
        let cycles = 2.0 + (class % 3) as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        let mut out = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 * ct + y as f64 * st) / s as f64;
                out.push(0.5 + 0.35 * (2.0 * PI * cycles * u).sin());
            }
        }
        out
    }
}

/// Seeded train/val/test splits (70/10/20 per class) of noisy class
/// templates. Pixels are quantized to 8-bit levels.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = substream(spec.seed, Stream::Data);
    let s = spec.image_size;
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let n = spec.samples_per_class;
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..spec.num_classes {
        let template = spec.template(class);
        let mut samples: Vec<Sample> = (0..n)
            .map(|i| {
                let pixels = template
                    .iter()
                    .map(|t| {
                        let v = if spec.noise_std > 0.0 { t + noise.sample(&mut rng) } else { *t };
                        pixel_from_byte(byte_from_pixel(v as f32))
                    })
                    .collect();
                Sample {
                    image: Tensor::new(vec![s, s, 1], pixels).expect("image shape"),
                    label: class,
                    id: class * n + i,
                }
            })
            .collect();
        samples.shuffle(&mut rng);
        let rest = samples.split_off(n_train);
        train.extend(samples);
        let mut rest = rest;
        let tail = rest.split_off(n_val);
        val.extend(rest);
        test.extend(tail);
    }
    let k = spec.num_classes;
    Ok(Splits {
        train: Dataset::new(train, k)?,
        val: Dataset::new(val, k)?,
        test: Dataset::new(test, k)?,
    })
}
