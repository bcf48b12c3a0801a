//! Datasets: seeded synthetic gratings for desk-scale runs and the IDX
//! binary format for MNIST-family data.

mod idx;
mod synthetic;

use std::collections::BTreeSet;

pub use idx::{export_idx, load_idx};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One labelled image with pixels in `[0, 1]`, laid out `H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    /// Position in the generating/loading order; unique within a source.
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: num_classes,
            });
        }
        if let Some(first) = samples.first() {
            let shape = first.image.shape();
            if samples.iter().any(|s| s.image.shape() != shape) {
                return Err(Error::InvalidArgument("images of mixed shapes".into()));
            }
        }
        Ok(Self { samples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[H, W, C]` of the images, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Samples whose label is in `classes`.
    pub fn restrict(&self, classes: &BTreeSet<usize>) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| classes.contains(&s.label))
                .cloned()
                .collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples of every class, in dataset order.
    pub fn take_per_class(&self, n: usize) -> Dataset {
        let mut seen = vec![0; self.num_classes];
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                seen[s.label] += 1;
                seen[s.label] <= n
            })
            .cloned()
            .collect();
        Dataset {
            samples,
            num_classes: self.num_classes,
        }
    }
}

/// Byte → pixel scaling shared by the generator and the IDX codec.
pub(crate) fn pixel_from_byte(b: u8) -> f32 {
    f32::from(b) / 255.0
}

pub(crate) fn byte_from_pixel(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_byte_scaling_is_exact_at_the_ends() {
        assert_eq!(pixel_from_byte(255), 1.0);
        assert_eq!(pixel_from_byte(0), 0.0);
        for b in 0..=255u8 {
            assert_eq!(byte_from_pixel(pixel_from_byte(b)), b);
        }
    }
}
