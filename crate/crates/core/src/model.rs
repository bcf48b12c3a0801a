use rand::RngCore;

use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameter, Scalar, Tensor};
use crate::prompt_pool::PromptPool;
use crate::seeds::{substream, Stream};

/// Frozen encoder plus the per-class prompt pool that gates it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub encoder: EncoderWeights<T>,
    pub pool: PromptPool<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model whose backbone/adapters/prompts come from the `init`
    /// substream of `seed` and whose sampler is seeded from `sampler`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, Stream::Init);
        let encoder = EncoderWeights::init(config, &mut rng)?;
        let sampler_seed = substream(seed, Stream::Sampler).next_u64();
        let pool = PromptPool::new(
            config.num_classes,
            config.prompt_tokens,
            config.embed_dim,
            &mut rng,
            sampler_seed,
        );
        Ok(Self { encoder, pool })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    /// Logits with the prompts of `classes` prepended in that order. Any
    /// class may be named here, active or not; the caller owns gating.
    pub fn logits_with(&self, image: &Tensor<T>, classes: &[usize]) -> Result<Vec<T>> {
        let k = self.num_classes();
        if let Some(c) = classes.iter().find(|c| **c >= k) {
            return Err(Error::LabelOutOfRange { label: *c, classes: k });
        }
        let blocks: Vec<&Parameter<T>> = classes.iter().map(|c| self.pool.block(*c)).collect();
        let mut g = Graph::new();
        let y = self.encoder.forward(&mut g, image, &blocks)?;
        Ok(g.value(y).to_vec())
    }

    /// Logits with every active prompt, in ascending class order.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        self.logits_with(image, &self.pool.active_classes())
    }

    pub fn all_params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.encoder.params();
        out.extend(self.pool.blocks());
        out
    }

    /// Prompt blocks, LoRA factors and head.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<_> = self.encoder.trainable_params_mut().collect();
        out.extend(self.pool.blocks_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.trainable_params_mut() {
            p.zero_grad();
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax restricted to `allowed` classes (renormalized posterior).
pub fn argmax_among<T: Scalar>(values: &[T], allowed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if allowed.get(i).copied().unwrap_or(false) && best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}
