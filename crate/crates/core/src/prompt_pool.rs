//! Per-class prompt blocks and the operations that gate them.
//!
//! Forgetting a class only flips its bit in the activity mask; the encoder
//! never sees an inactive block again. A purge additionally zeroes the stored
//! block and makes the removal permanent.

use std::collections::BTreeSet;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Parameter, Scalar, Tensor};

/// Outcome of a mask mutation. `Unchanged` is the warning signal for
/// redundant removals/restorations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskChange {
    Changed,
    Unchanged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool<T: Scalar = f32> {
    prompts: Vec<Parameter<T>>,
    active: Vec<bool>,
    purged: Vec<bool>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> PromptPool<T> {
    /// `classes` blocks of `tokens×dim`, truncated-normal(0.02) initialized
    /// from `init_rng`. `sampler_seed` seeds the pool-owned generator that
    /// drives distractor sampling and shuffling.
    pub fn new<R: Rng>(classes: usize, tokens: usize, dim: usize, init_rng: &mut R, sampler_seed: u64) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("finite std");
        let prompts = (0..classes)
            .map(|c| {
                let t = Tensor::from_fn(vec![tokens, dim], |_| loop {
                    let v: f64 = normal.sample(init_rng);
                    if v.abs() <= 0.04 {
                        break T::lit(v);
                    }
                });
                Parameter::new(format!("prompt.{c}"), t, false)
            })
            .collect();
        Self::from_parts(prompts, vec![true; classes], vec![false; classes], sampler_seed)
    }

    pub(crate) fn from_parts(prompts: Vec<Parameter<T>>, active: Vec<bool>, purged: Vec<bool>, seed: u64) -> Self {
        Self {
            prompts,
            active,
            purged,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prompts.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block(&self, class: usize) -> &Parameter<T> {
        &self.prompts[class]
    }

    pub fn blocks(&self) -> &[Parameter<T>] {
        &self.prompts
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.prompts.iter_mut()
    }

    pub fn is_active(&self, class: usize) -> bool {
        self.active.get(class).copied().unwrap_or(false)
    }

    pub fn is_purged(&self, class: usize) -> bool {
        self.purged.get(class).copied().unwrap_or(false)
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn purged_mask(&self) -> &[bool] {
        &self.purged
    }

    pub fn active_classes(&self) -> Vec<usize> {
        (0..self.prompts.len()).filter(|c| self.active[*c]).collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Rewinds the pool generator to its seed.
    pub fn reset_rng(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.prompts.len() {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: self.prompts.len(),
            });
        }
        Ok(())
    }

    /// Uniformly random `m`-subset of the active classes other than
    /// `target`, in the sampler's draw order.
    pub fn sample_distractors<R: Rng>(&self, target: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.check_class(target)?;
        if !self.active[target] {
            return Err(Error::InactiveClass(target));
        }
        let candidates: Vec<usize> = self.active_classes().into_iter().filter(|c| *c != target).collect();
        if m > candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {m} distractors from {} active non-target prompts",
                candidates.len()
            )));
        }
        Ok(index::sample(rng, candidates.len(), m)
            .into_iter()
            .map(|i| candidates[i])
            .collect())
    }

    /// [`PromptPool::sample_distractors`] driven by the pool's own generator.
    pub fn draw_distractors(&mut self, target: usize, m: usize) -> Result<Vec<usize>> {
        let mut rng = self.rng.clone();
        let out = self.sample_distractors(target, m, &mut rng);
        self.rng = rng;
        out
    }

    /// [`assemble_shuffled`] driven by the pool's own generator.
    pub fn draw_permutation<B>(&mut self, blocks: Vec<B>) -> Vec<B> {
        assemble_shuffled(blocks, &mut self.rng)
    }

    /// Deactivates `class`. Touches nothing but the activity mask.
    pub fn remove_prompt(&mut self, class: usize) -> Result<MaskChange> {
        self.check_class(class)?;
        if !self.active[class] {
            warn!("prompt for class {class} is already inactive");
            return Ok(MaskChange::Unchanged);
        }
        self.active[class] = false;
        Ok(MaskChange::Changed)
    }

    /// Reactivates a removed (not purged) class with its stored block.
    pub fn restore_prompt(&mut self, class: usize) -> Result<MaskChange> {
        self.check_class(class)?;
        if self.purged[class] {
            return Err(Error::Purged(class));
        }
        if self.active[class] {
            warn!("prompt for class {class} is already active");
            return Ok(MaskChange::Unchanged);
        }
        self.active[class] = true;
        Ok(MaskChange::Changed)
    }

    /// Irreversibly deletes `class`: zeroes the block and deactivates it.
    pub fn purge_prompt(&mut self, class: usize) -> Result<MaskChange> {
        self.check_class(class)?;
        let change = if self.purged[class] {
            MaskChange::Unchanged
        } else {
            MaskChange::Changed
        };
        self.active[class] = false;
        self.purged[class] = true;
        let p = &mut self.prompts[class];
        p.tensor.values_mut().fill(T::zero());
        p.zero_grad();
        Ok(change)
    }

    /// Reactivates every class that has not been purged.
    pub fn restore_all(&mut self) {
        for (a, p) in self.active.iter_mut().zip(&self.purged) {
            *a = !*p;
        }
    }

    /// Replaces the mask wholesale (used by evaluation snapshots).
    pub fn set_active_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.active.len() {
            return Err(Error::InvalidArgument(format!(
                "mask of {} entries for {} classes",
                mask.len(),
                self.active.len()
            )));
        }
        if let Some(c) = (0..mask.len()).find(|c| mask[*c] && self.purged[*c]) {
            return Err(Error::Purged(c));
        }
        self.active.copy_from_slice(mask);
        Ok(())
    }

    /// Classes currently excluded from inference.
    pub fn removed_classes(&self) -> BTreeSet<usize> {
        (0..self.active.len()).filter(|c| !self.active[*c]).collect()
    }
}

/// Uniformly random permutation of `blocks`.
pub fn assemble_shuffled<B, R: Rng>(mut blocks: Vec<B>, rng: &mut R) -> Vec<B> {
    blocks.shuffle(rng);
    blocks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(k: usize) -> PromptPool<f32> {
        PromptPool::new(k, 2, 8, &mut ChaCha8Rng::seed_from_u64(0), 1)
    }

    #[test]
    fn distractors_never_include_target() {
        let p = pool(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for m in 0..=5 {
            for _ in 0..200 {
                let d = p.sample_distractors(3, m, &mut rng).unwrap();
                assert_eq!(d.len(), m);
                assert!(!d.contains(&3));
                let uniq: BTreeSet<_> = d.iter().collect();
                assert_eq!(uniq.len(), m);
            }
        }
    }

    #[test]
    fn full_draw_is_the_forced_subset() {
        let p = pool(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = p.sample_distractors(1, 3, &mut rng).unwrap();
        d.sort();
        assert_eq!(d, vec![0, 2, 3]);
    }

    #[test]
    fn too_many_distractors_rejected() {
        let mut p = pool(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(p.sample_distractors(0, 4, &mut rng).is_err());
        p.remove_prompt(2).unwrap();
        assert!(p.sample_distractors(0, 3, &mut rng).is_err());
        assert!(matches!(p.sample_distractors(2, 1, &mut rng), Err(Error::InactiveClass(2))));
    }

    #[test]
    fn inactive_classes_are_never_sampled() {
        let mut p = pool(6);
        p.remove_prompt(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            assert!(!p.sample_distractors(0, 4, &mut rng).unwrap().contains(&4));
        }
    }

    #[test]
    fn shuffle_preserves_multiset_and_replays() {
        let blocks = vec![0, 1, 2, 3, 4];
        let a = assemble_shuffled(blocks.clone(), &mut ChaCha8Rng::seed_from_u64(3));
        let b = assemble_shuffled(blocks.clone(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, blocks);
    }

    #[test]
    fn remove_and_restore_round_trip() {
        let mut p = pool(6);
        let before = p.clone();
        assert_eq!(p.remove_prompt(2).unwrap(), MaskChange::Changed);
        assert_eq!(p.active_count(), 5);
        assert_eq!(p.remove_prompt(2).unwrap(), MaskChange::Unchanged);
        assert_eq!(p.active_count(), 5);
        assert_eq!(p.blocks(), before.blocks());
        assert_eq!(p.restore_prompt(2).unwrap(), MaskChange::Changed);
        assert_eq!(p.restore_prompt(2).unwrap(), MaskChange::Unchanged);
        assert_eq!(p, before);
    }

    #[test]
    fn purge_is_final() {
        let mut p = pool(6);
        p.purge_prompt(1).unwrap();
        assert!(!p.is_active(1));
        assert!(p.block(1).tensor.values().iter().all(|v| *v == 0.0));
        assert!(matches!(p.restore_prompt(1), Err(Error::Purged(1))));
        p.restore_all();
        assert!(!p.is_active(1));
        assert!(p.set_active_mask(&[true; 6]).is_err());
    }

    #[test]
    fn out_of_range_class_rejected() {
        let mut p = pool(3);
        assert!(p.remove_prompt(3).is_err());
        assert!(p.restore_prompt(9).is_err());
    }
}
