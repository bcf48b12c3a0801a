//! Joint learn/unlearn objective and the training loop.
//!
//! Every sample contributes a cross-entropy term on a prompt sequence that
//! contains its own class prompt plus random distractors, and a KL-to-uniform
//! term on a sequence of distractors only. The second term teaches the model
//! to be maximally uncertain whenever the correct prompt is missing, which is
//! what makes deleting a prompt equivalent to forgetting its class.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Adam, AdamConfig, Graph, Parameter, Scalar, Var};
use crate::prompt_pool::PromptPool;
use crate::seeds::{substream, Stream};

/// Distribution of the number of distractor prompts per sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistractorCount {
    /// Uniform over `1..=A−1`, `A` the number of active classes.
    #[default]
    UniformAll,
    /// Uniform over `low..=high`, clipped to `A−1` at draw time.
    Uniform { low: usize, high: usize },
    Fixed { m: usize },
}

impl DistractorCount {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let max = classes.saturating_sub(1);
        let (low, high) = match *self {
            DistractorCount::UniformAll => return Ok(()),
            DistractorCount::Uniform { low, high } => (low, high),
            DistractorCount::Fixed { m } => (m, m),
        };
        if low < 1 || low > high || high > max {
            return Err(Error::Config(format!(
                "distractor counts {low}..={high} must lie within 1..={max}"
            )));
        }
        Ok(())
    }

    /// Draws `m` given `available` non-target prompts (at least one).
    pub fn draw<R: Rng>(&self, available: usize, rng: &mut R) -> usize {
        match *self {
            DistractorCount::UniformAll => rng.gen_range(1..=available),
            DistractorCount::Uniform { low, high } => {
                let high = high.min(available);
                rng.gen_range(low.min(high)..=high)
            }
            DistractorCount::Fixed { m } => m.min(available),
        }
    }
}

/// Component switches of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Train the KL-to-uniform term.
    pub use_kl: bool,
    /// Randomly permute prompt blocks; otherwise ascending class order.
    pub use_shuffle: bool,
    /// Draw a random subset of distractors; otherwise use all of them.
    pub use_sampling: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const KL_ONLY: Ablation = Ablation {
        use_kl: true,
        use_shuffle: false,
        use_sampling: false,
    };
    pub const KL_SHUFFLE: Ablation = Ablation {
        use_kl: true,
        use_shuffle: true,
        use_sampling: false,
    };
    pub const FULL: Ablation = Ablation {
        use_kl: true,
        use_shuffle: true,
        use_sampling: true,
    };

    pub fn label(&self) -> String {
        let mut s = String::from(if self.use_kl { "kl" } else { "ce" });
        if self.use_shuffle {
            s.push_str("+shuffle");
        }
        if self.use_sampling {
            s.push_str("+sampling");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub m_distribution: DistractorCount,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Cross-entropy only; overrides `ablation.use_kl`.
    pub full_knowledge: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            m_distribution: DistractorCount::UniformAll,
            epochs: 10,
            lr: 1e-3,
            batch_size: 4,
            seed: 0,
            ablation: Ablation::FULL,
            full_knowledge: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn full_knowledge(seed: u64) -> Self {
        Self {
            seed,
            full_knowledge: true,
            ..Default::default()
        }
    }

    pub fn uses_kl(&self) -> bool {
        self.ablation.use_kl && !self.full_knowledge
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a non-negative number, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if classes < 2 {
            return Err(Error::Config("training needs at least 2 classes".into()));
        }
        self.m_distribution.validate(classes)
    }
}

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub batch: usize,
    pub learn_term: f64,
    pub unlearn_term: f64,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub batches: Vec<LossBreakdown>,
}

impl TrainLog {
    /// Mean `(learn, unlearn, total)` per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64, f64, f64)> {
        let mut out: Vec<(usize, f64, f64, f64, usize)> = Vec::new();
        for b in &self.batches {
            match out.last_mut() {
                Some(last) if last.0 == b.epoch => {
                    last.1 += b.learn_term;
                    last.2 += b.unlearn_term;
                    last.3 += b.total;
                    last.4 += 1;
                }
                _ => out.push((b.epoch, b.learn_term, b.unlearn_term, b.total, 1)),
            }
        }
        out.into_iter()
            .map(|(e, l, u, t, n)| {
                let n = n as f64;
                (e, l / n, u / n, t / n)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for b in &self.batches {
            w.serialize(b)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Prompt sequences for one sample: `learn` contains the label's class,
/// `unlearn` (when the KL term is on) does not.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPlan {
    pub learn: Vec<usize>,
    pub unlearn: Option<Vec<usize>>,
}

fn assemble<T: Scalar>(
    pool: &mut PromptPool<T>,
    label: usize,
    include_target: bool,
    config: &TrainConfig,
) -> Result<Vec<usize>> {
    let others = pool.active_count() - 1;
    let mut classes = if config.ablation.use_sampling {
        let m = config.m_distribution.draw(others, pool.rng_mut());
        pool.draw_distractors(label, m)?
    } else {
        pool.active_classes().into_iter().filter(|c| *c != label).collect()
    };
    if include_target {
        classes.push(label);
    }
    if config.ablation.use_shuffle {
        Ok(pool.draw_permutation(classes))
    } else {
        classes.sort_unstable();
        Ok(classes)
    }
}

/// Draws the prompt sequences for a sample of class `label` from the pool's
/// generator, honouring the ablation switches.
pub fn plan_sample<T: Scalar>(pool: &mut PromptPool<T>, label: usize, config: &TrainConfig) -> Result<PromptPlan> {
    if label >= pool.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: pool.num_classes(),
        });
    }
    if !pool.is_active(label) {
        return Err(Error::InactiveClass(label));
    }
    if pool.active_count() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 active prompts".into()));
    }
    let learn = assemble(pool, label, true, config)?;
    let unlearn = if config.uses_kl() {
        Some(assemble(pool, label, false, config)?)
    } else {
        None
    };
    Ok(PromptPlan { learn, unlearn })
}

fn forward<'a, T: Scalar>(g: &mut Graph<'a, T>, model: &'a Model<T>, image: &crate::numerics::Tensor<T>, classes: &[usize]) -> Result<Var> {
    let blocks: Vec<&Parameter<T>> = classes.iter().map(|c| model.pool.block(*c)).collect();
    model.encoder.forward(g, image, &blocks)
}

fn sample_image<T: Scalar>(sample: &Sample) -> crate::numerics::Tensor<T> {
    sample.image.cast()
}

/// Batch-mean cross-entropy with each sample's own prompt plus sampled
/// distractors.
pub fn compute_learn_loss<T: Scalar>(model: &mut Model<T>, batch: &[&Sample], config: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptySubset("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let plan = plan_sample(&mut model.pool, s.label, config)?;
        let mut g = Graph::new();
        let logits = forward(&mut g, model, &sample_image(s), &plan.learn)?;
        let ce = g.cross_entropy(logits, s.label)?;
        total += g.scalar(ce).to_f64().unwrap_or(f64::NAN);
    }
    Ok(total / batch.len() as f64)
}

/// Batch-mean KL-to-uniform with distractor prompts only.
pub fn compute_unlearn_loss<T: Scalar>(model: &mut Model<T>, batch: &[&Sample], config: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptySubset("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let plan = plan_sample(&mut model.pool, s.label, &TrainConfig {
            ablation: Ablation { use_kl: true, ..config.ablation },
            full_knowledge: false,
            ..config.clone()
        })?;
        let unlearn = plan.unlearn.expect("kl term requested");
        let mut g = Graph::new();
        let logits = forward(&mut g, model, &sample_image(s), &unlearn)?;
        let kl = g.kl_to_uniform(logits)?;
        total += g.scalar(kl).to_f64().unwrap_or(f64::NAN);
    }
    Ok(total / batch.len() as f64)
}

struct StepOutcome<T> {
    learn: f64,
    unlearn: f64,
    grads: HashMap<String, Vec<T>>,
}

/// Forward and backward for one batch. Gradients are summed per parameter
/// in sample order so the result does not depend on scheduling.
fn batch_gradients<T: Scalar>(model: &mut Model<T>, batch: &[&Sample], config: &TrainConfig) -> Result<StepOutcome<T>> {
    let plans = batch
        .iter()
        .map(|s| plan_sample(&mut model.pool, s.label, config))
        .collect::<Result<Vec<_>>>()?;
    let n = T::lit(batch.len() as f64);
    let lambda = T::lit(config.lambda);
    let mut out = StepOutcome {
        learn: 0.0,
        unlearn: 0.0,
        grads: HashMap::new(),
    };
    for (s, plan) in batch.iter().zip(&plans) {
        let model: &Model<T> = model;
        let image = sample_image(s);
        let mut g = Graph::new();
        let logits = forward(&mut g, model, &image, &plan.learn)?;
        let ce = g.cross_entropy(logits, s.label)?;
        out.learn += g.scalar(ce).to_f64().unwrap_or(f64::NAN);
        let mut terms = vec![ce];
        if let Some(unlearn) = &plan.unlearn {
            let logits = forward(&mut g, model, &image, unlearn)?;
            let kl = g.kl_to_uniform(logits)?;
            out.unlearn += g.scalar(kl).to_f64().unwrap_or(f64::NAN);
            if config.lambda > 0.0 {
                terms.push(g.scale(kl, lambda));
            }
        }
        let loss = g.sum_scalars(&terms)?;
        let loss = g.scale(loss, T::one() / n);
        let grads = g.backward(loss)?;
        for (name, grad) in g.param_grads(&grads) {
            match out.grads.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                None => {
                    out.grads.insert(name.to_owned(), grad);
                }
            }
        }
    }
    out.learn /= batch.len() as f64;
    out.unlearn /= batch.len() as f64;
    Ok(out)
}

/// Trains the prompts, LoRA factors and head of `model` on `dataset`.
pub fn fit<T: Scalar>(model: &mut Model<T>, dataset: &Dataset, config: &TrainConfig) -> Result<TrainLog> {
    config.validate(model.num_classes())?;
    if dataset.is_empty() {
        return Err(Error::EmptySubset("training set is empty".into()));
    }
    if dataset.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes,
            model.num_classes()
        )));
    }
    if model.pool.active_count() != model.num_classes() {
        return Err(Error::Config("training requires every prompt to be active".into()));
    }

    let mut order_rng = substream(config.seed, Stream::Order);
    let mut adam = Adam::new(config.adam);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for (batch_index, idx) in order.chunks(config.batch_size).enumerate() {
            let start = Instant::now();
            let batch: Vec<&Sample> = idx.iter().map(|i| &dataset.samples[*i]).collect();
            let step = batch_gradients(model, &batch, config)?;
            let total = step.learn + config.lambda * step.unlearn;
            if !(step.learn.is_finite() && step.unlearn.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    learn: step.learn,
                    unlearn: step.unlearn,
                });
            }
            model.zero_grad();
            for p in model.trainable_params_mut() {
                if let Some(g) = step.grads.get(&p.name) {
                    p.tensor.accumulate_grad(g)?;
                }
            }
            adam.step(model.trainable_params_mut(), config.lr);
            model.zero_grad();
            let rec = LossBreakdown {
                epoch,
                batch: batch_index,
                learn_term: step.learn,
                unlearn_term: step.unlearn,
                total,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            debug!("{rec:?}");
            log.batches.push(rec);
        }
        if let Some((_, l, u, t)) = log.epoch_means().last() {
            info!("epoch {epoch}: learn {l:.4} unlearn {u:.4} total {t:.4}");
        }
    }
    Ok(log)
}

/// Initializes a model from `config.seed` and trains it.
pub fn train<T: Scalar>(encoder: &EncoderConfig, dataset: &Dataset, config: &TrainConfig) -> Result<(Model<T>, TrainLog)> {
    let mut model = Model::init(encoder, config.seed)?;
    let log = fit(&mut model, dataset, config)?;
    Ok((model, log))
}
