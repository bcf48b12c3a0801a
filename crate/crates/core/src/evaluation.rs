//! Retain/forget accuracy, forgetting-scenario sweeps, sequential
//! inference traces, the confidence membership-inference attack and the
//! LoRA-removal probe.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use itertools::Itertools;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax, argmax_among, Model};
use crate::numerics::{softmax, Tensor};
use crate::seeds::{substream, Stream};

/// How a prediction is read off the K-way head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Argmax over all K logits, removed classes included.
    #[default]
    FullHead,
    /// Argmax over the classes whose prompts are active.
    Renormalized,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForgetScenario {
    pub forget: BTreeSet<usize>,
    pub retain: BTreeSet<usize>,
}

impl ForgetScenario {
    pub fn new(num_classes: usize, forget: impl IntoIterator<Item = usize>) -> Result<Self> {
        let forget: BTreeSet<usize> = forget.into_iter().collect();
        if let Some(c) = forget.iter().find(|c| **c >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: *c,
                classes: num_classes,
            });
        }
        let retain = (0..num_classes).filter(|c| !forget.contains(c)).collect();
        Ok(Self { forget, retain })
    }

    pub fn label(&self) -> String {
        self.forget.iter().join(";")
    }
}

/// Logits for every sample under the pool's current activity mask.
pub fn predict_logits(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<f32>>> {
    let classes = model.pool.active_classes();
    samples.par_iter().map(|s| model.logits_with(&s.image, &classes)).collect()
}

/// Predicted labels under the current mask.
pub fn predict(model: &Model, samples: &[Sample], readout: Readout) -> Result<Vec<usize>> {
    let mask = model.pool.active_mask().to_vec();
    let logits = predict_logits(model, samples)?;
    Ok(logits
        .iter()
        .map(|l| match readout {
            Readout::FullHead => argmax(l),
            Readout::Renormalized => argmax_among(l, &mask).unwrap_or_else(|| argmax(l)),
        })
        .collect())
}

/// Mean over `classes` of each class's accuracy, in percent. Classes with
/// no samples are an error.
pub fn class_averaged_accuracy(predictions: &[usize], labels: &[usize], classes: &BTreeSet<usize>) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::EmptySubset("no classes to average over".into()));
    }
    let mut sum = 0.0;
    for c in classes {
        let (hit, n) = predictions
            .iter()
            .zip(labels)
            .filter(|(_, l)| *l == c)
            .fold((0usize, 0usize), |(h, n), (p, l)| (h + usize::from(p == l), n + 1));
        if n == 0 {
            return Err(Error::EmptySubset(format!("no test samples of class {c}")));
        }
        sum += hit as f64 / n as f64;
    }
    Ok(100.0 * sum / classes.len() as f64)
}

fn labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

/// Runs `f` with the pool mask set so that exactly `scenario.forget` is
/// removed, then puts the previous mask back.
fn with_scenario<R>(model: &mut Model, scenario: &ForgetScenario, f: impl FnOnce(&Model) -> Result<R>) -> Result<R> {
    let saved = model.pool.active_mask().to_vec();
    let mask: Vec<bool> = (0..model.num_classes()).map(|c| !scenario.forget.contains(&c)).collect();
    model.pool.set_active_mask(&mask)?;
    let out = f(model);
    model.pool.set_active_mask(&saved)?;
    out
}

/// Acc_r: class-averaged accuracy on retained classes under the current mask.
pub fn retain_accuracy(model: &Model, test: &Dataset, scenario: &ForgetScenario, readout: Readout) -> Result<f64> {
    if scenario.retain.is_empty() {
        return Err(Error::EmptySubset("scenario retains no classes".into()));
    }
    let subset = test.restrict(&scenario.retain);
    let preds = predict(model, &subset.samples, readout)?;
    class_averaged_accuracy(&preds, &labels(&subset.samples), &scenario.retain)
}

/// Acc_f: class-averaged accuracy on forgotten classes under the current mask.
pub fn forget_accuracy(model: &Model, test: &Dataset, scenario: &ForgetScenario, readout: Readout) -> Result<f64> {
    if scenario.forget.is_empty() {
        return Err(Error::EmptySubset("scenario forgets no classes".into()));
    }
    let subset = test.restrict(&scenario.forget);
    let preds = predict(model, &subset.samples, readout)?;
    class_averaged_accuracy(&preds, &labels(&subset.samples), &scenario.forget)
}

/// `(Acc_r, Acc_f)` after removing exactly the scenario's forget set.
pub fn evaluate_scenario(model: &mut Model, test: &Dataset, scenario: &ForgetScenario, readout: Readout) -> Result<(f64, f64)> {
    with_scenario(model, scenario, |m| {
        Ok((
            retain_accuracy(m, test, scenario, readout)?,
            forget_accuracy(m, test, scenario, readout)?,
        ))
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboRow {
    pub forget: String,
    pub acc_r: f64,
    pub acc_f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub forget_count: usize,
    pub acc_r: MeanStd,
    pub acc_f: MeanStd,
    pub n_combinations: usize,
    pub rows: Vec<ComboRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub max_combinations: usize,
    pub seed: u64,
    pub readout: Readout,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            max_combinations: 64,
            seed: 0,
            readout: Readout::FullHead,
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Forget sets of size `f`: all of them when there are at most
/// `max_combinations`, otherwise that many distinct seeded draws.
pub fn forget_sets(num_classes: usize, f: usize, config: &SweepConfig) -> Result<Vec<Vec<usize>>> {
    if f == 0 || f >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "forget count {f} outside 1..={}",
            num_classes.saturating_sub(1)
        )));
    }
    if binomial(num_classes, f) <= config.max_combinations as u128 {
        return Ok((0..num_classes).combinations(f).collect());
    }
    let mut rng = substream(config.seed, Stream::Eval);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(config.max_combinations);
    while out.len() < config.max_combinations {
        let mut set = index::sample(&mut rng, num_classes, f).into_vec();
        set.sort_unstable();
        if seen.insert(set.clone()) {
            out.push(set);
        }
    }
    Ok(out)
}

/// Acc_r/Acc_f averaged over forget sets of size `f`. Every prompt is
/// active while each set is evaluated except the set itself; the pool is
/// returned to its original mask.
pub fn scenario_sweep(model: &mut Model, test: &Dataset, f: usize, config: &SweepConfig) -> Result<EvalReport> {
    let k = model.num_classes();
    if let Some(c) = (0..k).find(|c| model.pool.is_purged(*c)) {
        return Err(Error::Purged(c));
    }
    let sets = forget_sets(k, f, config)?;
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let scenario = ForgetScenario::new(k, set)?;
        let (acc_r, acc_f) = evaluate_scenario(model, test, &scenario, config.readout)?;
        rows.push(ComboRow {
            forget: scenario.label(),
            acc_r,
            acc_f,
        });
    }
    let r: Vec<f64> = rows.iter().map(|r| r.acc_r).collect();
    let fa: Vec<f64> = rows.iter().map(|r| r.acc_f).collect();
    Ok(EvalReport {
        forget_count: f,
        acc_r: MeanStd::of(&r),
        acc_f: MeanStd::of(&fa),
        n_combinations: rows.len(),
        rows,
    })
}

#[derive(Serialize)]
struct SweepCsvRow {
    forget_count: usize,
    acc_r_mean: f64,
    acc_r_std: f64,
    acc_f_mean: f64,
    acc_f_std: f64,
    n_combinations: usize,
}

/// One summary row per report.
pub fn write_sweep_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        w.serialize(SweepCsvRow {
            forget_count: r.forget_count,
            acc_r_mean: r.acc_r.mean,
            acc_r_std: r.acc_r.std,
            acc_f_mean: r.acc_f.mean,
            acc_f_std: r.acc_f.std,
            n_combinations: r.n_combinations,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Per-combination rows of every report.
pub fn write_combinations_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        forget_count: usize,
        forget: &'a str,
        acc_r: f64,
        acc_f: f64,
    }
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        for row in &r.rows {
            w.serialize(Row {
                forget_count: r.forget_count,
                forget: &row.forget,
                acc_r: row.acc_r,
                acc_f: row.acc_f,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Removal of `class` just before batch `before_batch` is processed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalEvent {
    pub before_batch: usize,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub batch: usize,
    /// `retained` or `class_<c>`.
    pub group: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Accuracy pooled over the trailing window of batches; empty when the
    /// window holds no samples of the group.
    pub window_accuracy: Option<f64>,
    /// Classes removed when the batch was processed, `;`-separated.
    pub removed: String,
}

/// Streams `samples` in batches, applying `schedule` between batches, and
/// records per-batch accuracy of the never-removed classes and of each
/// scheduled class. The pool mask is restored afterwards; nothing is
/// trained.
pub fn sequential_inference(
    model: &mut Model,
    samples: &[Sample],
    batch_size: usize,
    schedule: &[RemovalEvent],
    window: usize,
) -> Result<Vec<TraceRow>> {
    let k = model.num_classes();
    if batch_size == 0 || window == 0 {
        return Err(Error::InvalidArgument("batch size and window must be positive".into()));
    }
    if let Some(e) = schedule.iter().find(|e| e.class >= k) {
        return Err(Error::LabelOutOfRange {
            label: e.class,
            classes: k,
        });
    }
    let scheduled: BTreeSet<usize> = schedule.iter().map(|e| e.class).collect();
    let mut groups: Vec<(String, BTreeSet<usize>)> = Vec::new();
    let retained: BTreeSet<usize> = (0..k).filter(|c| !scheduled.contains(c)).collect();
    if !retained.is_empty() {
        groups.push(("retained".into(), retained));
    }
    groups.extend(scheduled.iter().map(|c| (format!("class_{c}"), BTreeSet::from([*c]))));

    let saved = model.pool.active_mask().to_vec();
    let mut rows = Vec::new();
    let mut history: Vec<Vec<(usize, usize)>> = vec![Vec::new(); groups.len()];
    let result = (|| -> Result<()> {
        for (b, batch) in samples.chunks(batch_size).enumerate() {
            for e in schedule.iter().filter(|e| e.before_batch == b) {
                model.pool.remove_prompt(e.class)?;
            }
            let preds = predict(model, batch, Readout::FullHead)?;
            let removed = model.pool.removed_classes().iter().join(";");
            for (g, (name, classes)) in groups.iter().enumerate() {
                let (correct, total) = batch
                    .iter()
                    .zip(&preds)
                    .filter(|(s, _)| classes.contains(&s.label))
                    .fold((0, 0), |(h, n), (s, p)| (h + usize::from(s.label == *p), n + 1));
                history[g].push((correct, total));
                let tail = &history[g][history[g].len().saturating_sub(window)..];
                let (wc, wt) = tail.iter().fold((0, 0), |(a, b), (c, t)| (a + c, b + t));
                rows.push(TraceRow {
                    batch: b,
                    group: name.clone(),
                    correct,
                    total,
                    accuracy: if total > 0 { 100.0 * correct as f64 / total as f64 } else { f64::NAN },
                    window_accuracy: (wt > 0).then(|| 100.0 * wc as f64 / wt as f64),
                    removed: removed.clone(),
                });
            }
        }
        Ok(())
    })();
    model.pool.set_active_mask(&saved)?;
    result?;
    Ok(rows)
}

/// `samples` in a seeded random order, for use as an inference stream.
pub fn shuffled_stream(samples: &[Sample], seed: u64) -> Vec<Sample> {
    let mut out = samples.to_vec();
    out.shuffle(&mut substream(seed, Stream::Eval));
    out
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: std::io::Read>(reader: R) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Scores at or above the threshold are called members.
    Above,
    /// Scores at or below the threshold are called members.
    Below,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let m = MeanStd::of(values);
        Self {
            n: values.len(),
            mean: m.mean,
            std: m.std,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    /// `max(0, 2·(balanced_accuracy − 0.5))·100`.
    pub attack_advantage: f64,
    /// Held-out balanced accuracy of the attacker.
    pub balanced_accuracy: f64,
    /// Threshold and direction fitted on all scores (for reporting).
    pub threshold: f64,
    pub direction: Direction,
    pub members: Summary,
    pub nonmembers: Summary,
}

/// Threshold rule maximizing balanced accuracy on the given scores.
fn fit_threshold(members: &[f64], nonmembers: &[f64]) -> (f64, Direction, f64) {
    let mut points: Vec<(f64, bool)> = members
        .iter()
        .map(|s| (*s, true))
        .chain(nonmembers.iter().map(|s| (*s, false)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nm, nn) = (members.len() as f64, nonmembers.len() as f64);
    // Sweep distinct scores from above: `above_m`/`above_n` count scores ≥ t.
    let mut best = (f64::INFINITY, Direction::Above, 0.5);
    let (mut above_m, mut above_n) = (0.0, 0.0);
    let mut i = points.len();
    while i > 0 {
        let t = points[i - 1].0;
        while i > 0 && points[i - 1].0 == t {
            if points[i - 1].1 {
                above_m += 1.0;
            } else {
                above_n += 1.0;
            }
            i -= 1;
        }
        // Cut midway between this score and the next-lower one.
        let cut = if i > 0 { 0.5 * (points[i - 1].0 + t) } else { f64::NEG_INFINITY };
        let bal_above = 0.5 * (above_m / nm + (nn - above_n) / nn);
        if bal_above > best.2 {
            best = (cut, Direction::Above, bal_above);
        }
        let bal_below = 0.5 * ((nm - above_m) / nm + above_n / nn);
        if bal_below > best.2 {
            best = (cut, Direction::Below, bal_below);
        }
    }
    best
}

fn balanced_accuracy(members: &[f64], nonmembers: &[f64], threshold: f64, direction: Direction) -> f64 {
    let called = |s: &f64| match direction {
        Direction::Above => *s >= threshold,
        Direction::Below => *s <= threshold,
    };
    let tpr = members.iter().filter(|s| called(s)).count() as f64 / members.len() as f64;
    let tnr = nonmembers.iter().filter(|s| !called(s)).count() as f64 / nonmembers.len() as f64;
    0.5 * (tpr + tnr)
}

/// Threshold attack on precomputed membership scores. Each side is split in
/// two seeded halves; the threshold is fitted on one half and scored on the
/// other, in both directions, and the two held-out balanced accuracies are
/// averaged.
pub fn mia_from_scores(members: &[f64], nonmembers: &[f64], seed: u64) -> Result<MiaReport> {
    if members.len() < 2 || nonmembers.len() < 2 {
        return Err(Error::EmptySubset("membership attack needs at least 2 scores per side".into()));
    }
    let mut rng = substream(seed, Stream::Eval);
    let mut split = |v: &[f64]| {
        let mut v = v.to_vec();
        v.shuffle(&mut rng);
        let b = v.split_off(v.len() / 2);
        (v, b)
    };
    let (m_a, m_b) = split(members);
    let (n_a, n_b) = split(nonmembers);
    let mut held_out = 0.0;
    for ((fit_m, fit_n), (ev_m, ev_n)) in [((&m_a, &n_a), (&m_b, &n_b)), ((&m_b, &n_b), (&m_a, &n_a))] {
        let (t, dir, _) = fit_threshold(fit_m, fit_n);
        held_out += 0.5 * balanced_accuracy(ev_m, ev_n, t, dir);
    }
    let (threshold, direction, _) = fit_threshold(members, nonmembers);
    Ok(MiaReport {
        attack_advantage: (2.0 * (held_out - 0.5)).max(0.0) * 100.0,
        balanced_accuracy: held_out,
        threshold,
        direction,
        members: Summary::of(members),
        nonmembers: Summary::of(nonmembers),
    })
}

/// Max-softmax confidence of each sample under the current mask.
pub fn confidences(model: &Model, samples: &[Sample]) -> Result<Vec<f64>> {
    predict_logits(model, samples)?
        .into_iter()
        .map(|l| {
            let n = l.len();
            let p = softmax(&Tensor::new(vec![n], l)?, 0)?;
            Ok(p.values().iter().fold(0.0f64, |m, v| m.max(f64::from(*v))))
        })
        .collect()
}

/// Mean `KL(softmax(logits) ‖ uniform)` over `samples` under the current mask.
pub fn mean_kl_to_uniform(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySubset("no samples".into()));
    }
    let logits = predict_logits(model, samples)?;
    let total: f64 = logits
        .iter()
        .map(|l| {
            let k = l.len() as f64;
            let max = l.iter().fold(f64::NEG_INFINITY, |m, v| m.max(f64::from(*v)));
            let lse = max + l.iter().map(|v| (f64::from(*v) - max).exp()).sum::<f64>().ln();
            let kl: f64 = l
                .iter()
                .map(|v| {
                    let lp = f64::from(*v) - lse;
                    lp.exp() * lp
                })
                .sum::<f64>()
                + k.ln();
            kl.max(0.0)
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Confidence attack distinguishing training (`members`) from held-out
/// (`nonmembers`) samples of the `targets` classes.
pub fn mia_attack(
    model: &Model,
    members: &Dataset,
    nonmembers: &Dataset,
    targets: &BTreeSet<usize>,
    seed: u64,
) -> Result<MiaReport> {
    let m = members.restrict(targets);
    let n = nonmembers.restrict(targets);
    if m.is_empty() || n.is_empty() {
        return Err(Error::EmptySubset("no member or non-member samples of the target classes".into()));
    }
    mia_from_scores(&confidences(model, &m.samples)?, &confidences(model, &n.samples)?, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JailbreakReport {
    pub intact: f64,
    pub stripped: f64,
}

/// Class-averaged accuracy over all classes with LoRA intact and with every
/// adapter disabled. `model` itself is not modified.
pub fn jailbreak_eval(model: &Model, test: &Dataset) -> Result<JailbreakReport> {
    let all: BTreeSet<usize> = (0..model.num_classes()).collect();
    let y = labels(&test.samples);
    let intact = class_averaged_accuracy(&predict(model, &test.samples, Readout::FullHead)?, &y, &all)?;
    let stripped_model = Model {
        encoder: model.encoder.strip_lora(),
        pool: model.pool.clone(),
    };
    let stripped = class_averaged_accuracy(&predict(&stripped_model, &test.samples, Readout::FullHead)?, &y, &all)?;
    Ok(JailbreakReport { intact, stripped })
}
