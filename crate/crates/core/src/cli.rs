//! Command-line front end.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{export_idx, generate_synthetic, load_idx, Dataset, Splits, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    self, jailbreak_eval, mia_attack, scenario_sweep, sequential_inference, shuffled_stream, ForgetScenario,
    Readout, RemovalEvent, SweepConfig,
};
use crate::model::Model;
use crate::numerics::optimizer_steps_total;
use crate::plot;
use crate::training::{train, Ablation, TrainConfig};

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub sweep: SweepConfig,
    pub stream_batch: usize,
    pub window: usize,
    pub schedule: Vec<RemovalEvent>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sweep: SweepConfig::default(),
            stream_batch: 12,
            window: 5,
            schedule: vec![
                RemovalEvent {
                    before_batch: 10,
                    class: 0,
                },
                RemovalEvent {
                    before_batch: 20,
                    class: 1,
                },
            ],
        }
    }
}

/// Everything needed to replay a run. The top-level `seed` drives data
/// generation, initialization, sampling and evaluation draws.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Propagates the top-level seed and checks every nested invariant.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.eval.sweep.seed = self.seed;
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = self.seed;
            spec.num_classes = self.encoder.num_classes;
            spec.image_size = self.encoder.image_size;
            spec.validate()?;
        }
        if self.encoder.channels != 1 && matches!(self.data, DataSource::Synthetic(_)) {
            return Err(Error::Config("synthetic data is single-channel".into()));
        }
        self.encoder.validate()?;
        self.train.validate(self.encoder.num_classes)?;
        Ok(self)
    }

    pub fn splits(&self) -> Result<Splits> {
        match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                let k = self.encoder.num_classes;
                let widen = |d: Dataset| Dataset::new(d.samples, k);
                Ok(Splits {
                    train: widen(train)?,
                    val: Dataset::new(Vec::new(), k)?,
                    test: widen(test)?,
                })
            }
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "pfgt", version, about = "Prompt-gated classifier with retraining-free class forgetting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AblationArg {
    Full,
    KlShuffle,
    KlOnly,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Cross-entropy only (no unlearning term).
        #[arg(long)]
        full_knowledge: bool,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Accuracy on retained and removed classes of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Argmax over active classes only.
        #[arg(long)]
        renormalized: bool,
    },
    /// Remove (or purge) class prompts and re-save the checkpoint.
    Forget {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<usize>,
        /// Zero the stored blocks; the removal becomes permanent.
        #[arg(long)]
        purge: bool,
        /// Destination (defaults to overwriting the input).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Acc_r/Acc_f averaged over forget sets of size 1, ⌈K/2⌉ and K−1.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        renormalized: bool,
    },
    /// Accuracy trace over a test stream with scheduled removals.
    Sequential {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Events as `batch:class`, comma separated.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<String>>,
    },
    /// Confidence membership-inference attack on removed classes.
    Mia {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target classes (default: all but the last).
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
        /// Attack with the target prompts left in place.
        #[arg(long)]
        keep_prompts: bool,
    },
    /// Accuracy with and without the LoRA adapters.
    Jailbreak {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and sweep the three ablation configurations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Render a sequential trace CSV as an SVG chart.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Use per-batch instead of windowed accuracy.
        #[arg(long)]
        raw: bool,
    },
    /// Write the configured dataset's splits as IDX files.
    ExportIdx {
        #[command(flatten)]
        common: Common,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if cfg.output_dir.as_os_str().is_empty() {
        cfg.output_dir = PathBuf::from("runs");
    }
    cfg.resolve()
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)?)?;
    Ok(cfg.output_dir.clone())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_schedule(items: &[String]) -> Result<Vec<RemovalEvent>> {
    items
        .iter()
        .map(|s| {
            let (b, c) = s
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("schedule entry {s:?} is not batch:class")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad schedule entry {s:?}")))
            };
            Ok(RemovalEvent {
                before_batch: parse(b)?,
                class: parse(c)?,
            })
        })
        .collect()
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Model> {
    let (model, _) = checkpoint::load(path)?;
    if model.num_classes() != cfg.encoder.num_classes || model.config().image_size != cfg.encoder.image_size {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured encoder",
            path.display()
        )));
    }
    Ok(model)
}

/// The f values of a sweep: 1, ⌈K/2⌉ and K−1, deduplicated.
pub fn sweep_counts(k: usize) -> Vec<usize> {
    let set: BTreeSet<usize> = [1, k.div_ceil(2), k - 1].into_iter().filter(|f| *f >= 1 && *f < k).collect();
    set.into_iter().collect()
}

#[derive(Serialize)]
struct EvalRow {
    removed: String,
    acc_all: f64,
    acc_r: Option<f64>,
    acc_f: Option<f64>,
}

#[derive(Serialize)]
struct AblationRow {
    seed: u64,
    config: String,
    forget_count: usize,
    acc_r: f64,
    acc_f: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            epochs,
            lambda,
            full_knowledge,
            ablation,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            cfg.train.full_knowledge |= full_knowledge;
            if let Some(a) = ablation {
                cfg.train.ablation = match a {
                    AblationArg::Full => Ablation::FULL,
                    AblationArg::KlShuffle => Ablation::KL_SHUFFLE,
                    AblationArg::KlOnly => Ablation::KL_ONLY,
                };
            }
            let cfg = cfg.resolve()?;
            let dir = prepare_dir(&cfg)?;
            let splits = cfg.splits()?;
            let (model, log) = train::<f32>(&cfg.encoder, &splits.train, &cfg.train)?;
            log.write_csv(create(&dir.join("loss.csv"))?)?;
            // The output location is not part of the run, so it stays out of the digest.
            let mut meta = serde_json::to_value(&cfg)?;
            if let Some(m) = meta.as_object_mut() {
                m.remove("output_dir");
            }
            let bytes = checkpoint::to_bytes(&model, meta)?;
            fs::write(dir.join("model.pfgt"), &bytes)?;
            let digest = sha256_hex(&bytes);
            fs::write(dir.join("model.sha256"), format!("{digest}  model.pfgt\n"))?;
            println!("{digest}");
        }
        Command::Eval {
            common,
            checkpoint: path,
            renormalized,
        } => {
            let cfg = run_config(&common)?;
            let model = load_checkpoint(&path, &cfg)?;
            let dir = prepare_dir(&cfg)?;
            let test = cfg.splits()?.test;
            let readout = if renormalized { Readout::Renormalized } else { Readout::FullHead };
            let k = model.num_classes();
            let scenario = ForgetScenario::new(k, model.pool.removed_classes())?;
            let all = ForgetScenario::new(k, [])?;
            let row = EvalRow {
                removed: scenario.label(),
                acc_all: evaluation::retain_accuracy(&model, &test, &all, readout)?,
                acc_r: (!scenario.retain.is_empty())
                    .then(|| evaluation::retain_accuracy(&model, &test, &scenario, readout))
                    .transpose()?,
                acc_f: (!scenario.forget.is_empty())
                    .then(|| evaluation::forget_accuracy(&model, &test, &scenario, readout))
                    .transpose()?,
            };
            let mut w = csv::Writer::from_writer(create(&dir.join("eval.csv"))?);
            w.serialize(&row)?;
            w.flush()?;
            println!(
                "removed [{}]  acc_all {:.2}  acc_r {}  acc_f {}",
                row.removed,
                row.acc_all,
                row.acc_r.map_or("-".into(), |v| format!("{v:.2}")),
                row.acc_f.map_or("-".into(), |v| format!("{v:.2}")),
            );
        }
        Command::Forget {
            checkpoint: path,
            classes,
            purge,
            output,
        } => {
            let steps = optimizer_steps_total();
            let bytes = fs::read(&path)?;
            let (mut model, meta) = checkpoint::from_bytes(&bytes)?;
            for c in classes {
                if purge {
                    model.pool.purge_prompt(c)?;
                } else {
                    model.pool.remove_prompt(c)?;
                }
            }
            assert_eq!(optimizer_steps_total(), steps, "forgetting must not train");
            checkpoint::save(&model, output.as_ref().unwrap_or(&path), meta)?;
            println!("active classes: {:?}", model.pool.active_classes());
        }
        Command::Sweep {
            common,
            checkpoint: path,
            renormalized,
        } => {
            let mut cfg = run_config(&common)?;
            if renormalized {
                cfg.eval.sweep.readout = Readout::Renormalized;
            }
            let mut model = load_checkpoint(&path, &cfg)?;
            let dir = prepare_dir(&cfg)?;
            let test = cfg.splits()?.test;
            let reports = sweep_counts(model.num_classes())
                .into_iter()
                .map(|f| scenario_sweep(&mut model, &test, f, &cfg.eval.sweep))
                .collect::<Result<Vec<_>>>()?;
            evaluation::write_sweep_csv(&reports, create(&dir.join("sweep.csv"))?)?;
            evaluation::write_combinations_csv(&reports, create(&dir.join("sweep_combinations.csv"))?)?;
            for r in &reports {
                println!(
                    "f={}  acc_r {:.2} ± {:.2}  acc_f {:.2} ± {:.2}  ({} sets)",
                    r.forget_count, r.acc_r.mean, r.acc_r.std, r.acc_f.mean, r.acc_f.std, r.n_combinations
                );
            }
        }
        Command::Sequential {
            common,
            checkpoint: path,
            schedule,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(s) = schedule {
                cfg.eval.schedule = parse_schedule(&s)?;
            }
            let mut model = load_checkpoint(&path, &cfg)?;
            let dir = prepare_dir(&cfg)?;
            let stream = shuffled_stream(&cfg.splits()?.test.samples, cfg.seed);
            let rows = sequential_inference(
                &mut model,
                &stream,
                cfg.eval.stream_batch,
                &cfg.eval.schedule,
                cfg.eval.window,
            )?;
            evaluation::write_trace_csv(&rows, create(&dir.join("trace.csv"))?)?;
            println!("{} trace rows written", rows.len());
        }
        Command::Mia {
            common,
            checkpoint: path,
            classes,
            keep_prompts,
        } => {
            let cfg = run_config(&common)?;
            let mut model = load_checkpoint(&path, &cfg)?;
            let dir = prepare_dir(&cfg)?;
            let k = model.num_classes();
            let targets: BTreeSet<usize> = classes.map_or_else(|| (0..k - 1).collect(), |c| c.into_iter().collect());
            if !keep_prompts {
                for c in &targets {
                    model.pool.remove_prompt(*c)?;
                }
            }
            let splits = cfg.splits()?;
            let report = mia_attack(&model, &splits.train, &splits.test, &targets, cfg.seed)?;
            let text = format!(
                "attack_advantage={}\nbalanced_accuracy={}\nthreshold={}\ndirection={:?}\nmembers={}\nnonmembers={}\nmember_conf_mean={}\nnonmember_conf_mean={}\n",
                report.attack_advantage,
                report.balanced_accuracy,
                report.threshold,
                report.direction,
                report.members.n,
                report.nonmembers.n,
                report.members.mean,
                report.nonmembers.mean,
            );
            fs::write(dir.join("mia.txt"), &text)?;
            let mut w = csv::Writer::from_writer(create(&dir.join("mia.csv"))?);
            w.serialize(MiaCsv::from(&report))?;
            w.flush()?;
            print!("{text}");
        }
        Command::Jailbreak {
            common,
            checkpoint: path,
        } => {
            let cfg = run_config(&common)?;
            let mut model = load_checkpoint(&path, &cfg)?;
            let dir = prepare_dir(&cfg)?;
            model.pool.restore_all();
            let report = jailbreak_eval(&model, &cfg.splits()?.test)?;
            let mut w = csv::Writer::from_writer(create(&dir.join("jailbreak.csv"))?);
            w.serialize(report)?;
            w.flush()?;
            println!("intact {:.2}  stripped {:.2}", report.intact, report.stripped);
        }
        Command::Ablate { common, seeds } => {
            let base = run_config(&common)?;
            let dir = prepare_dir(&base)?;
            let mut rows = Vec::new();
            for seed in seeds {
                for ablation in [Ablation::KL_ONLY, Ablation::KL_SHUFFLE, Ablation::FULL] {
                    let cfg = RunConfig {
                        seed,
                        train: TrainConfig {
                            ablation,
                            full_knowledge: false,
                            ..base.train.clone()
                        },
                        ..base.clone()
                    }
                    .resolve()?;
                    info!("ablation {} seed {seed}", ablation.label());
                    let splits = cfg.splits()?;
                    let (mut model, _) = train::<f32>(&cfg.encoder, &splits.train, &cfg.train)?;
                    for f in sweep_counts(model.num_classes()) {
                        let r = scenario_sweep(&mut model, &splits.test, f, &cfg.eval.sweep)?;
                        rows.push(AblationRow {
                            seed,
                            config: ablation.label(),
                            forget_count: f,
                            acc_r: r.acc_r.mean,
                            acc_f: r.acc_f.mean,
                        });
                    }
                }
            }
            let mut w = csv::Writer::from_writer(create(&dir.join("ablation.csv"))?);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            for label in [Ablation::KL_ONLY, Ablation::KL_SHUFFLE, Ablation::FULL].map(|a| a.label()) {
                let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.config == label).collect();
                let n = sel.len() as f64;
                println!(
                    "{label:<20} mean acc_r {:.2}  mean acc_f {:.2}",
                    sel.iter().map(|r| r.acc_r).sum::<f64>() / n,
                    sel.iter().map(|r| r.acc_f).sum::<f64>() / n
                );
            }
        }
        Command::Plot { trace, output, raw } => {
            let rows = evaluation::read_trace_csv(fs::File::open(&trace)?)?;
            fs::write(&output, plot::trace_svg(&rows, !raw))?;
            println!("wrote {}", output.display());
        }
        Command::ExportIdx { common } => {
            let cfg = run_config(&common)?;
            let dir = prepare_dir(&cfg)?;
            let splits = cfg.splits()?;
            for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
                if ds.is_empty() {
                    continue;
                }
                export_idx(
                    ds,
                    dir.join(format!("{name}-images.idx3-ubyte")),
                    dir.join(format!("{name}-labels.idx1-ubyte")),
                )?;
            }
            println!("wrote IDX files to {}", dir.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MiaCsv {
    attack_advantage: f64,
    balanced_accuracy: f64,
    threshold: f64,
    direction: String,
    members: usize,
    nonmembers: usize,
    member_conf_mean: f64,
    nonmember_conf_mean: f64,
}

impl From<&evaluation::MiaReport> for MiaCsv {
    fn from(r: &evaluation::MiaReport) -> Self {
        Self {
            attack_advantage: r.attack_advantage,
            balanced_accuracy: r.balanced_accuracy,
            threshold: r.threshold,
            direction: format!("{:?}", r.direction).to_lowercase(),
            members: r.members.n,
            nonmembers: r.nonmembers.n,
            member_conf_mean: r.members.mean,
            nonmember_conf_mean: r.nonmembers.mean,
        }
    }
}
