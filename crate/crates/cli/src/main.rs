//! Command-line surface for the distillation engine: pretraining,
//! extraction/distillation, evaluation, analysis, and the SVM oracle suite.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use distill_core::analysis::{average_sets, export_images, low_freq_energy_ratio, Layout};
use distill_core::data::{
    load_synthetic, parse_cifar10_raw, parse_idx, save_synthetic, toy_read_text, LabeledSet,
    NormStats,
};
use distill_core::dm::AugPolicy;
use distill_core::engine::{
    dm_distill, extract_dsv_from, practical_distill, schedule_alpha, schedule_gamma,
    subsample_pipc, DistillConfig, InitMode, Pipc,
};
use distill_core::eval::{
    mean_std, test_accuracy, train_classifier, train_on_synthetic, MetricsRecord, SamConfig,
};
use distill_core::kkt::LossWeights;
use distill_core::nn::{load_model, save_model, ModelSpec};
use distill_core::svm::run_oracle_suite;
use distill_core::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "distill",
    about = "Dataset distillation with model-knowledge (DKKT) and data-knowledge (DM) losses",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Idx,
    Cifar10,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dm,
    Dsv,
    Practical,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Mlp,
    Convnet,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Noise,
    Real,
}

#[derive(Args)]
struct DataArgs {
    /// Input format: idx image/label pair, cifar10 binary batches, or toy text
    #[arg(long, value_enum)]
    format: DataFormat,
    /// Image file (idx), comma-separated batch files (cifar10), or text file (toy)
    #[arg(long)]
    images: String,
    /// Label file (idx only)
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl DataArgs {
    /// Parse to raw (unstandardized) values.
    fn load(&self) -> Result<LabeledSet> {
        match self.format {
            DataFormat::Idx => {
                let labels = self
                    .labels
                    .as_ref()
                    .ok_or_else(|| anyhow!("--labels is required for idx data"))?;
                Ok(parse_idx(Path::new(&self.images), labels)?)
            }
            DataFormat::Cifar10 => {
                let paths: Vec<PathBuf> = self.images.split(',').map(PathBuf::from).collect();
                Ok(parse_cifar10_raw(&paths)?)
            }
            DataFormat::Toy => Ok(toy_read_text(Path::new(&self.images))?),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on a full dataset and write its checkpoint
    /// (standardization constants included).
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "mlp")]
        arch: ArchArg,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.2)]
        lr: f64,
        /// SAM perturbation radius; 0 is plain SGD
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        /// Batch size; 0 selects the default policy
        #[arg(long, default_value_t = 0)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract deep support vectors from a pretrained model alone.
    ExtractDsv {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Synthesize a distilled set by dm, dsv, or the joint practical loss.
    Distill {
        #[arg(long, value_enum)]
        method: Method,
        /// Pretrained checkpoint (required for dsv/practical; optional for
        /// dm, where it only supplies normalization constants)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Accessible real data (required for dm/practical and for
        /// --init real)
        #[command(flatten)]
        data: OptionalDataArgs,
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a fresh model on a synthetic set and append a metrics record.
    Eval {
        #[arg(long)]
        set: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.001)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restore the published protocol (5000 epochs)
        #[arg(long)]
        paper_protocol: bool,
        /// Method tag recorded in the metrics line
        #[arg(long, default_value = "unknown")]
        method: String,
        /// pipc tag recorded in the metrics line
        #[arg(long, default_value = "unknown")]
        pipc: String,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Pixelwise average of two synthetic sets.
    Average {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        montage: Option<PathBuf>,
    },
    /// Frequency analysis of a synthetic set: per-class low-frequency energy
    /// ratios as line-delimited records.
    Fft {
        #[arg(long)]
        set: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        radius: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        montage: Option<PathBuf>,
    },
    /// Aggregate a metrics file into mean +/- std rows.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Run the SVM oracle validation suite; exits nonzero on any failure.
    Oracle {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct OptionalDataArgs {
    #[arg(long, value_enum)]
    format: Option<DataFormat>,
    #[arg(long)]
    images: Option<String>,
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl OptionalDataArgs {
    fn load(&self) -> Result<Option<LabeledSet>> {
        match (&self.format, &self.images) {
            (Some(format), Some(images)) => {
                let args = DataArgs {
                    format: *format,
                    images: images.clone(),
                    labels: self.labels.clone(),
                };
                Ok(Some(args.load()?))
            }
            (None, None) => Ok(None),
            _ => bail!("--format and --images must be given together"),
        }
    }
}

/// Synthesis knobs shared by `extract-dsv` and `distill`.
#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    ipc: usize,
    /// Accessible images per class: a count or "all"
    #[arg(long, default_value = "all")]
    pipc: String,
    /// Stationarity weight; defaults to the published pipc schedule
    #[arg(long)]
    alpha: Option<f64>,
    /// Augmented-DKKT weight
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// DM weight; defaults to the published ipc schedule
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pixel_lr: f64,
    /// Multiplier learning rate; defaults to pixel-lr / 10
    #[arg(long)]
    lambda_lr: Option<f64>,
    #[arg(long, value_enum, default_value = "noise")]
    init: InitArg,
    /// Zero the primal term on already-correct candidates
    #[arg(long)]
    gated: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated augmentation ops (flip,translate,scale,rotate,color,cutout)
    #[arg(long, default_value = "")]
    policy: String,
    #[arg(long, default_value_t = 16)]
    embed_width: usize,
    #[arg(long, default_value_t = 2)]
    embed_depth: usize,
    /// Real images per class embedded per step (default: all of T')
    #[arg(long)]
    real_batch: Option<usize>,
}

impl SynthArgs {
    fn parse_pipc(&self) -> Result<Pipc> {
        if self.pipc == "all" {
            return Ok(Pipc::All);
        }
        self.pipc
            .parse::<usize>()
            .map(Pipc::Count)
            .map_err(|_| anyhow!("--pipc must be a count or \"all\", got {:?}", self.pipc))
    }

    fn to_config(&self) -> Result<DistillConfig> {
        let pipc = self.parse_pipc()?;
        let weights = LossWeights {
            alpha: self.alpha.unwrap_or_else(|| schedule_alpha(pipc)),
            beta: self.beta,
            gamma: self.gamma.unwrap_or_else(|| schedule_gamma(self.ipc)),
        };
        let policy: AugPolicy = self.policy.parse()?;
        let mut config = DistillConfig::new(self.ipc, pipc, weights, self.seed);
        config.steps = self.steps;
        config.pixel_lr = self.pixel_lr;
        config.lambda_lr = self.lambda_lr.unwrap_or(self.pixel_lr * 0.1);
        config.init = match self.init {
            InitArg::Noise => InitMode::Noise,
            InitArg::Real => InitMode::Real,
        };
        config.gated = self.gated;
        config.policy = policy;
        config.embed_width = self.embed_width;
        config.embed_depth = self.embed_depth;
        config.real_batch_per_class = self.real_batch;
        Ok(config)
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { data, arch, width, depth, epochs, lr, rho, batch, seed, out } => {
            let raw = data.load()?;
            let stats = NormStats::compute(&raw);
            let standardized = stats.apply(&raw);
            let (c, h, w) = standardized.image_dims();
            let spec = match arch {
                ArchArg::Mlp => ModelSpec::mlp((c, h, w), standardized.classes, width, depth),
                ArchArg::Convnet => {
                    ModelSpec::convnet((c, h, w), standardized.classes, width, depth)
                }
            };
            let started = Instant::now();
            let params = train_classifier(
                &spec,
                &standardized,
                &SamConfig { lr, rho, epochs, batch, seed },
            )?;
            let train_acc = test_accuracy(&spec, &params, &standardized)?;
            save_model(&spec, &params, Some(&stats), &out)?;
            println!(
                "pretrained {} on {} samples: train accuracy {train_acc:.2}% in {} ms -> {}",
                match arch {
                    ArchArg::Mlp => "mlp",
                    ArchArg::Convnet => "convnet",
                },
                standardized.len(),
                started.elapsed().as_millis(),
                out.display()
            );
            Ok(())
        }
        Command::ExtractDsv { checkpoint, synth, out, manifest } => {
            let (spec, theta, _) = load_model(&checkpoint)?;
            let config = synth.to_config()?;
            let (set, mut man) = extract_dsv_from(&spec, &theta, None, &config)?;
            save_synthetic(&set, &out)?;
            man.artifact = Some(out.display().to_string());
            if let Some(path) = manifest {
                man.write_jsonl(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            let last = man.trace.last().expect("steps >= 1");
            println!(
                "extracted {} candidates: primal {:.6} stationarity {:.6} -> {}",
                set.len(),
                last.primal,
                last.stat,
                out.display()
            );
            Ok(())
        }
        Command::Distill { method, checkpoint, data, synth, out, manifest } => {
            let config = synth.to_config()?;
            let model = checkpoint.map(|p| load_model(&p)).transpose()?;
            let raw = data.load()?;

            // standardize accessible data with the checkpoint constants when
            // available so synthesis and evaluation share one input space
            let accessible = raw.map(|raw| {
                let stats = model
                    .as_ref()
                    .and_then(|(_, _, n)| n.clone())
                    .unwrap_or_else(|| NormStats::compute(&raw));
                stats.apply(&raw)
            });
            let tprime = accessible
                .as_ref()
                .map(|full| subsample_pipc(full, config.pipc, config.seed))
                .transpose()?;

            let (set, mut man) = match method {
                Method::Dm => {
                    let tprime =
                        tprime.ok_or_else(|| anyhow!("dm distillation needs --images data"))?;
                    dm_distill(&tprime, &config)?
                }
                Method::Dsv => {
                    let (spec, theta, _) = model
                        .as_ref()
                        .ok_or_else(|| anyhow!("dsv extraction needs --checkpoint"))?;
                    extract_dsv_from(spec, theta, tprime.as_ref(), &config)?
                }
                Method::Practical => {
                    let (spec, theta, _) = model
                        .as_ref()
                        .ok_or_else(|| anyhow!("practical distillation needs --checkpoint"))?;
                    let tprime = tprime
                        .ok_or_else(|| anyhow!("practical distillation needs --images data"))?;
                    practical_distill(spec, theta, &tprime, &config)?
                }
            };
            save_synthetic(&set, &out)?;
            man.artifact = Some(out.display().to_string());
            if let Some(path) = manifest {
                man.write_jsonl(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            let last = man.trace.last().expect("steps >= 1");
            println!(
                "{} distilled {} images (ipc {}): total loss {:.6} -> {}",
                man.method,
                set.len(),
                config.ipc,
                last.total,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            set,
            checkpoint,
            data,
            epochs,
            lr,
            rho,
            batch,
            seed,
            paper_protocol,
            method,
            pipc,
            metrics,
        } => {
            let synth = load_synthetic(&set)?;
            let (spec, _, norm) = load_model(&checkpoint)?;
            let raw = data.load()?;
            let test = match norm {
                Some(stats) => stats.apply(&raw),
                None => raw,
            };
            let epochs = if paper_protocol { 5000 } else { epochs };
            let started = Instant::now();
            let trained =
                train_on_synthetic(&spec, &synth, &SamConfig { lr, rho, epochs, batch, seed })?;
            let accuracy = test_accuracy(&spec, &trained, &test)?;
            let record = MetricsRecord {
                ipc: synth.len() / spec.classes.max(1),
                pipc,
                method,
                seed,
                accuracy,
                epochs,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            record.append_jsonl(&metrics).with_context(|| format!("writing {}", metrics.display()))?;
            println!("accuracy {accuracy:.2}% ({} epochs, seed {seed})", epochs);
            Ok(())
        }
        Command::Average { a, b, out, montage } => {
            let sa = load_synthetic(&a)?;
            let sb = load_synthetic(&b)?;
            let avg = average_sets(&sa, &sb)?;
            save_synthetic(&avg, &out)?;
            if let Some(path) = montage {
                export_montage(&avg, &path)?;
            }
            println!("averaged {} images -> {}", avg.len(), out.display());
            Ok(())
        }
        Command::Fft { set, radius, out, montage } => {
            let synth = load_synthetic(&set)?;
            let (c, h, w) = synth.image_dims();
            let mut lines = String::new();
            let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for i in 0..synth.len() {
                let mut per_image = 0.0;
                for ch in 0..c {
                    let base = (i * c + ch) * h * w;
                    let chan = Tensor::from_vec(
                        vec![h, w],
                        synth.images.data()[base..base + h * w].to_vec(),
                    )?;
                    per_image += low_freq_energy_ratio(&chan, radius)?;
                }
                by_class.entry(synth.labels[i]).or_default().push(per_image / c as f64);
            }
            for (class, ratios) in &by_class {
                let (mean, _) = mean_std(ratios);
                let record = serde_json::json!({
                    "set": set.display().to_string(),
                    "class": class,
                    format!("low_freq_ratio@{radius}"): mean,
                });
                lines.push_str(&record.to_string());
                lines.push('\n');
                println!("class {class}: low-frequency energy ratio {mean:.4} (radius {radius})");
            }
            std::fs::write(&out, lines).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = montage {
                export_montage(&synth, &path)?;
            }
            Ok(())
        }
        Command::Report { metrics } => {
            let records = MetricsRecord::read_jsonl(&metrics)
                .with_context(|| format!("reading {}", metrics.display()))?;
            if records.is_empty() {
                bail!("no records in {}", metrics.display());
            }
            let mut groups: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
            for r in &records {
                groups
                    .entry((r.method.clone(), r.ipc, r.pipc.clone()))
                    .or_default()
                    .push(r.accuracy);
            }
            println!("{:<12} {:>4} {:>6} {:>8} {:>16}", "method", "ipc", "pipc", "seeds", "accuracy");
            for ((method, ipc, pipc), accs) in &groups {
                let (mean, std) = mean_std(accs);
                println!(
                    "{method:<12} {ipc:>4} {pipc:>6} {:>8} {mean:>9.2} +/- {std:.2}",
                    accs.len()
                );
            }
            Ok(())
        }
        Command::Oracle { instances, seed } => {
            let out = run_oracle_suite(instances, seed)?;
            println!(
                "symmetric fixture: max deviation {:.3e} (w=(1,0), b=0, alpha=0.5)",
                out.fixture_error
            );
            println!(
                "{} random separable instances: worst KKT residual {:.3e}",
                out.instances, out.max_random_residual
            );
            println!(
                "dsv extraction: final stationarity {:.6}, min train margin {:.4}",
                out.final_stationarity, out.report.min_train_margin
            );
            for row in &out.report.rows {
                println!(
                    "  dsv {}: nearest-sv distance {:.4}, functional margin {:.4}",
                    row.index, row.nearest_sv_distance, row.functional_margin
                );
            }
            let ok = out.fixture_error <= 1e-6
                && out.max_random_residual <= 1e-6
                && out.final_stationarity < 0.05
                && out.worst_margin_gap <= 0.15;
            if !ok {
                bail!(
                    "oracle bounds violated: fixture {:.3e}, residual {:.3e}, stationarity {:.4}, margin gap {:.4}",
                    out.fixture_error,
                    out.max_random_residual,
                    out.final_stationarity,
                    out.worst_margin_gap
                );
            }
            println!("oracle suite passed");
            Ok(())
        }
    }
}

fn export_montage(set: &distill_core::kkt::SyntheticSet, path: &Path) -> Result<()> {
    let n = set.len();
    let classes = set.labels.iter().copied().max().map_or(1, |m| m + 1);
    let cols = classes.min(n);
    let rows = n.div_ceil(cols);
    export_images(set, path, Layout { rows, cols })?;
    println!("montage {}x{} -> {}", rows, cols, path.display());
    Ok(())
}
