//! Command-line front end: pretrain, train, evaluate, suite, traces, and
//! embedding export.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` file, the `AVATAR_OUT_DIR` environment variable (output
//! directory only), then command-line flags.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use avatar::data::export_directory_dataset;
use avatar::experiments::{
    emit_traces_from_dir, parse_config_with_overrides, run_suite, ExperimentSuite,
};
use avatar::models::ModelPair;
use avatar::trainer::{evaluate, export_embeddings, pretrain_source, train, RunConfig};

#[derive(Parser)]
#[command(
    name = "avatar",
    about = "Adversarial self-supervised domain adaptation on synthetic or user-supplied datasets",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source-only baseline and save its checkpoint.
    Pretrain(RunArgs),
    /// Run one full training run (pretraining included unless configured off).
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run every configured variant x seed combination and aggregate.
    Suite(SuiteArgs),
    /// Emit per-epoch trace CSVs (and optional SVG plots) from a suite directory.
    Traces(TracesArgs),
    /// Write both domains' embeddings with cluster assignments and weights.
    ExportEmbeddings(ExportArgs),
}

/// Keys shared by every command; each maps onto a suite-config key and
/// overrides the file value.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Suite configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (also settable via AVATAR_OUT_DIR).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Dataset kind: two-moons, gaussian, or directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    n_per_domain: Option<usize>,
    #[arg(long)]
    rotation_degrees: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    /// Target mean shift for the gaussian dataset, e.g. "2.5,2.5".
    #[arg(long)]
    shift: Option<String>,
    #[arg(long)]
    covariance_scale: Option<f64>,
    /// Manifest CSV for the directory dataset.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    majority_class: Option<usize>,
    #[arg(long)]
    minority_fraction: Option<f64>,
    #[arg(long)]
    source_downsample_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    task_lr_multiplier: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Hidden layer widths of the feature extractor, e.g. "128,128".
    #[arg(long)]
    extractor_hidden: Option<String>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Hidden layer widths of the classifier head (empty = linear head).
    #[arg(long)]
    classifier_hidden: Option<String>,
    /// Activation: tanh, relu, or identity.
    #[arg(long)]
    activation: Option<String>,
    /// Kernel: linear, cosine, or rbf:<gamma>.
    #[arg(long)]
    kernel: Option<String>,
    /// Auxiliary update form: divide or multiply.
    #[arg(long)]
    aux_form: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Global gradient-norm clip; "none" disables it.
    #[arg(long)]
    grad_clip: Option<String>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    export_cluster_state: bool,
    #[arg(long)]
    export_embeddings: bool,
    /// Comma-separated run seeds (suite) or the single run seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated variants: source, variant1, variant2, avatar.
    #[arg(long)]
    variants: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        if let Ok(dir) = std::env::var("AVATAR_OUT_DIR") {
            if !dir.is_empty() {
                out.push(("output-dir".into(), dir));
            }
        }
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push((key.into(), v));
            }
        };
        push("output-dir", self.output_dir.as_ref().map(|p| p.display().to_string()));
        push("dataset", self.dataset.clone());
        push("n-per-domain", self.n_per_domain.map(|v| v.to_string()));
        push("rotation-degrees", self.rotation_degrees.map(|v| v.to_string()));
        push("noise", self.noise.map(|v| v.to_string()));
        push("data-seed", self.data_seed.map(|v| v.to_string()));
        push("classes", self.classes.map(|v| v.to_string()));
        push("shift", self.shift.clone());
        push("covariance-scale", self.covariance_scale.map(|v| v.to_string()));
        push("manifest", self.manifest.as_ref().map(|p| p.display().to_string()));
        push("majority-class", self.majority_class.map(|v| v.to_string()));
        push("minority-fraction", self.minority_fraction.map(|v| v.to_string()));
        push(
            "source-downsample-rate",
            self.source_downsample_rate.map(|v| v.to_string()),
        );
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("warmup-epochs", self.warmup_epochs.map(|v| v.to_string()));
        push("batch-size", self.batch_size.map(|v| v.to_string()));
        push("base-lr", self.base_lr.map(|v| v.to_string()));
        push("task-lr-multiplier", self.task_lr_multiplier.map(|v| v.to_string()));
        push("momentum", self.momentum.map(|v| v.to_string()));
        push("weight-decay", self.weight_decay.map(|v| v.to_string()));
        push("pretrain-epochs", self.pretrain_epochs.map(|v| v.to_string()));
        push("extractor-hidden", self.extractor_hidden.clone());
        push("embedding-dim", self.embedding_dim.map(|v| v.to_string()));
        push("classifier-hidden", self.classifier_hidden.clone());
        push("activation", self.activation.clone());
        push("kernel", self.kernel.clone());
        push("aux-form", self.aux_form.clone());
        push("checkpoint-every", self.checkpoint_every.map(|v| v.to_string()));
        push("grad-clip", self.grad_clip.clone());
        push(
            "early-stop-patience",
            self.early_stop_patience.map(|v| v.to_string()),
        );
        push(
            "export-cluster-state",
            self.export_cluster_state.then(|| "true".into()),
        );
        push(
            "export-embeddings",
            self.export_embeddings.then(|| "true".into()),
        );
        push("seeds", self.seeds.clone());
        push("variants", self.variants.clone());
        drop(push);
        out
    }

    fn suite(&self) -> Result<ExperimentSuite> {
        parse_config_with_overrides(self.config.as_deref(), &self.overrides())
            .context("invalid configuration")
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Variant for this run (overrides the suite's first variant).
    #[arg(long)]
    variant: Option<String>,
    /// Seed for this run (overrides the suite's first seed).
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn run_config(&self) -> Result<(ExperimentSuite, RunConfig)> {
        let suite = self.config.suite()?;
        let mut config = suite.base.clone();
        config.variant = match &self.variant {
            Some(v) => v.parse()?,
            None => suite.variants[0],
        };
        config.seed = match self.seed {
            Some(s) => s,
            None => suite.seeds[0],
        };
        Ok((suite, config))
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to evaluate: target or source.
    #[arg(long, default_value = "target")]
    split: String,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TracesArgs {
    /// Directory holding the per-run outputs of a suite.
    #[arg(long)]
    suite_dir: PathBuf,
    /// Where trace files go (default: <suite-dir>/traces).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also render static SVG plots.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint file holding the trained models.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV path (default: <output-dir>/embeddings.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export the materialized dataset as manifest + feature files.
    #[arg(long)]
    export_dataset: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Suite(args) => cmd_suite(args),
        Command::Traces(args) => cmd_traces(args),
        Command::ExportEmbeddings(args) => cmd_export(args),
    }
}

fn cmd_pretrain(args: RunArgs) -> Result<()> {
    let (suite, config) = args.run_config()?;
    let data = config.dataset.materialize()?;
    let pair = pretrain_source(&config, &data)?;
    std::fs::create_dir_all(&suite.output_dir)?;
    let path = suite.output_dir.join("pretrained.json");
    pair.save(&path)?;
    let labels: Vec<Option<usize>> = data.source_labels.iter().map(|&y| Some(y)).collect();
    let eval = evaluate(&pair, &data.source_inputs.view(), &labels)?;
    println!(
        "pretrained {} epochs on {} source samples: source accuracy {:.4}",
        config.pretrain_epochs,
        data.source_count(),
        eval.accuracy
    );
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let (suite, mut config) = args.run_config()?;
    config.output_dir = Some(suite.output_dir.join(config.run_id()));
    let outcome = train(&config)?;
    let last = outcome
        .metrics
        .epochs
        .last()
        .context("run produced no epochs")?;
    println!(
        "run {} finished: {} epochs, target accuracy {:.4}",
        config.run_id(),
        last.epoch,
        last.target_accuracy
    );
    if let Some(tau) = last.mean_threshold {
        println!("mean confidence threshold {tau:.4}");
    }
    println!(
        "artifacts in {}",
        config.output_dir.as_ref().unwrap().display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let suite = args.config.suite()?;
    let pair = ModelPair::load(&args.checkpoint)
        .with_context(|| format!("cannot load {}", args.checkpoint.display()))?;
    let data = suite.base.dataset.materialize()?;
    let (inputs, labels): (_, Vec<Option<usize>>) = match args.split.as_str() {
        "target" => (data.target_inputs.view(), data.target_labels.clone()),
        "source" => (
            data.source_inputs.view(),
            data.source_labels.iter().map(|&y| Some(y)).collect(),
        ),
        other => bail!("unknown split `{other}` (valid: target, source)"),
    };
    let eval = evaluate(&pair, &inputs, &labels)?;
    println!(
        "{} split: accuracy {:.4} over {} labeled samples",
        args.split, eval.accuracy, eval.evaluated
    );
    for (c, acc) in eval.per_class_accuracy.iter().enumerate() {
        if acc.is_finite() {
            println!("  class {:>3} ({}): {:.4}", c, data.class_names[c], acc);
        }
    }
    Ok(())
}

fn cmd_suite(args: SuiteArgs) -> Result<()> {
    let suite = args.config.suite()?;
    let report = run_suite(&suite)?;
    println!("suite `{}`: {} runs", report.name, report.runs.len());
    println!("{:<10} {:>7} {:>12} {:>12}", "variant", "seeds", "mean acc", "std");
    for row in &report.rows {
        println!(
            "{:<10} {:>7} {:>12.4} {:>12.4}",
            row.variant.to_string(),
            row.seed_accuracies.len(),
            row.mean_accuracy,
            row.std_accuracy
        );
    }
    for run in report.runs.iter().filter(|r| r.error.is_some()) {
        println!("failed: {} ({})", run.run_id, run.error.as_deref().unwrap_or(""));
    }
    println!("report written to {}", suite.output_dir.join("report.csv").display());
    Ok(())
}

fn cmd_traces(args: TracesArgs) -> Result<()> {
    let out = args
        .out
        .unwrap_or_else(|| args.suite_dir.join("traces"));
    emit_traces_from_dir(&args.suite_dir, &out, args.plot)?;
    println!("traces written to {}", out.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let suite = args.config.suite()?;
    let pair = ModelPair::load(&args.checkpoint)
        .with_context(|| format!("cannot load {}", args.checkpoint.display()))?;
    let data = suite.base.dataset.materialize()?;
    std::fs::create_dir_all(&suite.output_dir)?;
    let out = args
        .out
        .unwrap_or_else(|| suite.output_dir.join("embeddings.csv"));
    export_embeddings(&pair, &data, &suite.base, &out)?;
    println!("embeddings written to {}", out.display());
    if let Some(dir) = &args.export_dataset {
        export_directory_dataset(&data, dir)?;
        println!("dataset exported to {}", dir.display());
    }
    Ok(())
}
