use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use sddnet::config::RunConfig;
use sddnet::data::{scan_dataset, synthetic_dataset, write_split, DiskDataset};
use sddnet::gradcheck::{self, GradcheckOptions};
use sddnet::model::Ablation;
use sddnet::train::{evaluate, load_model, predict_file, train, EvalOptions, PredictOptions};

#[derive(Parser)]
#[command(name = "sddnet", version, about = "Shadow detection by feature disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a paired image/mask dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write shadow maps for an image or a directory of images.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset in the canonical layout.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root holding `{train,test}/{images,masks}`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Apply CRF refinement when scoring the test split after training.
    #[arg(long)]
    crf: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    crf: bool,
    /// Where to write the JSON report; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    crf: bool,
    /// Also write input, map and tinted input side by side.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    train: usize,
    #[arg(long, default_value_t = 8)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::MakeSynthetic(a) => run_synthetic(a),
    }
}

fn open_split(config: &RunConfig, root: &Path, split: &str) -> Result<DiskDataset> {
    let manifest = scan_dataset(root, split).with_context(|| format!("scanning {}", root.join(split).display()))?;
    manifest.write_index()?;
    info!("{} pairs in {}/{split}", manifest.len(), root.display());
    Ok(DiskDataset::open(manifest, config.data.image_size, config.data.mask_threshold)?)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = a.ablation {
        config.model.ablation = m;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(d) = a.data {
        config.data.root = Some(d);
    }
    if let Some(o) = a.out {
        config.output_dir = o;
    }
    config.eval.crf |= a.crf;
    config.validate()?;
    let Some(root) = config.data.root.clone() else {
        bail!("no dataset root: pass --data or set data.root in the config");
    };
    let train_set = open_split(&config, &root, &config.data.train_split)?;
    let out = train(&config, &train_set, Some(&config.output_dir))?;
    info!(
        "trained {} steps over {} epochs; checkpoints in {}",
        out.steps,
        out.epochs_completed,
        config.output_dir.display()
    );
    if root.join(&config.data.test_split).is_dir() {
        let test = open_split(&config, &root, &config.data.test_split)?;
        let report = evaluate(&out.model, &test, &config.data.test_split, &EvalOptions::from_config(&config))?;
        let path = config.output_dir.join("metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        info!("test BER {:.2} written to {}", report.ber, path.display());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (model, mut config) = load_model(&a.checkpoint)?;
    if let Some(t) = a.threshold {
        config.eval.threshold = t;
    }
    config.eval.crf |= a.crf;
    let root = a
        .data
        .or_else(|| config.data.root.clone())
        .context("no dataset root: pass --data")?;
    let split = a.split.unwrap_or_else(|| config.data.test_split.clone());
    let data = open_split(&config, &root, &split)?;
    let report = evaluate(&model, &data, &split, &EvalOptions::from_config(&config))?;
    let json = serde_json::to_string_pretty(&report)?;
    match a.out {
        Some(p) => {
            std::fs::write(&p, json)?;
            info!("BER {:.2}; report written to {}", report.ber, p.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let (model, config) = load_model(&a.checkpoint)?;
    let opts = PredictOptions {
        size: config.data.image_size,
        threshold: a.threshold.unwrap_or(config.eval.threshold),
        crf: (a.crf || config.eval.crf).then(|| config.crf.clone()),
        overlay: a.overlay,
    };
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| ["png", "jpg", "jpeg", "bmp"].contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    for p in &inputs {
        let files = predict_file(&model, p, &a.out, &opts)?;
        info!("{} -> {}", p.display(), files.map.display());
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let opts = GradcheckOptions {
        seed: a.seed,
        instances: a.instances,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let report = gradcheck::run(&opts)?;
    print!("{report}");
    if let Some(p) = a.out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    let failed: Vec<&str> = report.failures().iter().map(|t| t.term.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn run_synthetic(a: SyntheticArgs) -> Result<()> {
    let train = synthetic_dataset(a.train, a.size, a.seed);
    write_split(&a.out, "train", &train)?;
    if a.test > 0 {
        let test = synthetic_dataset(a.test, a.size, a.seed.wrapping_add(1));
        write_split(&a.out, "test", &test)?;
    }
    info!("wrote {} train and {} test pairs under {}", a.train, a.test, a.out.display());
    Ok(())
}
