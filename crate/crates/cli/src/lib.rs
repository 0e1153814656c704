//! Command-line driver: dataset splitting, training, evaluation, prediction
//! and feature-map export.

pub mod config;
pub mod grid;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use ranet::data::{
    load_labeled, preprocess_image, read_manifest, scan_dataset, stratified_split, write_manifest,
    Label, Manifest, Split, SplitRatios,
};
use ranet::metrics::{format_table, Report};
use ranet::model::Tap;
use ranet::optim::{evaluate, fit, EpochMetrics};
use ranet::{build_model, load_model, save_model};

pub use config::RunConfig;

/// Number of feature maps rendered per tap (an 8 x 8 grid).
pub const FEATURE_MAPS: usize = 64;
pub const MODEL_FILE: &str = "model.ranet";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(
    name = "ranet",
    version,
    about = "Residual attention network for chest X-ray classification"
)]
pub struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for splitting, initialization and augmentation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan <root>/COVID and <root>/Normal and write a stratified manifest.
    Split(SplitArgs),
    /// Train on the manifest's train split and evaluate on its test split.
    Train(TrainArgs),
    /// Evaluate a saved model on one split of a manifest.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
    /// Export stem activations as PNG tile grids.
    Featuremaps(FeatureMapArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// Manifest path [default: <output_dir>/manifest.csv].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<f64>,
    #[arg(long)]
    pub test: Option<f64>,
    #[arg(long)]
    pub validation: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub channel_scale: Option<f64>,
    #[arg(long)]
    pub rotation_degrees: Option<f64>,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeatureMapArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// With fewer than 64 channels, render all of them in the smallest
    /// square grid instead of failing.
    #[arg(long)]
    pub all_available: bool,
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Split(a) => {
            if let Some(root) = &a.data_root {
                cfg.data_root = Some(root.clone());
            }
            let r = &mut cfg.split;
            r.train = a.train.unwrap_or(r.train);
            r.test = a.test.unwrap_or(r.test);
            r.validation = a.validation.unwrap_or(r.validation);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            t.epochs = a.epochs.map_or(t.epochs, |v| v as usize);
            t.batch_size = a.batch_size.map_or(t.batch_size, |v| v as usize);
            t.initial_lr = a.initial_lr.unwrap_or(t.initial_lr);
            t.rotation_degrees = a.rotation_degrees.unwrap_or(t.rotation_degrees);
            t.repeats = a.repeats.map_or(t.repeats, |v| v as usize);
            let m = &mut cfg.model;
            m.input_size = a.input_size.unwrap_or(m.input_size);
            m.channel_scale = a.channel_scale.unwrap_or(m.channel_scale);
            if let Some(dir) = &a.out_dir {
                cfg.output_dir = dir.clone();
            }
        }
        Command::Eval(a) => {
            cfg.train.batch_size = a.batch_size.map_or(cfg.train.batch_size, |v| v as usize);
            if let Some(dir) = &a.out_dir {
                cfg.output_dir = dir.clone();
            }
        }
        Command::Featuremaps(a) => {
            if let Some(dir) = &a.out_dir {
                cfg.output_dir = dir.clone();
            }
        }
        Command::Predict(_) => {}
    }
    Ok(cfg)
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Split(a) => cmd_split(&cfg, a.out.as_deref(), out),
        Command::Train(a) => cmd_train(&cfg, &a.manifest, out),
        Command::Eval(a) => cmd_eval(&cfg, &a.model, &a.manifest, a.split, out),
        Command::Predict(a) => cmd_predict(&a.model, &a.image, out),
        Command::Featuremaps(a) => cmd_featuremaps(&cfg, &a.model, &a.image, a.all_available, out),
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
    read_manifest(file).with_context(|| format!("reading manifest {}", path.display()))
}

/// Per-class, per-split counts as a small text table.
pub fn split_table(manifest: &Manifest) -> String {
    let mut s = format!("{:<8}", "class");
    for split in Split::ALL {
        s += &format!("{:>12}", split.as_str());
    }
    s.push('\n');
    for label in Label::ALL {
        s += &format!("{:<8}", label.dir_name());
        for split in Split::ALL {
            s += &format!("{:>12}", manifest.count(label, split));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_split(
    cfg: &RunConfig,
    manifest_path: Option<&Path>,
    out: &mut impl Write,
) -> Result<()> {
    let root = cfg
        .data_root
        .as_deref()
        .context("no data root given (use --data-root or data_root in the config)")?;
    let ratios = SplitRatios::new(cfg.split.train, cfg.split.test, cfg.split.validation)?;
    let entries = scan_dataset(root).with_context(|| format!("scanning {}", root.display()))?;
    let manifest = stratified_split(&entries, ratios, cfg.seed)?;
    let path = manifest_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("manifest.csv"));
    let mut w = create_file(&path)?;
    write_manifest(&manifest, &mut w)?;
    w.flush()?;
    write!(out, "{}", split_table(&manifest))?;
    writeln!(out, "manifest written to {}", path.display())?;
    Ok(())
}

fn write_history(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = create_file(path)?;
    writeln!(w, "{}", EpochMetrics::CSV_HEADER)?;
    for row in history {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, manifest_path: &Path, out: &mut impl Write) -> Result<()> {
    cfg.model.validate()?;
    ensure!(cfg.train.repeats >= 1, "repeats must be >= 1");
    let manifest = load_manifest(manifest_path)?;
    let size = cfg.model.input_size;
    let train = load_labeled(manifest.split(Split::Train), size)?;
    let test = load_labeled(manifest.split(Split::Test), size)?;
    let validation = load_labeled(manifest.split(Split::Validation), size)?;
    ensure!(!train.is_empty(), "manifest has no training samples");

    for repeat in 0..cfg.train.repeats {
        let dir = if cfg.train.repeats == 1 {
            cfg.output_dir.clone()
        } else {
            cfg.output_dir.join(format!("repeat{repeat}"))
        };
        let tc = cfg.train_config(repeat);
        tc.validate()?;
        let mut model = build_model(&cfg.model, tc.seed)?;
        let history = fit(&mut model, &train, &test, &tc, |row| {
            eprintln!(
                "epoch {:>4} {:<5} loss {:.4} acc {:.4}",
                row.epoch, row.split, row.loss, row.accuracy
            );
        })?;
        write_history(&dir.join(HISTORY_FILE), &history)?;
        let model_path = dir.join(MODEL_FILE);
        save_model(&model, &model_path)?;

        let mut reports = Vec::new();
        for (split, samples) in [(Split::Test, &test), (Split::Validation, &validation)] {
            if samples.is_empty() {
                continue;
            }
            let eval = evaluate(&model, samples, tc.batch_size)?;
            let report = Report::new(
                split.as_str(),
                &eval.predicted,
                &eval.labels,
                &eval.positive_scores,
            )?;
            fs::write(dir.join(format!("metrics_{split}.csv")), report.to_csv())?;
            reports.push(report);
        }
        if cfg.train.repeats > 1 {
            writeln!(out, "repeat {repeat} (seed {})", tc.seed)?;
        }
        if reports.is_empty() {
            writeln!(out, "no test or validation samples; skipped evaluation")?;
        } else {
            write!(out, "{}", format_table(&reports))?;
        }
        writeln!(out, "model written to {}", model_path.display())?;
    }
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    model_path: &Path,
    manifest_path: &Path,
    split: Split,
    out: &mut impl Write,
) -> Result<()> {
    let model =
        load_model(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let manifest = load_manifest(manifest_path)?;
    let samples = load_labeled(manifest.split(split), model.config().input_size)?;
    if samples.is_empty() {
        bail!("split {split} of {} is empty", manifest_path.display());
    }
    let eval = evaluate(&model, &samples, cfg.train.batch_size)?;
    let report = Report::new(
        split.as_str(),
        &eval.predicted,
        &eval.labels,
        &eval.positive_scores,
    )?;
    let csv_path = cfg.output_dir.join(format!("metrics_{split}.csv"));
    let mut w = create_file(&csv_path)?;
    w.write_all(report.to_csv().as_bytes())?;
    w.flush()?;
    write!(out, "{}", format_table(std::slice::from_ref(&report)))?;
    writeln!(out, "metrics written to {}", csv_path.display())?;
    Ok(())
}

pub fn cmd_predict(model_path: &Path, image: &Path, out: &mut impl Write) -> Result<()> {
    let model =
        load_model(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let size = model.config().input_size;
    let x = preprocess_image(image, size)?.reshape(&[1, 3, size, size])?;
    let probs = model.predict(&x)?;
    let p = probs.data();
    let best = if p[Label::Normal.index()] > p[Label::Covid.index()] {
        Label::Normal
    } else {
        Label::Covid
    };
    writeln!(out, "prediction: {best}")?;
    for label in Label::ALL {
        writeln!(out, "{label}: {:.4}", p[label.index()])?;
    }
    Ok(())
}

pub fn cmd_featuremaps(
    cfg: &RunConfig,
    model_path: &Path,
    image: &Path,
    all_available: bool,
    out: &mut impl Write,
) -> Result<()> {
    let model =
        load_model(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let size = model.config().input_size;
    let x = preprocess_image(image, size)?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    for tap in [Tap::StemConv, Tap::StemPool] {
        let available = model.tap_channels(tap);
        let count = if available >= FEATURE_MAPS {
            FEATURE_MAPS
        } else if all_available {
            available
        } else {
            bail!(
                "{} has only {available} channels but {FEATURE_MAPS} maps were requested; \
                 use a model with stem_channels >= {FEATURE_MAPS} or pass --all-available",
                tap.label()
            );
        };
        let maps = model.extract_feature_maps(&x, tap, count)?;
        let img = grid::render_grid(&maps, grid::grid_side(count));
        let path = cfg
            .output_dir
            .join(format!("{}.png", tap.label().replace('.', "_")));
        img.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        writeln!(
            out,
            "{} maps from {} written to {}",
            count,
            tap.label(),
            path.display()
        )?;
    }
    Ok(())
}
