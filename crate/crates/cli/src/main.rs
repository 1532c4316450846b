use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use move_core::eval::{evaluate, Connectivity, EvalConfig, FBetaAveraging};
use move_core::inpaint::inpaint_compare;
use move_core::render::{inpaint_panels, save_panels, training_panels};
use move_core::synthdata::{
    dataset_checksum, gen_dataset, load_dataset, load_mask_png, manifest_path, save_gray_png, GeneratorParams,
};
use move_core::train::{
    load_mae, load_pipeline, predict_masks, run_move, run_pretrain, run_supervised, Checkpoint, FeatureCache,
    TrainConfig, MAE_KIND,
};
use move_core::Error;

#[derive(Parser)]
#[command(name = "move", version, about = "Unsupervised foreground segmentation by moving objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of scenes with ground-truth masks.
    GenData(GenData),
    /// Pretrain the masked autoencoder.
    PretrainMae(TrainArgs),
    /// Train the segmenter adversarially against a frozen autoencoder.
    Train(TrainArgs),
    /// Train the segmenter on ground-truth masks.
    TrainSupervised(ConfigArg),
    /// Score predicted masks against a dataset.
    Eval(EvalArgs),
    /// Compare sparse-encoder inpainting with soft masking.
    InpaintCompare(InpaintArgs),
    /// Write PNG panels of composites or inpaintings.
    Render(RenderArgs),
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Averaging {
    PerImage,
    MeanPr,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Neighbourhood {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predicted mask PNGs named like the dataset images.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    masks: Option<PathBuf>,
    /// Segmenter checkpoint used to predict the masks.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Autoencoder checkpoint, if not the one recorded in the segmenter's config.
    #[arg(long)]
    mae: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value_t = 0.09)]
    beta_sq: f64,
    #[arg(long, value_enum, default_value_t = Averaging::PerImage)]
    averaging: Averaging,
    #[arg(long, value_enum, default_value_t = Neighbourhood::Eight)]
    connectivity: Neighbourhood,
    /// Also write per-image metrics as CSV.
    #[arg(long)]
    per_image: bool,
}

#[derive(Args)]
struct InpaintArgs {
    /// Autoencoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0.8)]
    min_ratio: f64,
    #[arg(long, default_value_t = 0.95)]
    max_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum RenderMode {
    Training,
    Inpaint,
}

#[derive(Args)]
struct RenderArgs {
    /// Segmenter checkpoint (training mode) or autoencoder checkpoint (inpaint mode).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = RenderMode::Training)]
    mode: RenderMode,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long)]
    mae: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).map_err(|e| match e {
        Error::Config(msg) => usage(msg),
        other => other.into(),
    })
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn gen_data(a: GenData) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if a.size < 16 || a.size % 8 != 0 {
        return Err(usage("--size must be a multiple of 8 and at least 16"));
    }
    let m = gen_dataset(a.n, a.seed, a.size, &GeneratorParams::default(), &a.out)?;
    println!("manifest = {}", manifest_path(&a.out).display());
    println!("count = {}", m.count);
    println!("checksum = {}", dataset_checksum(&a.out)?);
    Ok(())
}

fn pretrain(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let s = run_pretrain(&cfg, a.resume.as_deref(), &mut progress)?;
    println!("checkpoint = {}", s.checkpoint.display());
    if let Some(v) = s.initial_val_mse {
        println!("initial_val_mse = {v:.6}");
    }
    println!("final_val_mse = {:.6}", s.final_val_mse);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let s = run_move(&cfg, a.resume.as_deref(), &mut progress)?;
    println!("iters = {}", s.iters);
    println!("val_iou = {:.4}", s.final_val.mean_iou);
    println!("best_val_iou = {:.4}", s.best_val_iou);
    println!("best_iter = {}", s.best_iter);
    println!("checkpoint = {}", s.best_checkpoint.display());
    Ok(())
}

fn train_supervised(a: ConfigArg) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let s = run_supervised(&cfg, &mut progress)?;
    println!("iters = {}", s.iters);
    println!("val_iou = {:.4}", s.final_val.mean_iou);
    println!("checkpoint = {}", s.checkpoint.display());
    Ok(())
}

fn entry_names(ds: &move_core::synthdata::Dataset) -> Vec<String> {
    ds.manifest
        .entries
        .iter()
        .map(|e| {
            Path::new(&e.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.image.clone())
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold <= 1.0) {
        return Err(usage("--threshold must lie in (0, 1]"));
    }
    let ds = load_dataset(&a.manifest, None)?;
    let names = entry_names(&ds);
    let preds = match (&a.masks, &a.checkpoint) {
        (Some(dir), _) => {
            let mut preds = Vec::with_capacity(ds.len());
            for (name, s) in names.iter().zip(&ds.samples) {
                let path = dir.join(format!("{name}.png"));
                let m = load_mask_png(&path)?;
                if m.shape() != s.mask.shape() {
                    bail!(
                        "{}: mask is {:?} but the image is {:?}",
                        path.display(),
                        m.shape(),
                        s.mask.shape()
                    );
                }
                preds.push(m);
            }
            preds
        }
        (None, Some(ckpt)) => {
            let (seg, mae, _) = load_pipeline(ckpt, a.mae.as_deref())?;
            let images: Vec<_> = ds.samples.iter().map(|s| s.image.clone()).collect();
            let preds = predict_masks(&seg, &FeatureCache::build(&mae, &images)?)?;
            let dir = a.out.join("masks");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, p) in names.iter().zip(&preds) {
                save_gray_png(p, &dir.join(format!("{name}.png")))?;
            }
            preds
        }
        (None, None) => return Err(usage("either --masks or --checkpoint is required")),
    };
    let cfg = EvalConfig {
        threshold: a.threshold,
        beta_sq: a.beta_sq,
        averaging: match a.averaging {
            Averaging::PerImage => FBetaAveraging::PerImage,
            Averaging::MeanPr => FBetaAveraging::MeanPrecisionRecall,
            Averaging::Pooled => FBetaAveraging::Pooled,
        },
        connectivity: match a.connectivity {
            Neighbourhood::Four => Connectivity::Four,
            Neighbourhood::Eight => Connectivity::Eight,
        },
        ..EvalConfig::default()
    };
    let gts: Vec<_> = ds.samples.iter().map(|s| s.mask.clone()).collect();
    let report = evaluate(&preds, &gts, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let text = report.to_text();
    fs::write(a.out.join("metrics.txt"), &text).context("writing metrics.txt")?;
    if a.per_image {
        fs::write(a.out.join("per_image.csv"), report.per_image_csv(&names)).context("writing per_image.csv")?;
    }
    print!("{text}");
    Ok(())
}

fn open_mae(path: &Path) -> Result<move_core::nn::TinyMae> {
    Ok(load_mae(&Checkpoint::load_kind(path, MAE_KIND)?)?)
}

fn inpaint(a: InpaintArgs) -> Result<()> {
    if !(0.0 < a.min_ratio && a.min_ratio <= a.max_ratio && a.max_ratio < 1.0) {
        return Err(usage("masking ratios must satisfy 0 < min <= max < 1"));
    }
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let mae = open_mae(&a.checkpoint)?;
    let ds = load_dataset(&a.manifest, Some(a.n))?;
    let images: Vec<_> = ds.samples.iter().map(|s| s.image.clone()).collect();
    let (report, _) = inpaint_compare(&mae, &images, (a.min_ratio, a.max_ratio), a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let text = report.to_text();
    fs::write(a.out.join("inpaint_report.txt"), &text).context("writing inpaint_report.txt")?;
    print!("{text}");
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let ds = load_dataset(&a.manifest, Some(a.n))?;
    let images: Vec<_> = ds.samples.iter().map(|s| s.image.clone()).collect();
    let paths = match a.mode {
        RenderMode::Training => {
            let (seg, mae, cfg) = load_pipeline(&a.checkpoint, a.mae.as_deref())?;
            let cache = FeatureCache::build(&mae, &images)?;
            let panels = training_panels(&mae, &seg, &cfg.moves, &cache, a.n, a.seed)?;
            save_panels(&panels, &a.out, "composite")?
        }
        RenderMode::Inpaint => {
            let mae = open_mae(&a.checkpoint)?;
            let (_, cases) = inpaint_compare(&mae, &images, (0.8, 0.95), a.seed)?;
            save_panels(&inpaint_panels(&cases, mae.cfg.patch)?, &a.out, "inpaint")?
        }
    };
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainMae(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::TrainSupervised(a) => train_supervised(a),
        Command::Eval(a) => eval(a),
        Command::InpaintCompare(a) => inpaint(a),
        Command::Render(a) => render(a),
        Command::DefaultConfig => {
            print!("{}", TrainConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
