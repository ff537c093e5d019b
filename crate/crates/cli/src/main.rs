//! Command-line entry point: dataset synthesis, training, evaluation,
//! detection, aligned reconstruction and embedding export.

mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array4;
use std::path::{Path, PathBuf};

use config::ExperimentConfig;
use tvae::data::{
    self, ingest, load_dataset, load_multi_dataset, procedural_glyphs, save_dataset,
    save_multi_dataset, synthesize_multi_object, synthesize_shapes, synthesize_transformed_mnist,
    IngestFormat, IngestOptions, NormalizeMode, RotationDist, ShapesConfig, StackDtype,
};
use tvae::eval::{
    detect_objects, eval_clustering, eval_pose, eval_rotation_rmse, export_png_grid,
    extract_embeddings, reconstruct_aligned, MetricsReport,
};
use tvae::training::{fit, TemperatureSchedule};
use tvae::{TargetVae, TrainConfig};

/// Default output root when --out is omitted.
const OUT_ENV: &str = "TVAE_OUT";

#[derive(Parser)]
#[command(name = "tvae", version, about = "Translation and rotation group-equivariant VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset (transformed digits, multi-object scenes, shapes).
    MakeDataset(MakeDatasetArgs),
    /// Train a model on a synthesized dataset.
    Train(TrainArgs),
    /// Evaluate pose correlation, clustering and (optionally) rotation RMSE.
    Eval(EvalArgs),
    /// Detect objects in multi-object images with a trained model.
    Detect(DetectArgs),
    /// Export pose-canonicalized reconstructions as a PNG grid.
    Reconstruct(ReconstructArgs),
    /// Export MAP semantic embeddings as a stack file.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct MakeDatasetArgs {
    /// Dataset kind: mnist-u, mnist-n, mnist-multi, shapes.
    #[arg(long)]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (defaults to $TVAE_OUT/<variant>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// IDX image file for digit sources.
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file for digit sources.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Use N procedural glyphs per class instead of an IDX source
    /// (demo/test stand-in for real digits).
    #[arg(long)]
    glyph_source: Option<usize>,
    /// Existing transformed-dataset directory (source for mnist-multi).
    #[arg(long)]
    source: Option<PathBuf>,
    /// Canvas side in pixels (50 for digits, 150 for multi, 64 for shapes).
    #[arg(long)]
    canvas: Option<usize>,
    /// Objects per canvas (mnist-multi).
    #[arg(long, default_value_t = 3)]
    count: usize,
    /// Number of output images (mnist-multi) or a cap on digit images.
    #[arg(long)]
    n_images: Option<usize>,
    /// Shapes: rotation steps.
    #[arg(long, default_value_t = 40)]
    rotations: usize,
    /// Shapes: scale steps.
    #[arg(long, default_value_t = 6)]
    scales: usize,
    /// Shapes: translation steps per axis.
    #[arg(long, default_value_t = 3)]
    translations: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Transformed-dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Key-value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rotation group: p4, p8, p16.
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    z_dim: Option<usize>,
    /// Model variant: v1, v2, v3, p4, p8, p16 (overrides --group).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Compute device; only "cpu" is supported.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Gumbel temperature schedule start:end:fraction.
    #[arg(long)]
    temperature_schedule: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    hidden_units: Option<usize>,
    /// Cap the number of training images.
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint (.tvae).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cluster count (defaults to the number of distinct labels).
    #[arg(long)]
    clusters: Option<usize>,
    /// Skip clustering (pose metrics only).
    #[arg(long, default_value_t = false)]
    no_clustering: bool,
    /// Rotations per image for the rotation-RMSE protocol (0 = skip).
    #[arg(long, default_value_t = 0)]
    rmse_rotations: usize,
    /// Images used by the rotation-RMSE protocol.
    #[arg(long, default_value_t = 500)]
    rmse_images: usize,
    /// Evaluate on the first N images only.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Multi-object dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Attention threshold (default: 5x the uniform level).
    #[arg(long)]
    peak_threshold: Option<f64>,
    /// Non-maximum-suppression radius in pixels (default: half the training
    /// width).
    #[arg(long)]
    min_separation: Option<f64>,
    /// Detect on the first N images only.
    #[arg(long)]
    limit: Option<usize>,
    /// Also write per-image reconstruction montages.
    #[arg(long, default_value_t = false)]
    save_reconstructions: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reconstruct the first N images.
    #[arg(long, default_value_t = 64)]
    count: usize,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Output stack file (.tvs).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeDataset(args) => make_dataset(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Detect(args) => detect(args),
        Command::Reconstruct(args) => reconstruct(args),
        Command::Embed(args) => embed(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn resolve_out(requested: Option<PathBuf>, leaf: &str) -> Result<PathBuf> {
    let dir = match requested {
        Some(d) => d,
        None => match std::env::var_os(OUT_ENV) {
            Some(root) => Path::new(&root).join(leaf),
            None => bail!("no --out given and {OUT_ENV} is not set"),
        },
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_args_snapshot(dir: &Path) -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    std::fs::write(dir.join("command.txt"), args.join(" ") + "\n")?;
    Ok(())
}

fn load_digit_source(args: &MakeDatasetArgs) -> Result<(tvae::ImageBatch, Vec<u8>)> {
    if let Some(per_class) = args.glyph_source {
        if per_class == 0 {
            bail!("--glyph-source must be >= 1");
        }
        return Ok(procedural_glyphs(per_class, 10, args.seed));
    }
    let (Some(images), Some(labels)) = (&args.images, &args.labels) else {
        bail!(
            "digit synthesis needs --images/--labels (IDX files) or --glyph-source N; \
             MNIST IDX files are available from the usual mirrors"
        );
    };
    let batch = ingest(
        images,
        IngestFormat::Idx,
        IngestOptions {
            downsample_factor: 1,
            normalize: NormalizeMode::MinMax,
        },
    )?;
    let labels = data::read_idx_labels(labels)?;
    if labels.len() != batch.len() {
        bail!("{} images vs {} labels", batch.len(), labels.len());
    }
    Ok((batch, labels))
}

fn make_dataset(args: MakeDatasetArgs) -> Result<()> {
    let out = resolve_out(args.out.clone(), &format!("dataset-{}", args.variant))?;
    write_args_snapshot(&out)?;
    match args.variant.as_str() {
        "mnist-u" | "mnist-n" => {
            let (mut source, mut labels) = load_digit_source(&args)?;
            if let Some(n) = args.n_images {
                let n = n.min(source.len());
                source = tvae::ImageBatch::new(
                    source.data.slice(ndarray::s![..n, .., .., ..]).to_owned(),
                )?;
                labels.truncate(n);
            }
            let rotation = if args.variant == "mnist-u" {
                RotationDist::Uniform
            } else {
                RotationDist::Normal {
                    std: std::f64::consts::PI / 4.0,
                }
            };
            let canvas = args.canvas.unwrap_or(50);
            let ds = synthesize_transformed_mnist(
                &source,
                &labels,
                rotation,
                5.0,
                (canvas, canvas),
                args.seed,
            )?;
            save_dataset(&ds, &out)?;
            // validation pass: the artifacts must load back
            let back = load_dataset(&out)?;
            println!(
                "wrote {} images ({}x{}) to {}",
                back.len(),
                back.height(),
                back.width(),
                out.display()
            );
        }
        "mnist-multi" => {
            let Some(source_dir) = &args.source else {
                bail!("mnist-multi needs --source <transformed dataset dir>");
            };
            let source = load_dataset(source_dir)?;
            let canvas = args.canvas.unwrap_or(150);
            let n_images = args.n_images.unwrap_or(100);
            let ds = synthesize_multi_object(
                &source,
                (canvas, canvas),
                args.count,
                n_images,
                args.seed,
            )?;
            save_multi_dataset(&ds, &out)?;
            let back = load_multi_dataset(&out)?;
            println!(
                "wrote {} multi-object images to {}",
                back.len(),
                out.display()
            );
        }
        "shapes" => {
            let cfg = ShapesConfig {
                canvas: args.canvas.unwrap_or(64),
                n_rotations: args.rotations,
                n_scales: args.scales,
                n_translations: args.translations,
                ..ShapesConfig::default()
            };
            let ds = synthesize_shapes(&cfg)?;
            save_dataset(&ds, &out)?;
            let back = load_dataset(&out)?;
            println!("wrote {} shape images to {}", back.len(), out.display());
        }
        other => bail!("unknown dataset variant {other} (mnist-u, mnist-n, mnist-multi, shapes)"),
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    if args.device != "cpu" {
        bail!("--device {}: only cpu is supported", args.device);
    }
    let out = resolve_out(args.out.clone(), "train")?;
    write_args_snapshot(&out)?;

    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    // flags override the file
    if let Some(v) = args.seed {
        cfg.set("seed", &v.to_string())?;
    }
    if let Some(v) = &args.group {
        cfg.set("group", v)?;
    }
    if let Some(v) = &args.variant {
        cfg.set("variant", v)?;
    }
    if let Some(v) = args.z_dim {
        cfg.set("z_dim", &v.to_string())?;
    }
    if let Some(v) = args.epochs {
        cfg.set("max_epochs", &v.to_string())?;
    }
    if let Some(v) = &args.temperature_schedule {
        let sched = TemperatureSchedule::parse(v)?;
        cfg.set("temperature_start", &sched.start.to_string())?;
        cfg.set("temperature_end", &sched.end.to_string())?;
        cfg.set("temperature_fraction", &sched.anneal_fraction.to_string())?;
    }
    if let Some(v) = args.batch_size {
        cfg.set("batch_size", &v.to_string())?;
    }
    if let Some(v) = args.learning_rate {
        cfg.set("learning_rate", &v.to_string())?;
    }
    if let Some(v) = args.kernel_size {
        cfg.set("kernel_size", &v.to_string())?;
    }
    if let Some(v) = args.channels {
        cfg.set("channels", &v.to_string())?;
    }
    if let Some(v) = args.hidden_units {
        cfg.set("hidden_units", &v.to_string())?;
    }
    cfg.write_resolved(&out.join("config.resolved.txt"))?;

    let mut dataset = load_dataset(&args.dataset)?;
    if let Some(n) = args.subset {
        dataset = dataset.subset(n);
    }
    let model_config = cfg.model_config(dataset.height(), dataset.width())?;
    let prior = cfg.prior_settings()?;
    let train_config: TrainConfig = cfg.train_config()?;
    let mut model = TargetVae::new(model_config, prior, cfg.seed()?)?;

    println!(
        "training {} on {} images ({}x{})",
        cfg.variant()?,
        dataset.len(),
        dataset.height(),
        dataset.width()
    );
    let report = fit(&mut model, &dataset.images, &train_config, Some(&out))?;
    println!(
        "finished after {} epochs (best monitored loss {:.4}{})",
        report.epochs_run,
        report.best_monitored_loss,
        if report.early_stopped { ", early stop" } else { "" }
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let out = resolve_out(args.out.clone(), "eval")?;
    write_args_snapshot(&out)?;
    let model = TargetVae::load(&args.model)?;
    let mut dataset = load_dataset(&args.dataset)?;
    if let Some(n) = args.subset {
        dataset = dataset.subset(n);
    }

    let mut report = MetricsReport::new();
    report
        .manifest
        .insert("model".into(), args.model.display().to_string());
    report
        .manifest
        .insert("dataset".into(), args.dataset.display().to_string());
    report.manifest.insert("n_images".into(), dataset.len().to_string());

    let pose = eval_pose(&model, &dataset)?;
    println!(
        "translation pearson: ({}, {}); rotation circular corr: {}",
        pose.pearson_x, pose.pearson_y, pose.circular
    );
    report.translation_pearson = (pose.pearson_x, pose.pearson_y);
    report.rotation_circular_corr = pose.circular;

    if !args.no_clustering {
        let k = args.clusters.unwrap_or_else(|| {
            let mut labels: Vec<u8> = dataset.labels.clone();
            labels.sort_unstable();
            labels.dedup();
            labels.len()
        });
        let acc = eval_clustering(&model, &dataset, k)?;
        println!("clustering accuracy ({k} clusters): {acc:.2}%");
        report.clustering_accuracy = Some(acc);
    }

    if args.rmse_rotations > 0 {
        let subset = dataset.subset(args.rmse_images);
        let rmse = eval_rotation_rmse(&model, &subset, args.rmse_rotations, args.seed)?;
        println!("rotation RMSE average: {:.2} deg", rmse.average);
        report.rotation_rmse_per_class = rmse.per_class;
        report.rotation_rmse_average = Some(rmse.average);
    }

    report.write(&out)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let out = resolve_out(args.out.clone(), "detect")?;
    write_args_snapshot(&out)?;
    let model = TargetVae::load(&args.model)?;
    let ds = load_multi_dataset(&args.dataset)?;
    let n = args.limit.unwrap_or(ds.len()).min(ds.len());

    let mut table = String::from("image\tdetection\tx_px\ty_px\ttheta\tscore\n");
    for i in 0..n {
        let image = ds.images.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned();
        let detections = detect_objects(&model, &image, args.peak_threshold, args.min_separation)?;
        for (k, d) in detections.iter().enumerate() {
            table.push_str(&format!(
                "{i}\t{k}\t{:.2}\t{:.2}\t{:.4}\t{:.6}\n",
                d.t_pixels[0], d.t_pixels[1], d.theta, d.score
            ));
        }
        if args.save_reconstructions && !detections.is_empty() {
            let (h, w) = (image.shape()[2], image.shape()[3]);
            let mut recon = Array4::zeros((detections.len(), 1, h, w));
            for (k, d) in detections.iter().enumerate() {
                recon
                    .index_axis_mut(ndarray::Axis(0), k)
                    .assign(&d.reconstruction);
            }
            export_png_grid(&recon, &out.join(format!("detections_{i:04}.png")))?;
        }
    }
    std::fs::write(out.join("detections.tsv"), table)?;
    println!("detections written to {}", out.display());
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let out = resolve_out(args.out.clone(), "reconstruct")?;
    write_args_snapshot(&out)?;
    let model = TargetVae::load(&args.model)?;
    let dataset = load_dataset(&args.dataset)?.subset(args.count);
    let aligned = reconstruct_aligned(&model, &dataset.images)?;
    export_png_grid(&dataset.images, &out.join("inputs.png"))?;
    export_png_grid(&aligned, &out.join("aligned.png"))?;
    println!(
        "wrote {} aligned reconstructions to {}",
        aligned.shape()[0],
        out.display()
    );
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let out = match args.out {
        Some(p) => p,
        None => match std::env::var_os(OUT_ENV) {
            Some(root) => Path::new(&root).join("embeddings.tvs"),
            None => bail!("no --out given and {OUT_ENV} is not set"),
        },
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let model = TargetVae::load(&args.model)?;
    let dataset = load_dataset(&args.dataset)?;
    let z = extract_embeddings(&model, &dataset.images)?;
    data::write_stack(&out, &z.into_dyn(), StackDtype::F32)?;
    println!("embeddings written to {}", out.display());
    Ok(())
}
