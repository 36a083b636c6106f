use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use vfn::bench::{run_benchmark, AnnotationSet};
use vfn::dataset::{mine_pairs, PairManifest, DEFAULT_VAL_FRACTION};
use vfn::io::{load_image, render_heatmap, save_png, write_atomic};
use vfn::scorer::ParallelScorer;
use vfn::synth::{generate, SynthConfig};
use vfn::train::{curve_csv, train_manifest};
use vfn_core::checkpoint::Checkpoint;
use vfn_core::eval::ProtocolConfig;
use vfn_core::features::{BackboneKind, BackboneSpec, Pooling, SppConfig};
use vfn_core::geometry::{PanoConfig, SamplerConfig, MIN_IMAGE_SIDE};
use vfn_core::imaging::{AugmentConfig, ImageBuffer};
use vfn_core::ranker::{Architecture, CurvePoint, Ranker, TrainConfig, TrainMonitor};
use vfn_core::search::{best_crop, default_blur_sigma, heatmap, pano_scan};

/// Learning-to-rank view finding: mine crop pairs, train a composition
/// scorer and use it to crop, map and scan images.
#[derive(Debug, Parser, Serialize)]
#[command(name = "vfn", version)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Mine ranking pairs from a directory of well-composed images.
    Mine(MineArgs),
    /// Train a scorer on a pair manifest.
    Train(TrainArgs),
    /// Find the best crop of an image.
    Crop(CropArgs),
    /// Render a composition heatmap.
    Heatmap(HeatmapArgs),
    /// Recommend a view from a wide panorama.
    Pano(PanoArgs),
    /// Evaluate a scorer on annotated crops.
    Bench(BenchArgs),
    /// Emit the synthetic composition corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SppFlag {
    Off,
    Max,
    Avg,
}

fn parse_grid(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or("expected COLSxROWS, e.g. 5x5")?;
    let a: u32 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: u32 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a == 0 || b == 0 {
        return Err("grid sides must be positive".into());
    }
    Ok((a, b))
}

#[derive(Debug, Args, Serialize)]
struct ProtocolArgs {
    /// Window scales as fractions of the image sides.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6, 0.7, 0.8, 0.9])]
    scales: Vec<f64>,
    /// Window origin grid, COLSxROWS.
    #[arg(long, value_parser = parse_grid, default_value = "5x5")]
    grid: (u32, u32),
}

#[derive(Debug, Args, Serialize)]
struct MineArgs {
    /// Directory of PNG/JPEG source images.
    image_dir: PathBuf,
    /// Manifest file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6])]
    scales: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    num_square: u32,
    /// Crop jitter as a fraction of the image size.
    #[arg(long, default_value_t = 0.05)]
    perturb: f64,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    manifest: PathBuf,
    /// Output directory for the checkpoint, loss curve and config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SppFlag::Max)]
    spp: SppFlag,
    /// Channels of the last backbone layer.
    #[arg(long, default_value_t = 256)]
    channels: usize,
    /// Total iterations; the schedule is compressed proportionally.
    #[arg(long, default_value_t = 15_000)]
    iters: u64,
    /// Initial learning rate; the later rate keeps the default ratio.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Pairs per minibatch.
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train backbone weights too instead of keeping them at their seeded
    /// initialization.
    #[arg(long)]
    trainable_backbone: bool,
    /// Precomputed augmentation draws per training pair (fixed backbone).
    #[arg(long, default_value_t = 2)]
    aug_variants: usize,
    /// Disable flip/brightness/contrast augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Args, Serialize)]
struct CropArgs {
    image: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Debug, Args, Serialize)]
struct HeatmapArgs {
    image: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Gaussian blur sigma in pixels; defaults to 2% of the diagonal.
    #[arg(long)]
    blur: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct PanoArgs {
    image: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Window heights as fractions of the panorama height.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.9, 0.8, 0.7])]
    heights: Vec<f64>,
    /// Window aspect ratios (width / height).
    #[arg(long, value_delimiter = ',', default_values_t = [0.75, 1.0, 4.0 / 3.0, 2.0])]
    aspects: Vec<f64>,
    /// Lattice step as a fraction of the window size.
    #[arg(long, default_value_t = 0.1)]
    stride: f64,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    /// One or more annotation files, each reported as its own set.
    #[arg(required = true)]
    annotations: Vec<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, default_value_t = 0.75)]
    alpha: f64,
    /// Leave the ground truth out of the candidate set.
    #[arg(long)]
    no_gt: bool,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let threads = vfn::init_thread_pool()?;
    info!("using {threads} worker threads");
    match &cli.command {
        Command::Mine(a) => mine(a),
        Command::Train(a) => train_cmd(a),
        Command::Crop(a) => crop(a),
        Command::Heatmap(a) => heatmap_cmd(a),
        Command::Pano(a) => pano(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Ranker<f32>> {
    let bytes = std::fs::read(path).with_context(|| format!("{}", path.display()))?;
    let ckpt = Checkpoint::decode(&bytes).with_context(|| format!("{}", path.display()))?;
    Ok(ckpt.ranker())
}

fn load_checked(path: &Path) -> anyhow::Result<ImageBuffer> {
    let img = load_image(path)?;
    if img.width() < MIN_IMAGE_SIDE || img.height() < MIN_IMAGE_SIDE {
        bail!(
            "{}: image is {}x{}, sides must be at least {MIN_IMAGE_SIDE} px",
            path.display(),
            img.width(),
            img.height()
        );
    }
    Ok(img)
}

fn mine(a: &MineArgs) -> anyhow::Result<ExitCode> {
    let sampler = SamplerConfig {
        scales: a.scales.clone(),
        num_square: a.num_square,
        perturb_frac: a.perturb,
        seed: a.seed,
    };
    let manifest = mine_pairs(&a.image_dir, &sampler, a.val_frac, a.seed)?;
    manifest.write(&a.out)?;
    info!(
        "{} records from {} images ({} skipped): {} train / {} val",
        manifest.records.len(),
        manifest.header.images,
        manifest.header.skipped,
        manifest.header.counts.train,
        manifest.header.counts.val
    );
    Ok(ExitCode::SUCCESS)
}

struct CliMonitor {
    stop: Arc<AtomicBool>,
}

impl TrainMonitor for CliMonitor {
    fn validated(&mut self, p: &CurvePoint, improved: bool) {
        info!(
            "iter {}: train {:.4} val {:.4}{}",
            p.iteration,
            p.train_loss,
            p.val_loss,
            if improved { " (best)" } else { "" }
        );
    }

    fn should_stop(&mut self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<ExitCode> {
    let manifest = PairManifest::read(&a.manifest)?;
    let kind = if a.trainable_backbone {
        BackboneKind::Toy
    } else {
        BackboneKind::Fixed
    };
    let pooling = match a.spp {
        SppFlag::Off => Pooling::Flatten,
        SppFlag::Max => Pooling::Spp(SppConfig::max()),
        SppFlag::Avg => Pooling::Spp(SppConfig::avg()),
    };
    let arch = Architecture::new(BackboneSpec::toy(kind, a.channels), pooling)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        lr_initial: a.lr,
        lr_after: a.lr * defaults.lr_after / defaults.lr_initial,
        batch_pairs: a.batch,
        seed: a.seed,
        ..TrainConfig::scaled(a.iters)
    };
    let augment = if a.no_augment {
        AugmentConfig::identity()
    } else {
        AugmentConfig {
            seed: a.seed,
            ..AugmentConfig::default()
        }
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("{}", a.out.display()))?;
    write_json(
        &a.out.join("config.json"),
        &json!({
            "command": "train",
            "args": a,
            "train": {
                "lr_initial": cfg.lr_initial,
                "lr_after": cfg.lr_after,
                "lr_switch_iter": cfg.lr_switch_iter,
                "momentum": cfg.momentum,
                "batch_pairs": cfg.batch_pairs,
                "total_iters": cfg.total_iters,
                "validate_every": cfg.validate_every,
                "gap": cfg.gap,
                "seed": cfg.seed,
            },
            "augment": {
                "flip_prob": augment.flip_prob,
                "brightness_delta_max": augment.brightness_delta_max,
                "contrast_range": [augment.contrast_range.0, augment.contrast_range.1],
                "seed": augment.seed,
            },
            "feature_len": arch.feature_len()?,
        }),
    )?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::Relaxed))
            .context("installing the interrupt handler")?;
    }
    let init = Ranker::init(arch, a.seed)?;
    let mut monitor = CliMonitor { stop };
    let model_path = a.out.join("model.vfnc");
    match train_manifest(
        &manifest,
        init,
        &cfg,
        &augment,
        a.aug_variants,
        &mut monitor,
    )? {
        Ok(outcome) => {
            write_atomic(
                &model_path,
                &Checkpoint::from_snapshot(&outcome.best).encode(),
            )?;
            write_atomic(
                &a.out.join("loss.csv"),
                curve_csv(&outcome.curve).as_bytes(),
            )?;
            info!(
                "best validation loss {:.4} at iteration {}",
                outcome.best.val_loss, outcome.best.iteration
            );
            if outcome.interrupted {
                warn!("interrupted; wrote the best validated checkpoint");
                return Ok(ExitCode::from(130));
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            if let Some(good) = &failure.last_good {
                write_atomic(&model_path, &Checkpoint::from_snapshot(good).encode())?;
                warn!(
                    "kept the last validated checkpoint from iteration {}",
                    good.iteration
                );
            }
            bail!(
                "training failed at iteration {}: {}",
                failure.iteration,
                failure.error
            )
        }
    }
}

fn protocol_json(p: &ProtocolArgs) -> serde_json::Value {
    json!({ "scales": p.scales, "grid": [p.grid.0, p.grid.1] })
}

fn crop(a: &CropArgs) -> anyhow::Result<ExitCode> {
    let img = load_checked(&a.image)?;
    let ranker = load_model(&a.model)?;
    let best = best_crop(
        &img,
        &ParallelScorer(&ranker),
        &a.protocol.scales,
        a.protocol.grid,
        &[],
    )?;
    let r = best.rect;
    save_png(&img.extract_crop(r)?, &a.out.join("crop.png"))?;
    write_json(
        &a.out.join("crop.json"),
        &json!({
            "image": a.image,
            "width": img.width(),
            "height": img.height(),
            "crop": [r.x, r.y, r.w, r.h],
            "score": best.score,
            "config": { "model": a.model, "protocol": protocol_json(&a.protocol) },
        }),
    )?;
    println!("{} {} {} {} {}", r.x, r.y, r.w, r.h, best.score);
    Ok(ExitCode::SUCCESS)
}

fn heatmap_cmd(a: &HeatmapArgs) -> anyhow::Result<ExitCode> {
    let img = load_checked(&a.image)?;
    let ranker = load_model(&a.model)?;
    let sigma = a.blur.unwrap_or_else(|| default_blur_sigma(img.dims()));
    let map = heatmap(
        &img,
        &ParallelScorer(&ranker),
        &a.protocol.scales,
        a.protocol.grid,
        sigma,
    )?;
    save_png(
        &render_heatmap(&img, &map.normalized(), 0.6),
        &a.out.join("heatmap.png"),
    )?;
    write_json(
        &a.out.join("heatmap.json"),
        &json!({
            "image": a.image,
            "config": { "model": a.model, "protocol": protocol_json(&a.protocol), "blur_sigma": sigma },
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn pano(a: &PanoArgs) -> anyhow::Result<ExitCode> {
    let img = load_checked(&a.image)?;
    let ranker = load_model(&a.model)?;
    let cfg = PanoConfig {
        height_fracs: a.heights.clone(),
        aspects: a.aspects.clone(),
        stride_frac: a.stride,
    };
    let result = pano_scan(&img, &ParallelScorer(&ranker), &cfg)?;
    let r = result.best.rect;
    save_png(&img.extract_crop(r)?, &a.out.join("pano.png"))?;
    write_json(
        &a.out.join("pano.json"),
        &json!({
            "image": a.image,
            "crop": [r.x, r.y, r.w, r.h],
            "score": result.best.score,
            "candidates": result.candidates,
            "config": { "model": a.model, "heights": a.heights, "aspects": a.aspects, "stride": a.stride },
        }),
    )?;
    println!(
        "{} {} {} {} {} {}",
        r.x, r.y, r.w, r.h, result.best.score, result.candidates
    );
    Ok(ExitCode::SUCCESS)
}

fn bench(a: &BenchArgs) -> anyhow::Result<ExitCode> {
    let ranker = load_model(&a.model)?;
    let sets = a
        .annotations
        .iter()
        .map(|p| AnnotationSet::read(p))
        .collect::<vfn::Result<Vec<_>>>()?;
    let protocol = ProtocolConfig {
        scales: a.protocol.scales.clone(),
        grid: a.protocol.grid,
        alpha: a.alpha,
        include_ground_truth: !a.no_gt,
    };
    let report = run_benchmark(&sets, &ParallelScorer(&ranker), &protocol)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("{}", a.out.display()))?;
    write_atomic(&a.out.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&a.out.join("report.txt"), report.to_table().as_bytes())?;
    write_json(
        &a.out.join("config.json"),
        &json!({ "command": "bench", "args": a }),
    )?;
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

fn synth(a: &SynthArgs) -> anyhow::Result<ExitCode> {
    let cfg = SynthConfig {
        n: a.n,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let corpus = generate(&cfg, &a.out)?;
    info!(
        "wrote {} bench scenes to {}",
        corpus.scenes.len(),
        corpus.bench_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
