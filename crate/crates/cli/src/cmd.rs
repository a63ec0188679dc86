//! The eight subcommands: argument surfaces and their implementations.
//!
//! Every command validates its inputs, writes a run manifest into the output
//! directory, and only then produces artifacts, so a failed run never leaves
//! outputs without a record of what produced them.

use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use texsyn_core::analysis::{self, DetectionConfig, PatchRect};
use texsyn_core::checkpoint::{load_checkpoint, save_checkpoint};
use texsyn_core::eval::{self, ClassifierConfig, StatisticSample};
use texsyn_core::morphology::{self, VoxelGrid, FUNCTIONAL_NAMES};
use texsyn_core::networks::ModelBundle;
use texsyn_core::params::ParamSet;
use texsyn_core::tensor::Tensor;
use texsyn_core::train::{self, Ablation, Trainer};
use texsyn_core::{io, rng, CoreError};

use crate::config::FileConfig;
use crate::manifest::{voxel_files, RunManifest};

/// Splits sample `i` out of a batched `[N, ...]` tensor.
fn nth(batch: &Tensor, i: usize) -> Tensor {
    let rest: Vec<usize> = batch.shape()[1..].to_vec();
    let chunk: usize = rest.iter().product();
    Tensor::new(rest, batch.data()[i * chunk..(i + 1) * chunk].to_vec())
}

/// Rebuilds the model held by a checkpoint.
fn load_trainer(path: &Path) -> Result<Trainer, CoreError> {
    let (trainer, _, _) = load_checkpoint(path)?.into_trainer()?;
    Ok(trainer)
}

/// `[H, W]` or `[1, H, W]` tensor as nested JSON-ready rows.
fn rows_2d(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (0..h).map(|y| t.data()[y * w..(y + 1) * w].to_vec()).collect()
}

/// Train a model from a TOML configuration.
#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the manifest, checkpoints, and metrics.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured iteration count.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Resume from a checkpoint; its model, optimizer, and RNG state win.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Objective variant: `full`, or `psgan` (prior-only, encoder frozen).
    #[arg(long)]
    pub ablation: Option<String>,
    /// Assert the configured spatial rank (2 or 3); guards scripted runs.
    #[arg(long)]
    pub ndim: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CoreError> {
    let file = FileConfig::load(&args.config)?;
    if let Some(nd) = args.ndim {
        if nd != file.latent.ndim {
            return Err(CoreError::config(format!(
                "--ndim {nd} does not match the configured rank {}",
                file.latent.ndim
            )));
        }
    }
    let ablation = match args.ablation.as_deref() {
        None => None,
        Some("full") => Some(Ablation::Full),
        Some("psgan") => Some(Ablation::Psgan),
        Some(other) => {
            return Err(CoreError::config(format!(
                "unknown ablation '{other}' (expected full or psgan)"
            )))
        }
    };

    let (mut trainer, mut data_rng, mut latent_rng) = if let Some(ck) = &args.resume {
        if args.seed.is_some() {
            return Err(CoreError::config(
                "--seed cannot change on resume; the checkpoint owns the RNG state",
            ));
        }
        let (mut trainer, data_rng, latent_rng) = load_checkpoint(ck)?.into_trainer()?;
        if let Some(n) = args.iterations {
            trainer.config.iterations = n;
        }
        if let Some(a) = ablation {
            trainer.config.ablation = a;
        }
        (trainer, data_rng, latent_rng)
    } else {
        let mut config = file.training.clone();
        if let Some(s) = args.seed {
            config.seed = s;
        }
        if let Some(n) = args.iterations {
            config.iterations = n;
        }
        if let Some(a) = ablation {
            config.ablation = a;
        }
        let arch = file.build_arch()?;
        let mut params = ParamSet::new();
        let mut init_rng = rng::stream_rng(config.seed, rng::STREAM_INIT);
        let bundle = ModelBundle::build(&mut params, &mut init_rng, &file.latent, &arch)?;
        let seed = config.seed;
        (
            Trainer::new(bundle, params, config),
            rng::stream_rng(seed, rng::STREAM_DATA),
            rng::stream_rng(seed, rng::STREAM_LATENT),
        )
    };

    let dataset = file.build_dataset(trainer.config.seed)?;
    FileConfig::check_compatible(&dataset, &trainer.bundle.latent, &trainer.bundle.arch)?;

    let mut manifest = RunManifest::new(
        "train",
        trainer.config.seed,
        json!({
            "file": &file,
            "resolved_training": &trainer.config,
            "resume": &args.resume,
            "start_iteration": trainer.iteration,
        }),
    );
    manifest.add_input(&args.config)?;
    if let Some(ck) = &args.resume {
        manifest.add_input(ck)?;
    }
    if let Some(m) = &file.data.manifest {
        manifest.add_input(m)?;
    }
    manifest.add_outputs(&["checkpoint_final.txck", "metrics.csv"]);
    manifest.write(&args.out)?;

    let mut records = Vec::new();
    let out = args.out.clone();
    train::train_loop(
        &mut trainer,
        &dataset,
        &mut data_rng,
        &mut latent_rng,
        &mut records,
        |t, dr, lr| {
            let name = if t.iteration >= t.config.iterations {
                "checkpoint_final.txck".to_string()
            } else {
                format!("checkpoint_{:06}.txck", t.iteration)
            };
            save_checkpoint(&out.join(name), t, dr, lr)
        },
    )?;
    train::write_metrics_csv(&args.out.join("metrics.csv"), &records)?;
    if let Some(last) = records.last() {
        println!(
            "{} steps done (now at iteration {}): l_dx {:.4} l_dz {:.4} l_dxx {:.4} l_g {:.4} l_e {:.4}",
            records.len(),
            trainer.iteration,
            last.l_dx,
            last.l_dz,
            last.l_dxx,
            last.l_g,
            last.l_e
        );
    }
    println!("checkpoint: {}", args.out.join("checkpoint_final.txck").display());
    Ok(())
}

/// Draw unconditional samples from a checkpoint.
#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Latent grid extent override; larger extents give larger outputs.
    #[arg(long)]
    pub extent: Option<usize>,
}

pub fn cmd_sample(args: &SampleArgs) -> Result<(), CoreError> {
    let mut trainer = load_trainer(&args.checkpoint)?;
    let mut spec = trainer.bundle.latent.clone();
    if let Some(ext) = args.extent {
        if ext == 0 {
            return Err(CoreError::config("extent must be at least 1"));
        }
        spec.spatial = ext;
    }
    if args.n == 0 {
        return Err(CoreError::config("sample count must be at least 1"));
    }

    let suffix = if spec.ndim == 2 { "png" } else { "vx" };
    let names: Vec<String> = (0..args.n).map(|i| format!("sample_{i:03}.{suffix}")).collect();
    let mut manifest = RunManifest::new(
        "sample",
        args.seed,
        json!({
            "checkpoint": &args.checkpoint,
            "n": args.n,
            "extent": args.extent,
            "latent": &spec,
        }),
    );
    manifest.add_input(&args.checkpoint)?;
    let mut outputs: Vec<&str> = names.iter().map(String::as_str).collect();
    if spec.ndim == 2 {
        outputs.push("grid.png");
    }
    manifest.add_outputs(&outputs);
    manifest.write(&args.out)?;

    let mut rng = rng::stream_rng(args.seed, rng::STREAM_LATENT);
    let batch =
        analysis::sample_prior(&trainer.bundle, &mut trainer.params, &spec, args.n, &mut rng)?;
    let mut tiles = Vec::with_capacity(args.n);
    for (i, name) in names.iter().enumerate() {
        let sample = nth(&batch, i);
        let path = args.out.join(name);
        if spec.ndim == 2 {
            io::write_image(&sample, &path)?;
            tiles.push(sample);
        } else {
            let dims = sample.shape()[1..].to_vec();
            io::write_voxels(&io::signed_to_binary(&sample).reshape(dims), &path)?;
        }
    }
    if spec.ndim == 2 {
        let cols = (args.n as f64).sqrt().ceil() as usize;
        let grid = io::assemble_grid(&tiles, cols.max(1), 2, -1.0);
        io::write_image(&grid, &args.out.join("grid.png"))?;
    }
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(())
}

/// Encode an input and synthesize its reproduction.
#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PNG) or volume (.vx) matching the model rank.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decode the posterior mean instead of sampling around it.
    #[arg(long)]
    pub sigma_zero: bool,
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<(), CoreError> {
    let mut trainer = load_trainer(&args.checkpoint)?;
    let ndim = trainer.bundle.latent.ndim;
    let (input, out_name) = if ndim == 2 {
        let img = io::read_image(&args.input)?;
        let mut shape = vec![1];
        shape.extend_from_slice(img.shape());
        (img.reshape(shape), "reconstruction.png")
    } else {
        let vol = io::binary_to_signed(&io::read_voxels(&args.input)?);
        let mut shape = vec![1, 1];
        shape.extend_from_slice(vol.shape());
        (vol.reshape(shape), "reconstruction.vx")
    };

    let mut manifest = RunManifest::new(
        "reconstruct",
        args.seed,
        json!({
            "checkpoint": &args.checkpoint,
            "input": &args.input,
            "sigma_zero": args.sigma_zero,
        }),
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.input)?;
    manifest.add_outputs(&[out_name]);
    manifest.write(&args.out)?;

    let mut rng = rng::stream_rng(args.seed, rng::STREAM_LATENT);
    let rec = analysis::reconstruct(
        &trainer.bundle,
        &mut trainer.params,
        &input,
        args.sigma_zero,
        &mut rng,
    )?;
    let sample = nth(&rec, 0);
    let path = args.out.join(out_name);
    if ndim == 2 {
        io::write_image(&sample, &path)?;
    } else {
        let dims = sample.shape()[1..].to_vec();
        io::write_voxels(&io::signed_to_binary(&sample).reshape(dims), &path)?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Tile decodings of a swept 2-D global code.
#[derive(Args)]
pub struct ManifoldArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = -2.25, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 2.25, allow_negative_numbers = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 0.225)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_manifold(args: &ManifoldArgs) -> Result<(), CoreError> {
    let mut trainer = load_trainer(&args.checkpoint)?;
    let mut manifest = RunManifest::new(
        "manifold",
        args.seed,
        json!({
            "checkpoint": &args.checkpoint,
            "lo": args.lo,
            "hi": args.hi,
            "step": args.step,
        }),
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_outputs(&["manifold.png"]);
    manifest.write(&args.out)?;

    let mut rng = rng::stream_rng(args.seed, rng::STREAM_LATENT);
    let grid = analysis::manifold_grid(
        &trainer.bundle,
        &mut trainer.params,
        args.lo,
        args.hi,
        args.step,
        &mut rng,
    )?;
    io::write_image(&grid.image, &args.out.join("manifold.png"))?;
    println!(
        "wrote a {count}x{count} manifold sheet to {}",
        args.out.join("manifold.png").display(),
        count = grid.values.len()
    );
    Ok(())
}

fn parse_patch(s: &str) -> Result<PatchRect, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected x,y,w,h, got '{s}'"));
    }
    let mut v = [0usize; 4];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|e| format!("bad patch number '{part}': {e}"))?;
    }
    Ok(PatchRect { x: v[0], y: v[1], w: v[2], h: v[3] })
}

/// Localize where an image matches a reference patch.
#[derive(Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image to scan.
    #[arg(long)]
    pub image: PathBuf,
    /// Reference rectangle `x,y,w,h` in pixels.
    #[arg(long, value_parser = parse_patch)]
    pub patch: PatchRect,
    /// Similarity sharpness.
    #[arg(long, default_value_t = 3.0)]
    pub alpha: f64,
    /// Average-pooling kernel over the embedding grid.
    #[arg(long, default_value_t = 5)]
    pub pool_kernel: usize,
    /// Keep the heatmap at embedding-grid resolution.
    #[arg(long)]
    pub no_upsample: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_detect(args: &DetectArgs) -> Result<(), CoreError> {
    let mut trainer = load_trainer(&args.checkpoint)?;
    let image = io::read_image(&args.image)?;
    let mut manifest = RunManifest::new(
        "detect",
        0,
        json!({
            "checkpoint": &args.checkpoint,
            "image": &args.image,
            "patch": {"x": args.patch.x, "y": args.patch.y, "w": args.patch.w, "h": args.patch.h},
            "alpha": args.alpha,
            "pool_kernel": args.pool_kernel,
            "upsample": !args.no_upsample,
        }),
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.image)?;
    manifest.add_outputs(&["heatmap.png", "detection.json"]);
    manifest.write(&args.out)?;

    let config = DetectionConfig {
        alpha: args.alpha,
        pool_kernel: args.pool_kernel,
        upsample: !args.no_upsample,
    };
    let result =
        analysis::detect(&trainer.bundle, &mut trainer.params, &image, &args.patch, &config)?;
    io::write_image(&result.heatmap.map(|v| 2.0 * v - 1.0), &args.out.join("heatmap.png"))?;
    let report = json!({
        "alpha": args.alpha,
        "grid": rows_2d(&result.grid),
        "heatmap": rows_2d(&result.heatmap),
    });
    std::fs::write(
        args.out.join("detection.json"),
        serde_json::to_string(&report).map_err(|e| CoreError::data(e.to_string()))?,
    )?;
    println!("wrote heatmap.png and detection.json to {}", args.out.display());
    Ok(())
}

/// Resynthesize an image from its spatial texture embedding.
#[derive(Args)]
pub struct TexturemapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Guide image whose local embeddings drive the synthesis.
    #[arg(long)]
    pub guide: PathBuf,
    /// Average-pooling kernel over the embedding grid.
    #[arg(long, default_value_t = 5)]
    pub pool_kernel: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_texturemap(args: &TexturemapArgs) -> Result<(), CoreError> {
    let mut trainer = load_trainer(&args.checkpoint)?;
    let guide = io::read_image(&args.guide)?;
    let mut manifest = RunManifest::new(
        "texturemap",
        args.seed,
        json!({
            "checkpoint": &args.checkpoint,
            "guide": &args.guide,
            "pool_kernel": args.pool_kernel,
        }),
    );
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.guide)?;
    manifest.add_outputs(&["texture_map.png"]);
    manifest.write(&args.out)?;

    let mut rng = rng::stream_rng(args.seed, rng::STREAM_LATENT);
    let map = analysis::texture_map(
        &trainer.bundle,
        &mut trainer.params,
        &guide,
        args.pool_kernel,
        &mut rng,
    )?;
    io::write_image(&map, &args.out.join("texture_map.png"))?;
    println!("wrote {}", args.out.join("texture_map.png").display());
    Ok(())
}

/// Per-sample mean and standard deviation over a `[N, ...]` batch.
fn image_stats(batch: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = batch.shape()[0];
    let chunk = batch.numel() / n;
    let mut means = Vec::with_capacity(n);
    let mut stds = Vec::with_capacity(n);
    for i in 0..n {
        let slice = &batch.data()[i * chunk..(i + 1) * chunk];
        let mean = slice.iter().sum::<f64>() / chunk as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chunk as f64;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Score a model: inception scores, coverage, statistics, memory.
#[derive(Args)]
pub struct EvaluateArgs {
    /// Run configuration naming the dataset to score against.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per protocol (unconditional draws and reconstructions).
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Histogram bins for divergence estimates.
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Bootstrap resamples behind each divergence standard deviation.
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fit the label classifier on the dataset before scoring (required:
    /// there is no stored-classifier format).
    #[arg(long)]
    pub train_classifier: bool,
    /// Step cap for the classifier fit.
    #[arg(long, default_value_t = 2000)]
    pub classifier_steps: u64,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CoreError> {
    if !args.train_classifier {
        return Err(CoreError::config(
            "no stored classifier is available; pass --train-classifier to fit one",
        ));
    }
    if args.samples == 0 {
        return Err(CoreError::config("evaluation needs at least one sample"));
    }
    let file = FileConfig::load(&args.config)?;
    let mut trainer = load_trainer(&args.checkpoint)?;
    // The dataset is keyed by the checkpoint's own seed so procedural
    // sources regenerate exactly as trained on.
    let dataset = file.build_dataset(trainer.config.seed)?;
    FileConfig::check_compatible(&dataset, &trainer.bundle.latent, &trainer.bundle.arch)?;

    let mut manifest = RunManifest::new(
        "evaluate",
        args.seed,
        json!({
            "config": &file,
            "checkpoint": &args.checkpoint,
            "samples": args.samples,
            "bins": args.bins,
            "resamples": args.resamples,
            "classifier_steps": args.classifier_steps,
        }),
    );
    manifest.add_input(&args.config)?;
    manifest.add_input(&args.checkpoint)?;
    if let Some(m) = &file.data.manifest {
        manifest.add_input(m)?;
    }
    manifest.add_outputs(&["evaluation.json", "coverage.png"]);
    manifest.write(&args.out)?;

    let classifier_config = ClassifierConfig {
        max_steps: args.classifier_steps,
        seed: args.seed,
        ..ClassifierConfig::default()
    };
    let mut fitted = eval::train_classifier(&dataset, &trainer.bundle.arch, &classifier_config)?;
    println!(
        "classifier: {} steps, full train accuracy: {}",
        fitted.steps, fitted.reached_full_accuracy
    );

    let mut latent_rng = rng::stream_rng(args.seed, rng::STREAM_LATENT);
    let mut data_rng = rng::stream_rng(args.seed, rng::STREAM_DATA);

    let x_uncond = analysis::sample_prior(
        &trainer.bundle,
        &mut trainer.params,
        &trainer.bundle.latent.clone(),
        args.samples,
        &mut latent_rng,
    )?;
    let dist_uncond = fitted.classifier.distribution(&mut fitted.params, &x_uncond);
    let is_uncond = eval::inception_score(&dist_uncond);

    let (x_real, labels) = dataset.sample_batch(args.samples, &mut data_rng);
    let x_rec = analysis::reconstruct(
        &trainer.bundle,
        &mut trainer.params,
        &x_real,
        false,
        &mut latent_rng,
    )?;
    let dist_cond = fitted.classifier.distribution(&mut fitted.params, &x_rec);
    let is_cond = eval::inception_score(&dist_cond);
    let predictions = dist_cond.predictions();
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let recon_accuracy = correct as f64 / labels.len() as f64;
    let coverage = eval::coverage_histogram(&predictions, dataset.num_classes())?;

    let (real_means, real_stds) = image_stats(&x_real);
    let (synth_means, synth_stds) = image_stats(&x_uncond);
    let mean_kl = eval::bootstrap_std(
        &StatisticSample::new("mean", real_means)?,
        &StatisticSample::new("mean", synth_means)?,
        args.bins,
        args.resamples,
        args.seed,
    )?;
    let std_kl = eval::bootstrap_std(
        &StatisticSample::new("stddev", real_stds)?,
        &StatisticSample::new("stddev", synth_stds)?,
        args.bins,
        args.resamples,
        args.seed,
    )?;

    let memory = eval::memory_report(trainer.bundle.latent.d_global, dataset.num_classes());

    let report = json!({
        "is_uncond": is_uncond,
        "is_cond": is_cond,
        "recon_accuracy": recon_accuracy,
        "coverage": &coverage,
        "statistics": {"mean": mean_kl, "stddev": std_kl},
        "classifier": {
            "steps": fitted.steps,
            "reached_full_accuracy": fitted.reached_full_accuracy,
        },
        "memory": memory,
        "samples": args.samples,
        "bins": args.bins,
        "resamples": args.resamples,
        "labels": dataset.label_names(),
    });
    std::fs::write(
        args.out.join("evaluation.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CoreError::data(e.to_string()))?,
    )?;
    io::write_image(&eval::render_bar_chart(&coverage.counts), &args.out.join("coverage.png"))?;

    println!(
        "is_uncond {is_uncond:.3}  is_cond {is_cond:.3}  recon_accuracy {recon_accuracy:.3}"
    );
    println!(
        "coverage: {:?} (empty classes: {:?})",
        coverage.counts, coverage.empty_classes
    );
    Ok(())
}

/// Compare real and synthetic voxel sets by morphological statistics.
#[derive(Args)]
pub struct Analyze3dArgs {
    /// Directory of real `.vx` volumes.
    #[arg(long)]
    pub real: PathBuf,
    /// Directory of synthesized `.vx` volumes.
    #[arg(long)]
    pub synth: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram bins for divergence estimates.
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Bootstrap resamples behind each divergence standard deviation.
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Physical voxel edge length.
    #[arg(long, default_value_t = 1.0)]
    pub voxel_size: f64,
}

fn load_grids(files: &[PathBuf], voxel_size: f64) -> Result<Vec<VoxelGrid>, CoreError> {
    files
        .iter()
        .map(|path| {
            let t = io::read_voxels(path)?;
            let s = t.shape().to_vec();
            let occupancy = t.data().iter().map(|&v| v == 1.0).collect();
            VoxelGrid::new([s[0], s[1], s[2]], occupancy, voxel_size)
        })
        .collect()
}

pub fn cmd_analyze3d(args: &Analyze3dArgs) -> Result<(), CoreError> {
    let real_files = voxel_files(&args.real)?;
    let synth_files = voxel_files(&args.synth)?;
    let real_grids = load_grids(&real_files, args.voxel_size)?;
    let synth_grids = load_grids(&synth_files, args.voxel_size)?;

    let mut manifest = RunManifest::new(
        "analyze3d",
        args.seed,
        json!({
            "real": &args.real,
            "synth": &args.synth,
            "bins": args.bins,
            "resamples": args.resamples,
            "voxel_size": args.voxel_size,
        }),
    );
    for path in real_files.iter().chain(&synth_files) {
        manifest.add_input(path)?;
    }
    manifest.add_outputs(&["analysis.json"]);
    manifest.write(&args.out)?;

    let real_stats = morphology::batch_statistics(&real_grids, &FUNCTIONAL_NAMES, None)?;
    let synth_stats = morphology::batch_statistics(&synth_grids, &FUNCTIONAL_NAMES, None)?;
    let mut rows = Vec::with_capacity(FUNCTIONAL_NAMES.len());
    println!("{:<14} {:>10} {:>10}", "functional", "kl", "std");
    for (real, synth) in real_stats.iter().zip(&synth_stats) {
        let estimate = eval::bootstrap_std(real, synth, args.bins, args.resamples, args.seed)?;
        println!("{:<14} {:>10.4} {:>10.4}", real.name(), estimate.kl, estimate.std);
        rows.push(json!({"name": real.name(), "kl": estimate.kl, "std": estimate.std}));
    }
    let report = json!({
        "functionals": rows,
        "real_volumes": real_grids.len(),
        "synth_volumes": synth_grids.len(),
        "bins": args.bins,
        "resamples": args.resamples,
        "voxel_size": args.voxel_size,
    });
    std::fs::write(
        args.out.join("analysis.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CoreError::data(e.to_string()))?,
    )?;
    println!("wrote {}", args.out.join("analysis.json").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_parser_accepts_rects_and_rejects_garbage() {
        assert_eq!(parse_patch("3,4,10,12").unwrap(), PatchRect { x: 3, y: 4, w: 10, h: 12 });
        assert_eq!(parse_patch(" 1, 2, 3, 4 ").unwrap(), PatchRect { x: 1, y: 2, w: 3, h: 4 });
        assert!(parse_patch("3,4,10").is_err());
        assert!(parse_patch("a,b,c,d").is_err());
        assert!(parse_patch("1,2,3,4,5").is_err());
    }

    #[test]
    fn nth_splits_batches_row_major() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(nth(&t, 1).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(nth(&t, 0).shape(), &[3]);
    }

    #[test]
    fn image_stats_match_hand_values() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 5.0]);
        let (means, stds) = image_stats(&t);
        assert_eq!(means, vec![2.0, 5.0]);
        assert_eq!(stds, vec![1.0, 0.0]);
    }

    #[test]
    fn rows_2d_handles_leading_channel() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(rows_2d(&t), vec![vec![0.1, 0.2], vec![0.3, 0.4]]);
    }
}
