//! Command-line interface: training, evaluation and the four sampling
//! pipelines, driven by a flat `key = value` config file plus repeatable
//! `--override key=value` flags. Every run echoes its resolved config into
//! the output directory and is a pure function of (config, overrides,
//! input files, seed).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{gen_toy_shapes, load_cifar10_binary, ImageDataset};
use crate::downscale::{downscale, DiscreteImage};
use crate::error::{Error, Result};
use crate::eval::{bits_per_dim, iw_nll, pixel_frechet, read_ppm, write_ppm_grid, PixelStats};
use crate::models::{build_srvae, build_vae, Model, ModelConfig};
use crate::numerics::RngStream;
use crate::training::{load_checkpoint, save_checkpoint, train, AdaMaxState, TrainConfig};

const CONFIG_HELP: &str = "\
Config file format: UTF-8 lines `key = value`, `#` starts a comment,
unknown keys are rejected. Keys:

  model            vae | srvae                                (required)
  height, width    image extents, divisible by 8 for srvae    (required)
  channels         1 or 3                                     (required)
  latent_k         dimension of u                             (required)
  latent_m         dimension of z                             (required)
  n_mix            discretized-logistic mixture components    (required)
  flow_depth       coupling layers in the prior               (required)
  hidden_width     conv/coupling hidden width                 (required)
  seed             master seed (init, shuffling, sampling)    (required)
  out_dir          output directory                           (required)
  dataset          toy | cifar10                              (required)
  toy_n            toy train-set size          (required for dataset=toy)
  toy_extent       toy image extent            (required for dataset=toy)
  toy_seed         toy generator seed; test set uses toy_seed+1
  cifar_train      ;-separated batch files  (required for dataset=cifar10)
  cifar_test       ;-separated batch files  (required for dataset=cifar10)
  learning_rate    default 2e-3
  beta1, beta2     default 0.9, 0.999
  batch_size       default 32
  epochs           default 1
  clip_norm        global gradient-norm clip, default 100
  kl_warmup_steps  linear KL warm-up steps, default 0 (off)
  checkpoint_interval  epochs between checkpoints, default 1";

#[derive(Parser)]
#[command(
    name = "srvae",
    about = "Two-level super-resolution VAE and VAE baseline: train, evaluate, sample",
    after_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--override seed=7`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and history.csv to out_dir.
    #[command(after_help = CONFIG_HELP)]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint: ELBO terms, bits/dim, importance-weighted NLL.
    #[command(after_help = CONFIG_HELP)]
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Importance-weighted sample count.
        #[arg(long, default_value_t = 500)]
        k: usize,
        /// Test images used for the mean ELBO table.
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Test images used for the IW NLL (each costs k model passes).
        #[arg(long, default_value_t = 2)]
        nll_count: usize,
        /// Also report the pixel-Frechet distance (not FID) between
        /// generated and test images.
        #[arg(long)]
        frechet: bool,
    },
    /// Draw unconditional samples; srVAE also writes the compressed stage.
    #[command(after_help = CONFIG_HELP)]
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Grid columns.
        #[arg(long, default_value_t = 4)]
        cols: usize,
    },
    /// Super-resolve compressed images (srVAE only).
    #[command(after_help = CONFIG_HELP)]
    Superres {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Half-resolution input image (PPM); otherwise test images are
        /// downscaled starting at --index.
        #[arg(long)]
        input: Option<PathBuf>,
        /// First test-set index when no --input is given.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Number of test images to process.
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Reconstruct images through the variational posterior.
    #[command(after_help = CONFIG_HELP)]
    Reconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Full-resolution input image (PPM); otherwise test images are
        /// used starting at --index.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Generative reconstruction: re-sample the compressed stage before
    /// super-resolving (srVAE only).
    #[command(after_help = CONFIG_HELP)]
    Genrecon {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
}

/// Parsed and validated run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_k: usize,
    pub latent_m: usize,
    pub n_mix: usize,
    pub flow_depth: usize,
    pub hidden_width: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: String,
    pub toy_n: usize,
    pub toy_extent: usize,
    pub toy_seed: u64,
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Vec<PathBuf>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub kl_warmup_steps: usize,
    pub checkpoint_interval: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "height",
    "width",
    "channels",
    "latent_k",
    "latent_m",
    "n_mix",
    "flow_depth",
    "hidden_width",
    "seed",
    "out_dir",
    "dataset",
    "toy_n",
    "toy_extent",
    "toy_seed",
    "cifar_train",
    "cifar_test",
    "learning_rate",
    "beta1",
    "beta2",
    "batch_size",
    "epochs",
    "clip_norm",
    "kl_warmup_steps",
    "checkpoint_interval",
];

fn parse_kv_lines(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut map = parse_kv_lines(&text)?;
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!(
                    "override `{item}` is not KEY=VALUE"
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let require = |key: &str| -> Result<&String> {
            map.get(key)
                .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
        };
        fn parsed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
        }
        let num = |key: &str| -> Result<usize> { parsed(key, require(key)?) };
        let opt_num = |key: &str, default: usize| -> Result<usize> {
            map.get(key).map_or(Ok(default), |v| parsed(key, v))
        };
        let opt_f64 = |key: &str, default: f64| -> Result<f64> {
            map.get(key).map_or(Ok(default), |v| parsed(key, v))
        };

        let model = require("model")?.clone();
        if model != "vae" && model != "srvae" {
            return Err(Error::Config(format!(
                "model must be `vae` or `srvae`, got `{model}`"
            )));
        }
        let dataset = require("dataset")?.clone();
        if dataset != "toy" && dataset != "cifar10" {
            return Err(Error::Config(format!(
                "dataset must be `toy` or `cifar10`, got `{dataset}`"
            )));
        }
        let split_paths = |key: &str| -> Result<Vec<PathBuf>> {
            Ok(require(key)?
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|s| PathBuf::from(s.trim()))
                .collect())
        };
        let (toy_n, toy_extent, toy_seed) = if dataset == "toy" {
            (num("toy_n")?, num("toy_extent")?, parsed("toy_seed", require("toy_seed")?)?)
        } else {
            (0, 0, 0)
        };
        let (cifar_train, cifar_test) = if dataset == "cifar10" {
            (split_paths("cifar_train")?, split_paths("cifar_test")?)
        } else {
            (Vec::new(), Vec::new())
        };

        let cfg = Self {
            model,
            height: num("height")?,
            width: num("width")?,
            channels: num("channels")?,
            latent_k: num("latent_k")?,
            latent_m: num("latent_m")?,
            n_mix: num("n_mix")?,
            flow_depth: num("flow_depth")?,
            hidden_width: num("hidden_width")?,
            seed: parsed("seed", require("seed")?)?,
            out_dir: PathBuf::from(require("out_dir")?),
            dataset,
            toy_n,
            toy_extent,
            toy_seed,
            cifar_train,
            cifar_test,
            learning_rate: opt_f64("learning_rate", 2e-3)?,
            beta1: opt_f64("beta1", 0.9)?,
            beta2: opt_f64("beta2", 0.999)?,
            batch_size: opt_num("batch_size", 32)?,
            epochs: opt_num("epochs", 1)?,
            clip_norm: opt_f64("clip_norm", 100.0)?,
            kl_warmup_steps: opt_num("kl_warmup_steps", 0)?,
            checkpoint_interval: opt_num("checkpoint_interval", 1)?,
        };
        cfg.model_config().validate_vae().or_else(|_| {
            // Full validation happens at build time; here just sanity-check
            // the numeric ranges shared by both models.
            if cfg.height == 0 || cfg.width == 0 {
                Err(Error::Config("image extents must be positive".into()))
            } else {
                Ok(())
            }
        })?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            channels: self.channels,
            latent_k: self.latent_k,
            latent_m: self.latent_m,
            n_mix: self.n_mix,
            flow_depth: self.flow_depth,
            hidden_width: self.hidden_width,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            clip_norm: self.clip_norm,
            kl_warmup_steps: self.kl_warmup_steps,
            checkpoint_dir: Some(self.out_dir.clone()),
            checkpoint_interval: self.checkpoint_interval,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        let cfg = self.model_config();
        Ok(match self.model.as_str() {
            "vae" => Model::Vae(build_vae(&cfg)?),
            _ => Model::Srvae(build_srvae(&cfg)?),
        })
    }

    pub fn load_train_set(&self) -> Result<ImageDataset> {
        match self.dataset.as_str() {
            "toy" => gen_toy_shapes(self.toy_n, self.toy_extent, self.toy_seed),
            _ => load_cifar10_binary(&self.cifar_train),
        }
    }

    /// Toy test sets come from the disjoint seed `toy_seed + 1`.
    pub fn load_test_set(&self) -> Result<ImageDataset> {
        match self.dataset.as_str() {
            "toy" => gen_toy_shapes(self.toy_n, self.toy_extent, self.toy_seed + 1),
            _ => load_cifar10_binary(&self.cifar_test),
        }
    }

    /// Canonical `key = value` serialization of the resolved configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("model", self.model.clone());
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("channels", self.channels.to_string());
        put("latent_k", self.latent_k.to_string());
        put("latent_m", self.latent_m.to_string());
        put("n_mix", self.n_mix.to_string());
        put("flow_depth", self.flow_depth.to_string());
        put("hidden_width", self.hidden_width.to_string());
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("dataset", self.dataset.clone());
        if self.dataset == "toy" {
            put("toy_n", self.toy_n.to_string());
            put("toy_extent", self.toy_extent.to_string());
            put("toy_seed", self.toy_seed.to_string());
        } else {
            let join = |paths: &[PathBuf]| {
                paths
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(";")
            };
            put("cifar_train", join(&self.cifar_train));
            put("cifar_test", join(&self.cifar_test));
        }
        put("learning_rate", format!("{}", self.learning_rate));
        put("beta1", format!("{}", self.beta1));
        put("beta2", format!("{}", self.beta2));
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("clip_norm", format!("{}", self.clip_norm));
        put("kl_warmup_steps", self.kl_warmup_steps.to_string());
        put("checkpoint_interval", self.checkpoint_interval.to_string());
        out
    }

    fn prepare_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join("config.echo.cfg"), self.echo())?;
        Ok(())
    }
}

/// Entry point; returns the process exit code. Errors go to stderr.
pub fn run<I>(argv: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => cmd_train(&load_config(&config)?),
        Command::Eval {
            config,
            checkpoint,
            k,
            count,
            nll_count,
            frechet,
        } => cmd_eval(&load_config(&config)?, &checkpoint, k, count, nll_count, frechet),
        Command::Sample {
            config,
            checkpoint,
            n,
            cols,
        } => cmd_sample(&load_config(&config)?, &checkpoint, n, cols),
        Command::Superres {
            config,
            checkpoint,
            input,
            index,
            n,
        } => cmd_superres(&load_config(&config)?, &checkpoint, input.as_deref(), index, n),
        Command::Reconstruct {
            config,
            checkpoint,
            input,
            index,
            n,
        } => cmd_reconstruct(&load_config(&config)?, &checkpoint, input.as_deref(), index, n),
        Command::Genrecon {
            config,
            checkpoint,
            input,
            index,
            n,
        } => cmd_genrecon(&load_config(&config)?, &checkpoint, input.as_deref(), index, n),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(&args.config, &args.overrides)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.prepare_out_dir()?;
    let dataset = cfg.load_train_set()?;
    let mut model = cfg.build_model()?;
    let history = train(&mut model, &dataset, &cfg.train_config())?;

    let mut csv = String::from("epoch,re_x,re_y,kl_z,kl_u,elbo_loss,bits_per_dim\n");
    for row in &history {
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.epoch,
            row.terms.re_x,
            row.terms.re_y,
            row.terms.kl_z,
            row.terms.kl_u,
            row.elbo_loss,
            row.bits_per_dim
        );
    }
    std::fs::write(cfg.out_dir.join("history.csv"), csv)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs: elbo_loss {:.3} nats ({:.4} bits/dim)",
            history.len(),
            last.elbo_loss,
            last.bits_per_dim
        );
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let (model, _, _) = load_checkpoint(checkpoint)?;
    let mc = model.config();
    if (mc.height, mc.width, mc.channels) != (cfg.height, cfg.width, cfg.channels) {
        return Err(Error::Config(format!(
            "checkpoint images {}x{}x{} vs config {}x{}x{}",
            mc.height, mc.width, mc.channels, cfg.height, cfg.width, cfg.channels
        )));
    }
    Ok(model)
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    k: usize,
    count: usize,
    nll_count: usize,
    frechet: bool,
) -> Result<()> {
    cfg.prepare_out_dir()?;
    let model = load_model(cfg, checkpoint)?;
    let test = cfg.load_test_set()?;
    let rng = RngStream::new(cfg.seed);

    let used = count.max(1).min(test.len());
    let mut mean = crate::models::ElboTerms::default();
    for (i, x) in test.images.iter().take(used).enumerate() {
        let mut stream = rng.child(&format!("eval.elbo.{i}"));
        mean.accumulate(&model.elbo(x, &mut stream)?);
    }
    let mean = mean.scaled(1.0 / used as f64);
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    println!("ELBO terms over {used} test images (nats/example):");
    println!("  re_x      {:12.3}", mean.re_x);
    println!("  re_y      {:12.3}", mean.re_y);
    println!("  kl_z      {:12.3}", mean.kl_z);
    println!("  kl_u      {:12.3}", mean.kl_u);
    println!("  elbo_loss {:12.3}", mean.elbo_loss());
    println!("  bits/dim  {:12.4}", bits_per_dim(mean.elbo_loss(), h, w, c));

    let nll_used = nll_count.max(1).min(test.len());
    let mut nll_sum = 0.0;
    for (i, x) in test.images.iter().take(nll_used).enumerate() {
        let stream = rng.child(&format!("eval.nll.{i}"));
        nll_sum += iw_nll(&model, x, k, &stream)?;
    }
    let nll = nll_sum / nll_used as f64;
    println!(
        "IW NLL (k={k}, {nll_used} images): {:.3} nats = {:.4} bits/dim",
        nll,
        bits_per_dim(nll, h, w, c)
    );

    if let Model::Srvae(srvae) = &model {
        let probe: Vec<DiscreteImage> = test.images.iter().take(used).cloned().collect();
        let mut stream = rng.child("eval.perdim");
        let per_dim = srvae.per_dimension_kl_z(&probe, &mut stream)?;
        let active = per_dim.iter().filter(|&&v| v > 1e-2).count();
        let max = per_dim.iter().cloned().fold(0.0f64, f64::max);
        let total: f64 = per_dim.iter().sum();
        println!(
            "per-dimension KL_z: total {total:.3} nats, max {max:.3}, {active}/{} dims above 0.01",
            per_dim.len()
        );
    }

    if frechet {
        let pool = if h % 4 == 0 && w % 4 == 0 { Some(4) } else { None };
        let gen_count = used.max(2);
        let mut stream = rng.child("eval.frechet");
        let generated: Vec<DiscreteImage> = model
            .generate(&mut stream, gen_count)?
            .into_iter()
            .map(|s| s.image)
            .collect();
        let real: Vec<DiscreteImage> = test.images.iter().take(gen_count).cloned().collect();
        let d = pixel_frechet(
            &PixelStats::from_images(&generated, pool)?,
            &PixelStats::from_images(&real, pool)?,
        )?;
        println!("pixel-Frechet (not FID), {gen_count} vs {gen_count} images: {d:.5}");
    }
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, n: usize, cols: usize) -> Result<()> {
    cfg.prepare_out_dir()?;
    let model = load_model(cfg, checkpoint)?;
    let mut rng = RngStream::new(cfg.seed).child("sample");
    let samples = model.generate(&mut rng, n)?;
    let images: Vec<DiscreteImage> = samples.iter().map(|s| s.image.clone()).collect();
    write_ppm_grid(&images, cols, cfg.out_dir.join("samples.ppm"))?;
    let compressed: Vec<DiscreteImage> = samples
        .iter()
        .filter_map(|s| s.compressed.clone())
        .collect();
    if !compressed.is_empty() {
        write_ppm_grid(&compressed, cols, cfg.out_dir.join("samples_y.ppm"))?;
        println!("wrote samples.ppm and samples_y.ppm ({n} samples)");
    } else {
        println!("wrote samples.ppm ({n} samples)");
    }
    Ok(())
}

/// Nearest-neighbour 2x upscale so half-resolution images can sit next to
/// full-resolution ones in a grid.
fn nearest_double(img: &DiscreteImage) -> DiscreteImage {
    let mut out = DiscreteImage::zeros(img.height * 2, img.width * 2, img.channels);
    for y in 0..out.height {
        for x in 0..out.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y / 2, x / 2, c));
            }
        }
    }
    out
}

/// Adapt a 3-channel PPM to the model's channel count.
fn adapt_channels(img: DiscreteImage, channels: usize) -> Result<DiscreteImage> {
    if img.channels == channels {
        return Ok(img);
    }
    if channels == 1 {
        let values: Vec<u8> = img
            .values()
            .chunks_exact(3)
            .map(|px| {
                let sum = px[0] as u32 + px[1] as u32 + px[2] as u32;
                ((sum as f64 / 3.0).round() as u32).min(255) as u8
            })
            .collect();
        return DiscreteImage::new(img.height, img.width, 1, values);
    }
    Err(Error::InvalidArgument(format!(
        "cannot adapt a {}-channel image to {channels} channels",
        img.channels
    )))
}

fn test_slice(cfg: &RunConfig, index: usize, n: usize) -> Result<Vec<DiscreteImage>> {
    let test = cfg.load_test_set()?;
    if index >= test.len() {
        return Err(Error::InvalidArgument(format!(
            "--index {index} out of range for {} test images",
            test.len()
        )));
    }
    Ok(test
        .images
        .into_iter()
        .skip(index)
        .take(n.max(1))
        .collect())
}

fn cmd_superres(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: Option<&Path>,
    index: usize,
    n: usize,
) -> Result<()> {
    cfg.prepare_out_dir()?;
    let model = load_model(cfg, checkpoint)?;
    let srvae = model.as_srvae()?;
    let mut rng = RngStream::new(cfg.seed).child("superres");

    // Rows are [compressed | ground truth if known | super-resolved].
    let mut tiles = Vec::new();
    let mut cols = 3;
    match input {
        Some(path) => {
            let y = adapt_channels(read_ppm(path)?, cfg.channels)?;
            let sr = srvae.super_resolve(&y, &mut rng)?;
            tiles.push(nearest_double(&y));
            tiles.push(sr);
            cols = 2;
        }
        None => {
            for x in test_slice(cfg, index, n)? {
                let y = downscale(&x)?;
                let sr = srvae.super_resolve(&y, &mut rng)?;
                tiles.push(nearest_double(&y));
                tiles.push(x);
                tiles.push(sr);
            }
        }
    }
    write_ppm_grid(&tiles, cols, cfg.out_dir.join("superres.ppm"))?;
    println!("wrote superres.ppm ({} rows)", tiles.len() / cols);
    Ok(())
}

fn cmd_reconstruct(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: Option<&Path>,
    index: usize,
    n: usize,
) -> Result<()> {
    cfg.prepare_out_dir()?;
    let model = load_model(cfg, checkpoint)?;
    let mut rng = RngStream::new(cfg.seed).child("reconstruct");
    let inputs = match input {
        Some(path) => vec![adapt_channels(read_ppm(path)?, cfg.channels)?],
        None => test_slice(cfg, index, n)?,
    };
    let mut tiles = Vec::new();
    for x in inputs {
        let rec = model.reconstruct(&x, &mut rng)?;
        tiles.push(x);
        tiles.push(rec);
    }
    write_ppm_grid(&tiles, 2, cfg.out_dir.join("reconstruct.ppm"))?;
    println!("wrote reconstruct.ppm ({} rows)", tiles.len() / 2);
    Ok(())
}

fn cmd_genrecon(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: Option<&Path>,
    index: usize,
    n: usize,
) -> Result<()> {
    cfg.prepare_out_dir()?;
    let model = load_model(cfg, checkpoint)?;
    let srvae = model.as_srvae()?;
    let mut rng = RngStream::new(cfg.seed).child("genrecon");
    let inputs = match input {
        Some(path) => vec![adapt_channels(read_ppm(path)?, cfg.channels)?],
        None => test_slice(cfg, index, n)?,
    };
    let mut tiles = Vec::new();
    for x in inputs {
        let rec = srvae.generative_reconstruct(&x, &mut rng)?;
        tiles.push(x);
        tiles.push(rec);
    }
    write_ppm_grid(&tiles, 2, cfg.out_dir.join("genrecon.ppm"))?;
    println!("wrote genrecon.ppm ({} rows)", tiles.len() / 2);
    Ok(())
}

/// Write an initial checkpoint for a freshly built model; lets `eval`,
/// `sample` and the pipeline subcommands run without a training pass.
pub fn write_initial_checkpoint(cfg: &RunConfig, path: &Path) -> Result<()> {
    let model = cfg.build_model()?;
    let state = AdaMaxState::new(&model);
    save_checkpoint(&model, &state, path, &[("epoch".to_string(), "0".to_string())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("run.cfg");
        std::fs::write(&path, body).unwrap();
        path
    }

    const TOY_CFG: &str = "\
# desk-scale toy run
model = srvae
height = 16
width = 16
channels = 3
latent_k = 32
latent_m = 32
n_mix = 5
flow_depth = 8
hidden_width = 32
seed = 1
dataset = toy
toy_n = 64
toy_extent = 16
toy_seed = 7
";

    #[test]
    fn config_parses_with_comments_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{TOY_CFG}out_dir = {}\n", dir.path().join("out").display());
        let path = write_cfg(dir.path(), &body);
        let cfg = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.model, "srvae");
        assert_eq!(cfg.batch_size, 32, "default applies");
        assert_eq!(cfg.learning_rate, 2e-3);
        assert_eq!(cfg.toy_seed, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{TOY_CFG}out_dir = {}\nbogus_key = 1\n",
            dir.path().display()
        );
        let path = write_cfg(dir.path(), &body);
        match RunConfig::load(&path, &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("bogus_key"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), "model = vae\n");
        assert!(RunConfig::load(&path, &[]).is_err());
    }

    #[test]
    fn overrides_replace_values_and_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{TOY_CFG}out_dir = {}\n", dir.path().display());
        let path = write_cfg(dir.path(), &body);
        let cfg = RunConfig::load(&path, &["seed=99".into(), "batch_size=4".into()]).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.batch_size, 4);
        assert!(RunConfig::load(&path, &["batch_size=abc".into()]).is_err());
        assert!(RunConfig::load(&path, &["nonsense".into()]).is_err());
    }

    #[test]
    fn echo_round_trips_through_the_parser() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{TOY_CFG}out_dir = {}\n", dir.path().display());
        let path = write_cfg(dir.path(), &body);
        let cfg = RunConfig::load(&path, &[]).unwrap();
        let echo_path = write_cfg(dir.path(), &cfg.echo());
        let again = RunConfig::load(&echo_path, &[]).unwrap();
        assert_eq!(cfg.echo(), again.echo());
    }

    #[test]
    fn help_exits_zero_and_bad_args_nonzero() {
        assert_eq!(run(["srvae".to_string(), "--help".to_string()]), 0);
        assert_eq!(
            run(["srvae".to_string(), "train".to_string(), "--help".to_string()]),
            0
        );
        assert_eq!(run(["srvae".to_string(), "definitely-not-a-cmd".to_string()]), 2);
        // Missing config file surfaces as a runtime error, exit 1.
        assert_eq!(
            run([
                "srvae".to_string(),
                "train".to_string(),
                "--config".to_string(),
                "/nonexistent/path.cfg".to_string()
            ]),
            1
        );
    }
}
