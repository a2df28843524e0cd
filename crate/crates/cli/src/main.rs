use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use fra_core::augmentation::{AugmentationConfig, ImageBatch};
use fra_core::config::{resolve_config, DataSource, RunConfig};
use fra_core::data::{decode_image, list_images, load_folder, write_synthetic, Dataset, SyntheticFaceSpec};
use fra_core::eval::{
    discovery_on_synthetic, export_heatmaps, labeled_folder, linear_probe, mouth_task, split, ProbeSettings,
};
use fra_core::networks::FraModel;
use fra_core::trainer::{fit, Checkpoint, TrainState};
use fra_core::FraError;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fra", version, about = "Facial region aware self-supervised pre-training")]
struct Cli {
    /// Overrides the run seed (pretrain) or the evaluation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-trains an encoder and writes checkpoints to `train.out_dir`.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dotted-path override, e.g. `--set loss.lambda_r=0`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print a progress line every this many steps.
        #[arg(long, default_value_t = 10)]
        log_every: u64,
    },
    /// Linear probe on frozen encoder features.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory written by `synth-data`. Without it a synthetic set is generated.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also probe a randomly initialized encoder for comparison.
        #[arg(long)]
        random_baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes heatmap images, overlays and raw arrays for every input image.
    Heatmaps {
        #[arg(long)]
        ckpt: PathBuf,
        /// An image file or a directory of images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores heatmaps against synthetic part masks.
    Discover {
        #[arg(long)]
        ckpt: PathBuf,
        /// Synthetic face spec (TOML); defaults to the checkpoint's.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Renders a synthetic face dataset to disk.
    SynthData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
    },
    /// Prints the resolved config with provenance notes.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &FraError) -> u8 {
    match e {
        FraError::Config(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> fra_core::Result<()> {
    match cli.command {
        Command::Pretrain { config, resume, overrides, log_every } => {
            pretrain(config.as_deref(), resume.as_deref(), &overrides, cli.seed, log_every)
        }
        Command::Probe { ckpt, data, random_baseline, out } => {
            probe(&ckpt, data.as_deref(), random_baseline, out.as_deref(), cli.seed.unwrap_or(0))
        }
        Command::Heatmaps { ckpt, images, out } => heatmaps(&ckpt, &images, &out),
        Command::Discover { ckpt, spec, count, out } => {
            discover(&ckpt, spec.as_deref(), count, out.as_deref(), cli.seed.unwrap_or(0))
        }
        Command::SynthData { spec, out, count } => {
            let spec = read_spec(spec.as_deref())?;
            let manifest = write_synthetic(&spec, count, cli.seed.unwrap_or(0), &out)?;
            println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
            Ok(())
        }
        Command::Config { config, mut overrides } => {
            if let Some(s) = cli.seed {
                overrides.push(format!("seed={s}"));
            }
            print!("{}", resolve_config(config.as_deref(), &overrides)?.annotated());
            Ok(())
        }
    }
}

fn load_dataset(cfg: &RunConfig) -> fra_core::Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => Dataset::synthetic(&cfg.data.synthetic, cfg.data.num_images, cfg.seed),
        DataSource::Folder => Ok(load_folder(Path::new(&cfg.data.folder), cfg.data.image_size)?.0),
    }
}

fn pretrain(
    config: Option<&Path>,
    resume: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    log_every: u64,
) -> fra_core::Result<()> {
    let mut state = match resume {
        Some(path) => {
            if config.is_some() || !overrides.is_empty() || seed.is_some() {
                return Err(FraError::Config("--resume uses the checkpoint's config; drop --config/--set/--seed".into()));
            }
            let ckpt = Checkpoint::load(path)?;
            info!("resuming from {} at step {}", path.display(), ckpt.step);
            TrainState::from_checkpoint(ckpt)?
        }
        None => {
            let mut overrides = overrides.to_vec();
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            TrainState::new(resolve_config(config, &overrides)?)?
        }
    };
    let dataset = Arc::new(load_dataset(&state.config)?);
    let out_dir = PathBuf::from(&state.config.train.out_dir);
    info!("{} images, {} steps, writing to {}", dataset.len(), state.config.train.total_steps, out_dir.display());
    let outcome = fit(&mut state, dataset, &out_dir, |r| {
        if log_every > 0 && r.step % log_every == 0 {
            info!(
                "step {:>6} loss {:.4} consistency {:.4} relation {:.4} entropy {:.3} lr {:.2e} tau {:.5}",
                r.step, r.loss, r.consistency, r.relation, r.cluster_entropy, r.lr, r.tau
            );
        }
    })?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct Report<T: Serialize> {
    checkpoint: PathBuf,
    config: String,
    #[serde(flatten)]
    body: T,
}

fn emit<T: Serialize>(report: &T, out: Option<&Path>) -> fra_core::Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    if let Some(p) = out {
        fs::write(p, &text).map_err(|e| FraError::io(p, e))?;
    }
    println!("{text}");
    Ok(())
}

fn probe(ckpt_path: &Path, data: Option<&Path>, random_baseline: bool, out: Option<&Path>, seed: u64) -> fra_core::Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let model = FraModel::new(&cfg.model)?;
    ckpt.pair.check_against(&model)?;
    let aug = AugmentationConfig::identity(cfg.augmentation.crop_size);
    let (train, test) = match data {
        Some(dir) => split(&labeled_folder(dir, cfg.data.image_size)?, 0.5, seed),
        None => {
            let spec = &cfg.data.synthetic;
            (
                mouth_task(spec, cfg.eval.probe_train, seed.wrapping_add(1_000), 0)?,
                mouth_task(spec, cfg.eval.probe_test, seed.wrapping_add(2_000), 0)?,
            )
        }
    };
    let settings =
        ProbeSettings { epochs: cfg.eval.probe_epochs, lr: cfg.eval.probe_lr, weight_decay: cfg.eval.probe_weight_decay, seed };
    let trained = linear_probe(&model, &ckpt.pair.online, &train, &test, &aug, &settings, "mouth_open")?;
    let baseline = if random_baseline {
        let store = model.init_online::<f32>(&mut ChaCha8Rng::seed_from_u64(seed));
        Some(linear_probe(&model, &store, &train, &test, &aug, &settings, "mouth_open")?)
    } else {
        None
    };
    #[derive(Serialize)]
    struct Body {
        probe: fra_core::eval::ProbeReport,
        random_encoder: Option<fra_core::eval::ProbeReport>,
    }
    emit(
        &Report {
            checkpoint: ckpt_path.to_path_buf(),
            config: cfg.to_toml(),
            body: Body { probe: trained, random_encoder: baseline },
        },
        out,
    )
}

fn heatmaps(ckpt_path: &Path, images: &Path, out: &Path) -> fra_core::Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let model = FraModel::new(&cfg.model)?;
    ckpt.pair.check_against(&model)?;
    let files = if images.is_dir() { list_images(images)? } else { vec![images.to_path_buf()] };
    let size = cfg.data.image_size;
    let mut pixels = Vec::with_capacity(files.len());
    let mut names = Vec::with_capacity(files.len());
    for f in &files {
        pixels.push(decode_image(f, size)?);
        names.push(f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into()));
    }
    if pixels.is_empty() {
        return Err(FraError::Dataset(format!("no images found at {}", images.display())));
    }
    let batch = ImageBatch::stack(&pixels, size, size)?;
    let aug = AugmentationConfig::identity(cfg.augmentation.crop_size);
    let export = export_heatmaps(&model, &ckpt.pair.online, &batch, &names, &aug, cfg.loss.t_assign, out)?;
    info!("wrote {} files to {}", export.files.len(), out.display());
    Ok(())
}

fn read_spec(path: Option<&Path>) -> fra_core::Result<SyntheticFaceSpec> {
    let spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| FraError::io(p, e))?;
            toml::from_str(&text).map_err(|e| FraError::Config(format!("bad synthetic spec {}: {e}", p.display())))?
        }
        None => SyntheticFaceSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

fn discover(
    ckpt_path: &Path,
    spec: Option<&Path>,
    count: Option<usize>,
    out: Option<&Path>,
    seed: u64,
) -> fra_core::Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let model = FraModel::new(&cfg.model)?;
    ckpt.pair.check_against(&model)?;
    let spec = match spec {
        Some(_) => read_spec(spec)?,
        None => cfg.data.synthetic.clone(),
    };
    let aug = AugmentationConfig::identity(cfg.augmentation.crop_size);
    let report = discovery_on_synthetic(
        &model,
        &ckpt.pair.online,
        &spec,
        count.unwrap_or(cfg.eval.discovery_images),
        seed,
        &aug,
        cfg.loss.t_assign,
        cfg.eval.discovery_quantile,
    )?;
    emit(&Report { checkpoint: ckpt_path.to_path_buf(), config: cfg.to_toml(), body: report }, out)
}
