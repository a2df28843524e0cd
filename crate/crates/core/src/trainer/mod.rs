//! Training loop: two views through both branches, optimizer step on the
//! online parameters, EMA update of the momentum parameters, checkpoints.

pub mod checkpoint;
pub mod objective;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use fra_tensor::{Graph, Optimizer, OptimizerKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{generate_views, ImageBatch};
use crate::config::{OptimizerChoice, RunConfig, TauSchedule, TrainConfig};
use crate::data::Dataset;
use crate::error::{FraError, Result};
use crate::networks::{FraModel, ModelPair, MOMENTUM, ONLINE};

pub use checkpoint::Checkpoint;
pub use objective::{fra_objective, global_consistency_objective, Objective, ObjectiveValues};

/// Scalars recorded for one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub consistency: f64,
    pub relation: f64,
    pub memax: f64,
    /// Entropy of the batch-mean student assignment.
    pub cluster_entropy: f64,
    pub global_cos: f64,
    pub local_cos: f64,
    pub tau: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl StepReport {
    /// Same report with the wall-clock field cleared, for equality checks.
    pub fn without_timing(mut self) -> Self {
        self.wall_ms = 0.0;
        self
    }
}

/// Learning rate for the step with 0-based index `step`: linear warmup,
/// then cosine decay to zero at `total_steps`.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// EMA momentum after `step` steps: `tau_base` at 0, `tau_final` at `total_steps`.
pub fn ema_momentum(cfg: &TrainConfig, step: u64) -> f64 {
    match cfg.tau_schedule {
        TauSchedule::Constant => cfg.tau_base,
        TauSchedule::Cosine => {
            if cfg.total_steps == 0 {
                return cfg.tau_base;
            }
            let progress = (step as f64 / cfg.total_steps as f64).min(1.0);
            let c = (std::f64::consts::PI * progress).cos();
            cfg.tau_final - (cfg.tau_final - cfg.tau_base) * (c + 1.0) / 2.0
        }
    }
}

/// Seed of the augmentation stream used at `step`.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn optimizer_kind(cfg: &TrainConfig) -> OptimizerKind {
    match cfg.optimizer {
        OptimizerChoice::Adamw => OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        OptimizerChoice::Sgd => OptimizerKind::Sgd { momentum: cfg.sgd_momentum },
    }
}

fn hash_tensors(ts: &[&Tensor<f32>]) -> String {
    let mut h = Sha256::new();
    for t in ts {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// All mutable training state.
pub struct TrainState {
    pub config: RunConfig,
    pub model: FraModel,
    pub pair: ModelPair<f32>,
    pub optimizer: Optimizer<f32>,
    /// Number of completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = FraModel::new(&config.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pair = model.init_pair(&mut rng);
        let optimizer = Optimizer::new(optimizer_kind(&config.train), config.train.weight_decay);
        Ok(Self { config, model, pair, optimizer, step: 0 })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = FraModel::new(&ckpt.config.model)?;
        ckpt.pair.check_against(&model)?;
        let mut optimizer = Optimizer::new(optimizer_kind(&ckpt.config.train), ckpt.config.train.weight_decay);
        optimizer.state = ckpt.optimizer;
        Ok(Self { config: ckpt.config, model, pair: ckpt.pair, optimizer, step: ckpt.step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            pair: self.pair.clone(),
            optimizer: self.optimizer.state.clone(),
        }
    }

    /// Augments `batch` with the stream for the current step and trains on it.
    pub fn train_step(&mut self, batch: &ImageBatch) -> Result<StepReport> {
        let seed = step_seed(self.config.seed, self.step);
        let (v1, v2) = generate_views(batch, &self.config.augmentation, seed)?;
        self.train_on_views(&v1.pixels, &v2.pixels)
    }

    /// One optimization step on already augmented views.
    pub fn train_on_views(&mut self, view1: &Tensor<f32>, view2: &Tensor<f32>) -> Result<StepReport> {
        if view1.dim(0) < 2 {
            return Err(FraError::Domain("training needs at least 2 images per batch".into()));
        }
        let start = Instant::now();
        let step = self.step;
        let lr = learning_rate(&self.config.train, step);
        let tau = ema_momentum(&self.config.train, step + 1);

        let mut g = Graph::new();
        let objective = fra_objective(&mut g, &self.model, &self.pair, [view1, view2], &self.config.loss);
        let snapshot = |values: Option<ObjectiveValues>, what: &str| {
            let snap = serde_json::json!({
                "step": step,
                "inputs_sha256": hash_tensors(&[view1, view2]),
                "problem": what,
                "scalars": values.map(|v| format!("{v:?}")),
            });
            FraError::NonFinite { step, snapshot: snap.to_string() }
        };
        let objective = match objective {
            Ok(o) => o,
            Err(FraError::Numeric(m)) => return Err(snapshot(None, &m)),
            Err(e) => return Err(e),
        };
        let values = objective.values(&g);
        let scalars = [values.total, values.consistency, values.relation, values.memax, values.global_cos, values.local_cos];
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(snapshot(Some(values), "non-finite loss"));
        }
        let grads = g.backward(objective.total).for_store(ONLINE);
        if grads.values().any(|t| !t.all_finite()) {
            return Err(snapshot(Some(values), "non-finite gradient"));
        }
        self.optimizer.step(&mut self.pair.online, &grads, lr);
        for u in g.take_buffer_updates() {
            match u.store.as_str() {
                ONLINE => self.pair.online.set_buffer(&u.name, u.value),
                MOMENTUM => self.pair.momentum.set_buffer(&u.name, u.value),
                other => return Err(FraError::Topology(format!("buffer update for unknown branch {other}"))),
            }
        }
        self.pair.ema_update(tau)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: values.total,
            consistency: values.consistency,
            relation: values.relation,
            memax: values.memax,
            cluster_entropy: values.entropy,
            global_cos: values.global_cos,
            local_cos: values.local_cos,
            tau,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Result of [`fit`].
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub reports: Vec<StepReport>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

struct Prepared {
    step: u64,
    views: Result<(ImageBatch, ImageBatch)>,
}

/// Trains from the state's current step to `train.total_steps`.
///
/// A producer thread assembles and augments batches ahead of the loop
/// through a bounded queue of `train.prefetch` entries. Batches and
/// augmentations depend only on `(seed, step)`, so resuming from a
/// checkpoint replays exactly the same stream. Writes periodic checkpoints,
/// a final checkpoint and one JSON line per step to `out_dir`.
pub fn fit(
    state: &mut TrainState,
    dataset: Arc<Dataset>,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepReport),
) -> Result<FitOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| FraError::io(out_dir, e))?;
    let config_path = out_dir.join("config.toml");
    fs::write(&config_path, state.config.to_toml()).map_err(|e| FraError::io(&config_path, e))?;
    let manifest_path = out_dir.join("manifest.json");
    let manifest = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&manifest_path, manifest).map_err(|e| FraError::io(&manifest_path, e))?;

    let log_path = out_dir.join(LOG_FILE);
    let mut log = open_log(&log_path, state.step)?;
    let total = state.config.train.total_steps;
    let (tx, rx) = sync_channel::<Prepared>(state.config.train.prefetch);
    let producer = {
        let dataset = Arc::clone(&dataset);
        let aug = state.config.augmentation.clone();
        let (seed, batch_size, first) = (state.config.seed, state.config.train.batch_size, state.step);
        thread::spawn(move || {
            for step in first..total {
                let idx = dataset.batch_indices(seed, batch_size, step);
                let batch = dataset.batch(&idx);
                let views = generate_views(&batch, &aug, step_seed(seed, step));
                if tx.send(Prepared { step, views }).is_err() {
                    break;
                }
            }
        })
    };

    let mut reports = Vec::new();
    let every = state.config.train.checkpoint_every;
    let mut result = Ok(());
    for prepared in rx.iter() {
        debug_assert_eq!(prepared.step, state.step);
        let report = prepared.views.and_then(|(a, b)| state.train_on_views(&a.pixels, &b.pixels));
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                if let FraError::NonFinite { snapshot, .. } = &e {
                    let p = out_dir.join(format!("nonfinite_step{:06}.json", state.step));
                    let _ = fs::write(&p, snapshot);
                }
                result = Err(e);
                break;
            }
        };
        let line = serde_json::to_string(&report).expect("report serializes");
        writeln!(log, "{line}").map_err(|e| FraError::io(&log_path, e))?;
        on_step(&report);
        reports.push(report);
        if every > 0 && state.step % every == 0 && state.step < total {
            state.checkpoint().save(&out_dir.join(checkpoint_name(state.step)))?;
        }
    }
    drop(rx);
    producer.join().map_err(|_| FraError::Dataset("batch producer thread panicked".into()))?;
    result?;
    log.flush().map_err(|e| FraError::io(&log_path, e))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    state.checkpoint().save(&final_path)?;
    Ok(FitOutcome { final_checkpoint: final_path, reports })
}

/// Opens the step log for appending, dropping records past `from_step` so
/// a resumed run does not duplicate steps.
fn open_log(path: &Path, from_step: u64) -> Result<File> {
    if from_step == 0 || !path.exists() {
        return File::create(path).map_err(|e| FraError::io(path, e));
    }
    let text = fs::read_to_string(path).map_err(|e| FraError::io(path, e))?;
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| serde_json::from_str::<StepReport>(l).map(|r| r.step <= from_step).unwrap_or(false))
        .collect();
    let mut body = kept.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| FraError::io(path, e))?;
    OpenOptions::new().append(true).open(path).map_err(|e| FraError::io(path, e))
}

/// Reads a step log written by [`fit`].
pub fn read_log(path: &Path) -> Result<Vec<StepReport>> {
    let text = fs::read_to_string(path).map_err(|e| FraError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| FraError::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_hit_their_endpoints() {
        let cfg = TrainConfig { total_steps: 100, warmup_steps: 10, base_lr: 0.2, ..Default::default() };
        assert!((learning_rate(&cfg, 0) - 0.02).abs() < 1e-12);
        assert!((learning_rate(&cfg, 9) - 0.2).abs() < 1e-12);
        assert!((learning_rate(&cfg, 10) - 0.2).abs() < 1e-12);
        assert!(learning_rate(&cfg, 99) < 1e-3);
        assert_eq!(ema_momentum(&cfg, 0), cfg.tau_base);
        assert!((ema_momentum(&cfg, 100) - cfg.tau_final).abs() < 1e-15);
        let mid = ema_momentum(&cfg, 50);
        assert!(mid > cfg.tau_base && mid < cfg.tau_final);
        let constant = TrainConfig { tau_schedule: TauSchedule::Constant, ..cfg };
        assert_eq!(ema_momentum(&constant, 70), constant.tau_base);
    }

    #[test]
    fn step_seeds_differ() {
        assert_ne!(step_seed(1, 0), step_seed(1, 1));
        assert_ne!(step_seed(1, 0), step_seed(2, 0));
        assert_eq!(step_seed(3, 4), step_seed(3, 4));
    }
}
