//! Run configuration: one TOML tree with built-in defaults, an optional
//! file layer and `section.key=value` command-line overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augmentation::AugmentationConfig;
use crate::data::SyntheticFaceSpec;
use crate::error::{FraError, Result};
use crate::losses::LossWeights;
use crate::networks::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_memax: f64,
    /// Softmax temperature applied to cosine assignments (student and teacher).
    pub t_assign: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_c: w.lambda_c,
            lambda_r: w.lambda_r,
            lambda_memax: w.lambda_memax,
            t_assign: 0.1,
            sinkhorn_iters: 3,
            sinkhorn_epsilon: 0.05,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_c: self.lambda_c, lambda_r: self.lambda_r, lambda_memax: self.lambda_memax }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.t_assign > 0.0) {
            return Err(FraError::Config(format!("loss.t_assign must be positive, got {}", self.t_assign)));
        }
        if self.sinkhorn_iters == 0 || !(self.sinkhorn_epsilon > 0.0) {
            return Err(FraError::Config("loss.sinkhorn_iters must be >= 1 and loss.sinkhorn_epsilon > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adamw,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSchedule {
    /// Cosine increase from `tau_base` to `tau_final`.
    Cosine,
    /// `tau_base` throughout.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub optimizer: OptimizerChoice,
    pub sgd_momentum: f64,
    pub tau_base: f64,
    pub tau_final: f64,
    pub tau_schedule: TauSchedule,
    /// Steps between periodic checkpoints (0 = final only).
    pub checkpoint_every: u64,
    pub out_dir: String,
    /// Batches prepared ahead of the training loop.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: 100,
            optimizer: OptimizerChoice::Adamw,
            sgd_momentum: 0.9,
            tau_base: 0.996,
            tau_final: 1.0,
            tau_schedule: TauSchedule::Cosine,
            checkpoint_every: 500,
            out_dir: "runs/fra".into(),
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(FraError::Config(m));
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return err(format!(
                "train.warmup_steps ({}) must be smaller than train.total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size < 2 {
            return err(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return err("train.base_lr must be positive and train.weight_decay non-negative".into());
        }
        for (k, t) in [("tau_base", self.tau_base), ("tau_final", self.tau_final)] {
            if !(0.0..=1.0).contains(&t) {
                return err(format!("train.{k} must lie in [0, 1], got {t}"));
            }
        }
        if self.prefetch == 0 {
            return err("train.prefetch must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image directory when `source = "folder"`.
    pub folder: String,
    /// Images generated when `source = "synthetic"`.
    pub num_images: usize,
    /// Side length images are resized to on load.
    pub image_size: usize,
    pub synthetic: SyntheticFaceSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            folder: String::new(),
            num_images: 2048,
            image_size: 96,
            synthetic: SyntheticFaceSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_weight_decay: f64,
    pub probe_train: usize,
    pub probe_test: usize,
    /// Fraction of heatmap mass kept when thresholding for discovery.
    pub discovery_quantile: f64,
    pub discovery_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_epochs: 100,
            probe_lr: 0.5,
            probe_weight_decay: 1e-4,
            probe_train: 512,
            probe_test: 512,
            discovery_quantile: 0.5,
            discovery_images: 128,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Keys whose defaults come from the method description; every other
/// default is an implementation choice.
const METHOD_DEFAULTS: [&str; 5] =
    ["model.num_queries", "model.decoder_depth", "loss.lambda_c", "loss.lambda_r", "train.tau_base"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if self.data.source == DataSource::Folder && self.data.folder.is_empty() {
            return Err(FraError::Config("data.folder must be set when data.source = \"folder\"".into()));
        }
        if !(0.0 < self.eval.discovery_quantile && self.eval.discovery_quantile <= 1.0) {
            return Err(FraError::Config("eval.discovery_quantile must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        resolve_layers(Some(text), &[])
    }

    /// `"method"` or `"chosen"` for a dotted key.
    pub fn provenance(key: &str) -> &'static str {
        if METHOD_DEFAULTS.contains(&key) {
            "method"
        } else {
            "chosen"
        }
    }

    /// Resolved config as TOML with a provenance comment after each leaf.
    pub fn annotated(&self) -> String {
        let mut out = String::new();
        for line in self.to_toml().lines() {
            out.push_str(line);
            out.push('\n');
        }
        let keys = leaf_keys(&Value::Table(self.to_table()));
        out.push_str("\n# provenance of defaults\n");
        for k in keys {
            out.push_str(&format!("# {k}: {}\n", Self::provenance(&k)));
        }
        out
    }

    fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config converts to TOML") {
            Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }
}

/// Resolves defaults < file < overrides. Overrides look like
/// `loss.lambda_r=0` or `model.widths=[8,16,32,64]`.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match file {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| FraError::io(p, e))?),
        None => None,
    };
    resolve_layers(text.as_deref(), overrides).map_err(|e| match (e, file) {
        (FraError::Config(m), Some(p)) => FraError::Config(format!("{} ({})", m, p.display())),
        (e, _) => e,
    })
}

fn resolve_layers(file_text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let defaults = RunConfig::default().to_table();
    let valid = leaf_keys(&Value::Table(defaults.clone()));
    let mut tree = defaults;
    if let Some(text) = file_text {
        let file: Table = text.parse().map_err(|e: toml::de::Error| FraError::Config(format!("cannot parse config: {e}")))?;
        merge(&mut tree, file, "", &valid)?;
    }
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| FraError::Config(format!("override {ov:?} is not of the form key=value")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut layer = Table::new();
        insert_dotted(&mut layer, key, value);
        merge(&mut tree, layer, "", &valid)?;
    }
    let cfg: RunConfig =
        Value::Table(tree).try_into().map_err(|e: toml::de::Error| FraError::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn insert_dotted(table: &mut Table, key: &str, value: Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let entry = table.entry(head.to_string()).or_insert_with(|| Value::Table(Table::new()));
            if let Value::Table(t) = entry {
                insert_dotted(t, rest, value);
            }
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}

fn leaf_keys(v: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Table(t) => {
                for (k, child) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &key, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(v, "", &mut out);
    out
}

fn nearest(key: &str, valid: &[String]) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = valid.iter().map(|v| (strsim::jaro_winkler(key, v), v)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(3).map(|(_, v)| v.clone()).collect()
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerces `new` to the type of `old` where that is lossless (integer to float).
fn coerce(old: &Value, new: Value, key: &str) -> Result<Value> {
    match (old, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(o), Value::Array(n)) => {
            if o.len() != n.len() {
                return Err(FraError::Config(format!("{key}: expected an array of {} values, got {}", o.len(), n.len())));
            }
            let items = o.iter().zip(n).map(|(a, b)| coerce(a, b, key)).collect::<Result<Vec<_>>>()?;
            Ok(Value::Array(items))
        }
        (o, n) if std::mem::discriminant(o) == std::mem::discriminant(&n) => Ok(n),
        (o, n) => Err(FraError::Config(format!("{key}: expected {}, got {} ({n})", type_name(o), type_name(&n)))),
    }
}

fn merge(base: &mut Table, layer: Table, prefix: &str, valid: &[String]) -> Result<()> {
    for (k, v) in layer {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(existing) = base.get_mut(&k) else {
            let hint = nearest(&key, valid);
            return Err(FraError::Config(format!("unknown key `{key}`; did you mean {}?", hint.join(", "))));
        };
        match (existing, v) {
            (Value::Table(bt), Value::Table(lt)) => merge(bt, lt, &key, valid)?,
            (Value::Table(_), other) => {
                return Err(FraError::Config(format!("{key}: expected a table, got {}", type_name(&other))))
            }
            (slot, v) => *slot = coerce(slot, v, &key)?,
        }
    }
    Ok(())
}
