//! Run configuration: `key = value` lines grouped into sections (TOML).
//!
//! Every key is unique across sections, so a key maps one-to-one onto a
//! `--kebab-case` flag and an `MQIR_UPPER_CASE` environment variable.
//! Precedence, lowest first: built-in defaults, config file, environment, flags.

use std::path::{Path, PathBuf};

use mqir_core::data::{BatchConfig, SynthConfig};
use mqir_core::model::{ModelConfig, QueryMode};
use mqir_core::retrieval::EvalOptions;
use mqir_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "MQIR_";
pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key \"{0}\"")]
    UnknownKey(String),
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("bad value for {key}: {msg}")]
    BadValue { key: String, msg: String },
    #[error("config file {path}: {msg}")]
    File { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Seeds synthesis, initialization, batch order and dropout.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scenes: usize,
    pub group_size: usize,
    pub grid: usize,
    pub objects_per_scene: usize,
    /// Region slots per image (N).
    pub regions: usize,
    pub feature_dim: usize,
    pub trace_noise: f64,
    pub feature_noise: f64,
    pub sample_period: f64,
    pub ticks_per_word: usize,
    /// Groups held out for evaluation.
    pub eval_groups: usize,
    pub split_seed: u64,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub filter: usize,
    pub embed_hidden: usize,
    pub pooler_hidden: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    /// Query length (K).
    pub max_tokens: usize,
    pub init_std: f64,
    /// Feed trace boxes to the query tower (training) and build them from traces (evaluation).
    pub use_traces: bool,
    /// Mask the caption and keep only the boxes.
    pub trace_only: bool,
    pub use_positions: bool,
    pub use_locations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    /// 0 means no limit.
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub decay_factor: f64,
    pub decay_every: f64,
    pub clip_norm: f64,
    pub permute_regions: bool,
    /// Epoch checkpoint cadence; 0 keeps only the final and best checkpoints.
    pub checkpoint_every: usize,
    /// Validation cadence in epochs for best-checkpoint selection; 0 disables it.
    pub eval_every: usize,
    /// Number of group re-splits to train and evaluate; 0 trains once on the given split.
    pub resplits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub t_p: f64,
    pub s_p: f64,
    pub folds: usize,
    /// Ranked results per query.
    pub k: usize,
    pub eval_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: String,
    pub narratives: String,
    pub features: String,
    pub scene_file: String,
    pub train_narratives: String,
    pub train_features: String,
    pub eval_narratives: String,
    pub eval_features: String,
    /// Empty: build from the training captions (train) or look beside the checkpoint.
    pub vocab: String,
    pub checkpoint: String,
    /// Empty: encode `features` on startup.
    pub index: String,
    /// Checkpoint whose matching weights seed training.
    pub init_from: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
    pub service: ServiceSection,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            scenes: s.scenes,
            group_size: s.group_size,
            grid: s.grid,
            objects_per_scene: s.objects_per_scene,
            regions: s.regions,
            feature_dim: s.feature_dim,
            trace_noise: s.trace_noise,
            feature_noise: s.feature_noise,
            sample_period: s.sample_period,
            ticks_per_word: s.ticks_per_word,
            eval_groups: 16,
            split_seed: 0,
            vocab_size: 1000,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            image_layers: m.image_layers,
            text_layers: m.text_layers,
            heads: m.heads,
            filter: m.filter,
            embed_hidden: m.embed_hidden,
            pooler_hidden: m.pooler_hidden,
            embed_dim: m.embed_dim,
            dropout: m.dropout,
            max_tokens: m.max_tokens,
            init_std: m.init_std,
            use_traces: true,
            trace_only: false,
            use_positions: m.use_positions,
            use_locations: m.use_locations,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            max_steps: 0,
            batch_size: 32,
            lr: t.base_lr,
            warmup_epochs: t.warmup_epochs,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            clip_norm: t.clip_norm,
            permute_regions: true,
            checkpoint_every: 10,
            eval_every: 10,
            resplits: 0,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self { t_p: e.t_p, s_p: e.s_p, folds: 1, k: e.keep, eval_batch_size: e.batch_size }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        let d = |f: &str| format!("data/{f}");
        Self {
            out_dir: "runs".into(),
            narratives: d("all.jsonl"),
            features: d("features.bin"),
            scene_file: d("scenes.json"),
            train_narratives: d("train.jsonl"),
            train_features: d("train_features.bin"),
            eval_narratives: d("eval.jsonl"),
            eval_features: d("eval_features.bin"),
            vocab: String::new(),
            checkpoint: String::new(),
            index: String::new(),
            init_from: String::new(),
        }
    }
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080 }
    }
}

/// What a key accepts, taken from its default value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Bool,
    Int,
    Float,
    Str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyInfo {
    pub section: String,
    pub key: String,
    pub kind: Kind,
    pub default: String,
}

impl KeyInfo {
    pub fn flag(&self) -> String {
        self.key.replace('_', "-")
    }

    pub fn env(&self) -> String {
        format!("{ENV_PREFIX}{}", self.key.to_uppercase())
    }
}

fn kind_of(v: &Value) -> Kind {
    match v {
        Value::Boolean(_) => Kind::Bool,
        Value::Integer(_) => Kind::Int,
        Value::Float(_) => Kind::Float,
        _ => Kind::Str,
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn table_of(cfg: &RunConfig) -> Table {
    Table::try_from(cfg).expect("run config serializes to a table")
}

/// Every key in section order.
pub fn keys() -> Vec<KeyInfo> {
    let mut out = Vec::new();
    for (section, body) in table_of(&RunConfig::default()) {
        if let Value::Table(t) = body {
            for (key, v) in t {
                out.push(KeyInfo { section: section.clone(), key, kind: kind_of(&v), default: render(&v) });
            }
        }
    }
    out
}

pub fn key_info(key: &str) -> Option<KeyInfo> {
    keys().into_iter().find(|k| k.key == key)
}

/// Parses a raw flag or environment string into the key's type.
pub fn parse_value(info: &KeyInfo, raw: &str) -> Result<Value, ConfigError> {
    let bad = |msg: &str| ConfigError::BadValue { key: info.key.clone(), msg: format!("{msg}, got \"{raw}\"") };
    Ok(match info.kind {
        Kind::Bool => Value::Boolean(match raw.trim().to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            _ => return Err(bad("expected true or false")),
        }),
        Kind::Int => Value::Integer(raw.trim().parse().map_err(|_| bad("expected an integer"))?),
        Kind::Float => Value::Float(raw.trim().parse().map_err(|_| bad("expected a number"))?),
        Kind::Str => Value::String(raw.to_string()),
    })
}

/// Accumulates layers on top of the defaults.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    table: Table,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self { table: table_of(&RunConfig::default()) }
    }
}

impl ConfigBuilder {
    fn put(&mut self, info: &KeyInfo, value: Value) -> Result<(), ConfigError> {
        let value = match (info.kind, value) {
            (Kind::Float, Value::Integer(i)) => Value::Float(i as f64),
            (kind, v) if kind_of(&v) == kind => v,
            (_, v) => {
                return Err(ConfigError::BadValue {
                    key: info.key.clone(),
                    msg: format!("expected {:?}, got {}", info.kind, v.type_str()),
                })
            }
        };
        let section = self.table.get_mut(&info.section).and_then(Value::as_table_mut).expect("section exists");
        section.insert(info.key.clone(), value);
        Ok(())
    }

    /// Applies a parsed config file. Sections and keys must match the defaults.
    pub fn merge_table(&mut self, file: &Table) -> Result<(), ConfigError> {
        let known = keys();
        for (section, body) in file {
            let body = match body {
                Value::Table(t) => t,
                _ => return Err(ConfigError::Invalid(format!("top-level key \"{section}\" must be a [section]"))),
            };
            if !known.iter().any(|k| &k.section == section) {
                return Err(ConfigError::UnknownSection(section.clone()));
            }
            for (key, v) in body {
                let info = known
                    .iter()
                    .find(|k| &k.key == key && &k.section == section)
                    .ok_or_else(|| ConfigError::UnknownKey(format!("{section}.{key}")))?;
                self.put(info, v.clone())?;
            }
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::File { path: path.display().to_string(), msg: e.to_string() })?;
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::File { path: path.display().to_string(), msg: e.to_string() })?;
        self.merge_table(&table)
    }

    /// Applies `MQIR_*` variables. Unknown names under the prefix are rejected.
    pub fn merge_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let known = keys();
        for (name, raw) in vars {
            let Some(rest) = name.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let info = known
                .iter()
                .find(|k| k.key.to_uppercase() == rest)
                .ok_or_else(|| ConfigError::UnknownKey(name.as_ref().to_string()))?;
            self.put(info, parse_value(info, raw.as_ref())?)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let info = key_info(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        self.put(&info, parse_value(&info, raw)?)
    }

    pub fn build(self) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig =
            Value::Table(self.table).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn path_or_none(s: &str) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.train.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.eval.k == 0 {
            return fail("k must be positive");
        }
        if !(self.eval.t_p >= 0.0 && self.eval.s_p >= 0.0) {
            return fail("t_p and s_p must be non-negative");
        }
        if !(self.train.lr > 0.0) {
            return fail("lr must be positive");
        }
        if self.model.trace_only && !self.model.use_traces {
            return fail("trace_only needs use_traces");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// TOML text that reproduces this config when loaded.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn query_mode(&self) -> QueryMode {
        match (self.model.use_traces, self.model.trace_only) {
            (_, true) => QueryMode::TraceOnly,
            (true, false) => QueryMode::TextTrace,
            (false, false) => QueryMode::Text,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            scenes: d.scenes,
            group_size: d.group_size,
            grid: d.grid,
            objects_per_scene: d.objects_per_scene,
            regions: d.regions,
            feature_dim: d.feature_dim,
            trace_noise: d.trace_noise,
            feature_noise: d.feature_noise,
            sample_period: d.sample_period,
            ticks_per_word: d.ticks_per_word,
            seed: self.run.seed,
        }
    }

    /// Model shape for the given vocabulary and feature dimensions `(D_g, D_r, N)`.
    pub fn model_config(&self, vocab_size: usize, global_dim: usize, region_dim: usize, regions: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            d_model: m.d_model,
            image_layers: m.image_layers,
            text_layers: m.text_layers,
            heads: m.heads,
            filter: m.filter,
            embed_hidden: m.embed_hidden,
            pooler_hidden: m.pooler_hidden,
            embed_dim: m.embed_dim,
            dropout: m.dropout,
            global_dim,
            region_dim,
            max_tokens: m.max_tokens,
            regions,
            query_mode: self.query_mode(),
            use_positions: m.use_positions,
            use_locations: m.use_locations,
            init_std: m.init_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            max_steps: (t.max_steps > 0).then_some(t.max_steps),
            base_lr: t.lr,
            warmup_epochs: t.warmup_epochs,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            clip_norm: t.clip_norm,
            seed: self.run.seed,
        }
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            max_tokens: self.model.max_tokens,
            batch_size: self.train.batch_size,
            t_p: self.eval.t_p,
            s_p: self.eval.s_p,
            permute_regions: self.train.permute_regions,
            seed: self.run.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            use_traces: self.model.use_traces,
            t_p: self.eval.t_p,
            s_p: self.eval.s_p,
            batch_size: self.eval.eval_batch_size,
            keep: self.eval.k,
        }
    }

    pub fn vocab_path(&self) -> Option<PathBuf> {
        path_or_none(&self.paths.vocab)
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        path_or_none(&self.paths.checkpoint)
    }

    pub fn index_path(&self) -> Option<PathBuf> {
        path_or_none(&self.paths.index)
    }

    pub fn init_from_path(&self) -> Option<PathBuf> {
        path_or_none(&self.paths.init_from)
    }
}
