//! Benchmark configuration: one TOML file describes the whole grid.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use attrbench::attribution::{LabReplacement, Method, MethodSettings};
use attrbench::data::{TaskName, TaskSpec};
use attrbench::faithfulness::{validate_k_grid, DEFAULT_K_GRID};
use attrbench::model::{Architecture, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Where every artifact is written. Not part of the config hash.
    pub output_dir: PathBuf,
    pub tasks: Vec<String>,
    pub models: Vec<String>,
    pub methods: Vec<String>,
    /// Records drawn from each task's test split for attribution.
    pub interpret_size: usize,
    /// Worker threads; 0 uses every core. Not part of the config hash.
    pub workers: usize,
    pub k_grid: Vec<f64>,
    pub seeds: Seeds,
    pub data: DataSettings,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub mask: MaskSettings,
    pub method_settings: MethodSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub bench: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_visits: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rho: f64,
    pub eps: f64,
    pub class_weight_power: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSettings {
    pub lab_replacement: LabReplacement,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("bench-out"),
            tasks: TaskName::ALL.iter().map(|t| t.as_str().to_string()).collect(),
            models: Architecture::ALL.iter().map(|a| a.as_str().to_string()).collect(),
            methods: Method::BENCHMARK.iter().map(|m| m.as_str().to_string()).collect(),
            interpret_size: 1000,
            workers: 0,
            k_grid: DEFAULT_K_GRID.to_vec(),
            seeds: Seeds::default(),
            data: DataSettings::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            mask: MaskSettings::default(),
            method_settings: MethodSettings::default(),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 1, train: 2, bench: 3 }
    }
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { train_size: 10_000, test_size: 2_000 }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { embed_dim: 64, hidden_dim: 64, n_heads: 4, n_layers: 2, max_visits: 32, dropout: 0.0 }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            rho: t.rho,
            eps: t.eps,
            class_weight_power: t.class_weight_power,
        }
    }
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.tasks.is_empty(), "config lists no tasks");
        ensure!(!self.models.is_empty(), "config lists no models");
        ensure!(!self.methods.is_empty(), "config lists no methods");
        self.task_names()?;
        self.architectures()?;
        self.method_list()?;
        ensure!(self.data.train_size > 0 && self.data.test_size > 0, "train and test splits must be non-empty");
        ensure!(self.interpret_size > 0, "interpret_size must be positive");
        ensure!(
            self.interpret_size <= self.data.test_size,
            "interpret_size {} exceeds test_size {}",
            self.interpret_size,
            self.data.test_size
        );
        validate_k_grid(&self.k_grid)?;
        ensure!(self.train.epochs > 0 && self.train.batch_size > 0, "epochs and batch_size must be positive");
        for task in self.task_names()? {
            for arch in self.architectures()? {
                self.model_config(&TaskSpec::new(task), arch).validate()?;
            }
        }
        Ok(())
    }

    pub fn task_names(&self) -> Result<Vec<TaskName>> {
        parse_unique(&self.tasks, "task")
    }

    pub fn architectures(&self) -> Result<Vec<Architecture>> {
        parse_unique(&self.models, "model")
    }

    pub fn method_list(&self) -> Result<Vec<Method>> {
        parse_unique(&self.methods, "method")
    }

    pub fn model_config(&self, task: &TaskSpec, arch: Architecture) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            max_visits: m.max_visits,
            dropout: m.dropout,
            ..ModelConfig::new(arch, task.schema.vocab_size, task.schema.n_labs(), task.n_classes)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: self.seeds.train,
            rho: t.rho,
            eps: t.eps,
            class_weight_power: t.class_weight_power,
        }
    }

    pub fn override_seeds(&mut self, seed: u64) {
        self.seeds = Seeds { data: seed, train: seed, bench: seed };
    }

    /// SHA-256 over the canonical JSON of every setting that affects
    /// results; the output directory and worker count are left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.workers = 0;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn parse_unique<T: std::str::FromStr<Err = attrbench::Error> + PartialEq>(names: &[String], what: &str) -> Result<Vec<T>> {
    let mut out: Vec<T> = Vec::with_capacity(names.len());
    for name in names {
        let parsed = name.parse::<T>().with_context(|| format!("unknown {what} '{name}'"))?;
        if out.contains(&parsed) {
            bail!("{what} '{name}' listed twice");
        }
        out.push(parsed);
    }
    Ok(out)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
