use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsm::{FeatureMap, Instance};
use crate::model::{LayerPattern, ModelConfig};
use crate::parallel::ParallelConfig;
use crate::tensor::Precision;

/// Environment variable naming the directory relative output paths resolve
/// against.
pub const OUTPUT_ROOT_ENV: &str = "LMOE_OUTPUT_ROOT";

/// Model selection: a named preset with optional overrides, or a complete
/// explicit config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub instance: Instance,
    pub pattern: Option<LayerPattern>,
    pub hidden: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub num_experts: Option<usize>,
    pub num_active: Option<usize>,
    pub vocab_size: Option<usize>,
    pub chunk_size: Option<usize>,
    pub feature_map: Option<FeatureMap>,
    pub normalizer: Option<bool>,
    pub tie_embeddings: Option<bool>,
    pub aux_loss_weight: Option<f64>,
    /// Takes precedence over everything above when present.
    pub explicit: Option<ModelConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            instance: Instance::Bla,
            pattern: None,
            hidden: None,
            ffn_dim: None,
            num_heads: None,
            num_experts: None,
            num_active: None,
            vocab_size: None,
            chunk_size: None,
            feature_map: None,
            normalizer: None,
            tie_embeddings: None,
            aux_loss_weight: None,
            explicit: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        if let Some(cfg) = &self.explicit {
            cfg.validate()?;
            return Ok(cfg.clone());
        }
        let mut cfg = ModelConfig::preset(&self.preset, self.instance)?;
        let hidden = self.hidden.unwrap_or(cfg.hidden);
        let heads = self.num_heads.unwrap_or(cfg.num_heads);
        if hidden != cfg.hidden || heads != cfg.num_heads {
            cfg = ModelConfig::new(hidden, cfg.ffn_dim, heads, cfg.pattern.clone(), self.instance)
                .with_experts(cfg.num_experts, cfg.num_active)
                .with_vocab(cfg.vocab_size);
        }
        if let Some(p) = &self.pattern {
            cfg = cfg.with_pattern(p.clone());
        }
        if let Some(f) = self.ffn_dim {
            cfg.ffn_dim = f;
        }
        let (experts, active) = (self.num_experts.unwrap_or(cfg.num_experts), self.num_active.unwrap_or(cfg.num_active));
        cfg = cfg.with_experts(experts, active);
        if let Some(v) = self.vocab_size {
            cfg.vocab_size = v;
        }
        if let Some(c) = self.chunk_size {
            cfg.chunk_size = c;
        }
        if let Some(f) = self.feature_map {
            cfg = cfg.with_feature_map(f);
        }
        if let Some(n) = self.normalizer {
            cfg = cfg.with_normalizer(n);
        }
        if let Some(t) = self.tie_embeddings {
            cfg.tie_embeddings = t;
        }
        if let Some(w) = self.aux_loss_weight {
            cfg.aux_loss_weight = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

/// Learning-rate schedule: linear warmup, then cosine decay to `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::named("A0.3B").expect("known preset")
    }
}

impl LrSchedule {
    /// Cosine schedules of the two published model sizes.
    pub fn named(name: &str) -> Result<Self> {
        let (lr, min_lr) = match name {
            "A0.3B" | "A0.3B-toy" => (1e-4, 1e-5),
            "A1B" | "A1B-toy" => (1e-5, 1e-6),
            _ => return Err(Error::Config(format!("no learning-rate preset for `{name}`"))),
        };
        Ok(Self { kind: ScheduleKind::Cosine, lr, min_lr, warmup_steps: 0 })
    }

    /// Rate for 0-based `step` of `total`.
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.kind {
            ScheduleKind::Constant => self.lr,
            ScheduleKind::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mqar,
    /// Byte-level language modelling of a text file.
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub task: Task,
    /// Window length for the text task.
    pub seq_len: usize,
    pub text_path: Option<PathBuf>,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub log_every: usize,
    pub precision: Precision,
    pub eval_every: usize,
    pub checkpoint: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            task: Task::Mqar,
            seq_len: 64,
            text_path: None,
            schedule: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            log_every: 10,
            precision: Precision::F32,
            eval_every: 0,
            checkpoint: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MqarSection {
    pub pairs: usize,
    pub queries: usize,
    /// Defaults to the model vocabulary.
    pub vocab: Option<usize>,
    pub train_examples: usize,
    pub eval_examples: usize,
}

impl Default for MqarSection {
    fn default() -> Self {
        Self { pairs: 4, queries: 4, vocab: None, train_examples: 2048, eval_examples: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub instance: Instance,
    pub lengths: Vec<usize>,
    /// Tokens processed per measurement, split into `budget / length`
    /// sequences.
    pub token_budget: usize,
    pub head_dim: usize,
    pub chunk_size: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            instance: Instance::Gla,
            lengths: vec![256, 512, 1024, 2048],
            token_budget: 4096,
            head_dim: 16,
            chunk_size: 64,
            repeats: 3,
        }
    }
}

/// Everything a CLI command reads, from one TOML file. Sections not used by
/// a command are ignored by it but still validated for unknown keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub mqar: MqarSection,
    pub parallel: ParallelConfig,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `output_dir` resolved against `root` when relative, defaulting to
    /// `root/<default_name>`.
    pub fn output_dir_in(&self, root: &Path, default_name: &str) -> PathBuf {
        match &self.output_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(default_name),
        }
    }

    /// [`output_dir_in`](Self::output_dir_in) with the root taken from
    /// [`OUTPUT_ROOT_ENV`], else the working directory.
    pub fn output_dir(&self, default_name: &str) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        self.output_dir_in(&root, default_name)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.resolve()?;
        self.parallel.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.log_every == 0 {
            return Err(Error::Config("train.batch_size and train.log_every must be positive".into()));
        }
        if t.batch_size % self.parallel.dp != 0 {
            return Err(Error::Config(format!(
                "train.batch_size {} is not divisible by parallel.dp {}",
                t.batch_size, self.parallel.dp
            )));
        }
        if !(t.schedule.lr > 0.0 && t.schedule.min_lr >= 0.0 && t.schedule.min_lr <= t.schedule.lr) {
            return Err(Error::Config("learning rates must satisfy 0 <= min_lr <= lr, lr > 0".into()));
        }
        let len = self.sequence_len();
        if (t.batch_size / self.parallel.dp * len) % self.parallel.sp != 0 {
            return Err(Error::Config(format!(
                "{} tokens per data shard do not split evenly over parallel.sp = {}",
                t.batch_size / self.parallel.dp * len,
                self.parallel.sp
            )));
        }
        match t.task {
            Task::Mqar => {
                let vocab = self.mqar.vocab.unwrap_or(model.vocab_size);
                if vocab > model.vocab_size {
                    return Err(Error::Config(format!(
                        "mqar.vocab {vocab} exceeds the model vocabulary {}",
                        model.vocab_size
                    )));
                }
            }
            Task::Text => {
                if t.text_path.is_none() {
                    return Err(Error::Config("train.task = \"text\" needs train.text_path".into()));
                }
                if model.vocab_size < super::data::BYTE_VOCAB {
                    return Err(Error::Config(format!(
                        "byte-level text needs a vocabulary of at least {}",
                        super::data::BYTE_VOCAB
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tokens per training example.
    pub fn sequence_len(&self) -> usize {
        match self.train.task {
            Task::Mqar => 2 * self.mqar.pairs + self.mqar.queries,
            Task::Text => self.train.seq_len,
        }
    }
}
