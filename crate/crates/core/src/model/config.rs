use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsm::{FeatureMap, Instance, LsmSpec};
use crate::moe::MoeConfig;

/// Block kinds in stacking order: `L` is an LSM block, `N` a softmax
/// attention block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerPattern(String);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Lsm,
    Attention,
}

impl LayerPattern {
    pub fn layers(&self) -> impl Iterator<Item = LayerKind> + '_ {
        self.0.chars().map(|c| if c == 'L' { LayerKind::Lsm } else { LayerKind::Attention })
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `n` LSM blocks.
    pub fn pure(n: usize) -> Self {
        Self("L".repeat(n))
    }

    /// `n` blocks with every `every`-th one attention.
    pub fn hybrid(n: usize, every: usize) -> Self {
        Self((1..=n).map(|i| if every > 0 && i % every == 0 { 'N' } else { 'L' }).collect())
    }
}

impl FromStr for LayerPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Config("layer pattern must not be empty".into()));
        }
        if let Some(bad) = s.chars().find(|c| !matches!(c, 'L' | 'N')) {
            return Err(Error::Config(format!("layer pattern `{s}` contains `{bad}`; only L and N are allowed")));
        }
        Ok(Self(s.to_string()))
    }
}

impl TryFrom<String> for LayerPattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerPattern> for String {
    fn from(p: LayerPattern) -> String {
        p.0
    }
}

impl fmt::Display for LayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub num_active: usize,
    pub vocab_size: usize,
    /// Head spec; `d_k = d_v = hidden / num_heads`.
    pub lsm: LsmSpec,
    pub pattern: LayerPattern,
    pub norm_eps: f64,
    pub aux_loss_weight: f64,
    pub tie_embeddings: bool,
    pub chunk_size: usize,
}

impl ModelConfig {
    pub fn new(hidden: usize, ffn_dim: usize, num_heads: usize, pattern: LayerPattern, instance: Instance) -> Self {
        let d = hidden / num_heads.max(1);
        Self {
            hidden,
            ffn_dim,
            num_heads,
            num_layers: pattern.len(),
            num_experts: 4,
            num_active: 2,
            vocab_size: 256,
            lsm: LsmSpec::new(instance, d, d),
            pattern,
            norm_eps: 1e-6,
            aux_loss_weight: 0.01,
            tie_embeddings: true,
            chunk_size: 64,
        }
    }

    pub fn with_experts(mut self, num_experts: usize, num_active: usize) -> Self {
        self.num_experts = num_experts;
        self.num_active = num_active;
        self
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab_size = vocab;
        self
    }

    pub fn with_pattern(mut self, pattern: LayerPattern) -> Self {
        self.num_layers = pattern.len();
        self.pattern = pattern;
        self
    }

    pub fn with_instance(mut self, instance: Instance) -> Self {
        self.lsm = LsmSpec::new(instance, self.lsm.d_k, self.lsm.d_v);
        self
    }

    pub fn with_feature_map(mut self, fm: FeatureMap) -> Self {
        self.lsm.feature_map = fm;
        self
    }

    pub fn with_normalizer(mut self, on: bool) -> Self {
        self.lsm.use_normalizer = on;
        self
    }

    /// Named shapes at 1/8 of the published hidden sizes, keeping the
    /// ratios, head and layer counts, and expert counts.
    pub fn preset(name: &str, instance: Instance) -> Result<Self> {
        let cfg = match name {
            "A0.3B-toy" => Self::new(128, 112, 8, LayerPattern::pure(12), instance).with_experts(64, 8),
            "A1B-toy" => Self::new(256, 128, 16, LayerPattern::pure(16), instance).with_experts(64, 8),
            "tiny" => Self::new(16, 16, 2, LayerPattern::pure(2), instance).with_experts(4, 2).with_vocab(32),
            _ => return Err(Error::Config(format!("unknown model preset `{name}` (A0.3B-toy, A1B-toy, tiny)"))),
        };
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            num_experts: self.num_experts,
            top_k: self.num_active,
            hidden: self.hidden,
            ffn_dim: self.ffn_dim,
            aux_loss_weight: self.aux_loss_weight,
        }
    }

    /// Spec of head `h`; differs between heads only for fixed-decay presets.
    pub fn head_spec(&self, h: usize) -> LsmSpec {
        self.lsm.for_head(h, self.num_heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be a positive multiple of num_heads ({})",
                self.hidden, self.num_heads
            )));
        }
        if self.pattern.len() != self.num_layers {
            return Err(Error::Config(format!(
                "pattern `{}` has {} layers but num_layers is {}",
                self.pattern,
                self.pattern.len(),
                self.num_layers
            )));
        }
        let d = self.head_dim();
        if self.lsm.d_k != d || self.lsm.d_v != d {
            return Err(Error::Config(format!(
                "lsm head dims {}×{} do not match hidden/num_heads = {d}",
                self.lsm.d_k, self.lsm.d_v
            )));
        }
        if self.vocab_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("vocab_size and chunk_size must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        self.lsm.validate()?;
        self.moe().validate()
    }
}
