//! Sequence classifiers over visit sequences.
//!
//! Three architectures share one input embedding. Every visit becomes a
//! vector `Σ code embeddings + W_lab · normalised labs + W_time · time
//! features + b`, then:
//!
//! - `transformer`: reverse-index positional embeddings, post-norm
//!   self-attention blocks, mean pooling.
//! - `stage-recurrent`: a GRU whose update gate is damped by
//!   `exp(-Δt / τ)` with a learnable per-unit `τ`; the last hidden state is
//!   the readout.
//! - `stage-attn`: the same recurrent cell followed by one multi-head
//!   attention layer over the hidden states and mean pooling.
//!
//! Padding visits (no codes and no labs) are dropped before the forward
//! pass, so trailing padding never changes the logits.

mod checkpoint;
mod forward;
mod metrics;
mod params;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabStats;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{ForwardOptions, ForwardTrace, GateFlags, InputLeaf, PreparedRecord, Slot};
pub use forward::argmax;
pub use metrics::{evaluate, f1_scores, pr_auc, roc_auc, EvalMetrics};
pub use params::ParamStore;
pub use train::{train, TrainConfig, TrainOutcome};

/// Number of time features per visit.
pub const N_TIME_FEATURES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Transformer,
    StageRecurrent,
    StageAttn,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Transformer, Architecture::StageRecurrent, Architecture::StageAttn];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Transformer => "transformer",
            Architecture::StageRecurrent => "stage-recurrent",
            Architecture::StageAttn => "stage-attn",
        }
    }

    pub fn has_attention(self) -> bool {
        !matches!(self, Architecture::StageRecurrent)
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, Architecture::Transformer)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Architecture::Transformer),
            "stage-recurrent" | "stagenet" => Ok(Architecture::StageRecurrent),
            "stage-attn" | "stageattn" => Ok(Architecture::StageAttn),
            other => Err(Error::InvalidConfig(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub n_labs: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Transformer blocks; stage-attn always has exactly one attention layer.
    pub n_layers: usize,
    pub n_classes: usize,
    pub max_visits: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, vocab_size: usize, n_labs: usize, n_classes: usize) -> Self {
        Self {
            architecture,
            vocab_size,
            n_labs,
            embed_dim: 64,
            hidden_dim: 64,
            n_heads: 4,
            n_layers: 2,
            n_classes,
            max_visits: 32,
            dropout: 0.0,
        }
    }

    /// Width of the sequence that attention runs over.
    pub fn attention_dim(&self) -> usize {
        match self.architecture {
            Architecture::Transformer => self.embed_dim,
            _ => self.hidden_dim,
        }
    }

    pub fn n_attention_layers(&self) -> usize {
        match self.architecture {
            Architecture::Transformer => self.n_layers,
            Architecture::StageRecurrent => 0,
            Architecture::StageAttn => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab-size must include PAD and at least one code");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.n_classes < 2 || self.max_visits == 0 {
            return bad("embed-dim, hidden-dim, max-visits must be positive and n-classes at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.architecture.has_attention() {
            if self.n_heads == 0 || self.attention_dim() % self.n_heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "attention width {} not divisible by {} heads",
                    self.attention_dim(),
                    self.n_heads
                )));
            }
            if self.architecture == Architecture::Transformer && self.n_layers == 0 {
                return bad("transformer needs at least one layer");
            }
        }
        Ok(())
    }
}

/// A classifier with its parameters and the lab statistics it normalises
/// with.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub lab_stats: LabStats,
    pub seed: u64,
}

impl Model {
    /// Deterministic initialisation from `(config, seed)`. Lab statistics
    /// default to the identity until training sets them.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = forward::init_params(&config, &mut rng);
        let lab_stats = LabStats::identity(config.n_labs);
        Ok(Self { config, params, lab_stats, seed })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }
}
