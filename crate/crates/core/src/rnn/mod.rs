//! Multi-layer LSTM/GRU language models: cell updates, traced forward
//! passes, unit ablation and the weight file format.

mod cell;
mod forward;
mod weights;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenLevel;

pub use cell::{gru_cell_step, lstm_cell_step, sigmoid, GateValues, LayerState};
pub use forward::{log_softmax, sequence_perplexity, AblationMask, ForwardTrace, LayerTrace, Perplexity, Record};
pub use weights::{
    decode_weights, encode_weights, load_weights, save_weights, weights_checksum, LayerWeights, Weights, FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum RnnError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },
    #[error("ablation unit ({layer}, {unit}) is outside the model")]
    MaskOutOfRange { layer: usize, unit: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("expected {expected} targets, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("trace has no log-probabilities")]
    MissingLogProbs,
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("payload checksum mismatch: manifest {expected:08x}, payload {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("tensor {0} has non-finite entries")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lstm,
    Gru,
}

impl Arch {
    pub fn n_gates(self) -> usize {
        self.gate_names().len()
    }

    /// Gate order inside the packed weight matrices.
    pub fn gate_names(self) -> &'static [&'static str] {
        match self {
            Arch::Lstm => &["i", "f", "o", "g"],
            Arch::Gru => &["z", "r", "n"],
        }
    }

    pub fn gate_index(self, name: &str) -> Option<usize> {
        self.gate_names().iter().position(|&g| g == name)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Lstm => "lstm",
            Arch::Gru => "gru",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" => Ok(Arch::Lstm),
            "gru" => Ok(Arch::Gru),
            other => Err(format!("unknown architecture `{other}` (expected lstm|gru)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub level: TokenLevel,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size of each layer, bottom first.
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn n_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn validate(&self) -> Result<(), RnnError> {
        if self.hidden.is_empty() {
            return Err(RnnError::InvalidConfig("need at least one layer".into()));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(RnnError::InvalidConfig(format!(
                "dimensions must be positive (vocab {}, embed {}, hidden {:?})",
                self.vocab_size, self.embed_dim, self.hidden
            )));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        let g = self.arch.n_gates();
        let mut input = self.embed_dim;
        let mut n = self.vocab_size * self.embed_dim;
        for &h in &self.hidden {
            n += (input + h + 1) * g * h;
            input = h;
        }
        n + (input + 1) * self.vocab_size
    }
}

/// A configuration paired with matching weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self, RnnError> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn load(path: &Path) -> Result<Self, RnnError> {
        let (config, weights) = load_weights(path)?;
        Self::new(config, weights)
    }

    pub fn save(&self, path: &Path) -> Result<(), RnnError> {
        save_weights(&self.config, &self.weights, path)
    }
}
