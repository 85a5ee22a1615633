//! Self-attention emotional feature extractor with a two-layer projection head.
//!
//! `frames -> frontend -> + positions -> [pre-norm attention block] x n_layers
//!  -> reduction -> f0 (tanh) -> f1 -> softmax`
//!
//! Every block runs `h + dropout(attn(ln(h)))` followed by `h + ff(ln(h))`; the
//! dropout between the attention output projection and the feed-forward module
//! is the projection dropout.

mod checkpoint;
mod encoder;
mod layers;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use encoder::{
    backward, forward, forward_cached, FeatureSequence, ForwardCache, ForwardOutput, PooledFeature,
    Prediction,
};
pub use layers::softmax;
pub use params::{count_params, init_params, EncoderBlock, LayerNorm, Linear, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Read frame 0 of the encoder output.
    FirstVector,
    AveragePool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Frontend {
    /// Per-frame linear projection `d_in -> d_model`.
    None,
    /// Linear projection of `kernel` stacked frames, hopping by `stride`.
    Strided { kernel: usize, stride: usize },
}

impl Frontend {
    pub fn kernel(&self) -> usize {
        match *self {
            Frontend::None => 1,
            Frontend::Strided { kernel, .. } => kernel,
        }
    }

    pub fn stride(&self) -> usize {
        match *self {
            Frontend::None => 1,
            Frontend::Strided { stride, .. } => stride,
        }
    }

    /// Encoder sequence length for an input of `length` frames.
    pub fn output_len(&self, length: usize) -> usize {
        let k = self.kernel();
        (length.max(k) - k) / self.stride() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Dropout between attention output projection and feed-forward (tuned value 0.4).
    pub projection_dropout: f64,
    pub reduction: Reduction,
    pub d_proj: usize,
    pub n_classes: usize,
    pub conv_frontend: Frontend,
    /// Number of learned positional embeddings.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            projection_dropout: 0.4,
            reduction: Reduction::FirstVector,
            d_proj: 16,
            n_classes: 4,
            conv_frontend: Frontend::None,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_proj", self.d_proj),
            ("n_classes", self.n_classes),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.projection_dropout) {
            return Err(Error::validation(format!(
                "projection_dropout must lie in [0, 1), got {}",
                self.projection_dropout
            )));
        }
        if let Frontend::Strided { kernel, stride } = self.conv_frontend {
            if kernel == 0 || stride == 0 {
                return Err(Error::validation("strided frontend needs kernel, stride >= 1"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn frontend_in(&self) -> usize {
        self.conv_frontend.kernel() * self.d_in
    }
}
