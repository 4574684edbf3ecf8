//! Ray tokenizer, biased transformer encoder, query decoder and regression
//! head.

mod embed;
mod network;

pub use embed::harmonic_embed;
pub use network::{
    build_bias_matrices, decode, embed_tokens, encode, forward, init_params, predict, regress_head, EncoderOutput,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PluckerRay;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid token {index}: {reason}")]
    InvalidToken { index: usize, reason: String },
    #[error("empty {0}")]
    Empty(&'static str),
}

/// Architecture hyperparameters. Serialized into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub harmonic_frequencies: usize,
    pub num_joints: usize,
    /// Relative times are divided by this before harmonic encoding.
    pub max_rel_time: usize,
    pub ffn_multiplier: usize,
    /// Plücker moments are divided by this (meters) before encoding.
    pub moment_scale: f64,
    pub confidence_bias: bool,
    pub geometry_bias: bool,
    /// Also feed detection confidence into the token features.
    pub embed_confidence: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 192,
            heads: 6,
            encoder_layers: 3,
            decoder_layers: 2,
            harmonic_frequencies: 15,
            num_joints: 17,
            max_rel_time: 8,
            ffn_multiplier: 4,
            moment_scale: 2.0,
            confidence_bias: true,
            geometry_bias: true,
            embed_confidence: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("harmonic_frequencies", self.harmonic_frequencies),
            ("num_joints", self.num_joints),
            ("max_rel_time", self.max_rel_time),
            ("ffn_multiplier", self.ffn_multiplier),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.harmonic_frequencies > 40 {
            return Err(ModelError::Config("harmonic_frequencies above 40".into()));
        }
        if !(self.moment_scale > 0.0 && self.moment_scale.is_finite()) {
            return Err(ModelError::Config("moment_scale must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn ray_features(&self) -> usize {
        2 * self.harmonic_frequencies * 6
    }

    pub(crate) fn time_features(&self) -> usize {
        2 * self.harmonic_frequencies
    }
}

/// One 2D detection lifted to a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationToken {
    pub joint_id: usize,
    pub camera_id: usize,
    /// Frame offset from the current frame (≤ 0 when running causally).
    pub rel_time: i32,
    pub ray: PluckerRay,
    pub confidence: f64,
}

/// Decode targets as `(joint_id, rel_time)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub entries: Vec<(usize, i32)>,
}

impl QuerySpec {
    /// Every joint for the last `t_out` frames, oldest frame first.
    /// Row `f * num_joints + j` is joint `j` at `rel_time = f - (t_out - 1)`.
    pub fn frames(num_joints: usize, t_out: usize) -> Self {
        let mut entries = Vec::with_capacity(num_joints * t_out);
        for f in 0..t_out {
            let rel = f as i32 - (t_out as i32 - 1);
            entries.extend((0..num_joints).map(|j| (j, rel)));
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
