//! Byte-level latent-patch LM, its subword teacher, and shared layers.

mod byte_lm;
mod layers;
mod params;
mod teacher;

pub use byte_lm::{
    boundary_scores, depool, depool_index, fused_targets, lm_head, pool_ends, pool_last,
    predicted_mask, BoundaryMode, ByteLm, ByteLmOutput, GlobalSource, COSINE_EPS,
};
pub use layers::{Bound, KvCache, LocalState};
pub use params::{init_byte_lm, init_teacher, Component, ParamStore};
pub use teacher::{SubwordLm, TeacherOutputs};

use crate::numerics::NumericsError;
use crate::tokenization::TokenizationError;

/// Fused output vocabulary: every byte with and without a closing boundary.
pub const FUSED_VOCAB: usize = 512;
/// Row of the byte embedding used for the BOS pseudo-byte.
pub const BOS_BYTE: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenization(#[from] TokenizationError),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("boundary mask has no patches")]
    EmptyMask,
    #[error("{0}")]
    Input(String),
}

/// A symbol of the 512-way output space: a byte plus a boundary bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FusedSymbol(pub u16);

impl FusedSymbol {
    pub fn new(byte: u8, boundary: bool) -> Self {
        Self(byte as u16 + if boundary { 256 } else { 0 })
    }

    pub fn byte(self) -> u8 {
        (self.0 % 256) as u8
    }

    pub fn has_boundary(self) -> bool {
        self.0 >= 256
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlstmConfig {
    pub heads: usize,
    /// Per-head query/key width.
    pub qk_dim: usize,
    /// Per-head value width.
    pub v_dim: usize,
    pub gate_soft_cap: f64,
    pub input_gate_bias_init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub mlstm: MlstmConfig,
    /// SwiGLU hidden width as a multiple of `d`.
    pub ffn_expansion: f64,
    pub global: GlobalConfig,
    /// Teacher vocabulary size including BOS.
    pub subword_vocab: usize,
    /// Global layers used by the encoder-matching loss.
    pub n_probe: usize,
    pub boundary_threshold: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            encoder_layers: 1,
            decoder_layers: 4,
            mlstm: MlstmConfig {
                heads: 4,
                qk_dim: 16,
                v_dim: 32,
                gate_soft_cap: 15.0,
                input_gate_bias_init: -10.0,
            },
            ffn_expansion: 2.0,
            global: GlobalConfig {
                layers: 2,
                heads: 4,
                head_dim: 32,
                rope_base: 10000.0,
            },
            subword_vocab: 512,
            n_probe: 1,
            boundary_threshold: 0.5,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn ffn_hidden(&self) -> usize {
        ((self.d as f64 * self.ffn_expansion).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.mlstm.heads == 0 || self.global.heads == 0 {
            return bad("dimensions and head counts must be positive".into());
        }
        if self.global.heads * self.global.head_dim != self.d {
            return bad(format!(
                "global heads x head_dim = {} must equal d = {}",
                self.global.heads * self.global.head_dim,
                self.d
            ));
        }
        if self.global.head_dim % 2 != 0 {
            return bad("global head_dim must be even for rotary embeddings".into());
        }
        if self.mlstm.qk_dim == 0 || self.mlstm.v_dim == 0 {
            return bad("mlstm qk_dim and v_dim must be positive".into());
        }
        if self.n_probe > self.global.layers {
            return bad(format!(
                "n_probe {} exceeds global layers {}",
                self.n_probe, self.global.layers
            ));
        }
        if self.subword_vocab < 257 {
            return bad("subword vocabulary must hold 256 bytes and BOS".into());
        }
        if !(0.0..1.0).contains(&self.boundary_threshold) {
            return bad("boundary threshold must lie in [0, 1)".into());
        }
        Ok(())
    }
}
