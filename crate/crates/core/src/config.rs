use serde::{Deserialize, Serialize};

use crate::dsp::{EPOCH_SAMPLES, N_BINS, N_FRAMES};
use crate::error::{input_err, Result};

pub const N_CLASSES: usize = 5;
pub const SEQ_LEN: usize = 21;

/// Network geometry. [`ModelConfig::paper`] is the full-size network;
/// [`ModelConfig::desk`] keeps every structural feature at reduced width so
/// end-to-end training fits on one CPU core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of the five CNN blocks.
    pub cnn_channels: [usize; 5],
    pub kernel: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub epoch_layers: usize,
    pub seq_layers: usize,
    pub dropout: f64,
    /// Epoch-attention size `A`.
    pub attn_size: usize,
    pub proj_dim: usize,
    pub head_hidden: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            cnn_channels: [64, 128, 128, 256, 256],
            kernel: 3,
            d_model: 128,
            n_heads: 8,
            d_k: 16,
            d_ff: 1024,
            epoch_layers: 4,
            seq_layers: 4,
            dropout: 0.1,
            attn_size: 128,
            proj_dim: 128,
            head_hidden: 128,
            seq_len: SEQ_LEN,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            cnn_channels: [4, 4, 8, 8, 16],
            kernel: 3,
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            d_ff: 32,
            epoch_layers: 2,
            seq_layers: 2,
            dropout: 0.1,
            attn_size: 8,
            proj_dim: 32,
            head_hidden: 16,
            seq_len: SEQ_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_k != self.d_model {
            return Err(input_err!(
                "n_heads·d_k = {}·{} must equal d_model = {}",
                self.n_heads,
                self.d_k,
                self.d_model
            ));
        }
        if self.cnn_channels[4] != 2 * self.d_model {
            return Err(input_err!(
                "last CNN block has {} channels; the width-2 channel pool needs 2·d_model = {}",
                self.cnn_channels[4],
                2 * self.d_model
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(input_err!("kernel {} must be odd for same padding", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(input_err!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.seq_len == 0 || self.epoch_layers == 0 || self.seq_layers == 0 {
            return Err(input_err!("seq_len and layer counts must be positive"));
        }
        Ok(())
    }

    pub fn raw_len(&self) -> usize {
        EPOCH_SAMPLES
    }

    pub fn spec_frames(&self) -> usize {
        N_FRAMES
    }

    pub fn spec_bins(&self) -> usize {
        N_BINS
    }
}
