use serde::{Deserialize, Serialize};

use crate::data::COORD_DIMS;
use crate::error::{contract_err, Result};

/// Architecture sizes shared by the encoder and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of encoder states and action queries.
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_blocks: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub mlp_ratio: usize,
    /// Encoder layer outputs (0-based) consumed by the refinement module.
    pub refine_layers: Vec<usize>,
    pub horizon: usize,
    pub var_floor: f64,
    pub log_std_init: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            enc_layers: 4,
            dec_blocks: 2,
            mlp_ratio: 2,
            refine_layers: vec![1],
            horizon: 10,
            var_floor: 1e-4,
            log_std_init: 0.3f64.ln(),
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn query_rows(&self) -> usize {
        self.horizon * COORD_DIMS
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(contract_err!(
                "model.d_model ({}) must be a positive multiple of model.heads ({})",
                self.d_model,
                self.heads
            ));
        }
        if self.enc_layers == 0 {
            return Err(contract_err!("model.enc_layers must be >= 1"));
        }
        if self.dec_blocks == 0 {
            return Err(contract_err!("model.dec_blocks must be >= 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(contract_err!("model.mlp_ratio must be >= 1"));
        }
        if self.refine_layers.is_empty() {
            return Err(contract_err!("model.refine_layers must name at least one encoder layer"));
        }
        if let Some(&l) = self.refine_layers.iter().find(|&&l| l >= self.enc_layers) {
            return Err(contract_err!(
                "model.refine_layers entry {l} exceeds enc_layers {}",
                self.enc_layers
            ));
        }
        if self.horizon < 3 {
            return Err(contract_err!("model.horizon must be >= 3"));
        }
        if !(self.var_floor > 0.0) {
            return Err(contract_err!("model.var_floor must be > 0"));
        }
        if !(super::LOG_STD_MIN..=super::LOG_STD_MAX).contains(&self.log_std_init) {
            return Err(contract_err!("model.log_std_init must lie in [-5, 2]"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(contract_err!("model.ln_eps must be > 0"));
        }
        Ok(())
    }
}
