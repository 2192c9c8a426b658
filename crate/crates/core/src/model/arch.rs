use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a decoder-only transformer with grouped-query attention
/// and a gated MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub max_positions: usize,
}

impl ArchSpec {
    /// Seconds-scale CPU model used by tests and the default CLI runs.
    pub const fn toy() -> Self {
        Self {
            vocab_size: 512,
            hidden_dim: 64,
            intermediate_dim: 256,
            num_layers: 4,
            num_heads: 4,
            num_kv_heads: 2,
            max_positions: 1024,
        }
    }

    /// Llama-3-8B shapes. Only used for parameter accounting.
    pub const fn llama3_8b() -> Self {
        Self {
            vocab_size: 128_256,
            hidden_dim: 4096,
            intermediate_dim: 14_336,
            num_layers: 32,
            num_heads: 32,
            num_kv_heads: 8,
            max_positions: 8192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("max_positions", self.max_positions),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
            if u32::try_from(value).is_err() {
                return Err(Error::Config(format!("{name} does not fit in u32")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_heads {} not divisible by num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Width of one cached key (or value) row.
    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim()
    }

    pub fn param_count(&self) -> Result<ParamCounts> {
        self.validate()?;
        let h = self.hidden_dim as u64;
        let i = self.intermediate_dim as u64;
        let l = self.num_layers as u64;
        let v = self.vocab_size as u64;
        let kv = self.kv_dim() as u64;
        let attention = l * (2 * h * h + 2 * h * kv);
        let mlp = 3 * h * i * l;
        let embedding = v * h;
        let head = v * h;
        let norm = (2 * l + 1) * h;
        Ok(ParamCounts {
            attention,
            mlp,
            embedding,
            head,
            norm,
            total: attention + mlp + embedding + head + norm,
        })
    }
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::toy()
    }
}

/// Exact parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub attention: u64,
    pub mlp: u64,
    pub embedding: u64,
    pub head: u64,
    /// RMS normalization scales (two per layer plus the final one).
    pub norm: u64,
    pub total: u64,
}

impl ParamCounts {
    pub fn mlp_fraction(&self) -> f64 {
        self.mlp as f64 / self.total as f64
    }
}
