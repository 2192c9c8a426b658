//! Contextual MLP sparsity.
//!
//! CSparse fixes one neuron set per layer for the whole generation, chosen
//! from gate statistics gathered while prefilling the prompt, and skips the
//! gate, up and down rows of every other neuron. FSparse keeps the gate
//! projection dense and, per token, runs up/down only for the neurons with
//! the largest gate activations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityMode {
    Dense,
    #[serde(rename = "csparse")]
    CSparse,
    #[serde(rename = "fsparse")]
    FSparse,
}

impl std::str::FromStr for SparsityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(Self::Dense),
            "csparse" => Ok(Self::CSparse),
            "fsparse" => Ok(Self::FSparse),
            other => Err(Error::Config(format!("unknown sparsity mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SparsityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::CSparse => "csparse",
            Self::FSparse => "fsparse",
        })
    }
}

fn check_keep_fraction(keep_fraction: f64) -> Result<()> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep fraction {keep_fraction} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Neurons kept out of `total`: `ceil(keep_fraction * total)`, at least one.
/// The product is nudged down by 1e-9 so that values like `0.3 * 10` do not
/// round up past an exact integer.
pub fn keep_count(keep_fraction: f64, total: usize) -> usize {
    let raw = (keep_fraction * total as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(total)
}

/// Indices of the `k` entries with largest magnitude, ties to the lower
/// index, returned in ascending index order.
pub fn top_k_by_magnitude(values: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    if k == values.len() {
        return (0..values.len()).collect();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let by_rank =
        |&a: &usize, &b: &usize| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b));
    idx.select_nth_unstable_by(k, by_rank);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Per-token FSparse mask over one layer's gate activations.
pub fn fsparse_apply(gate_activation: &[f32], keep_fraction: f64) -> Vec<bool> {
    let k = keep_count(
        keep_fraction.clamp(f64::MIN_POSITIVE, 1.0),
        gate_activation.len(),
    );
    let mut mask = vec![false; gate_activation.len()];
    for i in top_k_by_magnitude(gate_activation, k) {
        mask[i] = true;
    }
    mask
}

/// Running per-neuron sum of |gate activation| over prefill positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    sums: Vec<Vec<f64>>,
    positions: usize,
}

impl GateStats {
    pub fn new(num_layers: usize, intermediate_dim: usize) -> Self {
        Self {
            sums: vec![vec![0.0; intermediate_dim]; num_layers],
            positions: 0,
        }
    }

    pub fn for_arch(arch: &ArchSpec) -> Self {
        Self::new(arch.num_layers, arch.intermediate_dim)
    }

    pub fn accumulate(&mut self, layer: usize, gate_activation: &[f32]) -> Result<()> {
        let num_layers = self.sums.len();
        let row = self.sums.get_mut(layer).ok_or_else(|| {
            Error::Logic(format!(
                "layer {layer} out of range for {num_layers} layers"
            ))
        })?;
        if gate_activation.len() != row.len() {
            return Err(Error::Logic(format!(
                "gate vector of length {} for intermediate dim {}",
                gate_activation.len(),
                row.len()
            )));
        }
        for (acc, a) in row.iter_mut().zip(gate_activation) {
            *acc += f64::from(a.abs());
        }
        if layer == 0 {
            self.positions += 1;
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.sums.len()
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.sums[layer]
    }

    /// Positions observed (counted on layer 0).
    pub fn positions(&self) -> usize {
        self.positions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPlan {
    mode: SparsityMode,
    keep_fraction: f64,
    intermediate_dim: usize,
    /// CSparse only: ascending neuron indices per layer.
    selected: Vec<Vec<usize>>,
}

impl SparsityPlan {
    pub fn dense(intermediate_dim: usize) -> Self {
        Self {
            mode: SparsityMode::Dense,
            keep_fraction: 1.0,
            intermediate_dim,
            selected: Vec::new(),
        }
    }

    pub fn fsparse(intermediate_dim: usize, keep_fraction: f64) -> Result<Self> {
        check_keep_fraction(keep_fraction)?;
        Ok(Self {
            mode: SparsityMode::FSparse,
            keep_fraction,
            intermediate_dim,
            selected: Vec::new(),
        })
    }

    /// Top `keep_count` neurons per layer by accumulated gate magnitude.
    pub fn build_csparse(stats: &GateStats, num_layers: usize, keep_fraction: f64) -> Result<Self> {
        check_keep_fraction(keep_fraction)?;
        if stats.num_layers() < num_layers {
            return Err(Error::Logic(format!(
                "gate statistics cover {} of {num_layers} layers",
                stats.num_layers()
            )));
        }
        let intermediate_dim = stats.layer(0).len();
        let k = keep_count(keep_fraction, intermediate_dim);
        let selected = (0..num_layers)
            .map(|l| {
                let sums = stats.layer(l);
                let mut idx: Vec<usize> = (0..sums.len()).collect();
                idx.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
                idx.truncate(k);
                idx.sort_unstable();
                idx
            })
            .collect();
        Ok(Self {
            mode: SparsityMode::CSparse,
            keep_fraction,
            intermediate_dim,
            selected,
        })
    }

    pub fn mode(&self) -> SparsityMode {
        self.mode
    }

    pub fn keep_fraction(&self) -> f64 {
        self.keep_fraction
    }

    pub fn is_dense(&self) -> bool {
        self.mode == SparsityMode::Dense
    }

    /// Neurons kept per layer (per token for FSparse).
    pub fn keep_count(&self) -> usize {
        match self.mode {
            SparsityMode::Dense => self.intermediate_dim,
            _ => keep_count(self.keep_fraction, self.intermediate_dim),
        }
    }

    /// Fixed CSparse set for a layer.
    pub fn selected(&self, layer: usize) -> Option<&[usize]> {
        self.selected.get(layer).map(Vec::as_slice)
    }

    pub fn density(&self, arch: &ArchSpec) -> Result<DensityReport> {
        global_density(arch, self.keep_fraction, self.mode)
    }

    /// One line per layer: `layer <l>: <indices...>`.
    pub fn dump(&self, num_layers: usize) -> String {
        let mut out = String::new();
        for l in 0..num_layers {
            let _ = write!(out, "layer {l}:");
            match (self.mode, self.selected.get(l)) {
                (SparsityMode::CSparse, Some(set)) => {
                    for i in set {
                        let _ = write!(out, " {i}");
                    }
                }
                (SparsityMode::FSparse, _) => {
                    let _ = write!(out, " per-token top {}", self.keep_count());
                }
                _ => out.push_str(" all"),
            }
            out.push('\n');
        }
        out
    }
}

/// Parameters touched per decoded token relative to the dense model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub neuron_keep_fraction: f64,
    pub global_density: f64,
    pub params_active: u64,
    pub params_total: u64,
}

/// Embeddings, head, attention and norms always count as active. CSparse
/// skips gate, up and down rows of dropped neurons; FSparse only up and down.
pub fn global_density(
    arch: &ArchSpec,
    keep_fraction: f64,
    mode: SparsityMode,
) -> Result<DensityReport> {
    let counts = arch.param_count()?;
    let (kept, matrices) = match mode {
        SparsityMode::Dense => (arch.intermediate_dim, 0),
        SparsityMode::CSparse => {
            check_keep_fraction(keep_fraction)?;
            (keep_count(keep_fraction, arch.intermediate_dim), 3)
        }
        SparsityMode::FSparse => {
            check_keep_fraction(keep_fraction)?;
            (keep_count(keep_fraction, arch.intermediate_dim), 2)
        }
    };
    let dropped = (arch.intermediate_dim - kept) as u64;
    let skipped = dropped * matrices * arch.hidden_dim as u64 * arch.num_layers as u64;
    let params_active = counts.total - skipped;
    Ok(DensityReport {
        neuron_keep_fraction: kept as f64 / arch.intermediate_dim as f64,
        global_density: params_active as f64 / counts.total as f64,
        params_active,
        params_total: counts.total,
    })
}
