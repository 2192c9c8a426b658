//! Efficiency algebra for sparse decoding with periodic full-model calls,
//! and the speculative-decoding baseline it is compared against.
//!
//! Parameter counts may be given in absolute units or normalized to the
//! full model (`c_full = 1`).

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{chain_kernel, AcceptRule, ChainParams, CorrectionFlags, DraftMode};
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::session::Session;
use crate::sparsity::SparsityMode;

pub const CURVE_FORMAT_VERSION: u32 = 1;

fn check_aal(n_aal: f64) -> Result<()> {
    if n_aal.is_nan() || n_aal <= 0.0 {
        return Err(Error::Domain(format!(
            "average advance length {n_aal} must be positive"
        )));
    }
    Ok(())
}

/// Average parameters used per committed token.
pub fn apu(n_sparse: f64, c_sparse: f64, c_full: f64, n_aal: f64) -> Result<f64> {
    check_aal(n_aal)?;
    Ok((n_sparse * c_sparse + c_full) / n_aal)
}

/// APU relative to the full model, written with the verification period.
pub fn effective_density(n_period: f64, density: f64, n_aal: f64) -> Result<f64> {
    check_aal(n_aal)?;
    Ok(((n_period - 1.0) * density + 1.0) / n_aal)
}

/// Inputs to the efficiency formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyInputs {
    pub n_period: usize,
    pub density: f64,
    pub n_aal: f64,
}

impl EfficiencyInputs {
    pub fn from_counts(n_period: usize, c_sparse: u64, c_full: u64, n_aal: f64) -> Result<Self> {
        let inputs = Self {
            n_period,
            density: c_sparse as f64 / c_full as f64,
            n_aal,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        check_aal(self.n_aal)?;
        if self.n_aal < 1.0 || self.n_aal > self.n_period as f64 {
            return Err(Error::Domain(format!(
                "advance length {} outside [1, {}]",
                self.n_aal, self.n_period
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Domain(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        Ok(())
    }

    pub fn effective_density(&self) -> Result<f64> {
        effective_density(self.n_period as f64, self.density, self.n_aal)
    }
}

/// Expected tokens per verification for i.i.d. acceptance rate `alpha`
/// and `gamma` drafts: `(1 - alpha^(gamma + 1)) / (1 - alpha)`.
pub fn sd_expected_aal(alpha: f64, gamma: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "acceptance rate {alpha} outside [0, 1)"
        )));
    }
    Ok((1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha))
}

const MC_CHUNK: u64 = 1 << 16;

/// Simulated mean advance: each trial runs up to `gamma` Bernoulli(`alpha`)
/// acceptances, stops at the first failure, and adds the full model's token.
///
/// Trials are split into fixed chunks with their own ChaCha stream, so the
/// result does not depend on how rayon schedules them.
pub fn sd_monte_carlo(alpha: f64, gamma: u32, trials: u64, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Domain("at least one trial required".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "acceptance rate {alpha} outside [0, 1]"
        )));
    }
    let chunks = trials.div_ceil(MC_CHUNK);
    let total: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let n = MC_CHUNK.min(trials - c * MC_CHUNK);
            let mut sum = 0u64;
            for _ in 0..n {
                let mut accepted = 0u64;
                while accepted < u64::from(gamma) && rng.random_bool(alpha) {
                    accepted += 1;
                }
                sum += accepted + 1;
            }
            sum
        })
        .sum();
    Ok(total as f64 / trials as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: u32,
    pub aal: f64,
    pub apu: f64,
}

/// Speculative-decoding AAL and relative APU for `gamma = 1..=gamma_max`.
pub fn sd_curve(alpha: f64, density: f64, gamma_max: u32) -> Result<Vec<CurvePoint>> {
    if gamma_max == 0 {
        return Err(Error::Domain("gamma_max must be at least 1".into()));
    }
    (1..=gamma_max)
        .map(|gamma| {
            let aal = sd_expected_aal(alpha, gamma)?;
            Ok(CurvePoint {
                gamma,
                aal,
                apu: apu(gamma as f64, density, 1.0, aal)?,
            })
        })
        .collect()
}

/// Point with the smallest APU, earliest on ties.
pub fn argmin_apu(curve: &[CurvePoint]) -> Option<CurvePoint> {
    curve
        .iter()
        .copied()
        .reduce(|best, p| if p.apu < best.apu { p } else { best })
}

/// CSV: `# format_version=1` comment, header `gamma,aal,apu`, one row per
/// point, then a trailing `# argmin gamma=<g> apu=<v>` comment.
pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# format_version={CURVE_FORMAT_VERSION}")?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["gamma", "aal", "apu"]).map_err(csv_err)?;
        for p in curve {
            w.write_record([
                p.gamma.to_string(),
                format!("{:.6}", p.aal),
                format!("{:.6}", p.apu),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    if let Some(best) = argmin_apu(curve) {
        writeln!(out, "# argmin gamma={} apu={:.6}", best.gamma, best.apu)?;
    }
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Counts per offset `0..kernel_size`.
pub fn rejection_histogram(offsets: &[usize], kernel_size: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; kernel_size];
    for &o in offsets {
        let slot = counts
            .get_mut(o)
            .ok_or_else(|| Error::Domain(format!("offset {o} outside kernel of {kernel_size}")))?;
        *slot += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdBaselineReport {
    pub gamma: usize,
    /// First `max_tokens` generated tokens; the last round may overshoot.
    pub tokens: Vec<u32>,
    pub rounds: usize,
    pub advances: Vec<usize>,
    pub aal: f64,
}

/// Greedy-match speculative decoding with the sparse model as drafter: draft
/// `gamma` tokens, accept the longest prefix that equals the full model's
/// argmax, then emit the full model's token. Output equals full greedy
/// decoding for any sparsity.
pub fn run_sd_baseline(
    weights: &ModelWeights,
    mode: SparsityMode,
    keep_fraction: f64,
    gamma: usize,
    prompt: &[u32],
    max_tokens: usize,
) -> Result<SdBaselineReport> {
    if prompt.is_empty() {
        return Err(Error::Logic("empty prompt".into()));
    }
    let mut session = Session::start(weights, prompt, mode, keep_fraction)?;
    let params = ChainParams {
        kernel_size: gamma + 1,
        rule: AcceptRule::GreedyMatch,
        flags: CorrectionFlags::default(),
        draft_mode: DraftMode::Greedy,
        temperature: 0.0,
        scoring_temperature: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let start = session.tokens().len();
    let mut advances = Vec::new();
    let mut emitted = 0;
    while emitted < max_tokens {
        let outcome = chain_kernel(&mut session, &params, &mut rng, advances.len())?;
        emitted += outcome.advance;
        advances.push(outcome.advance);
    }
    let rounds = advances.len();
    let end = (start + max_tokens).min(session.tokens().len());
    Ok(SdBaselineReport {
        gamma,
        tokens: session.tokens()[start..end].to_vec(),
        rounds,
        aal: if rounds == 0 {
            0.0
        } else {
            emitted as f64 / rounds as f64
        },
        advances,
    })
}
