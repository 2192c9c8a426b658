//! Corpus runs and parameter sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{csv_err, effective_density, sd_curve, write_curve_csv};
use crate::corrector::{generate, CorrectionConfig, CorrectionReport, REPORT_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::sparsity::SparsityMode;
use crate::spectree::TreeConfig;

pub const SWEEP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusAggregate {
    pub prompts: usize,
    pub tokens: usize,
    pub kernels: usize,
    /// Pooled over the corpus: total tokens / total kernels.
    pub aal: f64,
    /// Unweighted mean of per-prompt AAL.
    pub mean_aal: f64,
    pub density: f64,
    pub effective_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub mode: SparsityMode,
    pub keep_fraction: f64,
    pub config: CorrectionConfig,
    pub aggregate: CorpusAggregate,
    pub reports: Vec<CorrectionReport>,
}

impl RunReport {
    pub fn check_consistency(&self) -> Result<()> {
        for r in &self.reports {
            r.check_consistency()?;
        }
        let again = aggregate(&self.reports, self.config.kernel_size)?;
        let same = again.tokens == self.aggregate.tokens
            && again.kernels == self.aggregate.kernels
            && (again.effective_density - self.aggregate.effective_density).abs() <= 1e-9;
        if !same {
            return Err(Error::Logic(
                "aggregate does not match per-prompt reports".into(),
            ));
        }
        Ok(())
    }
}

pub fn aggregate(reports: &[CorrectionReport], period: usize) -> Result<CorpusAggregate> {
    let tokens: usize = reports.iter().map(|r| r.tokens.len()).sum();
    let kernels: usize = reports.iter().map(|r| r.kernels).sum();
    if kernels == 0 {
        return Err(Error::Logic("no kernels ran".into()));
    }
    let aal = tokens as f64 / kernels as f64;
    let density = reports[0].density;
    Ok(CorpusAggregate {
        prompts: reports.len(),
        tokens,
        kernels,
        aal,
        mean_aal: reports.iter().map(|r| r.aal).sum::<f64>() / reports.len() as f64,
        density,
        effective_density: effective_density(period as f64, density, aal)?,
    })
}

/// Runs every prompt independently (in parallel); reports keep corpus order.
pub fn run_corpus(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    mode: SparsityMode,
    keep_fraction: f64,
    config: &CorrectionConfig,
) -> Result<RunReport> {
    if prompts.is_empty() {
        return Err(Error::Config("empty prompt corpus".into()));
    }
    config.validate()?;
    let reports = prompts
        .par_iter()
        .map(|p| generate(weights, p, mode, keep_fraction, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        format_version: REPORT_FORMAT_VERSION,
        mode,
        keep_fraction,
        config: config.clone(),
        aggregate: aggregate(&reports, config.kernel_size)?,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Threshold,
    Treewidth,
    Gamma,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(Self::Threshold),
            "treewidth" => Ok(Self::Treewidth),
            "gamma" => Ok(Self::Gamma),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Threshold => "threshold",
            Self::Treewidth => "treewidth",
            Self::Gamma => "gamma",
        })
    }
}

/// Drops repeated values, keeping first occurrences in order.
pub fn dedup_grid(grid: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(grid.len());
    for &v in grid {
        if out.contains(&v) {
            log::warn!("duplicate grid value {v} ignored");
        } else {
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub value: f64,
    pub aal: f64,
    pub effective_density: f64,
    pub tokens: usize,
    pub kernels: usize,
}

/// Corpus runs over a threshold or treewidth grid. Rows follow grid order.
pub fn corpus_sweep(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    mode: SparsityMode,
    keep_fraction: f64,
    base: &CorrectionConfig,
    axis: SweepAxis,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    let grid = dedup_grid(grid);
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let configs = grid
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match axis {
                SweepAxis::Threshold => c.threshold = v,
                SweepAxis::Treewidth => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Error::Config(format!(
                            "tree width {v} is not a positive integer"
                        )));
                    }
                    let branch = base
                        .tree
                        .map_or(crate::spectree::DEFAULT_BRANCH, |t| t.branch);
                    c.tree = Some(TreeConfig {
                        branch,
                        ..TreeConfig::new(v as usize)
                    });
                }
                SweepAxis::Gamma => {
                    return Err(Error::Config(
                        "gamma sweeps are closed form; use analytics".into(),
                    ))
                }
            }
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    configs
        .par_iter()
        .enumerate()
        .map(|(index, c)| {
            let run = run_corpus(weights, prompts, mode, keep_fraction, c)?;
            Ok(SweepRow {
                index,
                value: grid[index],
                aal: run.aggregate.aal,
                effective_density: run.aggregate.effective_density,
                tokens: run.aggregate.tokens,
                kernels: run.aggregate.kernels,
            })
        })
        .collect()
}

/// CSV: `# format_version=1` comment, then
/// `index,<axis>,aal,effective_density,tokens,kernels`.
pub fn write_sweep_csv<W: Write>(axis: SweepAxis, rows: &[SweepRow], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# format_version={SWEEP_FORMAT_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "index",
        &axis.to_string(),
        "aal",
        "effective_density",
        "tokens",
        "kernels",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            r.value.to_string(),
            format!("{:.6}", r.aal),
            format!("{:.6}", r.effective_density),
            r.tokens.to_string(),
            r.kernels.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Closed-form speculative-decoding curve written as CSV.
pub fn gamma_sweep_csv<W: Write>(alpha: f64, density: f64, gamma_max: u32, out: W) -> Result<()> {
    write_curve_csv(&sd_curve(alpha, density, gamma_max)?, out)
}
