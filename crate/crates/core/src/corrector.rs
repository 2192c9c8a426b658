//! Periodic full-model correction of a sparse decoder.
//!
//! Every kernel the sparse model drafts `n - 1` tokens after the pending
//! token. The full model then runs once over the `n` tokens of the kernel,
//! rewriting their cache rows, and scores each draft by its own probability
//! for it. The first draft scoring below the threshold is rejected: the
//! cache is rolled back to just after the accepted prefix and the full
//! model's token is interleaved at the rejected position. When nothing is
//! rejected the full model's next token is appended, so a kernel advances by
//! `j + 1` tokens on a rejection at offset `j` and by `n` otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{effective_density, rejection_histogram};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, ModelWeights, RowWrite};
use crate::probs::{argmax, entropy_nats, rank_of, ranked, sample, softmax};
use crate::session::Session;
use crate::sparsity::{global_density, SparsityMode, SparsityPlan};
use crate::spectree::{self, TreeConfig};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DraftMode {
    Greedy,
    Sampled,
}

impl std::str::FromStr for DraftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "sampled" => Ok(Self::Sampled),
            other => Err(Error::Config(format!("unknown draft mode {other:?}"))),
        }
    }
}

/// Component switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionFlags {
    /// Full-model rows replace the sparse rows of verified tokens.
    pub kv_rewrite: bool,
    /// Discard everything after the first rejected token.
    pub rollback: bool,
    /// Put the full model's token at the rejected position.
    pub interleave: bool,
}

impl Default for CorrectionFlags {
    fn default() -> Self {
        Self {
            kv_rewrite: true,
            rollback: true,
            interleave: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub kernel_size: usize,
    pub threshold: f64,
    /// Draft sampling temperature in [`DraftMode::Sampled`].
    pub temperature: f64,
    /// Temperature of the full distribution the interleaved token is drawn
    /// from in sampled mode.
    pub scoring_temperature: f64,
    pub draft_mode: DraftMode,
    pub flags: CorrectionFlags,
    pub max_new_tokens: usize,
    pub stop_tokens: Vec<u32>,
    pub tree: Option<TreeConfig>,
    pub seed: u64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            kernel_size: 16,
            threshold: 0.1,
            temperature: 0.6,
            scoring_temperature: 1.0,
            draft_mode: DraftMode::Greedy,
            flags: CorrectionFlags::default(),
            max_new_tokens: 64,
            stop_tokens: Vec::new(),
            tree: None,
            seed: 0,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 2 {
            return Err(Error::Config(format!(
                "kernel size {} below 2",
                self.kernel_size
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if [self.temperature, self.scoring_temperature]
            .iter()
            .any(|t| t.is_nan() || *t < 0.0)
        {
            return Err(Error::Config("temperatures must be non-negative".into()));
        }
        if self.flags.rollback && !self.flags.interleave {
            return Err(Error::Config(
                "rollback without interleaving cannot make progress after a rejection".into(),
            ));
        }
        if let Some(tree) = &self.tree {
            tree.validate(self.kernel_size)?;
            if self.flags != CorrectionFlags::default() {
                return Err(Error::Config(
                    "tree verification requires all correction components".into(),
                ));
            }
        }
        Ok(())
    }
}

/// First offset whose likelihood falls below `threshold`, or `None` when
/// every entry is accepted.
pub fn accept_prefix(q: &[f64], threshold: f64) -> Option<usize> {
    q.iter().position(|&v| v < threshold)
}

/// One verified draft position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub kernel: usize,
    pub offset: usize,
    pub token: u32,
    /// Full-model probability of the token.
    pub q: f64,
    /// 1-based rank of the token in the full-model distribution.
    pub full_rank: usize,
    pub accepted: bool,
    /// On a rejection: smallest sparse rank `>= 2` whose token the full model
    /// would have accepted.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alt_hit_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOutcome {
    pub drafted: Vec<u32>,
    pub q: Vec<f64>,
    pub rejection: Option<usize>,
    pub interleaved: Option<u32>,
    /// Tokens committed by this kernel, in order.
    pub committed: Vec<u32>,
    pub advance: usize,
    pub events: Vec<TokenEvent>,
    /// Sparse-distribution entropies for the committed positions the sparse
    /// model produced a distribution for.
    pub entropies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum AcceptRule {
    Threshold(f64),
    /// Lossless greedy speculative decoding: accept while the draft equals
    /// the full model's argmax.
    GreedyMatch,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ChainParams {
    pub kernel_size: usize,
    pub rule: AcceptRule,
    pub flags: CorrectionFlags,
    pub draft_mode: DraftMode,
    pub temperature: f64,
    pub scoring_temperature: f64,
}

pub(crate) fn pick_token(
    logits: &[f32],
    mode: DraftMode,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> u32 {
    match mode {
        DraftMode::Greedy => argmax(logits),
        DraftMode::Sampled => sample(logits, temperature, rng),
    }
}

/// One kernel without a tree. `kernel_idx` only labels events.
pub fn run_kernel(
    session: &mut Session<'_>,
    config: &CorrectionConfig,
    rng: &mut ChaCha8Rng,
    kernel_idx: usize,
) -> Result<KernelOutcome> {
    config.validate()?;
    let params = ChainParams {
        kernel_size: config.kernel_size,
        rule: AcceptRule::Threshold(config.threshold),
        flags: config.flags,
        draft_mode: config.draft_mode,
        temperature: config.temperature,
        scoring_temperature: config.scoring_temperature,
    };
    chain_kernel(session, &params, rng, kernel_idx)
}

pub(crate) fn chain_kernel(
    session: &mut Session<'_>,
    p: &ChainParams,
    rng: &mut ChaCha8Rng,
    kernel_idx: usize,
) -> Result<KernelOutcome> {
    session.check_aligned()?;
    let n = p.kernel_size;
    let base = session.base();
    if base + n > session.cache().capacity() {
        return Err(Error::Capacity(format!(
            "kernel of {n} at slot {base} exceeds cache capacity {}",
            session.cache().capacity()
        )));
    }
    let pending = session.pending();

    // sparse drafting: rows for pending and the first n - 2 drafts
    let mut drafted = Vec::with_capacity(n - 1);
    let mut sparse_rows = Vec::with_capacity(n - 1);
    let mut token = pending;
    for _ in 0..n - 1 {
        let row = session.sparse_step(token)?;
        token = pick_token(&row, p.draft_mode, p.temperature, rng);
        drafted.push(token);
        sparse_rows.push(row);
    }

    // one full pass over [pending, drafts...]
    let mut chunk = Vec::with_capacity(n);
    chunk.push(pending);
    chunk.extend_from_slice(&drafted);
    let positions: Vec<usize> = (base..base + n).collect();
    let mask = AttentionMask::causal(base, n);
    let write = if p.flags.kv_rewrite {
        RowWrite::All
    } else {
        // the last draft has no sparse row yet; only that one is new
        RowWrite::From(n - 1)
    };
    let dense = SparsityPlan::dense(session.weights().arch().intermediate_dim);
    let weights = session.weights();
    let full_rows = weights.forward_masked(
        &chunk,
        &positions,
        &mask,
        session.cache_mut(),
        base,
        &dense,
        write,
        None,
    )?;

    let full_probs: Vec<Vec<f64>> = full_rows[..n - 1].iter().map(|r| softmax(r, 1.0)).collect();
    let q: Vec<f64> = drafted
        .iter()
        .zip(&full_probs)
        .map(|(&t, pr)| pr[t as usize])
        .collect();
    let rejected_at = |j: usize| match p.rule {
        AcceptRule::Threshold(r) => q[j] < r,
        AcceptRule::GreedyMatch => drafted[j] != argmax(&full_rows[j]),
    };
    let rejection = (0..n - 1).find(|&j| rejected_at(j));
    let interleave_pick = |row: &[f32], rng: &mut ChaCha8Rng| match p.rule {
        AcceptRule::GreedyMatch => argmax(row),
        AcceptRule::Threshold(_) => pick_token(row, p.draft_mode, p.scoring_temperature, rng),
    };

    let event = |j: usize, accepted: bool| TokenEvent {
        kernel: kernel_idx,
        offset: j,
        token: drafted[j],
        q: q[j],
        full_rank: rank_of(&full_rows[j], drafted[j]),
        accepted,
        alt_hit_rank: match (accepted, p.rule) {
            (false, AcceptRule::Threshold(r)) => alt_hit_rank(&sparse_rows[j], &full_probs[j], r),
            _ => None,
        },
    };
    let entropy_of = |rows: &[Vec<f32>]| -> Result<Vec<f64>> {
        rows.iter()
            .map(|r| entropy_nats(&softmax(r, 1.0)))
            .collect()
    };

    let mut events = Vec::new();
    let committed;
    let interleaved;
    let entropies;
    if p.flags.rollback {
        match rejection {
            Some(j) => {
                events.extend((0..j).map(|i| event(i, true)));
                events.push(event(j, false));
                let x = interleave_pick(&full_rows[j], rng);
                session.cache_mut().truncate(base + j + 1)?;
                let mut c = drafted[..j].to_vec();
                c.push(x);
                committed = c;
                interleaved = Some(x);
                entropies = entropy_of(&sparse_rows[..=j])?;
            }
            None => {
                events.extend((0..n - 1).map(|i| event(i, true)));
                let x = interleave_pick(&full_rows[n - 1], rng);
                let mut c = drafted.clone();
                c.push(x);
                committed = c;
                interleaved = Some(x);
                entropies = entropy_of(&sparse_rows)?;
            }
        }
    } else {
        // keep every draft; optionally swap in the full model's choice at
        // each rejected position
        let mut c = drafted.clone();
        let mut first = None;
        for j in 0..n - 1 {
            let rejected = rejected_at(j);
            events.push(event(j, !rejected));
            if rejected && p.flags.interleave {
                let x = interleave_pick(&full_rows[j], rng);
                c[j] = x;
                first.get_or_insert(x);
            }
        }
        session.cache_mut().truncate(base + n - 1)?;
        committed = c;
        interleaved = first;
        entropies = entropy_of(&sparse_rows)?;
    }

    let advance = committed.len();
    session.commit_tokens(&committed);
    session.check_aligned()?;
    Ok(KernelOutcome {
        drafted,
        q,
        rejection,
        interleaved,
        committed,
        advance,
        events,
        entropies,
    })
}

/// Smallest sparse rank `>= 2` whose token has full probability `>= r`.
fn alt_hit_rank(sparse_row: &[f32], full_probs: &[f64], r: f64) -> Option<usize> {
    ranked(sparse_row)
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, &t)| full_probs[t as usize] >= r)
        .map(|(i, _)| i + 1)
}

/// Accounting for one generation.
///
/// JSON key order: `format_version`, `mode`, `keep_fraction`, `tree_width`,
/// `prompt_len`, `tokens`, `kernels`, `advances`, `aal`, `period`,
/// `density`, `effective_density`, `rejection_offsets`,
/// `rejection_histogram`, `entropies`, `events`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub format_version: u32,
    pub mode: SparsityMode,
    pub keep_fraction: f64,
    pub tree_width: Option<usize>,
    pub prompt_len: usize,
    /// Generated tokens (prompt excluded).
    pub tokens: Vec<u32>,
    pub kernels: usize,
    pub advances: Vec<usize>,
    pub aal: f64,
    pub period: usize,
    /// Global parameter density of the sparse model.
    pub density: f64,
    pub effective_density: f64,
    pub rejection_offsets: Vec<usize>,
    pub rejection_histogram: Vec<u64>,
    pub entropies: Vec<f64>,
    pub events: Vec<TokenEvent>,
}

impl CorrectionReport {
    /// Re-derives every accounting identity the report promises.
    pub fn check_consistency(&self) -> Result<()> {
        let sum: usize = self.advances.iter().sum();
        if sum != self.tokens.len() || self.advances.len() != self.kernels {
            return Err(Error::Logic(format!(
                "advances sum to {sum} over {} kernels for {} tokens in {} kernels",
                self.advances.len(),
                self.tokens.len(),
                self.kernels
            )));
        }
        if self.kernels > 0
            && (self.aal * self.kernels as f64 - self.tokens.len() as f64).abs() > 1e-9
        {
            return Err(Error::Logic(
                "aal * kernels differs from tokens emitted".into(),
            ));
        }
        if self.kernels > 0 {
            let recomputed = effective_density(self.period as f64, self.density, self.aal)?;
            if (recomputed - self.effective_density).abs() > 1e-9 {
                return Err(Error::Logic(format!(
                    "effective density {} but recomputation gives {recomputed}",
                    self.effective_density
                )));
            }
        }
        let hist = rejection_histogram(&self.rejection_offsets, self.period)?;
        if hist != self.rejection_histogram {
            return Err(Error::Logic(
                "rejection histogram does not match offsets".into(),
            ));
        }
        Ok(())
    }

    /// Sparse ranks of full-accepted alternatives, one per rejection event.
    pub fn hit_ranks(&self) -> Vec<Option<usize>> {
        self.events
            .iter()
            .filter(|e| !e.accepted)
            .map(|e| e.alt_hit_rank)
            .collect()
    }
}

/// Runs kernels until a stop token or `max_new_tokens`.
pub fn generate(
    weights: &ModelWeights,
    prompt: &[u32],
    mode: SparsityMode,
    keep_fraction: f64,
    config: &CorrectionConfig,
) -> Result<CorrectionReport> {
    if prompt.is_empty() {
        return Err(Error::Logic("empty prompt".into()));
    }
    config.validate()?;
    let mut session = Session::start(weights, prompt, mode, keep_fraction)?;
    generate_in(&mut session, config)
}

/// [`generate`] on an already started session.
pub fn generate_in(
    session: &mut Session<'_>,
    config: &CorrectionConfig,
) -> Result<CorrectionReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = session.tokens().len();
    let mut advances = Vec::new();
    let mut rejection_offsets = Vec::new();
    let mut entropies = Vec::new();
    let mut events = Vec::new();
    let mut emitted = 0usize;
    while emitted < config.max_new_tokens {
        let kernel_idx = advances.len();
        let outcome = match &config.tree {
            Some(tree) => spectree::run_tree_kernel(session, config, tree, &mut rng, kernel_idx)?,
            None => run_kernel(session, config, &mut rng, kernel_idx)?,
        };
        let mut advance = outcome.advance;
        let stop_at = outcome
            .committed
            .iter()
            .position(|t| config.stop_tokens.contains(t));
        if let Some(rej) = outcome.rejection {
            rejection_offsets.push(rej);
        }
        entropies.extend(outcome.entropies);
        events.extend(outcome.events);
        if let Some(s) = stop_at {
            advance = s + 1;
            advances.push(advance);
            emitted += advance;
            break;
        }
        advances.push(advance);
        emitted += advance;
    }
    let tokens = session.tokens()[start..start + emitted].to_vec();
    let arch = *session.weights().arch();
    let plan = session.plan();
    let density = global_density(&arch, plan.keep_fraction(), plan.mode())?.global_density;
    let kernels = advances.len();
    let aal = if kernels == 0 {
        0.0
    } else {
        emitted as f64 / kernels as f64
    };
    let effective = if kernels == 0 {
        0.0
    } else {
        effective_density(config.kernel_size as f64, density, aal)?
    };
    Ok(CorrectionReport {
        format_version: REPORT_FORMAT_VERSION,
        mode: plan.mode(),
        keep_fraction: plan.keep_fraction(),
        tree_width: config.tree.as_ref().map(|t| t.width),
        prompt_len: session.prompt_len(),
        tokens,
        kernels,
        advances,
        aal,
        period: config.kernel_size,
        density,
        effective_density: effective,
        rejection_histogram: rejection_histogram(&rejection_offsets, config.kernel_size)?,
        rejection_offsets,
        entropies,
        events,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCorrection {
    pub tokens: Vec<u32>,
    pub corrected: usize,
    pub fraction: f64,
}

/// Token-by-token comparator: the sparse model proposes each token, the
/// full model scores it, and any token below `threshold` is replaced by the
/// full model's argmax. Both models see the corrected sequence.
pub fn oracle_correction_run(
    weights: &ModelWeights,
    prompt: &[u32],
    mode: SparsityMode,
    keep_fraction: f64,
    threshold: f64,
    max_new: usize,
) -> Result<OracleCorrection> {
    let mut sparse = Session::start(weights, prompt, mode, keep_fraction)?;
    let mut full = Session::with_plan(
        weights,
        prompt,
        SparsityPlan::dense(weights.arch().intermediate_dim),
    )?;
    let dense = full.plan().clone();
    let mut tokens = Vec::with_capacity(max_new);
    let mut corrected = 0usize;
    let mut last = sparse.pending();
    for _ in 0..max_new {
        let s_row = sparse.sparse_step(last)?;
        let f_row = full.step(last, &dense)?;
        let proposal = argmax(&s_row);
        let p_full = softmax(&f_row, 1.0)[proposal as usize];
        last = if p_full < threshold {
            corrected += 1;
            argmax(&f_row)
        } else {
            proposal
        };
        tokens.push(last);
    }
    Ok(OracleCorrection {
        fraction: if max_new == 0 {
            0.0
        } else {
            corrected as f64 / max_new as f64
        },
        tokens,
        corrected,
    })
}

/// Teacher-forced variant of [`oracle_correction_run`]: both models follow
/// the full model's greedy trajectory and the result is the fraction of
/// steps where the sparse proposal scores below each threshold.
pub fn teacher_forced_correction_fractions(
    weights: &ModelWeights,
    prompt: &[u32],
    mode: SparsityMode,
    keep_fraction: f64,
    thresholds: &[f64],
    max_new: usize,
) -> Result<Vec<f64>> {
    let mut sparse = Session::start(weights, prompt, mode, keep_fraction)?;
    let mut full = Session::with_plan(
        weights,
        prompt,
        SparsityPlan::dense(weights.arch().intermediate_dim),
    )?;
    let dense = full.plan().clone();
    let mut scores = Vec::with_capacity(max_new);
    let mut last = sparse.pending();
    for _ in 0..max_new {
        let s_row = sparse.sparse_step(last)?;
        let f_row = full.step(last, &dense)?;
        scores.push(softmax(&f_row, 1.0)[argmax(&s_row) as usize]);
        last = argmax(&f_row);
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            if max_new == 0 {
                0.0
            } else {
                scores.iter().filter(|&&s| s < t).count() as f64 / max_new as f64
            }
        })
        .collect())
}
