//! A generation session: one shared cache serving both the sparse and the
//! full model over the same weights.
//!
//! Between kernels the session keeps one *pending* token: the last
//! committed token, whose key/value row has not been computed yet. Rows
//! exist for every committed token before it, so
//! `cache.committed_len() == tokens.len() - 1`.

use crate::error::{Error, Result};
use crate::kvcache::LayeredKVCache;
use crate::model::{AttentionMask, ModelWeights, RowWrite};
use crate::probs::argmax;
use crate::sparsity::{GateStats, SparsityMode, SparsityPlan};

#[derive(Debug, Clone)]
pub struct Session<'w> {
    weights: &'w ModelWeights,
    cache: LayeredKVCache,
    tokens: Vec<u32>,
    prompt_len: usize,
    plan: SparsityPlan,
}

impl<'w> Session<'w> {
    /// Dense prefill of the prompt (collecting gate statistics), plan
    /// construction, then the last prompt token is left pending.
    pub fn start(
        weights: &'w ModelWeights,
        prompt: &[u32],
        mode: SparsityMode,
        keep_fraction: f64,
    ) -> Result<Self> {
        let arch = *weights.arch();
        let mut cache = LayeredKVCache::for_arch(&arch);
        let mut stats = GateStats::for_arch(&arch);
        weights.prefill(prompt, &mut cache, Some(&mut stats))?;
        let plan = match mode {
            SparsityMode::Dense => SparsityPlan::dense(arch.intermediate_dim),
            SparsityMode::FSparse => SparsityPlan::fsparse(arch.intermediate_dim, keep_fraction)?,
            SparsityMode::CSparse => {
                SparsityPlan::build_csparse(&stats, arch.num_layers, keep_fraction)?
            }
        };
        cache.truncate(prompt.len() - 1)?;
        Ok(Self {
            weights,
            cache,
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            plan,
        })
    }

    /// Same as [`Session::start`] but with a caller-supplied plan.
    pub fn with_plan(
        weights: &'w ModelWeights,
        prompt: &[u32],
        plan: SparsityPlan,
    ) -> Result<Self> {
        let mut cache = LayeredKVCache::for_arch(weights.arch());
        weights.prefill(prompt, &mut cache, None)?;
        cache.truncate(prompt.len() - 1)?;
        Ok(Self {
            weights,
            cache,
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            plan,
        })
    }

    pub fn weights(&self) -> &'w ModelWeights {
        self.weights
    }

    pub fn plan(&self) -> &SparsityPlan {
        &self.plan
    }

    pub fn cache(&self) -> &LayeredKVCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut LayeredKVCache {
        &mut self.cache
    }

    /// Prompt followed by everything committed so far.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn pending(&self) -> u32 {
        *self.tokens.last().expect("sessions are never empty")
    }

    /// Slot of the pending token; equals the number of committed rows.
    pub fn base(&self) -> usize {
        self.tokens.len() - 1
    }

    pub(crate) fn commit_tokens(&mut self, tokens: &[u32]) {
        self.tokens.extend_from_slice(tokens);
    }

    /// Checks the pending-token invariant.
    pub fn check_aligned(&self) -> Result<()> {
        if self.cache.committed_len() != self.base() {
            return Err(Error::Logic(format!(
                "{} cached rows for {} committed tokens",
                self.cache.committed_len(),
                self.tokens.len()
            )));
        }
        Ok(())
    }

    /// One token through the model at slot `committed_len`, under `plan`.
    pub fn step(&mut self, token: u32, plan: &SparsityPlan) -> Result<Vec<f32>> {
        let slot = self.cache.committed_len();
        if slot >= self.cache.capacity() {
            return Err(Error::Capacity(format!("cache full at {slot} rows")));
        }
        let mask = AttentionMask::causal(slot, 1);
        let mut out = self.weights.forward_masked(
            &[token],
            &[slot],
            &mask,
            &mut self.cache,
            slot,
            plan,
            RowWrite::All,
            None,
        )?;
        Ok(out.pop().expect("one row"))
    }

    /// One token through the sparse model.
    pub fn sparse_step(&mut self, token: u32) -> Result<Vec<f32>> {
        let plan = self.plan.clone();
        self.step(token, &plan)
    }

    /// Full-model logits for the position after the pending token, from a
    /// throwaway copy of the cache.
    pub fn dense_next_logits(&self) -> Result<Vec<f32>> {
        let mut probe = self.cache.clone();
        probe.truncate(self.base())?;
        let dense = SparsityPlan::dense(self.weights.arch().intermediate_dim);
        let slot = self.base();
        let mask = AttentionMask::causal(slot, 1);
        let mut out = self.weights.forward_masked(
            &[self.pending()],
            &[slot],
            &mask,
            &mut probe,
            slot,
            &dense,
            RowWrite::None,
            None,
        )?;
        Ok(out.pop().expect("one row"))
    }
}

/// Plain full-model greedy decoding: prefill, then `max_new` argmax steps.
pub fn dense_greedy(weights: &ModelWeights, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let mut cache = LayeredKVCache::for_arch(weights.arch());
    let dense = SparsityPlan::dense(weights.arch().intermediate_dim);
    let logits = weights.prefill(prompt, &mut cache, None)?;
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let mut next = argmax(logits.last().expect("non-empty prompt"));
    out.push(next);
    while out.len() < max_new {
        let row = weights.decode_step(next, &mut cache, &dense)?;
        next = argmax(&row);
        out.push(next);
    }
    Ok(out)
}

/// Greedy decoding with the sparse model alone: dense prefill for the
/// prompt, then every generated token from the sparse plan.
pub fn sparse_greedy(
    weights: &ModelWeights,
    prompt: &[u32],
    mode: SparsityMode,
    keep_fraction: f64,
    max_new: usize,
) -> Result<Vec<u32>> {
    let mut session = Session::start(weights, prompt, mode, keep_fraction)?;
    let mut out = Vec::with_capacity(max_new);
    let mut token = session.pending();
    while out.len() < max_new {
        let row = session.sparse_step(token)?;
        token = argmax(&row);
        out.push(token);
    }
    Ok(out)
}
