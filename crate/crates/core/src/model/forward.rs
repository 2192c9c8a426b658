use super::mask::AttentionMask;
use super::weights::{dot, LayerWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::kvcache::LayeredKVCache;
use crate::sparsity::{top_k_by_magnitude, GateStats, SparsityMode, SparsityPlan};

const RMS_EPS: f32 = 1e-5;

/// Which of a chunk's freshly computed key/value rows are stored in the
/// cache. Attention inside the chunk always uses the fresh rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowWrite {
    All,
    /// Only chunk entries with index `>= n`.
    From(usize),
    None,
}

impl RowWrite {
    fn keeps(self, idx: usize) -> bool {
        match self {
            RowWrite::All => true,
            RowWrite::From(n) => idx >= n,
            RowWrite::None => false,
        }
    }
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn rms_norm(x: &[f32], scale: &[f32], out: &mut [f32]) {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    for ((o, v), s) in out.iter_mut().zip(x).zip(scale) {
        *o = v * inv * s;
    }
}

impl ModelWeights {
    /// Dense pass over a prompt written at slots `0..len`. Returns logits for
    /// every position. `stats` receives each layer's gate activations.
    pub fn prefill(
        &self,
        tokens: &[u32],
        cache: &mut LayeredKVCache,
        stats: Option<&mut GateStats>,
    ) -> Result<Vec<Vec<f32>>> {
        if tokens.is_empty() {
            return Err(Error::Logic("prefill needs at least one token".into()));
        }
        if cache.committed_len() != 0 {
            return Err(Error::Logic(format!(
                "prefill expects an empty cache, found {} rows",
                cache.committed_len()
            )));
        }
        if tokens.len() > self.arch().max_positions {
            return Err(Error::Capacity(format!(
                "prompt of {} tokens exceeds {} positions",
                tokens.len(),
                self.arch().max_positions
            )));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mask = AttentionMask::causal(0, tokens.len());
        let dense = SparsityPlan::dense(self.arch().intermediate_dim);
        self.forward_masked(
            tokens,
            &positions,
            &mask,
            cache,
            0,
            &dense,
            RowWrite::All,
            stats,
        )
    }

    /// One token at slot and position `committed_len`, attending to every
    /// committed row.
    pub fn decode_step(
        &self,
        token: u32,
        cache: &mut LayeredKVCache,
        plan: &SparsityPlan,
    ) -> Result<Vec<f32>> {
        let slot = cache.committed_len();
        if slot == 0 {
            return Err(Error::Logic("decode_step needs a non-empty cache".into()));
        }
        if slot >= cache.capacity() {
            return Err(Error::Capacity(format!("cache full at {slot} rows")));
        }
        let mask = AttentionMask::causal(slot, 1);
        let mut out = self.forward_masked(
            &[token],
            &[slot],
            &mask,
            cache,
            slot,
            plan,
            RowWrite::All,
            None,
        )?;
        Ok(out.pop().expect("one row"))
    }

    /// Dense pass over a chunk, overwriting rows `write_base..` in place.
    pub fn forward_chunk(
        &self,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut LayeredKVCache,
        write_base: usize,
    ) -> Result<Vec<Vec<f32>>> {
        let dense = SparsityPlan::dense(self.arch().intermediate_dim);
        self.forward_masked(
            tokens,
            positions,
            mask,
            cache,
            write_base,
            &dense,
            RowWrite::All,
            None,
        )
    }

    /// General masked forward pass. Chunk entry `i` owns slot
    /// `write_base + i`; `positions` carries the rotary position of each
    /// entry, which need not match its slot.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_masked(
        &self,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut LayeredKVCache,
        write_base: usize,
        plan: &SparsityPlan,
        write: RowWrite,
        mut stats: Option<&mut GateStats>,
    ) -> Result<Vec<Vec<f32>>> {
        self.check_chunk(tokens, positions, mask, cache, write_base)?;
        let arch = *self.arch();
        let m = tokens.len();
        let h = arch.hidden_dim;
        let kv_dim = arch.kv_dim();
        let head_dim = arch.head_dim();
        let group = arch.num_heads / arch.num_kv_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let mut x: Vec<Vec<f32>> = tokens
            .iter()
            .map(|&t| self.embed.row(t as usize).to_vec())
            .collect();
        let mut normed = vec![0.0f32; h];
        let mut queries = vec![vec![0.0f32; h]; m];
        let mut keys = vec![0.0f32; m * kv_dim];
        let mut values = vec![0.0f32; m * kv_dim];
        let mut attn = vec![0.0f32; h];
        let mut proj = vec![0.0f32; h];
        let mut scores: Vec<f32> = Vec::new();
        let mut gate = vec![0.0f32; arch.intermediate_dim];
        let mut mlp_out = vec![0.0f32; h];

        for (l, layer) in self.layers.iter().enumerate() {
            for q in 0..m {
                rms_norm(&x[q], &layer.attn_norm, &mut normed);
                layer.wq.matvec(&normed, &mut queries[q]);
                let k_row = &mut keys[q * kv_dim..(q + 1) * kv_dim];
                layer.wk.matvec(&normed, k_row);
                layer
                    .wv
                    .matvec(&normed, &mut values[q * kv_dim..(q + 1) * kv_dim]);
                self.rope.apply(&mut queries[q], positions[q]);
                self.rope
                    .apply(&mut keys[q * kv_dim..(q + 1) * kv_dim], positions[q]);
            }

            for q in 0..m {
                let visible = mask.extra_slots(q);
                for head in 0..arch.num_heads {
                    let kvh = head / group;
                    let qh = &queries[q][head * head_dim..(head + 1) * head_dim];
                    let key_of = |slot: usize| -> &[f32] {
                        if slot >= write_base && slot < write_base + m {
                            let i = slot - write_base;
                            &keys[i * kv_dim + kvh * head_dim..i * kv_dim + (kvh + 1) * head_dim]
                        } else {
                            &cache.key_row(l, slot)[kvh * head_dim..(kvh + 1) * head_dim]
                        }
                    };
                    let value_of = |slot: usize| -> &[f32] {
                        if slot >= write_base && slot < write_base + m {
                            let i = slot - write_base;
                            &values[i * kv_dim + kvh * head_dim..i * kv_dim + (kvh + 1) * head_dim]
                        } else {
                            &cache.value_row(l, slot)[kvh * head_dim..(kvh + 1) * head_dim]
                        }
                    };
                    let slots = (0..mask.prefix_len()).chain(visible.iter().copied());
                    scores.clear();
                    scores.extend(slots.clone().map(|s| dot(qh, key_of(s)) * scale));
                    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut total = 0.0f32;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let out = &mut attn[head * head_dim..(head + 1) * head_dim];
                    out.fill(0.0);
                    for (w, s) in scores.iter().zip(slots) {
                        let p = w / total;
                        for (o, v) in out.iter_mut().zip(value_of(s)) {
                            *o += p * v;
                        }
                    }
                }
                layer.wo.matvec(&attn, &mut proj);
                for (xv, p) in x[q].iter_mut().zip(&proj) {
                    *xv += p;
                }
            }

            for i in 0..m {
                if write.keeps(i) {
                    cache.write_rows(
                        l,
                        write_base + i,
                        &keys[i * kv_dim..(i + 1) * kv_dim],
                        &values[i * kv_dim..(i + 1) * kv_dim],
                    )?;
                }
            }

            for xq in x.iter_mut() {
                rms_norm(xq, &layer.mlp_norm, &mut normed);
                mlp(
                    layer,
                    l,
                    plan,
                    &normed,
                    &mut gate,
                    &mut mlp_out,
                    stats.as_deref_mut(),
                )?;
                for (xv, o) in xq.iter_mut().zip(&mlp_out) {
                    *xv += o;
                }
            }
        }

        let mut logits = Vec::with_capacity(m);
        for xq in &x {
            rms_norm(xq, &self.final_norm, &mut normed);
            let mut row = vec![0.0f32; arch.vocab_size];
            self.lm_head.matvec(&normed, &mut row);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite logits".into()));
            }
            logits.push(row);
        }
        Ok(logits)
    }

    fn check_chunk(
        &self,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &LayeredKVCache,
        write_base: usize,
    ) -> Result<()> {
        let arch = self.arch();
        let m = tokens.len();
        if m == 0 {
            return Err(Error::Logic("empty chunk".into()));
        }
        if positions.len() != m || mask.len() != m {
            return Err(Error::Logic(format!(
                "chunk of {m} tokens with {} positions and {} mask rows",
                positions.len(),
                mask.len()
            )));
        }
        if cache.num_layers() != arch.num_layers || cache.row_dim() != arch.kv_dim() {
            return Err(Error::Logic("cache shape does not match the model".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= arch.vocab_size) {
            return Err(Error::Config(format!(
                "token {t} outside vocabulary of {}",
                arch.vocab_size
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= arch.max_positions) {
            return Err(Error::Capacity(format!(
                "position {p} beyond {} positions",
                arch.max_positions
            )));
        }
        if write_base + m > cache.capacity() {
            return Err(Error::Capacity(format!(
                "chunk slots [{write_base}, {}) exceed cache capacity {}",
                write_base + m,
                cache.capacity()
            )));
        }
        if mask.prefix_len() > write_base || mask.prefix_len() > cache.committed_len() {
            return Err(Error::Logic(format!(
                "mask prefix {} overlaps the chunk at {write_base} or uncommitted rows",
                mask.prefix_len()
            )));
        }
        for q in 0..m {
            if mask.own_slot(q) != write_base + q {
                return Err(Error::Logic(format!(
                    "query {q} does not end on its own slot"
                )));
            }
            for &s in mask.extra_slots(q) {
                let in_chunk = s >= write_base && s < write_base + m;
                let ok = if in_chunk {
                    s - write_base <= q
                } else {
                    s < cache.committed_len()
                };
                if !ok {
                    return Err(Error::Logic(format!("query {q} sees undefined slot {s}")));
                }
            }
        }
        Ok(())
    }
}

/// Gated MLP for one position. Neurons are always visited in ascending
/// index order so that any plan keeping every neuron reproduces the dense
/// result exactly.
fn mlp(
    layer: &LayerWeights,
    l: usize,
    plan: &SparsityPlan,
    x: &[f32],
    gate: &mut [f32],
    out: &mut [f32],
    stats: Option<&mut GateStats>,
) -> Result<()> {
    out.fill(0.0);
    let mut accumulate = |j: usize, g: f32| {
        let a = g * dot(layer.up.row(j), x);
        for (o, d) in out.iter_mut().zip(layer.down.row(j)) {
            *o += a * d;
        }
    };
    match plan.mode() {
        SparsityMode::CSparse => {
            let set = plan
                .selected(l)
                .ok_or_else(|| Error::Logic(format!("plan has no selection for layer {l}")))?;
            for &j in set {
                accumulate(j, silu(dot(layer.gate.row(j), x)));
            }
        }
        mode => {
            for (j, g) in gate.iter_mut().enumerate() {
                *g = silu(dot(layer.gate.row(j), x));
            }
            if let Some(stats) = stats {
                stats.accumulate(l, gate)?;
            }
            if mode == SparsityMode::FSparse {
                for j in top_k_by_magnitude(gate, plan.keep_count()) {
                    accumulate(j, gate[j]);
                }
            } else {
                for (j, &g) in gate.iter().enumerate() {
                    accumulate(j, g);
                }
            }
        }
    }
    Ok(())
}
