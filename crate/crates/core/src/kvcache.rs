//! Shared per-layer key/value store.
//!
//! Slabs are preallocated to `capacity` rows per layer. `committed_len`
//! is the number of leading slots holding live rows; writes past it extend
//! it, and [`LayeredKVCache::truncate`] rolls it back. Rows beyond
//! `committed_len` are scratch and may hold stale data.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::ArchSpec;

static NEXT_CACHE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_CACHE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, PartialEq)]
struct LayerSlab {
    keys: Vec<f32>,
    values: Vec<f32>,
}

#[derive(Debug)]
pub struct LayeredKVCache {
    id: u64,
    row_dim: usize,
    capacity: usize,
    committed_len: usize,
    layers: Vec<LayerSlab>,
}

/// Committed length captured from one particular cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheCheckpoint {
    cache_id: u64,
    committed_len: usize,
}

impl CacheCheckpoint {
    pub fn committed_len(&self) -> usize {
        self.committed_len
    }
}

impl LayeredKVCache {
    pub fn new(num_layers: usize, row_dim: usize, capacity: usize) -> Self {
        let layers = (0..num_layers)
            .map(|_| LayerSlab {
                keys: vec![0.0; row_dim * capacity],
                values: vec![0.0; row_dim * capacity],
            })
            .collect();
        Self {
            id: fresh_id(),
            row_dim,
            capacity,
            committed_len: 0,
            layers,
        }
    }

    pub fn for_arch(arch: &ArchSpec) -> Self {
        Self::new(arch.num_layers, arch.kv_dim(), arch.max_positions)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn row_dim(&self) -> usize {
        self.row_dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn committed_len(&self) -> usize {
        self.committed_len
    }

    fn check_range(&self, layer: usize, start: usize, rows: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Logic(format!(
                "layer {layer} out of range for {} layers",
                self.layers.len()
            )));
        }
        if start + rows > self.capacity {
            return Err(Error::Capacity(format!(
                "slots [{start}, {}) exceed cache capacity {}",
                start + rows,
                self.capacity
            )));
        }
        Ok(())
    }

    /// Overwrites rows `[start, start + n)` of `layer` in place, where `n` is
    /// the number of rows in `keys`.
    pub fn write_rows(
        &mut self,
        layer: usize,
        start: usize,
        keys: &[f32],
        values: &[f32],
    ) -> Result<()> {
        if keys.len() != values.len() || !keys.len().is_multiple_of(self.row_dim) {
            return Err(Error::Logic(format!(
                "row buffers of {} and {} floats do not match row width {}",
                keys.len(),
                values.len(),
                self.row_dim
            )));
        }
        let rows = keys.len() / self.row_dim;
        self.check_range(layer, start, rows)?;
        let span = start * self.row_dim..(start + rows) * self.row_dim;
        let slab = &mut self.layers[layer];
        slab.keys[span.clone()].copy_from_slice(keys);
        slab.values[span].copy_from_slice(values);
        self.committed_len = self.committed_len.max(start + rows);
        Ok(())
    }

    #[inline]
    pub fn key_row(&self, layer: usize, slot: usize) -> &[f32] {
        &self.layers[layer].keys[slot * self.row_dim..(slot + 1) * self.row_dim]
    }

    #[inline]
    pub fn value_row(&self, layer: usize, slot: usize) -> &[f32] {
        &self.layers[layer].values[slot * self.row_dim..(slot + 1) * self.row_dim]
    }

    pub fn truncate(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.committed_len {
            return Err(Error::Logic(format!(
                "cannot truncate to {new_len}: only {} rows committed",
                self.committed_len
            )));
        }
        self.committed_len = new_len;
        Ok(())
    }

    pub fn checkpoint(&self) -> CacheCheckpoint {
        CacheCheckpoint {
            cache_id: self.id,
            committed_len: self.committed_len,
        }
    }

    /// Returns `committed_len` to the checkpointed value. Row contents are
    /// left alone.
    pub fn restore(&mut self, cp: &CacheCheckpoint) -> Result<()> {
        if cp.cache_id != self.id {
            return Err(Error::Logic(
                "checkpoint belongs to a different cache".into(),
            ));
        }
        if cp.committed_len > self.capacity {
            return Err(Error::Logic("checkpoint beyond capacity".into()));
        }
        self.committed_len = cp.committed_len;
        Ok(())
    }

    /// Copies the rows of slot `src` to slot `dst` in every layer.
    pub fn move_row(&mut self, src: usize, dst: usize) -> Result<()> {
        if src.max(dst) >= self.capacity {
            return Err(Error::Capacity(format!(
                "slot {} beyond capacity {}",
                src.max(dst),
                self.capacity
            )));
        }
        if src == dst {
            return Ok(());
        }
        let d = self.row_dim;
        for slab in &mut self.layers {
            slab.keys.copy_within(src * d..(src + 1) * d, dst * d);
            slab.values.copy_within(src * d..(src + 1) * d, dst * d);
        }
        Ok(())
    }

    /// Fills every slot at or past `committed_len` with `value`. Lets tests
    /// prove that scratch rows are never read.
    pub fn poison_free_slots(&mut self, value: f32) {
        let start = self.committed_len * self.row_dim;
        for slab in &mut self.layers {
            slab.keys[start..].fill(value);
            slab.values[start..].fill(value);
        }
    }

    /// True when both caches have the same committed length and identical
    /// committed rows.
    pub fn same_committed_rows(&self, other: &Self) -> bool {
        if self.committed_len != other.committed_len || self.row_dim != other.row_dim {
            return false;
        }
        let end = self.committed_len * self.row_dim;
        self.layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| a.keys[..end] == b.keys[..end] && a.values[..end] == b.values[..end])
    }

    /// Debug dump: committed length and row width as little-endian u32,
    /// then per layer the committed key rows followed by the committed value
    /// rows as little-endian f32.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        let header =
            |v: usize| u32::try_from(v).map_err(|_| Error::Capacity("dump header overflow".into()));
        w.write_all(&header(self.committed_len)?.to_le_bytes())?;
        w.write_all(&header(self.row_dim)?.to_le_bytes())?;
        let end = self.committed_len * self.row_dim;
        for slab in &self.layers {
            for v in slab.keys[..end].iter().chain(&slab.values[..end]) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

impl Clone for LayeredKVCache {
    /// The clone is an independent cache and gets its own identity, so
    /// checkpoints from the original do not apply to it.
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            row_dim: self.row_dim,
            capacity: self.capacity,
            committed_len: self.committed_len,
            layers: self
                .layers
                .iter()
                .map(|s| LayerSlab {
                    keys: s.keys.clone(),
                    values: s.values.clone(),
                })
                .collect(),
        }
    }
}
