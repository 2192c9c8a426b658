use crate::error::{Error, Result};

/// Which cache slots each query of a chunk may attend to.
///
/// Slots `[0, prefix_len)` are visible to every query. On top of that each
/// query lists the extra slots it sees, in ascending order, ending with its
/// own slot. A causal chunk lists the preceding chunk slots; a tree node
/// lists its ancestors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    prefix_len: usize,
    extra: Vec<Vec<usize>>,
}

impl AttentionMask {
    /// Plain causal mask for `len` queries written at `prefix_len..`.
    pub fn causal(prefix_len: usize, len: usize) -> Self {
        let extra = (0..len)
            .map(|q| (prefix_len..=prefix_len + q).collect())
            .collect();
        Self { prefix_len, extra }
    }

    /// Mask for queries written at consecutive slots starting at
    /// `prefix_len`, where query `q` sees its ancestors through `parents`
    /// (indices into the same chunk, each smaller than `q`).
    pub fn from_parents(prefix_len: usize, parents: &[Option<usize>]) -> Result<Self> {
        let mut extra: Vec<Vec<usize>> = Vec::with_capacity(parents.len());
        for (q, parent) in parents.iter().enumerate() {
            let mut slots = match *parent {
                Some(p) if p < q => extra[p].clone(),
                Some(p) => {
                    return Err(Error::Logic(format!(
                        "parent {p} of query {q} does not precede it"
                    )))
                }
                None => Vec::new(),
            };
            slots.push(prefix_len + q);
            extra.push(slots);
        }
        Ok(Self { prefix_len, extra })
    }

    /// Builds a mask from explicit per-query slot lists.
    pub fn from_slots(prefix_len: usize, extra: Vec<Vec<usize>>) -> Result<Self> {
        for (q, slots) in extra.iter().enumerate() {
            if slots.is_empty() {
                return Err(Error::Logic(format!("query {q} sees no chunk slot")));
            }
            if slots.windows(2).any(|w| w[0] >= w[1]) || slots[0] < prefix_len {
                return Err(Error::Logic(format!(
                    "query {q} slots must be ascending and past the prefix"
                )));
            }
        }
        Ok(Self { prefix_len, extra })
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn len(&self) -> usize {
        self.extra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extra.is_empty()
    }

    /// Extra slots of query `q`, ascending, own slot last.
    pub fn extra_slots(&self, q: usize) -> &[usize] {
        &self.extra[q]
    }

    pub fn is_visible(&self, q: usize, slot: usize) -> bool {
        slot < self.prefix_len || self.extra[q].binary_search(&slot).is_ok()
    }

    /// Number of slots query `q` attends to.
    pub fn visible_count(&self, q: usize) -> usize {
        self.prefix_len + self.extra[q].len()
    }

    /// Dense visibility table over slots `[0, width)`.
    pub fn to_table(&self, width: usize) -> Vec<Vec<bool>> {
        (0..self.len())
            .map(|q| (0..width).map(|s| self.is_visible(q, s)).collect())
            .collect()
    }

    /// Slot a query writes its own key/value row to.
    pub fn own_slot(&self, q: usize) -> usize {
        *self.extra[q].last().expect("validated non-empty")
    }

    /// Extends the mask with one leading query at `prefix_len - 1` that every
    /// existing query also sees. Used to put the pending token in front of a
    /// flattened tree.
    pub fn with_shared_root(&self) -> Result<Self> {
        if self.prefix_len == 0 {
            return Err(Error::Logic("no slot before the prefix for a root".into()));
        }
        let root = self.prefix_len - 1;
        let mut extra = Vec::with_capacity(self.len() + 1);
        extra.push(vec![root]);
        for slots in &self.extra {
            let mut with_root = Vec::with_capacity(slots.len() + 1);
            with_root.push(root);
            with_root.extend_from_slice(slots);
            extra.push(with_root);
        }
        Ok(Self {
            prefix_len: root,
            extra,
        })
    }
}
