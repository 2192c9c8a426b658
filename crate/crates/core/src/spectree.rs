//! Fixed-shape speculation trees.
//!
//! The sparse model expands every surviving node into its top `branch`
//! children; the pooled candidates of a step are pruned back to `width` by
//! cumulative log-likelihood. The full model verifies all
//! `(kernel_size - 1) * width` nodes in a single masked pass and the path
//! with the longest accepted prefix wins.
//!
//! Slot layout during a kernel, with `base` the pending token's slot:
//! `base` holds the pending token and node `i` (step-major flat index)
//! lives at `base + 1 + i`. Committing compacts the accepted path to
//! `base + 1..`.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrector::{
    accept_prefix, pick_token, CorrectionConfig, DraftMode, KernelOutcome, TokenEvent,
};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, RowWrite};
use crate::probs::{argmax, log_softmax, rank_of, softmax, top_k_tokens};
use crate::session::Session;

/// Flattened trees up to this many nodes verify at roughly single-token
/// cost on memory-bound hardware.
pub const PARALLEL_BUDGET: usize = 64;
pub const MAX_WIDE_TREE_WIDTH: usize = 8;
pub const DEFAULT_BRANCH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub width: usize,
    pub branch: usize,
    /// Lets the tree exceed [`PARALLEL_BUDGET`] nodes, up to width
    /// [`MAX_WIDE_TREE_WIDTH`].
    pub allow_wide: bool,
}

impl TreeConfig {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            branch: DEFAULT_BRANCH,
            allow_wide: false,
        }
    }

    pub fn validate(&self, kernel_size: usize) -> Result<()> {
        if self.width == 0 || self.branch == 0 {
            return Err(Error::Config(
                "tree width and branch must be at least 1".into(),
            ));
        }
        if kernel_size < 2 {
            return Err(Error::Config("trees need a kernel of at least 2".into()));
        }
        let nodes = (kernel_size - 1) * self.width;
        if nodes > PARALLEL_BUDGET && !(self.allow_wide && self.width <= MAX_WIDE_TREE_WIDTH) {
            return Err(Error::Config(format!(
                "tree of {nodes} nodes exceeds the parallel budget of {PARALLEL_BUDGET}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: u32,
    /// Index within the previous step; `None` for first-step nodes, whose
    /// parent is the pending token.
    pub parent: Option<usize>,
    pub logp: f64,
    pub cum_ll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeculationTree {
    steps: usize,
    width: usize,
    /// Step-major: node `(s, w)` at `s * width + w`.
    nodes: Vec<TreeNode>,
}

impl SpeculationTree {
    pub fn from_nodes(steps: usize, width: usize, nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.len() != steps * width {
            return Err(Error::Logic(format!(
                "{} nodes for a {steps} x {width} tree",
                nodes.len()
            )));
        }
        for (i, n) in nodes.iter().enumerate() {
            let ok = match (i / width, n.parent) {
                (0, None) => true,
                (s, Some(p)) if s > 0 => p < width,
                _ => false,
            };
            if !ok {
                return Err(Error::Logic(format!("node {i} has an invalid parent")));
            }
        }
        Ok(Self {
            steps,
            width,
            nodes,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, step: usize, w: usize) -> &TreeNode {
        &self.nodes[step * self.width + w]
    }

    /// Flat index of the parent node, `None` when the parent is the root.
    pub fn parent_flat(&self, flat: usize) -> Option<usize> {
        let step = flat / self.width;
        self.nodes[flat].parent.map(|p| (step - 1) * self.width + p)
    }

    /// Flat indices from the first step down to `flat`.
    pub fn path_to(&self, flat: usize) -> Vec<usize> {
        let mut path = vec![flat];
        let mut cur = flat;
        while let Some(p) = self.parent_flat(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Step-major text listing: `step slot token parent logp cum_ll`.
    pub fn dump(&self, base_slot: usize) -> String {
        let mut out = String::from("step\tslot\ttoken\tparent\tlogp\tcum_ll\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or("root".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                i / self.width + 1,
                base_slot + 1 + i,
                n.token,
                parent,
                n.logp,
                n.cum_ll
            );
        }
        out
    }
}

/// Per-step pruning rule: highest cumulative log-likelihood first, ties by
/// lower parent index then lower token id.
pub fn prune(mut pool: Vec<TreeNode>, width: usize) -> Vec<TreeNode> {
    pool.sort_by(|a, b| {
        b.cum_ll
            .total_cmp(&a.cum_ll)
            .then(a.parent.cmp(&b.parent))
            .then(a.token.cmp(&b.token))
    });
    pool.truncate(width);
    pool
}

/// Builds the tree for the session's pending token with the sparse model.
/// Leaves sparse rows for the pending token and for every non-final node in
/// the scratch slots.
pub fn build_tree(
    session: &mut Session<'_>,
    kernel_size: usize,
    width: usize,
    branch: usize,
) -> Result<SpeculationTree> {
    if width == 0 || branch == 0 || kernel_size < 2 {
        return Err(Error::Config(
            "tree needs width, branch >= 1 and kernel >= 2".into(),
        ));
    }
    session.check_aligned()?;
    let steps = kernel_size - 1;
    let base = session.base();
    let needed = base + 1 + steps * width;
    if needed > session.cache().capacity() {
        return Err(Error::Capacity(format!(
            "tree scratch up to slot {needed} exceeds capacity {}",
            session.cache().capacity()
        )));
    }
    let root_row = session.sparse_step(session.pending())?;
    let root_lp = log_softmax(&root_row);
    let mut nodes: Vec<TreeNode> = top_k_tokens(&root_row, width)
        .into_iter()
        .map(|t| TreeNode {
            token: t,
            parent: None,
            logp: root_lp[t as usize],
            cum_ll: root_lp[t as usize],
        })
        .collect();
    if nodes.len() < width {
        return Err(Error::Config(format!(
            "vocabulary smaller than tree width {width}"
        )));
    }

    let plan = session.plan().clone();
    let weights = session.weights();
    let mut step_nodes = nodes.clone();
    for s in 1..steps {
        let prev = (s - 1) * width;
        let partial = SpeculationTree {
            steps: s,
            width,
            nodes: nodes.clone(),
        };
        let tokens: Vec<u32> = step_nodes.iter().map(|n| n.token).collect();
        let positions = vec![base + s; width];
        let extra: Vec<Vec<usize>> = (0..width)
            .map(|w| {
                partial
                    .path_to(prev + w)
                    .iter()
                    .map(|&f| base + 1 + f)
                    .collect()
            })
            .collect();
        let mask = AttentionMask::from_slots(base + 1, extra)?;
        let rows = weights.forward_masked(
            &tokens,
            &positions,
            &mask,
            session.cache_mut(),
            base + 1 + prev,
            &plan,
            RowWrite::All,
            None,
        )?;
        let mut pool = Vec::with_capacity(width * branch);
        for (w, row) in rows.iter().enumerate() {
            let lp = log_softmax(row);
            for t in top_k_tokens(row, branch) {
                pool.push(TreeNode {
                    token: t,
                    parent: Some(w),
                    logp: lp[t as usize],
                    cum_ll: step_nodes[w].cum_ll + lp[t as usize],
                });
            }
        }
        step_nodes = prune(pool, width);
        nodes.extend_from_slice(&step_nodes);
    }
    SpeculationTree::from_nodes(steps, width, nodes)
}

/// Step-major tokens, rotary positions `base_position + step` and the
/// ancestor mask for the tree's nodes, written from slot `base_position`.
pub fn flatten_tree(
    tree: &SpeculationTree,
    base_position: usize,
) -> Result<(Vec<u32>, Vec<usize>, AttentionMask)> {
    let tokens = tree.nodes.iter().map(|n| n.token).collect();
    let positions = (0..tree.len())
        .map(|i| base_position + i / tree.width)
        .collect();
    let parents: Vec<Option<usize>> = (0..tree.len()).map(|i| tree.parent_flat(i)).collect();
    let mask = AttentionMask::from_parents(base_position, &parents)?;
    Ok((tokens, positions, mask))
}

/// Full-model logits for the pending token (entry 0) and every node
/// (entry `1 + flat`).
#[derive(Debug, Clone)]
pub struct TreeScores {
    pub logits: Vec<Vec<f32>>,
}

impl TreeScores {
    /// Chunk entry whose logits predict node `flat`.
    pub fn predictor_of(tree: &SpeculationTree, flat: usize) -> usize {
        tree.parent_flat(flat).map_or(0, |p| 1 + p)
    }

    /// Full-model probability of each node's token given its ancestors.
    pub fn node_q(&self, tree: &SpeculationTree) -> Vec<f64> {
        (0..tree.len())
            .map(|i| {
                softmax(&self.logits[Self::predictor_of(tree, i)], 1.0)
                    [tree.nodes[i].token as usize]
            })
            .collect()
    }
}

/// One dense pass over `[pending, nodes...]`, rewriting the pending row and
/// every node's scratch row.
pub fn score_tree(session: &mut Session<'_>, tree: &SpeculationTree) -> Result<TreeScores> {
    let base = session.base();
    let (node_tokens, node_positions, node_mask) = flatten_tree(tree, base + 1)?;
    let mask = node_mask.with_shared_root()?;
    let mut tokens = Vec::with_capacity(tree.len() + 1);
    tokens.push(session.pending());
    tokens.extend(node_tokens);
    let mut positions = Vec::with_capacity(tree.len() + 1);
    positions.push(base);
    positions.extend(node_positions);
    let weights = session.weights();
    let logits = weights.forward_chunk(&tokens, &positions, &mask, session.cache_mut(), base)?;
    Ok(TreeScores { logits })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeVerdict {
    /// Flat node indices of the winning root-to-leaf path.
    pub path: Vec<usize>,
    pub accepted: usize,
    /// Full-model q values along the winning path.
    pub q: Vec<f64>,
    /// Chunk entry whose full distribution supplies the interleaved token.
    pub cut_entry: usize,
    /// Argmax of that distribution.
    pub interleaved: u32,
}

/// Picks the leaf path with the longest accepted prefix; ties go to the
/// higher cumulative log-likelihood, then the lower leaf index.
pub fn verify_tree(
    tree: &SpeculationTree,
    scores: &TreeScores,
    threshold: f64,
) -> Result<TreeVerdict> {
    if scores.logits.len() != tree.len() + 1 {
        return Err(Error::Logic("scores do not cover the tree".into()));
    }
    let q = scores.node_q(tree);
    let last = (tree.steps - 1) * tree.width;
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for w in 0..tree.width {
        let path = tree.path_to(last + w);
        let path_q: Vec<f64> = path.iter().map(|&f| q[f]).collect();
        let accepted = accept_prefix(&path_q, threshold).unwrap_or(tree.steps);
        let cum = tree.nodes[last + w].cum_ll;
        let better = match &best {
            None => true,
            Some((a, c, _)) => accepted > *a || (accepted == *a && cum > *c),
        };
        if better {
            best = Some((accepted, cum, path));
        }
    }
    let (accepted, _, path) = best.expect("width >= 1");
    let cut_entry = if accepted < tree.steps {
        TreeScores::predictor_of(tree, path[accepted])
    } else {
        1 + path[tree.steps - 1]
    };
    Ok(TreeVerdict {
        q: path.iter().map(|&f| q[f]).collect(),
        interleaved: argmax(&scores.logits[cut_entry]),
        path,
        accepted,
        cut_entry,
    })
}

/// Moves the accepted nodes' full-model rows behind the pending row, drops
/// the scratch, and commits the accepted tokens plus `interleaved`.
pub fn commit_path(
    session: &mut Session<'_>,
    tree: &SpeculationTree,
    verdict: &TreeVerdict,
    interleaved: u32,
) -> Result<()> {
    let base = session.base();
    let cache = session.cache_mut();
    for (s, &flat) in verdict.path[..verdict.accepted].iter().enumerate() {
        cache.move_row(base + 1 + flat, base + 1 + s)?;
    }
    cache.truncate(base + 1 + verdict.accepted)?;
    let mut committed: Vec<u32> = verdict.path[..verdict.accepted]
        .iter()
        .map(|&f| tree.nodes[f].token)
        .collect();
    committed.push(interleaved);
    session.commit_tokens(&committed);
    session.check_aligned()
}

/// One tree kernel: build, score, verify, commit.
pub fn run_tree_kernel(
    session: &mut Session<'_>,
    config: &CorrectionConfig,
    tree_config: &TreeConfig,
    rng: &mut ChaCha8Rng,
    kernel_idx: usize,
) -> Result<KernelOutcome> {
    tree_config.validate(config.kernel_size)?;
    let tree = build_tree(
        session,
        config.kernel_size,
        tree_config.width,
        tree_config.branch,
    )?;
    let scores = score_tree(session, &tree)?;
    let verdict = verify_tree(&tree, &scores, config.threshold)?;
    let interleaved = match config.draft_mode {
        DraftMode::Greedy => verdict.interleaved,
        DraftMode::Sampled => pick_token(
            &scores.logits[verdict.cut_entry],
            DraftMode::Sampled,
            config.scoring_temperature,
            rng,
        ),
    };
    let drafted: Vec<u32> = verdict.path.iter().map(|&f| tree.nodes[f].token).collect();
    let checked = (verdict.accepted + 1).min(tree.steps);
    let events = (0..checked)
        .map(|s| {
            let flat = verdict.path[s];
            let token = tree.nodes[flat].token;
            TokenEvent {
                kernel: kernel_idx,
                offset: s,
                token,
                q: verdict.q[s],
                full_rank: rank_of(&scores.logits[TreeScores::predictor_of(&tree, flat)], token),
                accepted: s < verdict.accepted,
                alt_hit_rank: None,
            }
        })
        .collect();
    commit_path(session, &tree, &verdict, interleaved)?;
    let mut committed = drafted[..verdict.accepted].to_vec();
    committed.push(interleaved);
    Ok(KernelOutcome {
        rejection: (verdict.accepted < tree.steps).then_some(verdict.accepted),
        advance: committed.len(),
        q: verdict.q.clone(),
        drafted,
        interleaved: Some(interleaved),
        committed,
        events,
        entropies: Vec::new(),
    })
}

/// Table-style hit statistics over rejection events, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitCoverage {
    pub second_hit: f64,
    pub third_hit: f64,
    pub miss: f64,
    pub coverage: f64,
}

/// `ranks[i]` is the sparse rank of the alternative the full model accepted
/// at rejection `i`, or `None` when no alternative was accepted.
pub fn measure_hit_coverage(ranks: &[Option<usize>]) -> Result<HitCoverage> {
    if ranks.is_empty() {
        return Err(Error::Numeric(
            "hit coverage of an empty rejection log".into(),
        ));
    }
    let total = ranks.len() as f64;
    let count = |r: usize| ranks.iter().filter(|x| **x == Some(r)).count() as f64;
    let second = 100.0 * count(2) / total;
    let third = 100.0 * count(3) / total;
    Ok(HitCoverage {
        second_hit: second,
        third_hit: third,
        miss: 100.0 - second - third,
        coverage: second + third,
    })
}
