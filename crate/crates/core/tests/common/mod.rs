#![allow(dead_code)]

use std::sync::OnceLock;

use sirius_core::kvcache::LayeredKVCache;
use sirius_core::model::{ArchSpec, ModelWeights};
use sirius_core::probs::max_relative_error;
use sirius_core::session::Session;
use sirius_core::tokenizer::toy_prompts;

pub const TOY_SEED: u64 = 7;

pub fn toy() -> &'static ModelWeights {
    static W: OnceLock<ModelWeights> = OnceLock::new();
    W.get_or_init(|| ModelWeights::init_from_seed(ArchSpec::toy(), TOY_SEED).unwrap())
}

pub fn corpus() -> &'static [Vec<u32>] {
    static P: OnceLock<Vec<Vec<u32>>> = OnceLock::new();
    P.get_or_init(toy_prompts)
}

pub fn max_rel_err_f64(actual: &[f32], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = actual
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, r)| m.max((*a as f64 - r).abs()));
    diff / scale
}

fn rms(x: &[f64], scale: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter()
        .zip(scale)
        .map(|(v, s)| v * inv * *s as f64)
        .collect()
}

fn matvec(m: &sirius_core::model::Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(x).map(|(a, b)| *a as f64 * b).sum())
        .collect()
}

fn rotate(x: &mut [f64], pos: usize, head_dim: usize) {
    for head in x.chunks_mut(head_dim) {
        for k in 0..head_dim / 2 {
            let theta = pos as f64 * 10_000f64.powf(-(2.0 * k as f64) / head_dim as f64);
            let (c, s) = (theta.cos(), theta.sin());
            let (a, b) = (head[2 * k], head[2 * k + 1]);
            head[2 * k] = a * c - b * s;
            head[2 * k + 1] = a * s + b * c;
        }
    }
}

/// Straight-line causal forward in f64 over the whole sequence, no cache.
/// `neurons[l]`, when given, restricts layer `l`'s MLP to those neurons.
pub fn reference_logits(
    w: &ModelWeights,
    tokens: &[u32],
    neurons: Option<&[Vec<usize>]>,
) -> Vec<Vec<f64>> {
    let a = *w.arch();
    let hd = a.head_dim();
    let group = a.num_heads / a.num_kv_heads;
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| w.embed.row(t as usize).iter().map(|&v| v as f64).collect())
        .collect();
    for (l, layer) in w.layers.iter().enumerate() {
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for (p, xp) in x.iter().enumerate() {
            let h = rms(xp, &layer.attn_norm);
            let mut qp = matvec(&layer.wq, &h);
            let mut kp = matvec(&layer.wk, &h);
            rotate(&mut qp, p, hd);
            rotate(&mut kp, p, hd);
            q.push(qp);
            k.push(kp);
            v.push(matvec(&layer.wv, &h));
        }
        for p in 0..n {
            let mut attn = vec![0.0f64; a.hidden_dim];
            for head in 0..a.num_heads {
                let kvh = head / group;
                let qh = &q[p][head * hd..(head + 1) * hd];
                let scores: Vec<f64> = (0..=p)
                    .map(|s| {
                        let kh = &k[s][kvh * hd..(kvh + 1) * hd];
                        qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (s, es) in e.iter().enumerate() {
                    for d in 0..hd {
                        attn[head * hd + d] += es / z * v[s][kvh * hd + d];
                    }
                }
            }
            let o = matvec(&layer.wo, &attn);
            for (xv, ov) in x[p].iter_mut().zip(o) {
                *xv += ov;
            }
        }
        for xp in x.iter_mut() {
            let h = rms(xp, &layer.mlp_norm);
            let all: Vec<usize> = (0..a.intermediate_dim).collect();
            let set = neurons.map_or(&all[..], |n| &n[l][..]);
            let mut out = vec![0.0f64; a.hidden_dim];
            for &j in set {
                let g: f64 = layer
                    .gate
                    .row(j)
                    .iter()
                    .zip(&h)
                    .map(|(a, b)| *a as f64 * b)
                    .sum();
                let u: f64 = layer
                    .up
                    .row(j)
                    .iter()
                    .zip(&h)
                    .map(|(a, b)| *a as f64 * b)
                    .sum();
                let act = g / (1.0 + (-g).exp()) * u;
                for (o, d) in out.iter_mut().zip(layer.down.row(j)) {
                    *o += act * *d as f64;
                }
            }
            for (xv, ov) in xp.iter_mut().zip(out) {
                *xv += ov;
            }
        }
    }
    x.iter()
        .map(|xp| matvec(&w.lm_head, &rms(xp, &w.final_norm)))
        .collect()
}

pub fn dense_last_logits(w: &ModelWeights, tokens: &[u32]) -> Vec<f32> {
    let mut cache = LayeredKVCache::for_arch(w.arch());
    w.prefill(tokens, &mut cache, None).unwrap().pop().unwrap()
}

/// Cache rows and next-token logits match a fresh dense prefill.
pub fn assert_cache_is_dense(session: &Session<'_>) {
    let w = session.weights();
    let tokens = session.tokens();
    let committed = session.cache().committed_len();
    assert_eq!(committed, tokens.len() - 1);
    let mut fresh = LayeredKVCache::for_arch(w.arch());
    w.prefill(&tokens[..committed], &mut fresh, None).unwrap();
    for l in 0..w.arch().num_layers {
        for s in 0..committed {
            let k = max_relative_error(session.cache().key_row(l, s), fresh.key_row(l, s));
            let v = max_relative_error(session.cache().value_row(l, s), fresh.value_row(l, s));
            assert!(k <= 1e-4 && v <= 1e-4, "layer {l} slot {s}: {k} {v}");
        }
    }
    let err = max_relative_error(
        &session.dense_next_logits().unwrap(),
        &dense_last_logits(w, tokens),
    );
    assert!(err <= 1e-4, "logit error {err}");
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleVerdict {
    pub path: Vec<usize>,
    pub accepted: usize,
    pub interleaved: u32,
    pub q: Vec<f64>,
}

fn softmax_at(logits: &[f32], token: u32) -> f64 {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let z: f64 = logits.iter().map(|&x| (x as f64 - m).exp()).sum();
    (logits[token as usize] as f64 - m).exp() / z
}

fn first_argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Scores every root-to-leaf path with its own dense prefill over
/// `context ++ path` and keeps the longest accepted prefix (ties: higher
/// leaf cum_ll, then lower leaf index).
pub fn verify_oracle(
    w: &ModelWeights,
    context: &[u32],
    tree: &sirius_core::spectree::SpeculationTree,
    threshold: f64,
) -> OracleVerdict {
    let steps = tree.steps();
    let last = (steps - 1) * tree.width();
    let mut best: Option<(OracleVerdict, f64)> = None;
    for leaf in 0..tree.width() {
        let path = tree.path_to(last + leaf);
        let mut seq = context.to_vec();
        seq.extend(path.iter().map(|&f| tree.nodes()[f].token));
        let mut cache = LayeredKVCache::for_arch(w.arch());
        let rows = w.prefill(&seq, &mut cache, None).unwrap();
        let row = |s: usize| &rows[context.len() - 1 + s];
        let q: Vec<f64> = path
            .iter()
            .enumerate()
            .map(|(s, &f)| softmax_at(row(s), tree.nodes()[f].token))
            .collect();
        let accepted = q.iter().position(|&x| x < threshold).unwrap_or(steps);
        let cum = tree.nodes()[last + leaf].cum_ll;
        let cand = OracleVerdict {
            interleaved: first_argmax(row(accepted)),
            path,
            accepted,
            q,
        };
        let better = match &best {
            None => true,
            Some((b, c)) => accepted > b.accepted || (accepted == b.accepted && cum > *c),
        };
        if better {
            best = Some((cand, cum));
        }
    }
    best.unwrap().0
}
