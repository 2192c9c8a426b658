//! Distribution helpers over logit rows.

use rand::Rng;

use crate::error::{Error, Result};

/// Softmax in f64 of `logits / temperature`.
pub fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut p: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / t).exp())
        .collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits
        .iter()
        .map(|&l| (l as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Token ids ordered by descending logit, ties by lower id.
pub fn ranked(logits: &[f32]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    idx
}

/// The `k` best tokens, ordered as in [`ranked`].
pub fn top_k_tokens(logits: &[f32], k: usize) -> Vec<u32> {
    let mut r = ranked(logits);
    r.truncate(k);
    r
}

/// 1-based rank of `token` under [`ranked`] order.
pub fn rank_of(logits: &[f32], token: u32) -> usize {
    let t = token as usize;
    let v = logits[t];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l > v || (l == v && i < t))
        .count()
}

/// Shannon entropy in nats. The input must sum to one within 1e-4.
pub fn entropy_nats(probs: &[f64]) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-4 || probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(Error::Numeric(format!(
            "distribution sums to {total}, not 1"
        )));
    }
    Ok(-probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// Entropy of each row's temperature-1 softmax.
pub fn entropy_trace(rows: &[Vec<f32>]) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| entropy_nats(&softmax(r, 1.0)))
        .collect()
}

/// Draws from `softmax(logits / temperature)`; temperature 0 means argmax.
pub fn sample<R: Rng + ?Sized>(logits: &[f32], temperature: f64, rng: &mut R) -> u32 {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let p = softmax(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i as u32;
        }
    }
    (p.len() - 1) as u32
}

/// Largest absolute difference scaled by the reference's largest magnitude.
pub fn max_relative_error(actual: &[f32], reference: &[f32]) -> f64 {
    let scale = reference
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs() as f64))
        .max(1e-12);
    let diff = actual
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()));
    diff / scale
}
