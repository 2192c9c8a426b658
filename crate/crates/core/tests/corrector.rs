mod common;

use common::{assert_cache_is_dense, corpus, dense_last_logits, toy};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sirius_core::corrector::{
    accept_prefix, generate, oracle_correction_run, run_kernel,
    teacher_forced_correction_fractions, CorrectionConfig, CorrectionFlags, CorrectionReport,
    DraftMode,
};
use sirius_core::kvcache::LayeredKVCache;
use sirius_core::probs::{argmax, max_relative_error};
use sirius_core::session::{dense_greedy, Session};
use sirius_core::sparsity::SparsityMode;
use sirius_core::spectree::measure_hit_coverage;
use sirius_core::Error;

#[test]
fn keep_one_reproduces_dense_greedy() {
    let w = toy();
    let config = CorrectionConfig::default();
    for p in corpus().iter().take(5) {
        let report = generate(w, p, SparsityMode::CSparse, 1.0, &config).unwrap();
        assert_eq!(
            report.tokens,
            dense_greedy(w, p, report.tokens.len()).unwrap()
        );
        assert!(report.advances.iter().all(|&a| a == config.kernel_size));
        assert_eq!(report.aal, config.kernel_size as f64);
    }
}

#[test]
fn zero_threshold_is_sparse_chain_plus_full_token() {
    let w = toy();
    let config = CorrectionConfig {
        threshold: 0.0,
        max_new_tokens: 48,
        ..Default::default()
    };
    let n = config.kernel_size;
    for p in corpus().iter().take(3) {
        let report = generate(w, p, SparsityMode::CSparse, 0.5, &config).unwrap();
        assert!(report.advances.iter().all(|&a| a == n));
        let plan = Session::start(w, p, SparsityMode::CSparse, 0.5)
            .unwrap()
            .plan()
            .clone();
        let mut seq = p.clone();
        for kernel in report.tokens.chunks(n) {
            let mut ctx = seq.clone();
            // earlier context rows come from the full model
            let mut s = Session::with_plan(w, &ctx, plan.clone()).unwrap();
            let mut last = s.pending();
            for _ in 0..n - 1 {
                last = argmax(&s.sparse_step(last).unwrap());
                ctx.push(last);
            }
            ctx.push(argmax(&dense_last_logits(w, &ctx)));
            assert_eq!(&ctx[seq.len()..], kernel);
            seq = ctx;
        }
    }
}

#[test]
fn cache_matches_dense_after_every_kernel() {
    let w = toy();
    let config = CorrectionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in corpus().iter().take(4) {
        let mut s = Session::start(w, p, SparsityMode::CSparse, 0.5).unwrap();
        for k in 0..4 {
            run_kernel(&mut s, &config, &mut rng, k).unwrap();
            assert_cache_is_dense(&s);
        }
    }
}

#[test]
fn without_kv_rewrite_draft_rows_stay_sparse() {
    let w = toy();
    let config = CorrectionConfig {
        threshold: 0.0,
        flags: CorrectionFlags {
            kv_rewrite: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let p = &corpus()[0];
    let mut s = Session::start(w, p, SparsityMode::CSparse, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = s.base();
    run_kernel(&mut s, &config, &mut rng, 0).unwrap();
    let mut fresh = LayeredKVCache::for_arch(w.arch());
    w.prefill(&s.tokens()[..s.cache().committed_len()], &mut fresh, None)
        .unwrap();
    let l = w.arch().num_layers - 1;
    let err = max_relative_error(s.cache().key_row(l, base + 2), fresh.key_row(l, base + 2));
    assert!(err > 1e-4, "draft rows should keep sparse keys");
}

#[test]
fn without_rollback_every_draft_is_kept() {
    let w = toy();
    let config = CorrectionConfig {
        flags: CorrectionFlags {
            rollback: false,
            ..Default::default()
        },
        ..Default::default()
    };
    for p in corpus().iter().take(3) {
        let report = generate(w, p, SparsityMode::CSparse, 0.5, &config).unwrap();
        assert!(report.advances.iter().all(|&a| a == config.kernel_size - 1));
        report.check_consistency().unwrap();
    }
}

#[test]
fn rollback_without_interleave_rejected() {
    let config = CorrectionConfig {
        flags: CorrectionFlags {
            interleave: false,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(matches!(config.validate(), Err(Error::Config(_))));
    let config = CorrectionConfig {
        flags: CorrectionFlags {
            rollback: false,
            interleave: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = generate(toy(), &corpus()[0], SparsityMode::CSparse, 0.5, &config).unwrap();
    report.check_consistency().unwrap();
}

#[test]
fn reports_are_consistent_and_roundtrip() {
    let w = toy();
    for (mode, keep) in [
        (SparsityMode::CSparse, 0.5),
        (SparsityMode::FSparse, 0.5),
        (SparsityMode::Dense, 1.0),
    ] {
        let report = generate(w, &corpus()[5], mode, keep, &CorrectionConfig::default()).unwrap();
        report.check_consistency().unwrap();
        let rejecting = report
            .advances
            .iter()
            .filter(|&&a| a < report.period)
            .count();
        assert_eq!(
            report.rejection_histogram.iter().sum::<u64>() as usize,
            rejecting
        );
        let json = serde_json::to_string(&report).unwrap();
        let back: CorrectionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}

#[test]
fn stop_token_truncates() {
    let w = toy();
    let p = &corpus()[0];
    let free = generate(
        w,
        p,
        SparsityMode::CSparse,
        0.5,
        &CorrectionConfig::default(),
    )
    .unwrap();
    let stop = free.tokens[20];
    let first = free.tokens.iter().position(|&t| t == stop).unwrap();
    let config = CorrectionConfig {
        stop_tokens: vec![stop],
        ..Default::default()
    };
    let stopped = generate(w, p, SparsityMode::CSparse, 0.5, &config).unwrap();
    assert_eq!(stopped.tokens, free.tokens[..=first]);
    stopped.check_consistency().unwrap();
}

#[test]
fn sampled_mode_is_seed_deterministic() {
    let w = toy();
    let config = CorrectionConfig {
        draft_mode: DraftMode::Sampled,
        seed: 11,
        ..Default::default()
    };
    let a = generate(w, &corpus()[6], SparsityMode::CSparse, 0.5, &config).unwrap();
    let b = generate(w, &corpus()[6], SparsityMode::CSparse, 0.5, &config).unwrap();
    assert_eq!(a, b);
    a.check_consistency().unwrap();
}

#[test]
fn accepted_prefix_shrinks_with_threshold() {
    let w = toy();
    let config = CorrectionConfig {
        threshold: 0.0,
        ..Default::default()
    };
    let grid = [0.0, 0.05, 0.1, 0.3, 0.5, 0.9];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in corpus().iter().take(5) {
        let mut s = Session::start(w, p, SparsityMode::CSparse, 0.5).unwrap();
        for k in 0..4 {
            let out = run_kernel(&mut s, &config, &mut rng, k).unwrap();
            let lens: Vec<usize> = grid
                .iter()
                .map(|&r| accept_prefix(&out.q, r).unwrap_or(out.q.len()))
                .collect();
            assert!(lens.windows(2).all(|w| w[0] >= w[1]), "{lens:?}");
        }
    }
}

#[test]
fn teacher_forced_correction_monotone() {
    let w = toy();
    let grid = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 0.9, 1.0];
    for p in corpus().iter().take(3) {
        let f = teacher_forced_correction_fractions(w, p, SparsityMode::CSparse, 0.5, &grid, 32)
            .unwrap();
        assert_eq!(f[0], 0.0);
        assert!(f.windows(2).all(|w| w[0] <= w[1]), "{f:?}");
    }
}

#[test]
fn oracle_correction_endpoints() {
    let w = toy();
    let p = &corpus()[7];
    let none = oracle_correction_run(w, p, SparsityMode::CSparse, 0.5, 0.0, 24).unwrap();
    assert_eq!(none.corrected, 0);
    let always = oracle_correction_run(w, p, SparsityMode::CSparse, 0.5, 1.01, 24).unwrap();
    assert_eq!(always.fraction, 1.0);
    assert_eq!(always.tokens, dense_greedy(w, p, 24).unwrap());
}

#[test]
fn hit_coverage_over_rejections() {
    let w = toy();
    let mut ranks = Vec::new();
    for p in corpus().iter().take(10) {
        ranks.extend(
            generate(
                w,
                p,
                SparsityMode::CSparse,
                0.5,
                &CorrectionConfig::default(),
            )
            .unwrap()
            .hit_ranks(),
        );
    }
    let cov = measure_hit_coverage(&ranks).unwrap();
    assert!((cov.second_hit + cov.third_hit + cov.miss - 100.0).abs() < 1e-9);
    assert!(ranks.iter().flatten().all(|&r| r >= 2));
}

proptest! {
    #[test]
    fn accept_prefix_is_first_failure(q in prop::collection::vec(0.0f64..1.0, 0..20), r in 0.0f64..1.0) {
        let linear = q.iter().position(|&x| x < r);
        prop_assert_eq!(accept_prefix(&q, r), linear);
    }
}
