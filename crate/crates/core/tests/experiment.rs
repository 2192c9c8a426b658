mod common;

use common::{corpus, toy};
use sirius_core::corrector::CorrectionConfig;
use sirius_core::experiment::{corpus_sweep, gamma_sweep_csv, run_corpus, SweepAxis};
use sirius_core::sparsity::SparsityMode;
use sirius_core::Error;

fn small() -> CorrectionConfig {
    CorrectionConfig {
        max_new_tokens: 32,
        ..Default::default()
    }
}

#[test]
fn corpus_reports_keep_prompt_order() {
    let prompts = &corpus()[..6];
    let run = run_corpus(toy(), prompts, SparsityMode::CSparse, 0.5, &small()).unwrap();
    for (r, p) in run.reports.iter().zip(prompts) {
        assert_eq!(r.prompt_len, p.len());
    }
    run.check_consistency().unwrap();
    assert_eq!(run.aggregate.prompts, 6);
}

#[test]
fn threshold_endpoints_ordered() {
    let rows = corpus_sweep(
        toy(),
        &corpus()[..4],
        SparsityMode::CSparse,
        0.5,
        &small(),
        SweepAxis::Threshold,
        &[0.0, 1.0],
    )
    .unwrap();
    assert_eq!(rows[0].aal, 16.0);
    assert!(rows[1].aal <= 2.0);
    assert!(rows[0].aal >= rows[1].aal);
}

#[test]
fn sweep_dedups_and_is_deterministic() {
    let grid = [0.3, 0.1, 0.3];
    let a = corpus_sweep(
        toy(),
        &corpus()[..3],
        SparsityMode::FSparse,
        0.5,
        &small(),
        SweepAxis::Threshold,
        &grid,
    )
    .unwrap();
    let b = corpus_sweep(
        toy(),
        &corpus()[..3],
        SparsityMode::FSparse,
        0.5,
        &small(),
        SweepAxis::Threshold,
        &grid,
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.iter().map(|r| r.value).collect::<Vec<_>>(),
        vec![0.3, 0.1]
    );
    assert_eq!(a.iter().map(|r| r.index).collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn treewidth_sweep_and_bad_grids() {
    let rows = corpus_sweep(
        toy(),
        &corpus()[..2],
        SparsityMode::CSparse,
        0.5,
        &small(),
        SweepAxis::Treewidth,
        &[1.0, 2.0],
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    for bad in [&[][..], &[1.5][..], &[5.0][..]] {
        let r = corpus_sweep(
            toy(),
            &corpus()[..1],
            SparsityMode::CSparse,
            0.5,
            &small(),
            SweepAxis::Treewidth,
            bad,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

#[test]
fn gamma_curve_contains_reference_point() {
    let mut out = Vec::new();
    gamma_sweep_csv(0.89, 0.65, 16, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let row16 = text.lines().find(|l| l.starts_with("16,")).unwrap();
    assert!(row16.starts_with("16,7.83"), "{row16}");
    assert!(text.trim_end().ends_with("# argmin gamma=2 apu=0.857537"));
}
