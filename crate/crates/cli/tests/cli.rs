use std::path::Path;
use std::process::{Command, Output};

use sirius_core::experiment::RunReport;
use sirius_core::model::{ArchSpec, ModelWeights};
use tempfile::TempDir;

fn sirius(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sirius"))
        .args(args)
        .env_remove("SIRIUS_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn sirius")
}

fn ok(args: &[&str]) -> Output {
    let out = sirius(args);
    assert!(
        out.status.success(),
        "sirius {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    sirius(args).status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_report(p: &Path) -> RunReport {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn curve_rows(csv_text: &str) -> Vec<(u32, f64, f64)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(csv_text.as_bytes());
    rdr.deserialize().map(|r| r.unwrap()).collect()
}

const FAST: [&str; 4] = ["--limit", "3", "--max-new", "32"];

#[test]
fn gen_weights_is_deterministic_with_exact_length() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    let out_a = ok(&["gen-weights", "--seed", "7", "--out", path_str(&a)]);
    let out_b = ok(&["gen-weights", "--seed", "7", "--out", path_str(&b)]);
    assert_eq!(out_a.stdout, out_b.stdout);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(
        bytes.len() as u64,
        ModelWeights::file_len(&ArchSpec::toy()).unwrap()
    );

    let c = dir.path().join("c.bin");
    ok(&["gen-weights", "--seed", "8", "--out", path_str(&c)]);
    assert_ne!(bytes, std::fs::read(&c).unwrap());
}

#[test]
fn gen_weights_honors_dimension_overrides() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("small.bin");
    ok(&[
        "gen-weights",
        "--layers",
        "2",
        "--intermediate",
        "128",
        "--out",
        path_str(&p),
    ]);
    let mut arch = ArchSpec::toy();
    arch.num_layers = 2;
    arch.intermediate_dim = 128;
    let len = std::fs::metadata(&p).unwrap().len();
    assert_eq!(len, ModelWeights::file_len(&arch).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&["gen-weights"]), 2);
    assert_eq!(code(&["run"]), 2);
    assert_eq!(
        code(&["sweep", "--axis", "width", "--grid", "1", "--out", "x"]),
        2
    );
    assert_eq!(code(&["frobnicate"]), 2);
}

#[test]
fn weights_and_seed_together_are_rejected() {
    let dir = TempDir::new().unwrap();
    let w = dir.path().join("w.bin");
    ok(&["gen-weights", "--out", path_str(&w)]);
    let r = dir.path().join("r.json");
    let c = code(&[
        "run",
        "--weights",
        path_str(&w),
        "--seed",
        "7",
        "--out",
        path_str(&r),
    ]);
    assert_eq!(c, 3);
}

#[test]
fn dense_run_reaches_full_kernel() {
    let dir = TempDir::new().unwrap();
    let r = dir.path().join("r.json");
    let mut args = vec!["run", "--keep", "1.0", "--out", path_str(&r)];
    args.extend(FAST);
    ok(&args);
    let report = read_report(&r);
    report.check_consistency().unwrap();
    assert_eq!(report.reports.len(), 3);
    assert_eq!(report.aggregate.aal, 16.0);
    assert!((report.aggregate.density - 1.0).abs() < 1e-12);
}

#[test]
fn weights_file_and_seed_runs_agree() {
    let dir = TempDir::new().unwrap();
    let w = dir.path().join("w.bin");
    ok(&["gen-weights", "--out", path_str(&w)]);
    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    let mut a = vec!["run", "--weights", path_str(&w), "--out", path_str(&r1)];
    a.extend(FAST);
    ok(&a);
    let mut b = vec!["run", "--seed", "7", "--out", path_str(&r2)];
    b.extend(FAST);
    ok(&b);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
}

#[test]
fn width_one_tree_matches_chain() {
    let dir = TempDir::new().unwrap();
    let chain = dir.path().join("chain.json");
    let tree = dir.path().join("tree.json");
    let mut a = vec!["run", "--no-tree", "--out", path_str(&chain)];
    a.extend(FAST);
    ok(&a);
    let mut b = vec!["run", "--tree-width", "1", "--out", path_str(&tree)];
    b.extend(FAST);
    ok(&b);
    let (chain, tree) = (read_report(&chain), read_report(&tree));
    chain.check_consistency().unwrap();
    tree.check_consistency().unwrap();
    for (c, t) in chain.reports.iter().zip(&tree.reports) {
        assert_eq!(c.tokens, t.tokens);
        assert_eq!(c.advances, t.advances);
    }
}

#[test]
fn inline_prompts_and_corpus_file() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "Hello there\n\nGeneral Kenobi\n").unwrap();
    let r = dir.path().join("r.json");
    ok(&[
        "run",
        "--corpus",
        path_str(&corpus),
        "--max-new",
        "16",
        "--out",
        path_str(&r),
    ]);
    assert_eq!(read_report(&r).reports.len(), 2);
    ok(&[
        "run",
        "--prompt",
        "a",
        "--prompt",
        "b",
        "--prompt",
        "c",
        "--max-new",
        "16",
        "--out",
        path_str(&r),
    ]);
    assert_eq!(read_report(&r).reports.len(), 3);
}

#[test]
fn threshold_sweep_orders_endpoints_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let s1 = dir.path().join("s1.csv");
    let s2 = dir.path().join("s2.csv");
    let base = [
        "sweep",
        "--axis",
        "threshold",
        "--grid",
        "0,1,0",
        "--limit",
        "2",
        "--max-new",
        "32",
    ];
    let mut a = base.to_vec();
    a.extend(["--out", path_str(&s1)]);
    let out = ok(&a);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    let mut b = base.to_vec();
    b.extend(["--out", path_str(&s2)]);
    ok(&b);
    let text = std::fs::read_to_string(&s1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&s2).unwrap());
    assert!(text
        .starts_with("# format_version=1\nindex,threshold,aal,effective_density,tokens,kernels\n"));
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let rows: Vec<(usize, f64, f64, f64, usize, usize)> =
        rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].1, 0.0);
    assert_eq!(rows[0].2, 16.0);
    assert_eq!(rows[1].2, 1.0);
    assert!(rows[0].3 < rows[1].3);
}

#[test]
fn gamma_sweep_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let g = dir.path().join("g.csv");
    ok(&[
        "sweep",
        "--axis",
        "gamma",
        "--grid",
        "1,16",
        "--out",
        path_str(&g),
    ]);
    let rows = curve_rows(&std::fs::read_to_string(&g).unwrap());
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].0, 16);
    assert!((rows[1].1 - 7.84).abs() < 0.01, "aal {}", rows[1].1);
    assert_eq!(
        code(&[
            "sweep",
            "--axis",
            "gamma",
            "--grid",
            "1.5",
            "--out",
            path_str(&g)
        ]),
        3
    );
}

#[test]
fn analyze_finds_argmin_and_handles_extremes() {
    let out = ok(&[
        "analyze",
        "--alpha",
        "0.89",
        "--density",
        "0.65",
        "--gamma-max",
        "32",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let argmin = text.lines().last().unwrap();
    assert!(argmin.starts_with("# argmin gamma=2 apu="), "{argmin}");
    let apu: f64 = argmin.rsplit('=').next().unwrap().parse().unwrap();
    assert!((apu - 0.86).abs() < 0.005);
    assert_eq!(curve_rows(&text).len(), 32);

    let zero = ok(&[
        "analyze",
        "--alpha",
        "0",
        "--density",
        "0.5",
        "--gamma-max",
        "8",
    ]);
    for (_, aal, _) in curve_rows(&String::from_utf8(zero.stdout).unwrap()) {
        assert_eq!(aal, 1.0);
    }

    let dir = TempDir::new().unwrap();
    let p = dir.path().join("hi.csv");
    ok(&[
        "analyze",
        "--alpha",
        "0.99",
        "--density",
        "0.5",
        "--gamma-max",
        "64",
        "--out",
        path_str(&p),
    ]);
    let rows = curve_rows(&std::fs::read_to_string(&p).unwrap());
    assert!(rows.windows(2).all(|w| w[1].1 > w[0].1));
    assert!(rows.iter().all(|r| r.1 < 100.0));

    assert_eq!(code(&["analyze", "--alpha", "1", "--density", "0.5"]), 4);
    assert_eq!(code(&["analyze", "--alpha=-0.1", "--density", "0.5"]), 4);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let r = dir.path().join("r.json");
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"not a weights file at all, definitely not").unwrap();
    assert_eq!(
        code(&["run", "--weights", path_str(&bad), "--out", path_str(&r)]),
        3
    );
    let missing = dir.path().join("missing.bin");
    assert_eq!(
        code(&[
            "run",
            "--weights",
            path_str(&missing),
            "--out",
            path_str(&r)
        ]),
        3
    );
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "\n\n").unwrap();
    assert_eq!(
        code(&["run", "--corpus", path_str(&empty), "--out", path_str(&r)]),
        3
    );
    assert_eq!(code(&["run", "--rollback-free", "--out", path_str(&r)]), 2);
    assert_eq!(
        code(&[
            "run",
            "--no-interleave",
            "--limit",
            "1",
            "--out",
            path_str(&r)
        ]),
        3
    );

    let long = "a".repeat(2000);
    assert_eq!(code(&["run", "--prompt", &long, "--out", path_str(&r)]), 4);
}
