//! `sirius`: weight generation, corrected decoding runs, sweeps and the
//! speculative-decoding efficiency curves.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use sirius_core::analytics::{apu, sd_expected_aal, write_curve_csv, CurvePoint};
use sirius_core::corrector::{CorrectionConfig, CorrectionFlags, DraftMode};
use sirius_core::experiment::{corpus_sweep, dedup_grid, run_corpus, write_sweep_csv, SweepAxis};
use sirius_core::model::{ArchSpec, ModelWeights};
use sirius_core::sparsity::SparsityMode;
use sirius_core::spectree::{TreeConfig, DEFAULT_BRANCH};
use sirius_core::tokenizer::{encode, load_corpus, toy_prompts};
use sirius_core::Error;

const DEFAULT_SEED: &str = "7";

#[derive(Parser)]
#[command(
    name = "sirius",
    version,
    about = "Contextual-sparsity decoding with periodic full-model correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic weights file.
    GenWeights(GenWeightsArgs),
    /// Run corrected decoding over a prompt corpus and write a JSON report.
    Run(RunArgs),
    /// Sweep threshold or tree width over a corpus, or gamma analytically.
    Sweep(SweepArgs),
    /// Speculative-decoding AAL/APU curve as CSV.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchPreset {
    Toy,
}

#[derive(Args)]
struct GenWeightsArgs {
    #[arg(long, value_enum, default_value = "toy")]
    arch: ArchPreset,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    intermediate: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long, env = "SIRIUS_SEED", default_value = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Weights file; when absent, weights are generated from --seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, env = "SIRIUS_SEED", default_value = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value = "csparse")]
    mode: SparsityMode,
    #[arg(long, default_value_t = 0.5)]
    keep: f64,
}

#[derive(Args)]
struct PromptArgs {
    /// One prompt per line; defaults to the bundled 100-prompt corpus.
    #[arg(long, conflicts_with = "prompt")]
    corpus: Option<PathBuf>,
    /// Inline prompt; may be repeated.
    #[arg(long)]
    prompt: Vec<String>,
    /// Use only the first N prompts.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 16)]
    kernel: usize,
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value = "greedy")]
    draft: DraftMode,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    /// Seed for sampled drafting.
    #[arg(long, default_value_t = 0)]
    draft_seed: u64,
    #[arg(long)]
    stop: Vec<u32>,
    #[arg(long)]
    no_kv_rewrite: bool,
    #[arg(long)]
    no_rollback: bool,
    #[arg(long)]
    no_interleave: bool,
    #[arg(long, conflicts_with = "no_tree")]
    tree_width: Option<usize>,
    #[arg(long)]
    no_tree: bool,
    #[arg(long, default_value_t = DEFAULT_BRANCH)]
    branch: usize,
    /// Permit trees beyond the 64-node budget (width at most 8).
    #[arg(long)]
    allow_wide: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    prompts: PromptArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    grid: Vec<f64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    prompts: PromptArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Acceptance rate for gamma sweeps.
    #[arg(long, default_value_t = 0.89)]
    alpha: f64,
    /// Relative draft cost for gamma sweeps.
    #[arg(long, default_value_t = 0.65)]
    density: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    density: f64,
    #[arg(long, default_value_t = 32)]
    gamma_max: u32,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_weights(model: &ModelArgs, seed_from_cli: bool) -> anyhow::Result<ModelWeights> {
    match &model.weights {
        Some(path) => {
            if seed_from_cli {
                return Err(
                    Error::Config("give either --weights or --seed, not both".into()).into(),
                );
            }
            let file = File::open(path)
                .map_err(Error::from)
                .with_context(|| format!("opening {}", path.display()))?;
            Ok(ModelWeights::read_from(BufReader::new(file))?)
        }
        None => Ok(ModelWeights::init_from_seed(ArchSpec::toy(), model.seed)?),
    }
}

fn load_prompts(p: &PromptArgs) -> anyhow::Result<Vec<Vec<u32>>> {
    let mut prompts = if !p.prompt.is_empty() {
        p.prompt.iter().map(|s| encode(s)).collect()
    } else if let Some(path) = &p.corpus {
        load_corpus(path)
            .with_context(|| format!("reading corpus {}", path.display()))?
            .iter()
            .map(|s| encode(s))
            .collect()
    } else {
        toy_prompts()
    };
    if let Some(n) = p.limit {
        prompts.truncate(n);
    }
    if prompts.is_empty() {
        return Err(Error::Config("no prompts selected".into()).into());
    }
    Ok(prompts)
}

fn correction_config(d: &DecodeArgs) -> CorrectionConfig {
    CorrectionConfig {
        kernel_size: d.kernel,
        threshold: d.threshold,
        temperature: d.temperature,
        draft_mode: d.draft,
        flags: CorrectionFlags {
            kv_rewrite: !d.no_kv_rewrite,
            rollback: !d.no_rollback,
            interleave: !d.no_interleave,
        },
        max_new_tokens: d.max_new,
        stop_tokens: d.stop.clone(),
        tree: d.tree_width.map(|w| TreeConfig {
            width: w,
            branch: d.branch,
            allow_wide: d.allow_wide,
        }),
        seed: d.draft_seed,
        ..Default::default()
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn gen_weights(a: &GenWeightsArgs) -> anyhow::Result<()> {
    let mut arch = match a.arch {
        ArchPreset::Toy => ArchSpec::toy(),
    };
    let overrides = [
        (&mut arch.vocab_size, a.vocab),
        (&mut arch.hidden_dim, a.hidden),
        (&mut arch.intermediate_dim, a.intermediate),
        (&mut arch.num_layers, a.layers),
        (&mut arch.num_heads, a.heads),
        (&mut arch.num_kv_heads, a.kv_heads),
        (&mut arch.max_positions, a.max_positions),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    let weights = ModelWeights::init_from_seed(arch, a.seed)?;
    let mut out = create(&a.out)?;
    weights.write_to(&mut out)?;
    out.flush().map_err(Error::from)?;
    println!("checksum {}", weights.checksum());
    println!("bytes {}", ModelWeights::file_len(&arch)?);
    Ok(())
}

fn run(a: &RunArgs, seed_from_cli: bool) -> anyhow::Result<()> {
    let weights = load_weights(&a.model, seed_from_cli)?;
    let prompts = load_prompts(&a.prompts)?;
    let config = correction_config(&a.decode);
    let report = run_corpus(&weights, &prompts, a.model.mode, a.model.keep, &config)?;
    let mut out = create(&a.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out).map_err(Error::from)?;
    out.flush().map_err(Error::from)?;
    let g = &report.aggregate;
    println!(
        "prompts {} tokens {} kernels {} aal {:.4} effective_density {:.4}",
        g.prompts, g.tokens, g.kernels, g.aal, g.effective_density
    );
    Ok(())
}

fn sweep(a: &SweepArgs, seed_from_cli: bool) -> anyhow::Result<()> {
    let mut out = create(&a.out)?;
    if a.axis == SweepAxis::Gamma {
        let mut points = Vec::new();
        for g in dedup_grid(&a.grid) {
            if g < 0.0 || g.fract() != 0.0 || g > u32::MAX as f64 {
                bail!(Error::Config(format!(
                    "gamma {g} is not a non-negative integer"
                )));
            }
            let gamma = g as u32;
            let aal = sd_expected_aal(a.alpha, gamma)?;
            points.push(CurvePoint {
                gamma,
                aal,
                apu: apu(gamma as f64, a.density, 1.0, aal)?,
            });
        }
        write_curve_csv(&points, &mut out)?;
    } else {
        let weights = load_weights(&a.model, seed_from_cli)?;
        let prompts = load_prompts(&a.prompts)?;
        let config = correction_config(&a.decode);
        let rows = corpus_sweep(
            &weights,
            &prompts,
            a.model.mode,
            a.model.keep,
            &config,
            a.axis,
            &a.grid,
        )?;
        write_sweep_csv(a.axis, &rows, &mut out)?;
    }
    out.flush().map_err(Error::from)?;
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> anyhow::Result<()> {
    let curve = sirius_core::analytics::sd_curve(a.alpha, a.density, a.gamma_max)?;
    match &a.out {
        Some(path) => {
            let mut out = create(path)?;
            write_curve_csv(&curve, &mut out)?;
            out.flush().map_err(Error::from)?;
        }
        None => write_curve_csv(&curve, std::io::stdout().lock())?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) => e.exit_code() as u8,
        None if err.downcast_ref::<serde_json::Error>().is_some() => 3,
        None => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let seed_from_cli = matches
        .subcommand()
        .map(|(_, m)| {
            m.try_get_raw("seed").ok().flatten().is_some()
                && m.value_source("seed") == Some(ValueSource::CommandLine)
        })
        .unwrap_or(false);
    let result = match &cli.command {
        Command::GenWeights(a) => gen_weights(a),
        Command::Run(a) => run(a, seed_from_cli),
        Command::Sweep(a) => sweep(a, seed_from_cli),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
