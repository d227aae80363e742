//! `covalign`: simulate instances, align covariance pairs, run sweeps and
//! verify the property suites.
//!
//! Exit codes: 0 success, 1 solver failure or failed suite, 2 bad flags,
//! I/O or parse errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use covalign::harness::{estimate, run_sweep, score, Estimator, EstimatorConfig, SweepConfig, AGGREGATE_HEADER};
use covalign::instances::{ground_truth, make_instance, InstanceKind, InstanceSpec, Normalize};
use covalign::io::{read_matrix, write_matrix, Diagnostics, Losses, MetaDocument, ResultDocument};
use covalign::verify::{verify_lemmas, VerifyCounts};
use covalign::{Error, SampleSize, VERSION};

const SEED_ENV: &str = "COVALIGN_SEED";

#[derive(Parser)]
#[command(name = "covalign", version, about = "Permutation alignment of Gaussian covariance matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance and write sigma.csv, sigma_hat_x.csv, sigma_hat_y.csv and meta.json.
    Simulate(SimulateArgs),
    /// Estimate the permutation aligning X to Y and print a JSON result document.
    Align(AlignArgs),
    /// Run a parameter sweep described by a JSON config.
    Sweep(SweepArgs),
    /// Run the randomised property suites and print a PASS/FAIL table.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Robinson,
    Wishart,
    Hard,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Sample size of X (integer or "exact"); defaults to --n.
    #[arg(long)]
    m: Option<SampleSize>,
    /// Sample size of Y (integer or "exact").
    #[arg(long, default_value = "exact")]
    n: SampleSize,
    #[arg(long, default_value = "none")]
    normalize: Normalize,
    #[arg(long, default_value_t = 3.0)]
    c1: f64,
    #[arg(long, default_value_t = 0.5)]
    c5: f64,
    /// Mean-center the sample covariances.
    #[arg(long)]
    center: bool,
    /// Overridden by the COVALIGN_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Gw,
    Qmle,
    Spectral,
    GwExhaustive,
}

#[derive(clap::Args)]
struct AlignArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long, value_enum)]
    estimator: EstimatorArg,
    /// GW entropic penalty (default 1/d²).
    #[arg(long)]
    eps: Option<f64>,
    /// Geometric ε-annealing for GW.
    #[arg(long)]
    anneal: bool,
    /// Ridge added to Σ̂_X before QMLE inversion.
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    #[arg(long, default_value_t = 16)]
    restarts: usize,
    /// Enumerate all permutations for QMLE (d ≤ 9).
    #[arg(long)]
    exhaustive: bool,
    /// Spectral baseline seriates only Y.
    #[arg(long)]
    one_sided: bool,
    /// meta.json written by `simulate`; enables the losses block.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// QMLE restart seed; defaults to the truth seed, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Results CSV; existing rows are kept and skipped.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(clap::Args)]
struct VerifyArgs {
    /// JSON object overriding per-suite trial counts.
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: Error,
}

impl Failure {
    fn usage(error: Error) -> Self {
        Self { code: 2, error }
    }

    fn solver(error: Error) -> Self {
        Self { code: 1, error }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer")))),
        Err(_) => Ok(None),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let seed = env_seed()?
        .or(args.seed)
        .ok_or_else(|| Failure::usage(Error::InvalidArgument("--seed is required (or set COVALIGN_SEED)".into())))?;
    let kind = match args.kind {
        KindArg::Robinson => InstanceKind::Robinson,
        KindArg::Wishart => InstanceKind::Wishart,
        KindArg::Hard => InstanceKind::Hard,
    };
    let mut spec = InstanceSpec::new(kind, args.d, args.m.unwrap_or(args.n), args.n, seed);
    spec.gamma = args.gamma;
    spec.normalize = args.normalize;
    spec.c1 = args.c1;
    spec.c5 = args.c5;
    spec.center = args.center;
    spec.validate().map_err(Failure::usage)?;
    let instance = make_instance(&spec).map_err(Failure::solver)?;

    let io = |r: covalign::Result<()>| r.map_err(Failure::usage);
    io(fs::create_dir_all(&args.out).map_err(Error::from))?;
    io(write_matrix(&args.out.join("sigma.csv"), &instance.sigma))?;
    io(write_matrix(&args.out.join("sigma_hat_x.csv"), &instance.sigma_hat_x))?;
    io(write_matrix(&args.out.join("sigma_hat_y.csv"), &instance.sigma_hat_y))?;
    let meta = MetaDocument { spec, pi_star: instance.pi_star, version: VERSION.into() };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Failure::usage(e.into()))?;
    io(fs::write(args.out.join("meta.json"), json + "\n").map_err(Error::from))?;
    Ok(())
}

fn align(args: AlignArgs) -> Result<(), Failure> {
    let sx = read_matrix(&args.x).map_err(Failure::usage)?;
    let sy = read_matrix(&args.y).map_err(Failure::usage)?;
    if sx.dim() != sy.dim() {
        return Err(Failure::usage(Error::DimensionMismatch { expected: sx.dim(), found: sy.dim() }));
    }
    let truth = match &args.truth {
        Some(p) => Some(read_truth(p)?),
        None => None,
    };
    let name = match args.estimator {
        EstimatorArg::Gw => Estimator::Gw,
        EstimatorArg::Qmle if args.exhaustive => Estimator::QmleExhaustive,
        EstimatorArg::Qmle => Estimator::QmleLocal,
        EstimatorArg::Spectral => Estimator::Spectral,
        EstimatorArg::GwExhaustive => Estimator::GwExhaustive,
    };
    let cfg = EstimatorConfig {
        epsilon: args.eps,
        anneal: args.anneal,
        restarts: args.restarts,
        ridge: args.ridge,
        one_sided: args.one_sided,
        ..EstimatorConfig::new(name)
    };
    let seed = env_seed()?.or(args.seed).or(truth.as_ref().map(|(meta, _)| meta.spec.seed)).unwrap_or(0);

    let start = Instant::now();
    let est = estimate(&sx, &sy, &cfg, seed).map_err(Failure::solver)?;
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;

    let losses = match &truth {
        Some((meta, sigma)) => {
            let sc = score(sigma, &meta.pi_star, &est.permutation).map_err(Failure::usage)?;
            Some(Losses { frobenius_sq: sc.frob_loss_sq, nf_sq: sc.nf_loss_sq, hamming: sc.hamming })
        }
        None => None,
    };
    let doc = ResultDocument {
        estimator: name.name().into(),
        d: sx.dim(),
        permutation: est.permutation,
        objective: est.objective,
        losses,
        diagnostics: Diagnostics { iterations: est.iterations, converged: est.converged, runtime_ms },
        version: VERSION.into(),
    };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Failure::usage(e.into()))?;
    println!("{json}");
    Ok(())
}

/// Loads `meta.json` and regenerates `Σ` from its spec.
fn read_truth(path: &Path) -> Result<(MetaDocument, covalign::SymMatrix), Failure> {
    let meta = MetaDocument::read(path)
        .map_err(|e| Failure::usage(Error::FileFormat(format!("{}: {e}", path.display()))))?;
    let sigma = match &meta.spec.kind {
        InstanceKind::CustomFile(p) => read_matrix(p).map_err(Failure::usage)?,
        _ => ground_truth(&meta.spec).map_err(Failure::solver)?,
    };
    if meta.pi_star.len() != sigma.dim() {
        return Err(Failure::usage(Error::DimensionMismatch { expected: sigma.dim(), found: meta.pi_star.len() }));
    }
    Ok((meta, sigma))
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::usage(Error::FileFormat(format!("{}: {e}", args.config.display()))))?;
    let mut config: SweepConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(Error::FileFormat(format!("{}: {e}", args.config.display()))))?;
    config.output = Some(args.out);
    config.validate().map_err(Failure::usage)?;
    let progress = |cell: usize, cells: usize, rep: usize, reps: usize| {
        eprintln!("cell {cell}/{cells} replicate {rep}/{reps}");
    };
    let out = run_sweep(&config, args.jobs, Some(&progress)).map_err(|e| match e {
        Error::Io(_) | Error::FileFormat(_) | Error::InvalidArgument(_) => Failure::usage(e),
        other => Failure::solver(other),
    })?;
    if out.resumed > 0 {
        eprintln!("resumed {} existing records", out.resumed);
    }
    println!("{AGGREGATE_HEADER}");
    for row in &out.aggregates {
        println!("{}", row.csv_line());
    }
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<bool, Failure> {
    let counts = match &args.counts {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(Error::FileFormat(format!("{}: {e}", p.display()))))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(Error::FileFormat(format!("{}: {e}", p.display()))))?
        }
        None => VerifyCounts::default(),
    };
    let seed = env_seed()?.unwrap_or(args.seed);
    let report = verify_lemmas(seed, &counts).map_err(Failure::solver)?;
    print!("{report}");
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let solver_json = matches!(cli.command, Command::Align(_));
    let result = match cli.command {
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Align(a) => align(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            if solver_json && f.code == 1 {
                let doc = serde_json::json!({ "error": { "kind": f.error.kind(), "message": f.error.to_string() } });
                println!("{doc}");
            }
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
