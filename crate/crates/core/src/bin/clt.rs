use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use clt_core::harness::{self, ExperimentConfig, ResultRow};
use clt_core::markov::{self, FiniteMarkovChain, RewardMap, Start};
use clt_core::stats;
use clt_core::stein::{self, MartingaleStats};
use clt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "clt", version, about = "Markov chain and TD learning CLT diagnostics")]
struct Cli {
    /// Seed overriding the one in an experiment config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replicate ensembles.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Emit JSON instead of CSV for experiments.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite chain computations.
    Chain {
        #[command(subcommand)]
        op: ChainOp,
    },
    /// Martingale CLT bound evaluation.
    Bound {
        #[command(subcommand)]
        op: BoundOp,
    },
    /// Run a config-driven experiment.
    Experiment {
        kind: ExperimentKind,
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit a log-log slope to rows of an experiment CSV or to `n,value` pairs.
    FitRate {
        #[arg(long)]
        input: PathBuf,
        /// Estimator to select from experiment CSV output.
        #[arg(long)]
        estimator: Option<String>,
    },
}

#[derive(Subcommand)]
enum ChainOp {
    /// Stationary distribution.
    Stationary(ChainArgs),
    /// Centered Poisson solution V with r̄ and π.
    Poisson(RewardArgs),
    /// Asymptotic covariance Σ∞.
    SigmaInf(RewardArgs),
}

#[derive(Subcommand)]
enum BoundOp {
    /// Evaluate the bound for a chain and reward at length n.
    Martingale {
        #[command(flatten)]
        model: RewardArgs,
        #[arg(long)]
        n: u64,
        /// A number in (0, 1) or "schedule".
        #[arg(long, default_value = "0.5")]
        beta: String,
        /// Start in this state instead of the stationary law.
        #[arg(long)]
        start_state: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        c_universal: f64,
    },
}

#[derive(Args)]
struct ChainArgs {
    /// Chain JSON: {"P": [[...]], "labels": [...]}.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct RewardArgs {
    #[arg(long)]
    input: PathBuf,
    /// Reward JSON: {"r": [[...] per state]}.
    #[arg(long)]
    reward: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    McClt,
    TdClt,
    BoundCurve,
    UpsilonDecay,
    DeltaMoments,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::McClt => "mc-clt",
            ExperimentKind::TdClt => "td-clt",
            ExperimentKind::BoundCurve => "bound-curve",
            ExperimentKind::UpsilonDecay => "upsilon-decay",
            ExperimentKind::DeltaMoments => "delta-moments",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|source| Error::Io {
                path: p.display().to_string(),
                source,
            })?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn io_err(path: &Option<PathBuf>) -> impl Fn(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.as_ref().map_or("<stdout>".into(), |p| p.display().to_string()),
        source,
    }
}

fn print_json(cli: &Cli, value: &serde_json::Value) -> Result<()> {
    let mut out = output(&cli.out)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).and_then(|_| out.flush()).map_err(io_err(&cli.out))
}

fn load_pair(args: &RewardArgs) -> Result<(FiniteMarkovChain, RewardMap)> {
    Ok((FiniteMarkovChain::load(&args.input)?, RewardMap::load(&args.reward)?))
}

fn parse_beta(text: &str, n: u64) -> Result<f64> {
    if text == "schedule" {
        return stein::beta_schedule(n);
    }
    text.parse::<f64>()
        .map_err(|_| Error::config("beta", format!("expected a number or \"schedule\", got {text:?}")))
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads == Some(0) {
        return Err(Error::config("threads", "must be ≥ 1"));
    }
    match &cli.command {
        Command::Chain { op } => match op {
            ChainOp::Stationary(args) => {
                let chain = FiniteMarkovChain::load(&args.input)?;
                chain.require_ergodic()?;
                print_json(cli, &json!({ "pi": chain.stationary()? }))
            }
            ChainOp::Poisson(args) => {
                let (chain, reward) = load_pair(args)?;
                let sol = markov::solve_poisson(&chain, &reward)?;
                print_json(
                    cli,
                    &json!({
                        "V": sol.values(),
                        "r_bar": sol.r_bar(),
                        "pi": sol.pi(),
                        "residual": sol.residual(&reward),
                    }),
                )
            }
            ChainOp::SigmaInf(args) => {
                let (chain, reward) = load_pair(args)?;
                let sol = markov::solve_poisson(&chain, &reward)?;
                let sigma = markov::asymptotic_covariance(&chain, &sol)?;
                print_json(cli, &serde_json::to_value(&sigma)?)
            }
        },
        Command::Bound {
            op:
                BoundOp::Martingale {
                    model,
                    n,
                    beta,
                    start_state,
                    c_universal,
                },
        } => {
            let (chain, reward) = load_pair(model)?;
            let beta = parse_beta(beta, *n)?;
            let sol = markov::solve_poisson(&chain, &reward)?;
            let sigma = markov::asymptotic_covariance(&chain, &sol)?;
            let sigma_inf = sigma.require_pd()?;
            let start = start_state.map_or(Start::Stationary, Start::State);
            let constants = stein::stein_constants(sol.dim(), beta)?.with_c_universal(*c_universal)?;
            let mstats = MartingaleStats::exact(&chain, &sol, sigma_inf, &start, *n as usize, beta)?;
            let bound = stein::martingale_clt_bound(&mstats, &constants)?;
            print_json(cli, &json!({ "n": n, "bound": bound, "constants": constants }))
        }
        Command::Experiment { kind, config } => {
            let mut cfg = ExperimentConfig::load(config)?;
            if cfg.kind() != kind.name() {
                return Err(Error::config(
                    "kind",
                    format!("config is {} but the command asked for {}", cfg.kind(), kind.name()),
                ));
            }
            if let Some(seed) = cli.seed {
                cfg.set_seed(seed);
            }
            if let Some(t) = cli.threads {
                cfg.set_threads(t);
            }
            let base = config.parent().unwrap_or(Path::new("."));
            let result = harness::run_experiment(&cfg, base)?;
            if cli.json {
                print_json(cli, &serde_json::to_value(&result)?)
            } else {
                let mut out = output(&cli.out)?;
                result.write_csv(&mut out)?;
                out.flush().map_err(io_err(&cli.out))
            }
        }
        Command::FitRate { input, estimator } => {
            let text = std::fs::read_to_string(input).map_err(|source| Error::Io {
                path: input.display().to_string(),
                source,
            })?;
            let (grid, values) = read_pairs(&text, estimator.as_deref())?;
            let fit = stats::fit_rate(&grid, &values)?;
            print_json(cli, &json!({ "slope": fit.slope, "intercept": fit.intercept, "points": grid.len() }))
        }
    }
}

/// `(n, value)` pairs from experiment output (filtered by estimator, slope
/// rows skipped) or from a plain `n,value` CSV.
fn read_pairs(text: &str, estimator: Option<&str>) -> Result<(Vec<f64>, Vec<f64>)> {
    let header = text.lines().next().unwrap_or_default();
    if header.split(',').any(|h| h.trim() == "estimator") {
        let Some(name) = estimator else {
            return Err(Error::config("estimator", "required for experiment output"));
        };
        let rows: Vec<ResultRow> = harness::read_rows_csv(text.as_bytes())?
            .into_iter()
            .filter(|r| r.estimator == name && r.n > 0)
            .collect();
        if rows.is_empty() {
            return Err(Error::config("estimator", format!("no rows for {name:?}")));
        }
        Ok(rows.iter().map(|r| (r.n as f64, r.value)).unzip())
    } else {
        #[derive(serde::Deserialize)]
        struct Pair {
            n: f64,
            value: f64,
        }
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let pairs = reader
            .deserialize()
            .collect::<std::result::Result<Vec<Pair>, _>>()?;
        Ok(pairs.iter().map(|p| (p.n, p.value)).unzip())
    }
}
