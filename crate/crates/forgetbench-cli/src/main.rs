use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use forgetbench::client::{mock_serve, MockScript};
use forgetbench::collapse::{AdapterMode, SolveOpts};
use forgetbench_cli::commands::{
    cmd_adapter_sim, cmd_collapse_solve, cmd_collapse_sweep, cmd_eval, cmd_forget_sim, cmd_judge,
    cmd_report,
};
use forgetbench_cli::{Overrides, RunConfig, StrategyKind};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "forgetbench",
    about = "Evaluate vision-language endpoints as image classifiers and study forgetting numerically",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run config file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override (eval subsampling / simulations).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum concurrent requests override.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Resume an interrupted eval from its record file and cache.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Query the configured endpoint over the configured manifests, grade
    /// the outputs, and write records plus an accuracy report.
    Eval,
    /// Re-grade stored raw outputs under a different strategy.
    Judge {
        /// Record file (JSONL) produced by eval.
        #[arg(long)]
        records: PathBuf,
        /// Strategy to re-grade with: rule, embed, or judge.
        #[arg(long, default_value = "judge")]
        strategy: String,
        /// Output record file (defaults to <records>.regraded.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build accuracy/verdict/top-k tables (and gaps against a base run).
    Report {
        /// One or more record files.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Record file of the reference model for forgetting gaps.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
    },
    /// Constrained cross-entropy geometry runs.
    Collapse {
        #[command(subcommand)]
        action: CollapseAction,
    },
    /// Two-phase class-split forgetting simulation.
    ForgetSim {
        /// Also run the classifier/optimizer re-initialization variants.
        #[arg(long)]
        variants: bool,
    },
    /// Frozen-encoder adapter simulator (linear vs lora fine-tuning).
    AdapterSim {
        /// linear, lora, or both.
        #[arg(long, default_value = "both")]
        mode: String,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Serve scripted responses on the chat/embedding wire format.
    MockServe {
        /// Script file: a JSON list of match/reply rules.
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Subcommand)]
enum CollapseAction {
    /// Solve one problem instance and report its geometry.
    Solve {
        /// Problem file (JSON: k, p, k_a, n_a, n_b, e_w, e_h).
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Solve across majority/minority ratios and emit trend curves.
    Sweep {
        #[arg(long)]
        problem: PathBuf,
        /// Comma-separated ascending ratios, e.g. 1,10,100,1000.
        #[arg(long, default_value = "1,10,100,1000")]
        ratios: String,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        restarts: Option<usize>,
    },
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("--config <file> is required for this command");
    };
    let mut config = RunConfig::load(path)?;
    Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        parallelism: cli.parallelism,
        resume: cli.resume,
    }
    .apply(&mut config);
    Ok(config)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn solve_opts(
    seed: Option<u64>,
    iters: Option<usize>,
    lr: Option<f64>,
    tol: Option<f64>,
    restarts: Option<usize>,
) -> SolveOpts {
    let mut opts = SolveOpts::default();
    if let Some(seed) = seed {
        opts.seed = seed;
    }
    if let Some(iters) = iters {
        opts.iters = iters;
    }
    if let Some(lr) = lr {
        opts.lr = lr;
    }
    if let Some(tol) = tol {
        opts.tol = tol;
    }
    if let Some(restarts) = restarts {
        opts.restarts = restarts;
    }
    opts
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Eval => {
            let config = load_run_config(&cli)?;
            let summary = cmd_eval(&config)?;
            println!(
                "eval: {} records ({} new), report at {}",
                summary.total_records,
                summary.new_records,
                summary.report_path.display()
            );
            Ok(())
        }
        Command::Judge {
            records,
            strategy,
            output,
        } => {
            let config = load_run_config(&cli)?;
            let strategy = StrategyKind::parse(strategy)?;
            let out = cmd_judge(&config, records, strategy, output.as_deref())?;
            println!("judge: re-graded records at {}", out.display());
            Ok(())
        }
        Command::Report {
            records,
            base,
            top_k,
        } => {
            let summary = cmd_report(records, base.as_deref(), *top_k, &out_dir(&cli))?;
            println!(
                "report: accuracy matrix at {}",
                summary.report_csv.display()
            );
            Ok(())
        }
        Command::Collapse { action } => match action {
            CollapseAction::Solve {
                problem,
                iters,
                lr,
                tol,
                restarts,
            } => {
                let opts = solve_opts(cli.seed, *iters, *lr, *tol, *restarts);
                cmd_collapse_solve(problem, &opts, &out_dir(&cli))?;
                Ok(())
            }
            CollapseAction::Sweep {
                problem,
                ratios,
                iters,
                lr,
                tol,
                restarts,
            } => {
                let ratios: Vec<f64> = ratios
                    .split(',')
                    .map(|r| r.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| anyhow::anyhow!("bad --ratios: {e}"))?;
                let opts = solve_opts(cli.seed, *iters, *lr, *tol, *restarts);
                cmd_collapse_sweep(problem, &ratios, &opts, &out_dir(&cli))?;
                Ok(())
            }
        },
        Command::ForgetSim { variants } => {
            cmd_forget_sim(cli.config.as_deref(), *variants, cli.seed, &out_dir(&cli))?;
            Ok(())
        }
        Command::AdapterSim { mode, seeds } => {
            let modes: Vec<AdapterMode> = match mode.as_str() {
                "linear" => vec![AdapterMode::Linear],
                "lora" => vec![AdapterMode::Lora],
                "both" => vec![AdapterMode::Linear, AdapterMode::Lora],
                other => bail!("unknown mode {other:?} (expected linear, lora, or both)"),
            };
            cmd_adapter_sim(cli.config.as_deref(), &modes, *seeds, &out_dir(&cli))?;
            Ok(())
        }
        Command::MockServe { script, port } => {
            let script = MockScript::load(script)?;
            let server = mock_serve(&script, *port)?;
            println!("mock server listening on {}", server.base_url());
            server.wait();
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        eprintln!("error: {error:#}");
        std::process::exit(1);
    }
}
