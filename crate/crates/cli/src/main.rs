//! `oracle-al`: config-driven runner for order search, heuristics and
//! analyses.

mod commands;
mod config;
mod error;
mod run;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use oracle_al::alcore::ScoreCache;

use commands::Context;
use config::{sha256_hex, Config};
use error::{CliError, CliResult};
use run::{RunDir, CONFIG_SNAPSHOT};

#[derive(Parser, Debug)]
#[command(name = "oracle-al", version, about = "Search and analyze near-optimal active-learning orders")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory for new run directories (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (overrides output.jobs).
    #[arg(long, global = true, env = "ORACLE_AL_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulated-annealing search for every training seed.
    Search {
        /// Continue an interrupted search run in place.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pause after this many steps, leaving a resumable run.
        #[arg(long)]
        step_limit: Option<usize>,
    },
    /// Order from the configured acquisition strategy.
    Heuristic,
    /// Quality records of a stored order.
    Evaluate {
        #[arg(long)]
        order: PathBuf,
    },
    /// Seed-mismatch matrix from a search run.
    SeedMatrix {
        #[arg(long)]
        from: PathBuf,
    },
    /// Architecture transfer matrix from one search run per source.
    Transfer {
        #[arg(long, required = true)]
        from: Vec<PathBuf>,
    },
    /// Shared points between two orders.
    Overlap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Label and bin distributions along an order.
    Trace {
        #[arg(long)]
        order: PathBuf,
    },
    /// Scan random orders for strictly crossing curves.
    Crossing,
    /// CSV, JSON-lines and SVG report over finished runs.
    Report {
        #[arg(long, required = true)]
        from: Vec<PathBuf>,
    },
    /// Training-cache administration.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand, Debug)]
enum CacheAction {
    Stats,
    Clear,
    /// Re-train a sample of entries and compare bit for bit.
    Verify {
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    let path = path.ok_or_else(|| CliError::Config("--config is required for this subcommand".into()))?;
    Ok(Config::load(path)?.resolved())
}

fn set_jobs(cli_jobs: Option<usize>, config: Option<&Config>) -> CliResult<()> {
    if let Some(n) = cli_jobs.or_else(|| config.and_then(|c| c.output.jobs)) {
        if n == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn new_run(cli: &Cli, config: &Config, name: &str, extra: &str) -> CliResult<RunDir> {
    let parent = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let mut snapshot = config.snapshot()?;
    if !extra.is_empty() {
        snapshot.push_str(&format!("# {extra}\n"));
    }
    RunDir::create(&parent, name, &snapshot)
}

fn input_hash(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&run::read_input(path)?))
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn finish_search(run: RunDir, outcome: commands::SearchOutcome) -> CliResult<()> {
    match outcome {
        commands::SearchOutcome::Done(summary) => {
            print_json(&summary)?;
            println!("{}", run.finish()?.display());
        }
        commands::SearchOutcome::Paused => {
            eprintln!("step limit reached; resume with --resume {}", run.path.display());
            println!("{}", run.path.display());
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Search { resume: Some(dir), step_limit } => {
            let text = String::from_utf8_lossy(&run::read_input(&dir.join(CONFIG_SNAPSHOT))?).into_owned();
            let config = Config::parse(&text)?;
            config.validate()?;
            set_jobs(cli.jobs, Some(&config))?;
            let run = RunDir::reopen(dir, "search")?;
            let ctx = Context::new(config, cli.out.as_deref())?;
            let outcome = commands::search(&ctx, &run, *step_limit)?;
            finish_search(run, outcome)?;
        }
        Command::Cache { action } => {
            let config = match &cli.config {
                Some(p) => Some(load_config(Some(p))?),
                None => None,
            };
            set_jobs(cli.jobs, config.as_ref())?;
            let dir = commands::cache_dir(config.as_ref(), cli.out.as_deref());
            if !dir.is_dir() {
                return Err(CliError::Missing(format!("cache directory {} does not exist", dir.display())));
            }
            let cache = ScoreCache::on_disk(&dir)?;
            match action {
                CacheAction::Stats => print_json(&cache.stats()?)?,
                CacheAction::Clear => {
                    cache.clear()?;
                    print_json(&cache.stats()?)?;
                }
                CacheAction::Verify { fraction, seed } => {
                    if !(*fraction > 0.0 && *fraction <= 1.0) {
                        return Err(CliError::Config(format!("--fraction {fraction} not in (0, 1]")));
                    }
                    let config = config.ok_or_else(|| CliError::Config("cache verify needs --config".into()))?;
                    let ctx = Context::new(config, cli.out.as_deref())?;
                    let report = cache.verify(&ctx.bench(&ctx.config.learner)?, *fraction, *seed)?;
                    for d in &report.corrupt {
                        eprintln!("corrupt entry evicted: {d}");
                    }
                    for d in &report.mismatches {
                        eprintln!("mismatched entry: {d}");
                    }
                    print_json(&report)?;
                    if !report.mismatches.is_empty() {
                        return Err(CliError::Runtime(format!("{} cache entries do not reproduce", report.mismatches.len())));
                    }
                }
            }
        }
        Command::Overlap { a, b } => {
            let config = cli.config.as_deref().map(|p| load_config(Some(p))).transpose()?;
            let parent = cli
                .out
                .clone()
                .or_else(|| config.as_ref().map(|c| c.output.dir.clone()))
                .unwrap_or_else(|| PathBuf::from("runs"));
            let snapshot = format!("# overlap {} {}\n", input_hash(a)?, input_hash(b)?);
            let mut run = RunDir::create(&parent, "overlap", &snapshot)?;
            let out = commands::overlap(&mut run, a, b)?;
            println!("shared points: {}", out.report.shared_count);
            println!("{}", run.finish()?.display());
        }
        command => {
            let config = load_config(cli.config.as_deref())?;
            set_jobs(cli.jobs, Some(&config))?;
            let ctx = Context::new(config.clone(), cli.out.as_deref())?;
            let run = match command {
                Command::Search { step_limit, .. } => {
                    let run = new_run(&cli, &config, "search", "")?;
                    let outcome = commands::search(&ctx, &run, *step_limit)?;
                    return finish_search(run, outcome);
                }
                Command::Heuristic => {
                    let run = new_run(&cli, &config, "heuristic", "")?;
                    for (name, rec) in commands::heuristic(&ctx, &run)? {
                        println!("{name}: q_val {:.6} q_test {:.6}", rec.q_val, rec.q_test);
                    }
                    run
                }
                Command::Evaluate { order } => {
                    let mut run = new_run(&cli, &config, "evaluate", &format!("order {}", input_hash(order)?))?;
                    for rec in commands::evaluate(&ctx, &mut run, order)? {
                        println!("xi {}: q_val {:.6} q_test {:.6}", rec.xi, rec.q_val, rec.q_test);
                    }
                    run
                }
                Command::SeedMatrix { from } => {
                    let mut run = new_run(&cli, &config, "seed-matrix", &format!("from {}", from.display()))?;
                    let m = commands::seed_matrix(&ctx, &mut run, from)?;
                    println!("diagonal mean {:.6}, off-diagonal mean {:.6}", m.diagonal_mean(), m.off_diagonal_mean());
                    run
                }
                Command::Transfer { from } => {
                    let names: Vec<String> = from.iter().map(|p| p.display().to_string()).collect();
                    let mut run = new_run(&cli, &config, "transfer", &format!("from {}", names.join(" ")))?;
                    let m = commands::transfer(&ctx, &mut run, from)?;
                    let worst = m.gaps.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
                    println!("smallest gain over random baseline {worst:+.6}");
                    run
                }
                Command::Trace { order } => {
                    let mut run = new_run(&cli, &config, "trace", &format!("order {}", input_hash(order)?))?;
                    for (name, t) in commands::trace(&ctx, &mut run, order)? {
                        let k = t.counts.len() - 1;
                        println!("{name}: total variation at k={k} {:.6}", t.tv_distance(k));
                    }
                    run
                }
                Command::Crossing => {
                    let run = new_run(&cli, &config, "crossing", "")?;
                    match commands::crossing(&ctx, &run)?.crossing {
                        Some(c) => println!(
                            "orders {} and {} cross: first ahead at k={}, second ahead at k={}",
                            c.first, c.second, c.first_ahead_at, c.second_ahead_at
                        ),
                        None => println!("no crossing pair found"),
                    }
                    run
                }
                Command::Report { from } => {
                    let names: Vec<String> = from.iter().map(|p| p.display().to_string()).collect();
                    let mut run = new_run(&cli, &config, "report", &format!("from {}", names.join(" ")))?;
                    let r = commands::report(&mut run, from)?;
                    println!("{} curves, {} matrices, {} traces", r.curves.len(), r.matrices.len(), r.traces.len());
                    run
                }
                Command::Overlap { .. } | Command::Cache { .. } => unreachable!(),
            };
            println!("{}", run.finish()?.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = execute(cli) {
        eprintln!("oracle-al: {e}");
        std::process::exit(e.exit_code());
    }
}
