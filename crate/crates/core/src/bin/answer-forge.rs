use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use answer_forge::config::load_config;
use answer_forge::metrics::{aggregate, load_ranks, metrics_csv, EvalMode};
use answer_forge::pipeline::{run_pipeline, write_outputs};
use answer_forge::pso::{optimize_weights, Infallible, SwarmConfig};
use answer_forge::{Error, LossWeights, Result};

#[derive(Parser)]
#[command(name = "answer-forge", version, about = "Zero-shot VQA answer ranking with PSO-tuned loss weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics from a ranks CSV.
    Eval {
        #[arg(long)]
        ranks: PathBuf,
    },
    /// Run the optimizer on a known objective and check the optimum.
    PsoBench {
        #[arg(long, value_enum)]
        function: Bench,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Zsl,
    Gzsl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bench {
    Sphere,
    Linear,
}

fn run(config: PathBuf, mode: Option<Mode>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(m) = mode {
        cfg.eval_mode = match m {
            Mode::Zsl => EvalMode::Zsl,
            Mode::Gzsl => EvalMode::Gzsl,
        };
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(o) = out {
        cfg.output = o;
    }
    let out_dir = cfg.output.clone();
    let outcome = run_pipeline(cfg)?;
    for p in write_outputs(&out_dir, &outcome)? {
        log::info!("wrote {}", p.display());
    }
    print!("{}", metrics_csv(&outcome.report.eval.metrics));
    Ok(())
}

fn eval(ranks: PathBuf) -> Result<()> {
    let rows = load_ranks(&ranks)?;
    let r: Vec<usize> = rows.iter().map(|s| s.rank).collect();
    println!("{}", serde_json::to_string_pretty(&aggregate(&r)?)?);
    Ok(())
}

fn pso_bench(function: Bench, seed: u64) -> Result<bool> {
    let cfg = SwarmConfig {
        seed,
        ..SwarmConfig::default()
    };
    let start = Instant::now();
    let (name, result, pass) = match function {
        Bench::Sphere => {
            let f = Infallible(|w: &LossWeights| -w.as_array().iter().map(|x| x * x).sum::<f64>());
            let r = optimize_weights(&f, &cfg, None)?;
            let ok = r.best.as_array().iter().all(|x| (x - 0.2).abs() <= 1e-2) && (r.best_fitness + 0.2).abs() <= 1e-3;
            ("sphere", r, ok)
        }
        Bench::Linear => {
            let f = Infallible(|w: &LossWeights| w.entity());
            let r = optimize_weights(&f, &cfg, None)?;
            let ok = r.best.entity() >= 0.98;
            ("linear", r, ok)
        }
    };
    let elapsed = start.elapsed();
    let pass = pass && elapsed.as_secs_f64() < 1.0;
    println!(
        "{} {name}: best={:?} fitness={} elapsed={:.3}s",
        if pass { "PASS" } else { "FAIL" },
        result.best.as_array(),
        result.best_fitness,
        elapsed.as_secs_f64()
    );
    Ok(pass)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ANSWER_FORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, mode, seed, out } => run(config, mode, seed, out),
        Command::Eval { ranks } => eval(ranks),
        Command::PsoBench { function, seed } => match pso_bench(function, seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}
