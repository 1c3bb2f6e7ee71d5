//! `probmhe` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numerical failure,
//! 4 infeasible certificate or privacy budget (budget verdicts only with `--strict`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use probmhe::harness::{
    dp_budget, observability_scan, run_benchmark, run_tradeoff_sweep, ExperimentConfig, Method,
};
use probmhe::io::fmt_f64;
use probmhe::Error;

#[derive(Parser, Debug)]
#[command(name = "probmhe", version, about = "Probabilistic moving-horizon estimation")]
struct Cli {
    /// Experiment config (TOML); the built-in benchmark when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Treat infeasible budgets and flagged sweep rows as failures (exit 4).
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the true system and write trajectory.csv.
    Simulate,
    /// Run an estimator and write estimates, truth, metrics, resolved config and a plot.
    Estimate {
        #[arg(long, value_parser = ["w2", "kl"])]
        method: Option<String>,
    },
    /// Rank test of the stacked observability Jacobian over the prior box.
    Observability {
        #[arg(long, default_value_t = 5)]
        t_max: usize,
        #[arg(long, default_value_t = 11)]
        points: usize,
    },
    /// Evaluate the four privacy bounds for the config's [dp] section.
    DpBudget {
        /// Also check this constant regularization weight.
        #[arg(long)]
        s: Option<f64>,
    },
    /// Privacy/accuracy sweep over epsilon.
    Tradeoff {
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
    },
    /// Run both estimators on several seeds and report RMSE and step time.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Sample { source, .. } => exit_code(source),
        Error::Infeasible(_) => 4,
        e if e.is_config() => 2,
        Error::Io(_) | Error::Csv(_) => 2,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::benchmark(1),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let config = load_config(cli)?;
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Simulate => {
            let scenario = probmhe::harness::Scenario::new(&config)?;
            fs::create_dir_all(out)?;
            scenario
                .trajectory
                .write_csv(fs::File::create(out.join("trajectory.csv"))?)?;
            fs::write(out.join("config.toml"), config.to_toml()?)?;
            println!("wrote {}", out.join("trajectory.csv").display());
        }
        Command::Estimate { method } => {
            let mut config = config;
            if let Some(m) = method {
                config.method = Method::parse(m)?;
            }
            let report = run_benchmark(&config, out)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            println!(
                "{:?}: eta = {:.6}, l = {:.4}, s = {:.6}",
                report.method, report.eta, report.l, report.s
            );
            println!("rmse (mean estimate, k = 1..T): [{}]", fmt_vec(report.rmse.iter().copied()));
            println!("rmse (per sample, averaged):    [{}]", fmt_vec(report.sample_rmse.iter().copied()));
            println!("mean step time: {:.3} ms", report.step_seconds * 1e3);
        }
        Command::Observability { t_max, points } => {
            let report = observability_scan(&config, *t_max, *points, Some(out))?;
            println!("{}", report.summary());
            if report.min_horizon_estimate.is_none() {
                return Ok(if cli.strict { 4 } else { 0 });
            }
        }
        Command::DpBudget { s } => {
            let report = dp_budget(&config, *s)?;
            fs::create_dir_all(out)?;
            report.write_csv(&out.join("dp_budget.csv"))?;
            print!("{}", report.render());
            if cli.strict && report.any_infeasible() {
                return Ok(4);
            }
        }
        Command::Tradeoff { epsilons } => {
            let eps = epsilons.clone().unwrap_or_else(|| config.tradeoff.epsilons.clone());
            let rows = run_tradeoff_sweep(&config, &eps, Some(out))?;
            println!("{:>10} {:>14} {:>9}  sample rmse", "epsilon", "s", "feasible");
            for r in &rows {
                println!(
                    "{:>10} {:>14.8} {:>9}  [{}]",
                    r.epsilon,
                    r.s,
                    r.feasible,
                    fmt_vec(r.sample_rmse.iter().copied())
                );
            }
            if cli.strict && rows.iter().any(|r| !r.feasible) {
                return Ok(4);
            }
        }
        Command::Bench { seeds } => {
            fs::create_dir_all(out)?;
            let mut wtr = csv::Writer::from_path(out.join("bench.csv")).map_err(Error::from)?;
            wtr.write_record(["seed", "method", "rmse_x1", "rmse_x2", "eta"])
                .map_err(Error::from)?;
            for &seed in seeds {
                for method in [Method::W2, Method::Kl] {
                    let mut c = config.clone();
                    c.seed = seed;
                    c.method = method;
                    c.output.plot = false;
                    let dir = out.join(format!("seed{seed}_{method:?}").to_lowercase());
                    let report = run_benchmark(&c, &dir)?;
                    println!(
                        "seed {seed:>3} {:<3} rmse [{}]  step {:.3} ms",
                        format!("{method:?}"),
                        fmt_vec(report.rmse.iter().copied()),
                        report.step_seconds * 1e3
                    );
                    let mut row = vec![seed.to_string(), format!("{method:?}").to_lowercase()];
                    row.extend(report.rmse.iter().map(|&x| fmt_f64(x)));
                    row.push(fmt_f64(report.eta));
                    wtr.write_record(&row).map_err(Error::from)?;
                }
            }
            wtr.flush()?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
