use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fedgr::client::Method;
use fedgr::config::parse_config;
use fedgr::metrics::{fmt_value, mean_and_std, RunSummary};
use fedgr::runner::run_experiment;

/// Simulated federated training under label noise.
#[derive(Parser, Debug)]
#[command(name = "fedgr", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["fedgr", "fedavg"])]
    method: Option<String>,
    /// Output directory; falls back to the config, then FEDGR_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn print_row(s: &RunSummary) {
    println!(
        "{:>6}  {:>10}  {:>8}  {:>12}",
        s.seed,
        fmt_value(Some(s.last10_mean_acc)),
        fmt_value(s.pearson),
        fmt_value(Some(s.final_memorization))
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match parse_config(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.config.display());
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(m) = &cli.method {
        cfg.run.method = m.parse::<Method>().expect("clap restricts values");
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.run.output_dir.clone())
        .or_else(|| std::env::var_os("FEDGR_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("fedgr-out"));

    if !cli.quiet {
        println!("method {} -> {}", cfg.run.method.name(), out.display());
        println!("{:>6}  {:>10}  {:>8}  {:>12}", "seed", "last10_acc", "pearson", "memorization");
    }
    let quiet = cli.quiet;
    match run_experiment(&cfg, &out, |s| {
        if !quiet {
            print_row(s);
        }
    }) {
        Ok(summaries) => {
            if !quiet {
                let acc: Vec<f64> = summaries.iter().map(|s| s.last10_mean_acc).collect();
                let (m, sd) = mean_and_std(&acc);
                println!("last10_acc mean {m:.4} std {sd:.4} over {} seed(s)", acc.len());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
