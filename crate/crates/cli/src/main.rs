use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splatstream_cli::commands;
use splatstream_cli::{CliError, CliResult, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "splatstream", version, about = "Dynamic Gaussian splatting streaming pipeline")]
struct Cli {
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, env = "SPLATSTREAM_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its ground-truth images.
    GenScene(Overrides),
    /// Fit the scene and partition it into keyframe groups.
    Train(Overrides),
    /// Stream the trained sequence over a bandwidth trace.
    Simulate(Overrides),
    /// Check the selector, gradients and codec against reference oracles.
    OracleCheck(Overrides),
    /// Write plot-ready tables from an output directory.
    Report {
        /// Output directory of a previous run.
        dir: std::path::PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    match cli.command {
        Command::GenScene(o) => {
            let cfg = RunConfig::resolve(&o)?;
            let s = commands::gen_scene(&cfg)?;
            println!("wrote {} frames to {}", s.frames.len(), cfg.out.display());
        }
        Command::Train(o) => {
            let cfg = RunConfig::resolve(&o)?;
            let g = commands::train(&cfg)?;
            let keys: Vec<u32> = g.plan.groups.iter().map(|s| s.key).collect();
            println!("{} groups, keyframes {keys:?}", keys.len());
        }
        Command::Simulate(o) => {
            let cfg = RunConfig::resolve(&o)?;
            let r = commands::simulate(&cfg)?;
            let a = &r.aggregates;
            println!(
                "{} frames, {} bytes, mean transmission {:.4}s, {} stalled",
                a.frames, a.total_bytes, a.mean_transmission_s, a.stalled_frames
            );
        }
        Command::OracleCheck(o) => {
            let cfg = RunConfig::resolve(&o)?;
            let checks = commands::oracle_check(&cfg);
            let list = match &checks {
                Ok(c) => c.clone(),
                Err(_) => serde_json::from_str::<Vec<serde_json::Value>>(
                    &std::fs::read_to_string(cfg.out.join(commands::ORACLE_FILE)).unwrap_or_default(),
                )
                .unwrap_or_default()
                .into_iter()
                .map(|v| commands::OracleCheck {
                    name: v["name"].as_str().unwrap_or("").into(),
                    passed: v["passed"].as_bool().unwrap_or(false),
                    detail: v["detail"].as_str().unwrap_or("").into(),
                })
                .collect(),
            };
            for c in &list {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            checks?;
        }
        Command::Report { dir } => {
            let s = commands::report(&dir)?;
            println!("report for {} frames, keyframes {:?}", s.frames, s.keyframes);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
