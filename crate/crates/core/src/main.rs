use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modsel::harness::{load_config, presets, run_experiment, summarize};
use modsel::Error;

#[derive(Parser)]
#[command(name = "modsel", version, about = "Model-selection bandit simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or preset name.
    Run {
        config: String,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Print summary statistics of a result CSV as JSON.
    Summarize {
        csv: PathBuf,
        /// `ALGORITHM=VALUE`: the `selected` value counted as correct.
        #[arg(long = "target", value_parser = parse_target)]
        targets: Vec<(String, usize)>,
    },
    /// List the shipped preset configs.
    ListPresets {
        /// Print each preset as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn parse_target(s: &str) -> Result<(String, usize), String> {
    let (alg, v) = s.split_once('=').ok_or("expected ALGORITHM=VALUE")?;
    Ok((alg.to_string(), v.parse().map_err(|e| format!("{e}"))?))
}

fn run(cli: Cli) -> modsel::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            trials,
            seed,
            parallel,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(n) = trials {
                cfg.trials = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let written = run_experiment(&cfg, parallel)?;
            println!("{}", written.results_csv.display());
            println!("{}", written.summary_json.display());
            for p in written.epoch_trace_csv.iter().chain(&written.phase_trace_csv) {
                println!("{}", p.display());
            }
        }
        Command::Summarize { csv, targets } => {
            let targets: BTreeMap<String, usize> = targets.into_iter().collect();
            let s = summarize(&csv, &targets)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("serializable"));
        }
        Command::ListPresets { json } => {
            for p in presets() {
                if json {
                    println!("{}", serde_json::to_string_pretty(&p).expect("serializable"));
                } else {
                    let algs: Vec<String> = p.algorithms.iter().map(|a| a.label()).collect();
                    println!("{:<16} T={:<7} trials={:<3} {}", p.name, p.horizon, p.trials, algs.join(", "));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Validation(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
