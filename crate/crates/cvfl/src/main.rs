use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cvfl::config::KEY_HELP;
use cvfl::experiment::{cost_csv, render_cost_table};
use cvfl::{comm_cost_report, read_config, run_experiment, CodecChoice, Overrides};

#[derive(Parser)]
#[command(version, about = "Compressed vertical federated learning simulator", after_help = KEY_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics.csv and manifest.txt.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Train every config and tabulate bytes needed to reach a target loss.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Loss to reach; defaults to the first config's `target_loss`.
        #[arg(long)]
        target: Option<f64>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Check the perturbation and convergence bounds on a tiny instance.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct Flags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parties: Option<usize>,
    #[arg(long)]
    local_iters: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_parser = parse_codec)]
    compressor: Option<CodecChoice>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=32))]
    bits: Option<u8>,
}

fn parse_codec(s: &str) -> Result<CodecChoice, String> {
    CodecChoice::parse(s).ok_or_else(|| format!("expected none, scalar, vector or topk, got {s:?}"))
}

impl From<Flags> for Overrides {
    fn from(f: Flags) -> Self {
        Overrides {
            seed: f.seed,
            out: f.out,
            parties: f.parties,
            local_iters: f.local_iters,
            rounds: f.rounds,
            batch: f.batch,
            compressor: f.compressor,
            bits: f.bits,
        }
    }
}

fn run(cli: Cli) -> cvfl::Result<bool> {
    match cli.command {
        Command::Run { config, flags } => {
            let mut cfg = read_config(&config)?;
            cfg.apply(&flags.into())?;
            let result = run_experiment(&cfg)?;
            for f in &result.files {
                println!("wrote {}", f.display());
            }
            Ok(true)
        }
        Command::Compare { configs, target, flags } => {
            let overrides: Overrides = flags.into();
            let mut planned = Vec::new();
            for path in &configs {
                let mut cfg = read_config(path)?;
                cfg.apply(&overrides)?;
                let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
                planned.push((label, cfg));
            }
            let target = target
                .or(planned[0].1.target_loss)
                .ok_or_else(|| cvfl::Error::ConfigInvalid("no target loss: pass --target or set target_loss".into()))?;
            // apply() already moved `out` to the override when one is given
            let report_dir = planned[0].1.out.clone();
            let mut runs = Vec::new();
            for (label, mut cfg) in planned {
                cfg.out = cfg.out.join(&label);
                let result = run_experiment(&cfg)?;
                runs.push((label, result.outcome.metrics));
            }
            let refs: Vec<(String, &_)> = runs.iter().map(|(l, s)| (l.clone(), s)).collect();
            let rows = comm_cost_report(&refs, target);
            print!("{}", render_cost_table(&rows, target));
            let path = report_dir.join("comparison.csv");
            std::fs::write(&path, cost_csv(&rows)).map_err(|e| cvfl::Error::Io { path, source: e })?;
            Ok(true)
        }
        Command::Verify { seed } => {
            let lines = cvfl::verify::run_verification(seed)?;
            let mut ok = true;
            for l in &lines {
                let r = l.report;
                println!(
                    "{} {}: lhs {:.3e} rhs {:.3e} ratio {:.3}",
                    if r.pass { "PASS" } else { "FAIL" },
                    l.name,
                    r.lhs,
                    r.rhs,
                    r.ratio
                );
                ok &= r.pass;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
