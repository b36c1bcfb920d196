use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ticketforge_harness::checkpoint::Checkpoint;
use ticketforge_harness::config::load_config;
use ticketforge_harness::reports::{emit_reports, write_summary, REPORT_FILES, SUMMARY_FILE};
use ticketforge_harness::runner::{load_runs, run_experiment, RunOptions};
use ticketforge_harness::{lts_ordering, records::RunLine};

/// Lottery-ticket search experiments with trajectory-length analysis.
#[derive(Parser)]
#[command(name = "ticketforge", version)]
struct Cli {
    /// Worker threads for run-level parallelism (default: config, then all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root for relative dataset paths.
    #[arg(long, global = true, env = "TICKETFORGE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Skip runs already recorded in runs.jsonl (default).
    #[arg(long, global = true, overrides_with = "no_resume")]
    resume: bool,
    /// Discard runs.jsonl and start over.
    #[arg(long, global = true, overrides_with = "resume")]
    no_resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment.
    Search { config: PathBuf },
    /// Recompute summary.csv from an artifact directory.
    Metrics { dir: PathBuf },
    /// Write the plot-data CSVs for an artifact directory.
    Report { dir: PathBuf },
    /// Measure the trajectory length of a saved checkpoint.
    Trajectory {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        /// Probe seed; defaults to the checkpoint's run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Write the projected trajectory as CSV.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

fn progress(line: &RunLine) {
    let detail = match (&line.failure, line.best_sparse_stage) {
        (Some(f), _) => format!("failed at stage {}: {}", f.stage, f.reason),
        (None, Some(b)) => format!("winning ticket, best stage {b}"),
        (None, None) => "no winning ticket".to_string(),
    };
    eprintln!("run {:>5} {:<12} {detail}", line.run_id, line.arch);
}

fn print_lts(lines: &[RunLine]) -> anyhow::Result<()> {
    let order = lts_ordering(lines)?;
    println!("LTS ordering (highest first):");
    for (name, params, lts) in order {
        println!("  {name:<16} {params:>10} params  LTS {lts:.4}");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let data_dir = cli.data_dir.as_deref();
    match cli.command {
        Command::Validate { config } => {
            let cfg = load_config(&config, data_dir)?;
            println!("{}: ok (digest {})", config.display(), cfg.digest());
        }
        Command::Search { config } => {
            let cfg = load_config(&config, data_dir)?;
            let opts = RunOptions { jobs: cli.jobs, no_resume: cli.no_resume };
            let outcome = run_experiment(&cfg, &opts, &progress)?;
            println!(
                "{}: {} runs ({} executed now, {} failed)",
                outcome.dir.display(),
                outcome.n_total,
                outcome.executed,
                outcome.n_failed
            );
            print_lts(&load_runs(&outcome.dir)?)?;
            if outcome.all_failed() {
                eprintln!("every run failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Metrics { dir } => {
            let lines = load_runs(&dir)?;
            write_summary(&dir, &lines)?;
            println!("wrote {}", dir.join(SUMMARY_FILE).display());
        }
        Command::Report { dir } => {
            let lines = load_runs(&dir)?;
            emit_reports(&dir, &lines)?;
            for f in REPORT_FILES {
                println!("wrote {}", dir.join(f).display());
            }
            print_lts(&lines)?;
        }
        Command::Trajectory { checkpoint, points, seed, radius, dump } => {
            let ck = Checkpoint::load(&checkpoint)?;
            if points < 3 {
                bail!("--points must be at least 3");
            }
            let (probe, result) = ck.trajectory(points, radius, seed.unwrap_or(ck.seed))?;
            if let Some(path) = dump {
                let f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                result.write_csv(&probe, std::io::BufWriter::new(f))?;
            }
            println!("{}", result.length);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
