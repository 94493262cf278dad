use std::path::PathBuf;
use std::process::ExitCode;

use agile_sim::bench::{self, Experiment};
use agile_sim::config::KvDoc;
use clap::Parser;

/// Run one simulator experiment.
#[derive(Parser, Debug)]
#[command(name = "agile-sim", version)]
struct Cli {
    /// ctc_sweep | rand_read | rand_write | deadlock_demo | queue_sweep |
    /// cache_sweep | coherence
    experiment: Experiment,
    /// Key-value config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the event trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the result table here (stdout otherwise).
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Usage errors; 2 is reserved for an agile-mode deadlock.
const EXIT_USAGE: u8 = 64;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("agile-sim: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let doc = KvDoc::load(&cli.config)?;
    let out = bench::run(cli.experiment, &doc, cli.seed, cli.trace.is_some())?;
    if let Some(path) = &cli.trace {
        std::fs::write(path, &out.trace)?;
    }
    let table = out.csv.as_ref().map(|c| c.render()).unwrap_or_default();
    match &cli.csv {
        Some(path) => std::fs::write(path, &table)?,
        None => print!("{table}"),
    }
    for line in &out.summary {
        eprintln!("{line}");
    }
    if out.agile_deadlock {
        eprintln!("FAILED: deadlock reported in agile mode");
        return Ok(ExitCode::from(2));
    }
    if out.flagged {
        eprintln!("flagged: expected naive-mode deadlock observed");
    }
    Ok(ExitCode::SUCCESS)
}
