use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand, ValueEnum};
use dualtrack::calibrate::{calibrate, Objective};
use dualtrack::commands::{ablate, eval, simulate, track};
use dualtrack::io::thread_cap;
use dualtrack::{CliError, CliResult, ExitCode};
use dualtrack_core::eval::Protocol;
use dualtrack_core::sim::SequenceMode;

#[derive(Parser)]
#[command(name = "dualtrack", version, about = "Dual-modal visual tracker and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Oracle,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Reset,
    Ope,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Eao,
    Loss,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Reset => Protocol::Reset,
            ProtocolArg::Ope => Protocol::Ope,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value = "oracle")]
        mode: ModeArg,
    },
    /// Track one sequence and write its run record.
    Track {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_heatmaps: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "reset")]
        protocol: ProtocolArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate run records into a metrics report.
    Eval {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "reset")]
        protocol: ProtocolArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep configuration keys over a sequence set.
    Ablate {
        #[arg(long, required = true)]
        seq: Vec<PathBuf>,
        #[arg(long, required = true)]
        sweep: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Search layer weights over the simplex.
    Calibrate {
        #[arg(long, required = true)]
        seq: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "eao")]
        objective: ObjectiveArg,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, out, seed, count, mode } => {
            let mode = match mode {
                ModeArg::Oracle => SequenceMode::Oracle,
                ModeArg::Image => SequenceMode::Image,
            };
            simulate(config.as_deref(), &out, seed, count, mode).map(|_| ())
        }
        Command::Track { seq, config, out, dump_heatmaps, protocol, seed } => {
            track(&seq, config.as_deref(), &out, dump_heatmaps.as_deref(), protocol.into(), seed).map(|_| ())
        }
        Command::Eval { runs, protocol, out, config } => eval(&runs, protocol.into(), &out, config.as_deref()).map(|_| ()),
        Command::Ablate { seq, sweep, config, out, seed } => ablate(&seq, &sweep, config.as_deref(), &out, seed).map(|_| ()),
        Command::Calibrate { seq, config, out, seed, objective, step } => {
            let objective = match objective {
                ObjectiveArg::Eao => Objective::Eao,
                ObjectiveArg::Loss => Objective::Loss,
            };
            calibrate(&seq, config.as_deref(), &out, seed, objective, step).map(|_| ())
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Config as i32 } else { 0 };
            let _ = e.print();
            process::exit(code);
        }
    };
    if let Some(n) = thread_cap() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("dualtrack: {e}");
        }
    }
    if let Err(CliError { code, message }) = run(cli) {
        eprintln!("dualtrack: {message}");
        process::exit(code as i32);
    }
}
