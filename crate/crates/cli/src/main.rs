use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridloop::ExecutionMode;
use gridloop_cli::{describe, execute, load, Overrides};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "gridloop", version, about = "Co-simulation testbed for carbon-aware applications")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print the summary.
    Run {
        scenario: PathBuf,
        /// fast, real, scaled:<factor> or conditional:<predicate>:<factor>
        #[arg(long)]
        mode: Option<ExecutionMode>,
        /// Simulated seconds to run, overriding duration_s.
        #[arg(long, value_name = "SECONDS")]
        until: Option<u64>,
        /// Serve the HTTP API on this address while running.
        #[arg(long, value_name = "ADDR")]
        listen: Option<String>,
        /// Write the step log CSV here.
        #[arg(long, value_name = "CSV")]
        out: Option<PathBuf>,
    },
    /// Check a scenario without running it.
    Validate { scenario: PathBuf },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);

    let (path, overrides, run) = match cli.command {
        Command::Run { scenario, mode, until, listen, out } => {
            (scenario, Overrides { mode, until_s: until, listen, out }, true)
        }
        Command::Validate { scenario } => (scenario, Overrides::default(), false),
    };

    let prepared = match load(&path, &overrides) {
        Ok(p) => p,
        Err(e) => {
            for line in e.to_string().lines() {
                eprintln!("error: {line}");
            }
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    for w in &prepared.warnings {
        eprintln!("warning: {w}");
    }
    if !run {
        print!("{}", describe(&prepared));
        return ExitCode::SUCCESS;
    }
    match execute(prepared) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
