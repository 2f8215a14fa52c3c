use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedivon::experiment::{parse_config, run_experiment, summarize, summary_csv, summary_markdown, RunOptions};
use fedivon::Error;

/// Environment variable that overrides the configured output directory.
const OUTPUT_ENV: &str = "FEDIVON_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "fedivon", version, about = "Bayesian federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Root seed, replacing the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for client updates. Results do not depend on it.
        #[arg(long)]
        parallel: Option<usize>,
        /// Output directory, replacing the config's `output_dir` and the
        /// FEDIVON_OUTPUT_DIR environment variable.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the run directory's checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Print the final-round table of a run directory or of every run under it.
    Summarize {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::Partition(_) => "partition",
        Error::Client { .. } => "client",
        _ => "runtime",
    }
}

fn report(e: &Error) {
    eprintln!("error[{}]: {e}", kind(e));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            parallel,
            output,
            resume,
        } => parse_config(&config).and_then(|cfg| {
            let output_dir = output.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from));
            let opts = RunOptions {
                seed,
                parallel,
                output_dir,
                resume,
            };
            let report = run_experiment(&cfg, &opts)?;
            for dir in &report.run_dirs {
                println!("{}", dir.display());
            }
            Ok(())
        }),
        Command::Summarize { dir, format } => summarize(&dir).map(|rows| {
            let table = match format {
                Format::Csv => summary_csv(&rows),
                Format::Markdown => summary_markdown(&rows),
            };
            print!("{table}");
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
