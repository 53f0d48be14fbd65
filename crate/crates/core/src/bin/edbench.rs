use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use memdom::bench::{run_syscall_bench, BenchConfig, DEFAULT_RUNS, TABLE_SYSCALLS};
use memdom::domain::BackendChoice;

#[derive(Parser)]
#[command(name = "edbench", version, about = "Syscall microbenchmarks for the minios monitor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benchmark and write a JSON report.
    Run {
        #[arg(long, default_value = "checked")]
        backend: BackendChoice,
        #[arg(long, default_value_t = 10_000)]
        iters: u64,
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
        /// Comma-separated syscall names.
        #[arg(long, value_delimiter = ',', default_values_t = TABLE_SYSCALLS.map(String::from))]
        syscalls: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print aligned text tables.
        #[arg(long)]
        table: bool,
    },
}

fn main() -> Result<()> {
    let Command::Run { backend, iters, runs, syscalls, out, table } = Cli::parse().command;
    let syscalls = syscalls.into_iter().filter(|s| !s.is_empty()).collect();
    let report = run_syscall_bench(&BenchConfig { backend, syscalls, iterations: iters, runs })?;
    let json = report.to_json();
    match out {
        Some(path) => std::fs::write(&path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))?,
        None if !table => println!("{json}"),
        None => {}
    }
    if table {
        print!("{}", report.to_table());
    }
    Ok(())
}

