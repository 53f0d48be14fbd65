use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use memdom::policy::{
    lint_policy, parse_policy_with, serialize_acl, ParseOptions, Severity, DEFAULT_POOL_PAGES,
};

#[derive(Parser)]
#[command(name = "aclgen", version, about = "Compile and lint memory-domain access policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a policy to a canonical ACL file.
    Compile {
        policy: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Pool pages for domains without an explicit `pages=`.
        #[arg(long, default_value_t = DEFAULT_POOL_PAGES)]
        pages: u32,
    },
    /// Report policy problems.
    Lint {
        policy: PathBuf,
        #[arg(long, default_value_t = DEFAULT_POOL_PAGES)]
        pages: u32,
        /// Print findings as a JSON array.
        #[arg(long)]
        json: bool,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Compile { policy, out, pages } => {
            let source = read(&policy)?;
            let opts = ParseOptions { default_pages: pages };
            match parse_policy_with(&source, &opts) {
                Ok(parsed) => {
                    std::fs::write(&out, serialize_acl(&parsed.acl))
                        .with_context(|| format!("writing {}", out.display()))?;
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("{}: error[{}]: {e}", policy.display(), e.code());
                    Ok(ExitCode::from(1))
                }
            }
        }
        Command::Lint { policy, pages, json } => {
            let source = read(&policy)?;
            let report = lint_policy(&source, &ParseOptions { default_pages: pages });
            if json {
                println!("{}", report.to_json());
            } else {
                for f in &report.findings {
                    let sev = match f.severity {
                        Severity::Warn => "warning",
                        Severity::Error => "error",
                    };
                    let line = f.line.map(|l| format!(":{l}")).unwrap_or_default();
                    println!("{}{line}: {sev}[{}]: {}", policy.display(), f.code, f.message);
                }
            }
            Ok(if report.has_errors() { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
    }
}
