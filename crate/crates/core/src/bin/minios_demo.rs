use std::os::unix::process::ExitStatusExt;
use std::process::{Command as Process, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use memdom::domain::{BackendChoice, BackendKind};
use memdom::minios::adversary::{run_attack, AttackOutcome, AttackVariant};
use memdom::minios::{MiniOs, Mode};

#[derive(Parser)]
#[command(name = "minios-demo", version, about = "Attack the minios descriptor table")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Let the bundled malicious library try to corrupt libOS metadata.
    RunAttack {
        #[arg(long)]
        mode: Mode,
        #[arg(long, default_value = "checked")]
        backend: BackendChoice,
        #[arg(long, default_value = "direct")]
        variant: AttackVariant,
        /// Run in this process even where a fault would kill it.
        #[arg(long, hide = true)]
        child: bool,
    },
}

fn print_line(outcome: AttackOutcome, mode: Mode, backend: BackendKind, variant: AttackVariant, detail: &str) {
    let mode = match mode {
        Mode::Protected => "protected",
        Mode::Vanilla => "vanilla",
    };
    println!("outcome={outcome} mode={mode} backend={backend} variant={variant} detail={detail:?}");
}

fn in_process(mode: Mode, backend: BackendChoice, variant: AttackVariant) -> Result<()> {
    let os = MiniOs::boot(backend, mode).context("booting minios")?;
    let report = run_attack(&os, variant).context("running attack")?;
    print_line(report.outcome, mode, os.monitor().backend_kind(), variant, &report.detail);
    Ok(())
}

fn disable_core_dumps() {
    let zero = libc::rlimit { rlim_cur: 0, rlim_max: 0 };
    // SAFETY: plain syscall on a valid struct.
    unsafe { libc::setrlimit(libc::RLIMIT_CORE, &zero) };
}

fn main() -> Result<ExitCode> {
    let Command::RunAttack { mode, backend, variant, child } = Cli::parse().command;
    let kind = backend.resolve();
    if child {
        disable_core_dumps();
        in_process(mode, backend, variant)?;
        return Ok(ExitCode::SUCCESS);
    }
    if kind == BackendKind::Checked {
        in_process(mode, backend, variant)?;
        return Ok(ExitCode::SUCCESS);
    }
    let exe = std::env::current_exe().context("locating own executable")?;
    let mode_arg = match mode {
        Mode::Protected => "protected",
        Mode::Vanilla => "vanilla",
    };
    let out = Process::new(exe)
        .args(["run-attack", "--mode", mode_arg, "--backend", kind.as_str()])
        .args(["--variant", &variant.to_string(), "--child"])
        .output()
        .context("spawning attack process")?;
    match out.status.signal() {
        Some(sig) if sig == libc::SIGSEGV => {
            print_line(AttackOutcome::Denied, mode, kind, variant, "attack process terminated by SIGSEGV");
            Ok(ExitCode::SUCCESS)
        }
        Some(sig) => bail!("attack process killed by signal {sig}"),
        None if out.status.success() => {
            print!("{}", String::from_utf8_lossy(&out.stdout));
            Ok(ExitCode::SUCCESS)
        }
        None => bail!(
            "attack process failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ),
    }
}
