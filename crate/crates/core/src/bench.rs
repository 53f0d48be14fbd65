//! Syscall microbenchmarks over [`MiniOs`]: how much of each call is spent
//! in grant, revoke and size checks, and how much memory the monitor keeps.

use std::fmt::Write as _;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use thiserror::Error;

use crate::domain::{BackendChoice, BackendKind};
use crate::minios::{flags, MiniOs, Mode, OsError, FS_DOM, HANDLE_DOM};
use crate::monitor::Monitor;

/// The calls of the published comparison, in its order.
pub const TABLE_SYSCALLS: [&str; 5] = ["open", "close", "stat", "fstat", "mmap"];

/// Calls that can be looped. `mount` has no inverse and is left out.
pub const BENCHABLE: [&str; 9] = [
    "open", "close", "stat", "fstat", "mmap", "read", "write", "mkdir", "unlink",
];

/// Published share of time in monitor operations, in percent.
pub const REFERENCE_FRACTIONS: [(&str, f64); 5] = [
    ("open", 6.4),
    ("close", 49.1),
    ("stat", 49.9),
    ("fstat", 50.1),
    ("mmap", 0.8),
];

/// Published peak bookkeeping, in bytes.
pub const REFERENCE_DOMAIN_BYTES: [(&str, u64); 2] = [(HANDLE_DOM, 98), (FS_DOM, 1030)];
pub const REFERENCE_TOTAL_BYTES: u64 = 1200;

pub const DEFAULT_RUNS: usize = 5;
pub const MMAP_LEN: usize = 64 * 1024;

const DIR: &str = "/bench/a/b/c";
const FILE: &str = "/bench/a/b/c/file";
const SCRATCH: &str = "/bench/scratch";
const NEWDIR: &str = "/bench/newdir";
const IO_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown syscall `{0}`")]
    UnknownSyscall(String),
    #[error("`{0}` cannot be run in a loop")]
    NotBenchmarkable(String),
    #[error("iterations and runs must be at least 1")]
    ZeroIterations,
    #[error(transparent)]
    Os(#[from] OsError),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub backend: BackendChoice,
    pub syscalls: Vec<String>,
    pub iterations: u64,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            backend: BackendChoice::Checked,
            syscalls: TABLE_SYSCALLS.iter().map(|s| s.to_string()).collect(),
            iterations: 10_000,
            runs: DEFAULT_RUNS,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunSample {
    pub total_ns: u64,
    pub monitor_ns: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SyscallRow {
    pub name: String,
    pub iterations: u64,
    /// Totals of the run with the median fraction.
    pub total_ns: u64,
    pub monitor_ns: u64,
    pub fraction: f64,
    pub mean_fraction: f64,
    pub runs: Vec<RunSample>,
    pub reference_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct DomainRow {
    pub label: String,
    /// Allocator bookkeeping peak plus the grant-table bytes naming this
    /// domain.
    pub bookkeeping_peak_bytes: u64,
    pub allocator_peak_bytes: u64,
    pub pool_high_water_bytes: u64,
    pub reference_bytes: Option<u64>,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct MemoryReport {
    pub domains: Vec<DomainRow>,
    /// Grant-table bytes not tied to one domain plus sandbox stacks.
    pub shared_bytes: u64,
    pub grant_table_bytes: u64,
    pub frame_stack_peak_bytes: u64,
    pub total_bytes: u64,
    pub reference_total_bytes: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Totals {
    pub total_ns: u64,
    pub monitor_ns: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BenchReport {
    pub backend: BackendKind,
    pub timestamp: u64,
    pub iterations: u64,
    pub runs: usize,
    pub syscalls: Vec<SyscallRow>,
    pub totals: Totals,
    pub memory: MemoryReport,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&SyscallRow> {
        self.syscalls.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text tables: time shares, then memory.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "backend: {}  iterations: {}  runs: {}", self.backend, self.iterations, self.runs);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>12} {:>9} {:>9} {:>10}",
            "syscall", "total ns", "monitor ns", "median %", "mean %", "ref %"
        );
        for r in &self.syscalls {
            let reference = r.reference_fraction.map_or("-".to_string(), |f| format!("{:.1}", f * 100.0));
            let _ = writeln!(
                s,
                "{:<8} {:>12} {:>12} {:>9.1} {:>9.1} {:>10}",
                r.name,
                r.total_ns,
                r.monitor_ns,
                r.fraction * 100.0,
                r.mean_fraction * 100.0,
                reference
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12} {:>12} {:>12} {:>10}", "domain", "peak bytes", "high water", "ref bytes");
        for d in &self.memory.domains {
            let reference = d.reference_bytes.map_or("-".to_string(), |b| b.to_string());
            let _ = writeln!(
                s,
                "{:<12} {:>12} {:>12} {:>10}",
                d.label, d.bookkeeping_peak_bytes, d.pool_high_water_bytes, reference
            );
        }
        let _ = writeln!(s, "{:<12} {:>12} {:>12} {:>10}", "shared", self.memory.shared_bytes, "-", "-");
        let _ = writeln!(
            s,
            "{:<12} {:>12} {:>12} {:>10}",
            "total", self.memory.total_bytes, "-", self.memory.reference_total_bytes
        );
        s
    }
}

/// Peak monitor bookkeeping, split per domain.
pub fn measure_memory_overhead(monitor: &Monitor) -> MemoryReport {
    let b = monitor.bookkeeping();
    let domains: Vec<DomainRow> = b
        .domains
        .iter()
        .map(|d| DomainRow {
            label: d.label.clone(),
            bookkeeping_peak_bytes: d.peak_bytes as u64,
            allocator_peak_bytes: d.allocator_peak_bytes as u64,
            pool_high_water_bytes: d.high_water_bytes as u64,
            reference_bytes: REFERENCE_DOMAIN_BYTES
                .iter()
                .find(|(l, _)| *l == d.label)
                .map(|&(_, v)| v),
        })
        .collect();
    let per_domain: u64 = domains.iter().map(|d| d.bookkeeping_peak_bytes).sum();
    let total_bytes = b.total_bytes as u64;
    MemoryReport {
        shared_bytes: total_bytes - per_domain,
        domains,
        grant_table_bytes: b.grant_table_bytes as u64,
        frame_stack_peak_bytes: b.frame_stack_peak_bytes as u64,
        total_bytes,
        reference_total_bytes: REFERENCE_TOTAL_BYTES,
    }
}

fn prepare(os: &MiniOs) -> Result<(), OsError> {
    let mut path = String::new();
    for part in DIR.split('/').skip(1) {
        path.push('/');
        path.push_str(part);
        os.mkdir(&path)?;
    }
    let fd = os.open(FILE, flags::CREATE | flags::WRITE)?;
    os.write(fd, &[0x5a; 4096])?;
    os.close(fd)?;
    Ok(())
}

struct Meter<'a> {
    monitor: &'a Monitor,
    total_ns: u64,
}

impl Meter<'_> {
    fn time<T>(&mut self, f: impl FnOnce() -> T) -> T {
        self.monitor.set_profiling(true);
        let start = Instant::now();
        let out = f();
        self.total_ns += start.elapsed().as_nanos() as u64;
        self.monitor.set_profiling(false);
        out
    }
}

fn one_run(os: &MiniOs, name: &str, iterations: u64) -> Result<RunSample, BenchError> {
    let monitor = os.monitor();
    monitor.set_profiling(false);
    monitor.reset_monitor_ns();
    let mut m = Meter { monitor, total_ns: 0 };
    let fixed = os.open(FILE, flags::READ)?;
    let payload = [0xa5u8; IO_LEN];
    for _ in 0..iterations {
        match name {
            "open" => {
                let fd = m.time(|| os.open(FILE, flags::READ))?;
                os.close(fd)?;
            }
            "close" => {
                let fd = os.open(FILE, flags::READ)?;
                m.time(|| os.close(fd))?;
            }
            "stat" => {
                m.time(|| os.stat(FILE))?;
            }
            "fstat" => {
                m.time(|| os.fstat(fixed))?;
            }
            "mmap" => {
                let id = m.time(|| os.mmap_anon(MMAP_LEN))?;
                os.release_region(id);
            }
            "read" => {
                let fd = os.open(FILE, flags::READ)?;
                m.time(|| os.read(fd, IO_LEN))?;
                os.close(fd)?;
            }
            "write" => {
                let fd = os.open(SCRATCH, flags::CREATE | flags::WRITE | flags::TRUNC)?;
                m.time(|| os.write(fd, &payload))?;
                os.close(fd)?;
            }
            "mkdir" => {
                m.time(|| os.mkdir(NEWDIR))?;
                os.unlink(NEWDIR)?;
            }
            "unlink" => {
                let fd = os.open(SCRATCH, flags::CREATE)?;
                os.close(fd)?;
                m.time(|| os.unlink(SCRATCH))?;
            }
            other => return Err(BenchError::UnknownSyscall(other.to_string())),
        }
    }
    os.close(fixed)?;
    let total_ns = m.total_ns.max(1);
    let monitor_ns = monitor.monitor_ns();
    Ok(RunSample {
        total_ns,
        monitor_ns,
        fraction: monitor_ns as f64 / total_ns as f64,
    })
}

/// Runs each requested syscall `runs` times `iterations` times against a
/// freshly booted, protected [`MiniOs`].
pub fn run_syscall_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    if config.iterations == 0 || config.runs == 0 {
        return Err(BenchError::ZeroIterations);
    }
    for name in &config.syscalls {
        if !BENCHABLE.contains(&name.as_str()) {
            return Err(if crate::minios::SYSCALLS.contains(&name.as_str()) {
                BenchError::NotBenchmarkable(name.clone())
            } else {
                BenchError::UnknownSyscall(name.clone())
            });
        }
    }
    let os = MiniOs::boot(config.backend, Mode::Protected)?;
    prepare(&os)?;
    let mut rows = Vec::with_capacity(config.syscalls.len());
    for name in &config.syscalls {
        let mut runs = Vec::with_capacity(config.runs);
        for _ in 0..config.runs {
            runs.push(one_run(&os, name, config.iterations)?);
        }
        let mut order: Vec<usize> = (0..runs.len()).collect();
        order.sort_by(|&a, &b| runs[a].fraction.total_cmp(&runs[b].fraction));
        let median = &runs[order[runs.len() / 2]];
        let mean_fraction = runs.iter().map(|r| r.fraction).sum::<f64>() / runs.len() as f64;
        rows.push(SyscallRow {
            name: name.clone(),
            iterations: config.iterations,
            total_ns: median.total_ns,
            monitor_ns: median.monitor_ns,
            fraction: median.fraction,
            mean_fraction,
            reference_fraction: REFERENCE_FRACTIONS
                .iter()
                .find(|(n, _)| n == name)
                .map(|&(_, f)| f / 100.0),
            runs,
        });
    }
    os.monitor().set_profiling(false);
    let totals = Totals {
        total_ns: rows.iter().map(|r| r.total_ns).sum(),
        monitor_ns: rows.iter().map(|r| r.monitor_ns).sum(),
    };
    Ok(BenchReport {
        backend: os.monitor().backend_kind(),
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        iterations: config.iterations,
        runs: config.runs,
        syscalls: rows,
        totals,
        memory: measure_memory_overhead(os.monitor()),
    })
}
