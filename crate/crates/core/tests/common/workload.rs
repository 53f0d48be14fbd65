//! Random minios workloads with injected hostile stores, and a replay on an
//! unprotected shadow instance.

use std::cell::Cell;
use std::rc::Rc;

use memdom::domain::BackendChoice;
use memdom::minios::adversary::forge_store;
use memdom::minios::layout::{FD_TABLE_BYTES, FS_META_BYTES, VMA_TABLE_BYTES};
use memdom::minios::{flags, MiniOs, Mode, FD_TABLE, FS_META, VMA_TABLE};
use rand::seq::SliceRandom;
use rand::Rng;

const DIRS: [&str; 5] = ["/a", "/a/b", "/m", "/m/n", "/tmp"];
const FILES: [&str; 8] = [
    "/f0", "/a/f1", "/a/b/f2", "/m/f3", "/m/n/f4", "/tmp/f5", "/tmp/f6", "/nodir/f7",
];

#[derive(Debug, Clone)]
pub enum Op {
    Open(String, u32),
    Close(u32),
    Stat(String),
    Fstat(u32),
    Mmap(usize),
    Read(u32, usize),
    Write(u32, Vec<u8>),
    Mkdir(String),
    Unlink(String),
    Mount(String),
    /// Store from outside any sandbox into one of the protected tables.
    Forge { table: &'static str, offset: usize, bytes: Vec<u8> },
    /// A close whose callback stores into fs metadata.
    HijackedClose(u32),
}

impl Op {
    pub fn is_hostile(&self) -> bool {
        matches!(self, Op::Forge { .. } | Op::HijackedClose(_))
    }
}

fn any_path(rng: &mut impl Rng) -> String {
    if rng.gen_bool(0.5) {
        FILES.choose(rng).unwrap().to_string()
    } else {
        DIRS.choose(rng).unwrap().to_string()
    }
}

fn fd(rng: &mut impl Rng) -> u32 {
    rng.gen_range(0..10)
}

pub fn generate(len: usize, hostile_every: usize, rng: &mut impl Rng) -> Vec<Op> {
    let mut ops = Vec::with_capacity(len);
    for i in 0..len {
        if hostile_every > 0 && i % hostile_every == hostile_every - 1 {
            if rng.gen_bool(0.25) {
                ops.push(Op::HijackedClose(fd(rng)));
            } else {
                let (table, size) = *[
                    (FD_TABLE, FD_TABLE_BYTES),
                    (VMA_TABLE, VMA_TABLE_BYTES),
                    (FS_META, FS_META_BYTES),
                ]
                .choose(rng)
                .unwrap();
                let n = rng.gen_range(1..=8.min(size));
                let offset = rng.gen_range(0..=size - n);
                let bytes = (0..n).map(|_| rng.gen()).collect();
                ops.push(Op::Forge { table, offset, bytes });
            }
            continue;
        }
        let op = match rng.gen_range(0..20) {
            0..=4 => {
                let mut f = flags::READ;
                if rng.gen_bool(0.6) {
                    f |= flags::WRITE;
                }
                if rng.gen_bool(0.6) {
                    f |= flags::CREATE;
                }
                if rng.gen_bool(0.15) {
                    f |= flags::TRUNC;
                }
                if rng.gen_bool(0.1) {
                    f |= flags::EXCL;
                }
                Op::Open(any_path(rng), f)
            }
            5..=7 => Op::Close(fd(rng)),
            8 => Op::Stat(any_path(rng)),
            9 => Op::Fstat(fd(rng)),
            10 => Op::Mmap(rng.gen_range(0..3 * 4096)),
            11 | 12 => Op::Read(fd(rng), rng.gen_range(0..64)),
            13 | 14 => {
                let n = rng.gen_range(0..48);
                Op::Write(fd(rng), (0..n).map(|_| rng.gen()).collect())
            }
            15 | 16 => Op::Mkdir(DIRS.choose(rng).unwrap().to_string()),
            17 | 18 => Op::Unlink(any_path(rng)),
            _ => Op::Mount(["/m", "/a/b", "/tmp", "/f0"].choose(rng).unwrap().to_string()),
        };
        ops.push(op);
    }
    ops
}

/// Runs one legal op and renders its result for comparison.
pub fn apply(os: &MiniOs, op: &Op) -> String {
    match op {
        Op::Open(p, f) => format!("{:?}", os.open(p, *f)),
        Op::Close(fd) | Op::HijackedClose(fd) => format!("{:?}", os.close(*fd)),
        Op::Stat(p) => format!("{:?}", os.stat(p)),
        Op::Fstat(fd) => format!("{:?}", os.fstat(*fd)),
        Op::Mmap(n) => format!("{:?}", os.mmap_anon(*n)),
        Op::Read(fd, n) => format!("{:?}", os.read(*fd, *n)),
        Op::Write(fd, d) => format!("{:?}", os.write(*fd, d)),
        Op::Mkdir(p) => format!("{:?}", os.mkdir(p)),
        Op::Unlink(p) => format!("{:?}", os.unlink(p)),
        Op::Mount(p) => format!("{:?}", os.mount(p)),
        Op::Forge { .. } => unreachable!("hostile op"),
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DiffStats {
    pub legal: usize,
    pub forged_denied: usize,
    pub hijacks_denied: usize,
}

/// Runs `ops` on a protected instance and the legal subset on a vanilla
/// shadow, comparing results and table bytes after every step.
pub fn differential(ops: &[Op], backend: BackendChoice) -> Result<DiffStats, String> {
    let os = MiniOs::boot(backend, Mode::Protected).map_err(|e| e.to_string())?;
    let shadow = MiniOs::boot(BackendChoice::Checked, Mode::Vanilla).map_err(|e| e.to_string())?;
    let mut stats = DiffStats::default();
    for (i, op) in ops.iter().enumerate() {
        match op {
            Op::Forge { table, offset, bytes } => {
                let base = os.monitor().object(table).map_err(|e| e.to_string())?.addr();
                match forge_store(&os, base + offset, bytes) {
                    Err(e) if e.is_isolation_fault() => stats.forged_denied += 1,
                    other => return Err(format!("op {i}: forged store into {table}: {other:?}")),
                }
            }
            Op::HijackedClose(_) => {
                let denied = Rc::new(Cell::new(None));
                let seen = denied.clone();
                os.set_close_hook(Some(Rc::new(move |os: &MiniOs, _fd: u32| {
                    let addr = os.monitor().object(FS_META).unwrap().addr() + 16;
                    seen.set(Some(forge_store(os, addr, &[0xff; 8])));
                })));
                let got = apply(&os, op);
                os.set_close_hook(None);
                let want = apply(&shadow, op);
                if got != want {
                    return Err(format!("op {i} {op:?}: protected {got}, shadow {want}"));
                }
                match denied.take() {
                    Some(Err(e)) if e.is_isolation_fault() => stats.hijacks_denied += 1,
                    None => {}
                    Some(other) => return Err(format!("op {i}: hijacked store: {other:?}")),
                }
            }
            legal => {
                let got = apply(&os, legal);
                let want = apply(&shadow, legal);
                if got != want {
                    return Err(format!("op {i} {legal:?}: protected {got}, shadow {want}"));
                }
                stats.legal += 1;
            }
        }
        let a = os.tables().map_err(|e| e.to_string())?;
        let b = shadow.tables().map_err(|e| e.to_string())?;
        if a != b {
            let which = if a.fd_table != b.fd_table {
                "fd_table"
            } else if a.vma_table != b.vma_table {
                "vma_table"
            } else {
                "fs_meta"
            };
            return Err(format!("op {i} {op:?}: {which} differs from the shadow"));
        }
    }
    Ok(stats)
}
