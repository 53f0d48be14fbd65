//! A misbehaving library linked into the same address space as [`MiniOs`].
//!
//! It learns where the protected tables live without calling any syscall and
//! then stores to them directly. Under the checked backend those stores go
//! through [`DomainManager::store`]; under the page-level backends they are
//! real pointer writes, so a denied store kills the process with `SIGSEGV`.
//!
//! [`DomainManager::store`]: crate::domain::DomainManager::store

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use super::layout::{fd_slot_offset, mount_offset, MOUNT_PATH_MAX};
use super::{flags, MiniOs, OsError};
use crate::domain::DomainError;

pub const VICTIM_PATH: &str = "/etc/passwd";
pub const VICTIM_CONTENT: &[u8] = b"root:x:0:0:root:/root:/bin/sh\n";
pub const FORGED_PATH: &str = "/tmp/payload";
pub const FORGED_CONTENT: &[u8] = b"root::0:0:owned:/root:/bin/sh\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackOutcome {
    Succeeded,
    Denied,
}

impl fmt::Display for AttackOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackOutcome::Succeeded => "Succeeded",
            AttackOutcome::Denied => "Denied",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AttackVariant {
    /// Overwrite the vnode of an open descriptor from outside any sandbox.
    #[default]
    DirectWrite,
    /// Repoint the root mount from a close callback, i.e. while the `close`
    /// sandbox is open.
    HijackedClose,
}

impl FromStr for AttackVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(AttackVariant::DirectWrite),
            "hijacked-close" => Ok(AttackVariant::HijackedClose),
            other => Err(format!("unknown variant `{other}` (expected direct or hijacked-close)")),
        }
    }
}

impl fmt::Display for AttackVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackVariant::DirectWrite => "direct",
            AttackVariant::HijackedClose => "hijacked-close",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackReport {
    pub variant: AttackVariant,
    pub outcome: AttackOutcome,
    /// Whether the targeted table kept its contents across the forged store.
    pub table_unchanged: bool,
    pub detail: String,
}

impl MiniOs {
    /// Address of the descriptor table.
    pub fn fd_table_location(&self) -> usize {
        self.fd_table.addr()
    }

    /// Address of the filesystem metadata.
    pub fn fs_meta_location(&self) -> usize {
        self.fs_meta.addr()
    }
}

/// A plain store to `addr`, as injected code would issue it.
pub fn forge_store(os: &MiniOs, addr: usize, bytes: &[u8]) -> Result<(), DomainError> {
    let m = os.monitor().manager();
    if m.backend().enforces_raw_access() {
        for (i, &b) in bytes.iter().enumerate() {
            // SAFETY: `addr` points into a live pool. The store may fault,
            // which is the point.
            unsafe { std::ptr::write_volatile((addr + i) as *mut u8, b) };
        }
        Ok(())
    } else {
        m.store(addr, bytes)
    }
}

/// Legal setup shared by both variants: a victim descriptor and a file with
/// attacker-chosen content. Returns `(victim_fd, forged_vnode)`.
pub fn stage(os: &MiniOs) -> Result<(u32, u64), OsError> {
    for dir in ["/etc", "/tmp"] {
        match os.mkdir(dir) {
            Ok(()) | Err(OsError::Exists(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let w = os.open(VICTIM_PATH, flags::CREATE | flags::WRITE | flags::TRUNC)?;
    os.write(w, VICTIM_CONTENT)?;
    os.close(w)?;
    let p = os.open(FORGED_PATH, flags::CREATE | flags::WRITE | flags::TRUNC)?;
    os.write(p, FORGED_CONTENT)?;
    let forged = os.fstat(p)?.vnode;
    os.close(p)?;
    let victim = os.open(VICTIM_PATH, flags::READ)?;
    Ok((victim, forged))
}

fn denied(e: &DomainError) -> bool {
    e.is_isolation_fault()
}

/// Runs one attack against `os`. Page-level backends in protected mode do not
/// return from here: the forged store faults.
pub fn run_attack(os: &MiniOs, variant: AttackVariant) -> Result<AttackReport, OsError> {
    let (fd, forged) = stage(os)?;
    match variant {
        AttackVariant::DirectWrite => {
            let before = os.tables()?;
            let addr = os.fd_table_location() + fd_slot_offset(fd as usize) + 8;
            let res = forge_store(os, addr, &forged.to_le_bytes());
            let table_unchanged = os.tables()?.fd_table == before.fd_table;
            let content = os.read(fd, 4096)?;
            let outcome = match &res {
                Err(e) if denied(e) => AttackOutcome::Denied,
                Err(e) => return Err(e.clone().into()),
                Ok(()) if content == FORGED_CONTENT => AttackOutcome::Succeeded,
                Ok(()) => AttackOutcome::Denied,
            };
            let detail = match res {
                Err(e) => e.to_string(),
                Ok(()) => format!("read(fd {fd}) returned {:?}", String::from_utf8_lossy(&content)),
            };
            Ok(AttackReport { variant, outcome, table_unchanged, detail })
        }
        AttackVariant::HijackedClose => {
            let before = os.tables()?;
            let result: Rc<RefCell<Option<Result<(), DomainError>>>> = Rc::new(RefCell::new(None));
            let slot = Rc::clone(&result);
            os.set_close_hook(Some(Rc::new(move |os: &MiniOs, _fd| {
                let addr = os.fs_meta_location() + mount_offset(0) + MOUNT_PATH_MAX;
                *slot.borrow_mut() = Some(forge_store(os, addr, &forged.to_le_bytes()));
            })));
            let closed = os.close(fd);
            os.set_close_hook(None);
            closed?;
            let res = result.borrow_mut().take().expect("hook ran");
            let after = os.tables()?;
            let table_unchanged = after.fs_meta == before.fs_meta;
            let root = os.mount_table()?.first().map(|m| m.root);
            let outcome = match &res {
                Err(e) if denied(e) => AttackOutcome::Denied,
                Err(e) => return Err(e.clone().into()),
                Ok(()) if root == Some(forged) => AttackOutcome::Succeeded,
                Ok(()) => AttackOutcome::Denied,
            };
            let detail = match res {
                Err(e) => e.to_string(),
                Ok(()) => format!("root mount now points at vnode {forged}"),
            };
            Ok(AttackReport { variant, outcome, table_unchanged, detail })
        }
    }
}
