//! Enforcement backends.
//!
//! * [`CheckedBackend`] models protection keys in software. Every access goes
//!   through [`Backend::load`] / [`Backend::store`], which consult the
//!   caller's key register. Raw pointer access is not intercepted.
//! * [`PageProtBackend`] maps access modes onto page permissions when they
//!   change. Enforcement covers raw access but is process-wide, not
//!   per-thread.
//! * [`PkeyBackend`] uses the host's memory protection keys and the per-thread
//!   PKRU register. Linux on x86-64 with PKU only.

mod checked;
mod pageprot;
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod pkey;
pub(crate) mod sys;

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AccessMode, DomainError, KeyId, NUM_KEYS, PAGE_SIZE};

pub use checked::CheckedBackend;
pub use pageprot::PageProtBackend;
#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub use pkey::PkeyBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Checked,
    PageProt,
    Pkey,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Checked => "checked",
            BackendKind::PageProt => "pageprot",
            BackendKind::Pkey => "pkey",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Backend selection, as written in configuration: `checked | pageprot | pkey | auto`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BackendChoice {
    #[default]
    Checked,
    PageProt,
    Pkey,
    /// Protection keys when the host has them, otherwise the checked model.
    Auto,
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "checked" => Ok(BackendChoice::Checked),
            "pageprot" => Ok(BackendChoice::PageProt),
            "pkey" => Ok(BackendChoice::Pkey),
            "auto" => Ok(BackendChoice::Auto),
            other => Err(format!(
                "unknown backend `{other}` (expected checked, pageprot, pkey or auto)"
            )),
        }
    }
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendChoice::Checked => "checked",
            BackendChoice::PageProt => "pageprot",
            BackendChoice::Pkey => "pkey",
            BackendChoice::Auto => "auto",
        })
    }
}

impl BackendChoice {
    pub fn resolve(self) -> BackendKind {
        match self {
            BackendChoice::Checked => BackendKind::Checked,
            BackendChoice::PageProt => BackendKind::PageProt,
            BackendChoice::Pkey => BackendKind::Pkey,
            BackendChoice::Auto if pkey_available() => BackendKind::Pkey,
            BackendChoice::Auto => BackendKind::Checked,
        }
    }

    pub fn instantiate(self) -> Result<Box<dyn Backend>, DomainError> {
        Ok(match self.resolve() {
            BackendKind::Checked => Box::new(CheckedBackend::new()),
            BackendKind::PageProt => Box::new(PageProtBackend::new()?),
            BackendKind::Pkey => new_pkey_backend()?,
        })
    }
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
fn new_pkey_backend() -> Result<Box<dyn Backend>, DomainError> {
    Ok(Box::new(PkeyBackend::new()?))
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
fn new_pkey_backend() -> Result<Box<dyn Backend>, DomainError> {
    Err(DomainError::BackendUnavailable {
        backend: BackendKind::Pkey,
        reason: "protection keys need Linux on x86-64".into(),
    })
}

/// Whether the host supports the [`PkeyBackend`].
pub fn pkey_available() -> bool {
    #[cfg(all(target_os = "linux", target_arch = "x86_64"))]
    {
        sys::pkey::available()
    }
    #[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
    {
        false
    }
}

/// A contiguous run of pool pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolRegion {
    base: usize,
    pages: usize,
}

impl PoolRegion {
    pub fn base(&self) -> usize {
        self.base
    }

    pub fn pages(&self) -> usize {
        self.pages
    }

    pub fn len(&self) -> usize {
        self.pages * PAGE_SIZE
    }

    pub fn is_empty(&self) -> bool {
        self.pages == 0
    }

    pub fn contains(&self, addr: usize, len: usize) -> bool {
        addr >= self.base && addr.saturating_add(len) <= self.base + self.len()
    }
}

/// The enforcement interface the domain manager drives.
///
/// After `set_thread_access(k, m)`, a load from a `k`-tagged page succeeds iff
/// `m` allows reads and a store succeeds iff `m` allows writes.
pub trait Backend: Send + Sync + fmt::Debug {
    fn kind(&self) -> BackendKind;

    fn provision_key(&self) -> Result<KeyId, DomainError>;

    fn release_key(&self, key: KeyId) -> Result<(), DomainError>;

    fn map_pool(&self, pages: usize) -> Result<PoolRegion, DomainError>;

    fn tag_region(&self, region: &PoolRegion, key: KeyId) -> Result<(), DomainError>;

    fn unmap_pool(&self, region: PoolRegion) -> Result<(), DomainError>;

    fn set_thread_access(&self, key: KeyId, mode: AccessMode) -> Result<(), DomainError>;

    /// Applies several changes together. Backends with a single access
    /// register write it once.
    fn set_thread_modes(&self, changes: &[(KeyId, AccessMode)]) -> Result<(), DomainError> {
        for &(key, mode) in changes {
            self.set_thread_access(key, mode)?;
        }
        Ok(())
    }

    /// Brings a thread seen for the first time to the default-deny state for
    /// `keys`. Needed where threads inherit access state from their creator.
    fn init_thread(&self, _keys: &[KeyId]) -> Result<(), DomainError> {
        Ok(())
    }

    /// Copies out of `src`. `mode` is the caller's register entry for `key`;
    /// hardware backends let the host decide instead.
    fn load(&self, key: KeyId, mode: AccessMode, src: usize, dst: &mut [u8])
        -> Result<(), DomainError>;

    fn store(&self, key: KeyId, mode: AccessMode, dst: usize, src: &[u8])
        -> Result<(), DomainError>;

    /// Whether a raw pointer access to a denied page faults.
    fn enforces_raw_access(&self) -> bool;

    /// Pool pages currently mapped through this backend.
    fn mapped_pages(&self) -> usize;

    /// Keys currently provisioned.
    fn provisioned_keys(&self) -> usize;
}

/// Keys 1..=15 handed out lowest-first.
#[derive(Debug, Default)]
pub(crate) struct KeyPool {
    used: Mutex<u16>,
}

impl KeyPool {
    pub fn take(&self) -> Result<KeyId, DomainError> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        for k in 1..NUM_KEYS as u8 {
            if *used & (1 << k) == 0 {
                *used |= 1 << k;
                return Ok(KeyId(k));
            }
        }
        Err(DomainError::KeyExhaustion {
            provisioned: used.count_ones() as usize,
        })
    }

    pub fn give_back(&self, key: KeyId) -> Result<(), DomainError> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        let bit = 1u16 << key.get();
        if key == KeyId::DEFAULT || *used & bit == 0 {
            return Err(DomainError::BadKey(key.get()));
        }
        *used &= !bit;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.used.lock().unwrap_or_else(|e| e.into_inner()).count_ones() as usize
    }
}

pub(crate) fn map_pages(pages: usize) -> Result<PoolRegion, DomainError> {
    if pages == 0 {
        return Ok(PoolRegion { base: 0, pages: 0 });
    }
    let base = sys::mmap_anon(pages * PAGE_SIZE).map_err(|e| DomainError::OutOfMemory {
        pages,
        reason: e.to_string(),
    })?;
    Ok(PoolRegion { base, pages })
}

pub(crate) fn unmap_pages(region: PoolRegion) -> Result<(), DomainError> {
    if region.pages == 0 {
        return Ok(());
    }
    // SAFETY: regions are only created by `map_pages` and unmapped once.
    unsafe { sys::munmap(region.base, region.len()) }
        .map_err(|e| DomainError::Backend(format!("munmap: {e}")))
}

fn fault(key: KeyId, op: super::AccessOp, mode: AccessMode) -> DomainError {
    DomainError::IsolationFault { key, op, mode }
}
