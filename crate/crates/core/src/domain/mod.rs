//! Memory domains: page pools tagged with protection keys, a per-thread key
//! access register, and interchangeable enforcement backends.

mod alloc;
pub mod backend;
mod manager;

use std::fmt;

use thiserror::Error;

pub use alloc::{AllocError, Extent, PoolAllocator, ALLOC_ALIGN};
pub use backend::{Backend, BackendChoice, BackendKind, PoolRegion};
pub use manager::{AccessEvent, AccessOp, DomainInfo, DomainManager, ObjectHandle};

pub const PAGE_SIZE: usize = 4096;

pub const NUM_KEYS: usize = 16;

/// Byte written over freed allocations.
pub const POISON_BYTE: u8 = 0xDD;

/// A protection key id, 0..=15. Key 0 tags ordinary untagged memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId(u8);

impl KeyId {
    pub const DEFAULT: KeyId = KeyId(0);

    pub fn new(id: u8) -> Option<KeyId> {
        (usize::from(id) < NUM_KEYS).then_some(KeyId(id))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pkey{}", self.0)
    }
}

/// Access granted to pages tagged with one key. Ordered by permissiveness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum AccessMode {
    #[default]
    None,
    ReadOnly,
    ReadWrite,
}

impl AccessMode {
    pub fn allows_read(self) -> bool {
        self >= AccessMode::ReadOnly
    }

    pub fn allows_write(self) -> bool {
        self == AccessMode::ReadWrite
    }

    /// The two access bits for this mode in an x86 PKRU-style register:
    /// bit 0 disables all access, bit 1 disables writes.
    pub fn pkru_bits(self) -> u32 {
        match self {
            AccessMode::None => 0b01,
            AccessMode::ReadOnly => 0b10,
            AccessMode::ReadWrite => 0b00,
        }
    }

    pub fn from_pkru_bits(bits: u32) -> AccessMode {
        if bits & 0b01 != 0 {
            AccessMode::None
        } else if bits & 0b10 != 0 {
            AccessMode::ReadOnly
        } else {
            AccessMode::ReadWrite
        }
    }
}

/// Per-thread access bitmap for the 16 protection keys.
///
/// Key 0 is permanently read-write; a fresh register denies everything else.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyRegister {
    modes: [AccessMode; NUM_KEYS],
}

impl Default for KeyRegister {
    fn default() -> Self {
        let mut modes = [AccessMode::None; NUM_KEYS];
        modes[0] = AccessMode::ReadWrite;
        KeyRegister { modes }
    }
}

impl KeyRegister {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: KeyId) -> AccessMode {
        self.modes[key.index()]
    }

    pub fn set(&mut self, key: KeyId, mode: AccessMode) -> Result<(), DomainError> {
        if key == KeyId::DEFAULT {
            return Err(DomainError::BadKey(key.get()));
        }
        self.modes[key.index()] = mode;
        Ok(())
    }

    pub fn modes(&self) -> &[AccessMode; NUM_KEYS] {
        &self.modes
    }

    /// Packs the register into the 32-bit PKRU layout.
    pub fn to_pkru(&self) -> u32 {
        self.modes
            .iter()
            .enumerate()
            .fold(0, |acc, (i, m)| acc | (m.pkru_bits() << (2 * i)))
    }

    pub fn from_pkru(pkru: u32) -> Self {
        let mut reg = KeyRegister::default();
        for i in 1..NUM_KEYS {
            reg.modes[i] = AccessMode::from_pkru_bits((pkru >> (2 * i)) & 0b11);
        }
        reg
    }
}

impl fmt::Debug for KeyRegister {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self
            .modes
            .iter()
            .map(|m| match m {
                AccessMode::None => '-',
                AccessMode::ReadOnly => 'r',
                AccessMode::ReadWrite => 'w',
            })
            .collect();
        write!(f, "KeyRegister[{s}]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("memory domains are already initialized")]
    AlreadyInitialized,
    #[error("memory domains are not initialized")]
    NotInitialized,
    #[error("backend cannot provision another protection key ({provisioned} in use)")]
    KeyExhaustion { provisioned: usize },
    #[error("cannot map {pages} pool pages: {reason}")]
    OutOfMemory { pages: usize, reason: String },
    #[error("{count} sandbox frame(s) still active")]
    ActiveSandbox { count: usize },
    #[error("no domain labelled `{0}`")]
    NoSuchDomain(String),
    #[error("domain `{domain}` cannot fit {requested} more bytes")]
    PoolExhausted { domain: String, requested: usize },
    #[error("allocation size must be greater than zero")]
    BadSize,
    #[error("handle does not belong to this domain")]
    UnknownHandle,
    #[error("handle was already freed")]
    DoubleFree,
    #[error("protection key {0} cannot be changed")]
    BadKey(u8),
    #[error("access [{offset}, {offset}+{len}) is outside the {size}-byte object")]
    OutOfBounds { offset: usize, len: usize, size: usize },
    #[error("address {0:#x} is not inside any domain pool")]
    NotInPool(usize),
    #[error("isolation fault: {op} on {key} denied (thread holds {mode:?})")]
    IsolationFault {
        key: KeyId,
        op: AccessOp,
        mode: AccessMode,
    },
    #[error("backend `{backend}` is not available on this host: {reason}")]
    BackendUnavailable { backend: BackendKind, reason: String },
    #[error("backend operation failed: {0}")]
    Backend(String),
}

impl DomainError {
    pub fn is_isolation_fault(&self) -> bool {
        matches!(self, DomainError::IsolationFault { .. })
    }
}
