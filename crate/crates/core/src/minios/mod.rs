//! A small library OS whose descriptor table and filesystem metadata live in
//! memory domains, with every syscall running in its own sandbox.
//!
//! `handle_dom` holds the descriptor table (`fd_table`) and the mapping
//! counter (`vma_table`). `fs_dom` holds the mount table and the name index
//! (`fs_meta`). File contents and mapped regions are ordinary memory.

pub mod layout;
#[cfg(feature = "adversary")]
pub mod adversary;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::domain::{BackendChoice, DomainError, ObjectHandle};
use crate::monitor::{Monitor, MonitorError};
use crate::policy::{parse_policy, Acl};
use layout::*;

pub use layout::NodeKind;

/// Source of the bundled access policy.
pub const POLICY_SOURCE: &str = include_str!("../../fixtures/minios.policy");

/// Every syscall, named as in the policy.
pub const SYSCALLS: [&str; 10] = [
    "open", "close", "stat", "fstat", "mmap", "read", "write", "mkdir", "unlink", "mount",
];

pub const HANDLE_DOM: &str = "handle_dom";
pub const FS_DOM: &str = "fs_dom";
pub const FD_TABLE: &str = "fd_table";
pub const VMA_TABLE: &str = "vma_table";
pub const FS_META: &str = "fs_meta";

/// The bundled policy, parsed.
pub fn demo_acl() -> Acl {
    parse_policy(POLICY_SOURCE).expect("bundled policy parses")
}

pub mod flags {
    pub const READ: u32 = 1;
    pub const WRITE: u32 = 2;
    pub const CREATE: u32 = 4;
    pub const TRUNC: u32 = 8;
    pub const EXCL: u32 = 16;
}

#[derive(Debug, Error)]
pub enum OsError {
    #[error("no such file or directory: {0}")]
    NoEnt(String),
    #[error("bad file descriptor {0}")]
    BadFd(u32),
    #[error("already exists: {0}")]
    Exists(String),
    #[error("not a directory: {0}")]
    NotDir(String),
    #[error("is a directory: {0}")]
    IsDir(String),
    #[error("descriptor table full")]
    TooManyFds,
    #[error("no space left in {0}")]
    NoSpace(&'static str),
    #[error("path too long: {0}")]
    NameTooLong(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("isolation fault: {0}")]
    IsolationFault(#[source] DomainError),
    #[error(transparent)]
    Monitor(MonitorError),
}

impl From<MonitorError> for OsError {
    fn from(e: MonitorError) -> Self {
        match e {
            MonitorError::Domain(d) => d.into(),
            other => OsError::Monitor(other),
        }
    }
}

impl From<DomainError> for OsError {
    fn from(e: DomainError) -> Self {
        if e.is_isolation_fault() {
            OsError::IsolationFault(e)
        } else {
            OsError::Monitor(MonitorError::Domain(e))
        }
    }
}

impl OsError {
    pub fn is_isolation_fault(&self) -> bool {
        matches!(self, OsError::IsolationFault(_))
    }
}

/// `Protected` enforces the policy; `Vanilla` runs with every domain open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Protected,
    Vanilla,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "protected" => Ok(Mode::Protected),
            "vanilla" => Ok(Mode::Vanilla),
            other => Err(format!("unknown mode `{other}` (expected vanilla or protected)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatBuf {
    pub vnode: u64,
    pub kind: NodeKind,
    pub size: u64,
    /// Index of the mount the node lives under.
    pub dev: u32,
}

/// Raw bytes of the domain-resident tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableImage {
    pub fd_table: Vec<u8>,
    pub vma_table: Vec<u8>,
    pub fs_meta: Vec<u8>,
}

#[derive(Debug)]
struct Vnode {
    kind: NodeKind,
    content: Vec<u8>,
    /// Name index slot, valid while `linked`.
    meta_slot: usize,
    /// Mount index, kept for nodes that lost their name.
    dev: u32,
    linked: bool,
}

/// Anonymous host memory backing one mapping, populated on creation.
#[derive(Debug)]
struct Region {
    base: *mut libc::c_void,
    len: usize,
}

impl Region {
    fn map(len: usize) -> std::io::Result<Self> {
        // SAFETY: fresh private anonymous mapping, no existing memory involved.
        let base = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if base == libc::MAP_FAILED {
            return Err(std::io::Error::last_os_error());
        }
        let page = crate::domain::PAGE_SIZE;
        for off in (0..len).step_by(page) {
            // SAFETY: `off < len`, inside the mapping just created.
            unsafe { std::ptr::write_volatile((base as *mut u8).add(off), 0) };
        }
        Ok(Region { base, len })
    }
}

impl Drop for Region {
    fn drop(&mut self) {
        // SAFETY: `base`/`len` describe a mapping owned by this value.
        unsafe { libc::munmap(self.base, self.len) };
    }
}

fn io_reason(e: &std::io::Error) -> &'static str {
    if e.kind() == std::io::ErrorKind::OutOfMemory {
        "host memory"
    } else {
        "address space"
    }
}

/// Called inside the `close` sandbox after a descriptor is released.
pub type CloseHook = Rc<dyn Fn(&MiniOs, u32)>;

pub struct MiniOs {
    monitor: Monitor,
    mode: Mode,
    fd_table: ObjectHandle,
    vma_table: ObjectHandle,
    fs_meta: ObjectHandle,
    size_checks: HashMap<&'static str, Vec<(String, u64)>>,
    vnodes: RefCell<HashMap<u64, Vnode>>,
    regions: RefCell<HashMap<u64, Region>>,
    close_hook: RefCell<Option<CloseHook>>,
}

impl std::fmt::Debug for MiniOs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MiniOs")
            .field("mode", &self.mode)
            .field("backend", &self.monitor.backend_kind())
            .field("vnodes", &self.vnodes.borrow().len())
            .finish()
    }
}

const ROOT_VNODE: u64 = 1;

impl MiniOs {
    /// Boots with the bundled policy.
    pub fn boot(backend: BackendChoice, mode: Mode) -> Result<Self, OsError> {
        Self::boot_with(&demo_acl(), backend, mode)
    }

    pub fn boot_with(acl: &Acl, backend: BackendChoice, mode: Mode) -> Result<Self, OsError> {
        let monitor = Monitor::new(acl, backend)?;
        let fd_table = monitor.alloc_object(FD_TABLE, Some(FD_TABLE_BYTES))?;
        let vma_table = monitor.alloc_object(VMA_TABLE, Some(VMA_TABLE_BYTES))?;
        let fs_meta = monitor.alloc_object(FS_META, Some(FS_META_BYTES))?;
        let sizes = [
            (FD_TABLE, FD_TABLE_BYTES),
            (VMA_TABLE, VMA_TABLE_BYTES),
            (FS_META, FS_META_BYTES),
        ];
        let mut size_checks = HashMap::new();
        for name in SYSCALLS {
            let grant = monitor
                .grants()
                .get(name)
                .ok_or_else(|| MonitorError::UnknownFunction(name.to_string()))?;
            let checks = grant
                .sized_objects
                .iter()
                .filter_map(|(o, _)| {
                    sizes
                        .iter()
                        .find(|(l, _)| l == o)
                        .map(|&(l, s)| (l.to_string(), s as u64))
                })
                .collect();
            size_checks.insert(name, checks);
        }
        if mode == Mode::Vanilla {
            monitor.disable_enforcement()?;
        }
        let os = MiniOs {
            monitor,
            mode,
            fd_table,
            vma_table,
            fs_meta,
            size_checks,
            vnodes: RefCell::new(HashMap::new()),
            regions: RefCell::new(HashMap::new()),
            close_hook: RefCell::new(None),
        };
        os.syscall("mount", || {
            let root = IndexEntry {
                state: SlotState::Used,
                kind: NodeKind::Dir,
                dev: 0,
                vnode: ROOT_VNODE,
                path: b"/".to_vec(),
            };
            let slot = os.insert(&root)?;
            let header = FsHeader { next_vnode: ROOT_VNODE + 1, mounts: 1, entries: 1 };
            os.wr(&os.fs_meta, 0, &header.encode())?;
            let m = MountEntry { path: "/".into(), root: ROOT_VNODE };
            os.wr(&os.fs_meta, mount_offset(0), &m.encode())?;
            os.vnodes.borrow_mut().insert(
                ROOT_VNODE,
                Vnode { kind: NodeKind::Dir, content: Vec::new(), meta_slot: slot, dev: 0, linked: true },
            );
            Ok(())
        })?;
        Ok(os)
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_close_hook(&self, hook: Option<CloseHook>) {
        *self.close_hook.borrow_mut() = hook;
    }

    fn syscall<T>(&self, name: &'static str, body: impl FnOnce() -> Result<T, OsError>) -> Result<T, OsError> {
        self.monitor.sandboxed_call(name, || {
            for (obj, size) in &self.size_checks[name] {
                self.monitor.check_input_size(obj, *size)?;
            }
            body()
        })?
    }

    fn rd(&self, h: &ObjectHandle, offset: usize, len: usize) -> Result<Vec<u8>, OsError> {
        let mut buf = vec![0; len];
        self.monitor.manager().read(h, offset, &mut buf)?;
        Ok(buf)
    }

    fn wr(&self, h: &ObjectHandle, offset: usize, data: &[u8]) -> Result<(), OsError> {
        Ok(self.monitor.manager().write(h, offset, data)?)
    }

    fn header(&self) -> Result<FsHeader, OsError> {
        Ok(FsHeader::decode(&self.rd(&self.fs_meta, 0, FS_HEADER_BYTES)?))
    }

    fn entry(&self, slot: usize) -> Result<IndexEntry, OsError> {
        Ok(IndexEntry::decode(&self.rd(&self.fs_meta, index_offset(slot), INDEX_ENTRY_BYTES)?))
    }

    fn lookup(&self, path: &str) -> Result<Option<(usize, IndexEntry)>, OsError> {
        for slot in probe(path.as_bytes()) {
            let e = self.entry(slot)?;
            match e.state {
                SlotState::Empty => return Ok(None),
                SlotState::Used if e.path == path.as_bytes() => return Ok(Some((slot, e))),
                _ => {}
            }
        }
        Ok(None)
    }

    fn insert(&self, entry: &IndexEntry) -> Result<usize, OsError> {
        for slot in probe(&entry.path) {
            let e = self.entry(slot)?;
            if e.state != SlotState::Used {
                self.wr(&self.fs_meta, index_offset(slot), &entry.encode())?;
                return Ok(slot);
            }
        }
        Err(OsError::NoSpace("name index"))
    }

    /// Looks `path` up, walking its ancestors only on a miss. Names are
    /// indexed by full path and a directory cannot lose its name while it
    /// has children, so a hit implies every ancestor is a directory.
    fn resolve(&self, path: &str) -> Result<Option<(usize, IndexEntry)>, OsError> {
        match self.lookup(path)? {
            Some(hit) => Ok(Some(hit)),
            None => {
                self.check_ancestors(path)?;
                Ok(None)
            }
        }
    }

    /// Every proper ancestor of `path` must be an existing directory.
    fn check_ancestors(&self, path: &str) -> Result<(), OsError> {
        let mut end = 0;
        while let Some(i) = path[end + 1..].find('/') {
            end += 1 + i;
            let prefix = &path[..end];
            match self.lookup(prefix)? {
                None => return Err(OsError::NoEnt(prefix.to_string())),
                Some((_, e)) if e.kind != NodeKind::Dir => {
                    return Err(OsError::NotDir(prefix.to_string()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn mounts(&self) -> Result<Vec<Option<MountEntry>>, OsError> {
        let raw = self.rd(&self.fs_meta, MOUNTS_OFFSET, MOUNT_SLOTS * MOUNT_ENTRY_BYTES)?;
        Ok(raw.chunks(MOUNT_ENTRY_BYTES).map(MountEntry::decode).collect())
    }

    fn mount_dev(&self, path: &str) -> Result<u32, OsError> {
        let mut best = (0usize, 0u32);
        for (i, m) in self.mounts()?.into_iter().enumerate() {
            let Some(m) = m else { continue };
            let covers = m.path == "/"
                || path == m.path
                || path.strip_prefix(m.path.as_str()).is_some_and(|r| r.starts_with('/'));
            if covers && m.path.len() >= best.0 {
                best = (m.path.len(), i as u32);
            }
        }
        Ok(best.1)
    }

    fn slot(&self, fd: u32) -> Result<FdSlot, OsError> {
        if fd as usize >= FD_SLOTS {
            return Err(OsError::BadFd(fd));
        }
        let s = FdSlot::decode(&self.rd(&self.fd_table, fd_slot_offset(fd as usize), FD_SLOT_BYTES)?);
        if s.in_use {
            Ok(s)
        } else {
            Err(OsError::BadFd(fd))
        }
    }

    fn set_slot(&self, fd: u32, s: &FdSlot) -> Result<(), OsError> {
        self.wr(&self.fd_table, fd_slot_offset(fd as usize), &s.encode())
    }

    fn referenced(&self, vnode: u64) -> Result<bool, OsError> {
        let table = self.rd(&self.fd_table, 0, FD_TABLE_BYTES)?;
        Ok(table.chunks(FD_SLOT_BYTES).map(FdSlot::decode).any(|s| s.in_use && s.vnode == vnode))
    }

    fn create(&self, path: &str, kind: NodeKind) -> Result<u64, OsError> {
        let mut header = self.header()?;
        let vnode = header.next_vnode;
        let dev = self.mount_dev(path)?;
        let slot = self.insert(&IndexEntry {
            state: SlotState::Used,
            kind,
            dev,
            vnode,
            path: path.as_bytes().to_vec(),
        })?;
        header.next_vnode += 1;
        header.entries += 1;
        self.wr(&self.fs_meta, 0, &header.encode())?;
        self.vnodes
            .borrow_mut()
            .insert(vnode, Vnode { kind, content: Vec::new(), meta_slot: slot, dev, linked: true });
        Ok(vnode)
    }

    /// Kind of an open node, confirmed against the name index when linked.
    fn node_kind(&self, vnode: u64, fd: u32) -> Result<NodeKind, OsError> {
        let (linked, slot, kind) = {
            let v = self.vnodes.borrow();
            let v = v.get(&vnode).ok_or(OsError::BadFd(fd))?;
            (v.linked, v.meta_slot, v.kind)
        };
        if linked {
            let e = self.entry(slot)?;
            if e.state == SlotState::Used && e.vnode == vnode {
                return Ok(e.kind);
            }
        }
        Ok(kind)
    }

    pub fn open(&self, path: &str, oflags: u32) -> Result<u32, OsError> {
        let path = normalize(path)?;
        let mut oflags = oflags;
        if oflags & (flags::READ | flags::WRITE) == 0 {
            oflags |= flags::READ;
        }
        self.syscall("open", || {
            let table = self.rd(&self.fd_table, 0, FD_TABLE_BYTES)?;
            let fd = (0..FD_SLOTS)
                .find(|&i| table[fd_slot_offset(i)] == 0)
                .ok_or(OsError::TooManyFds)? as u32;
            let vnode = match self.resolve(&path)? {
                Some((_, e)) => {
                    if oflags & flags::CREATE != 0 && oflags & flags::EXCL != 0 {
                        return Err(OsError::Exists(path.clone()));
                    }
                    if e.kind == NodeKind::Dir && oflags & flags::WRITE != 0 {
                        return Err(OsError::IsDir(path.clone()));
                    }
                    if e.kind == NodeKind::File && oflags & flags::TRUNC != 0 {
                        if let Some(v) = self.vnodes.borrow_mut().get_mut(&e.vnode) {
                            v.content.clear();
                        }
                    }
                    e.vnode
                }
                None if oflags & flags::CREATE != 0 => self.create(&path, NodeKind::File)?,
                None => return Err(OsError::NoEnt(path.clone())),
            };
            self.set_slot(fd, &FdSlot { in_use: true, flags: oflags, vnode, offset: 0 })?;
            Ok(fd)
        })
    }

    pub fn close(&self, fd: u32) -> Result<(), OsError> {
        self.syscall("close", || {
            let s = self.slot(fd)?;
            self.set_slot(fd, &FdSlot::default())?;
            let hook = self.close_hook.borrow().clone();
            if let Some(hook) = hook {
                hook(self, fd);
            }
            let orphan = self.vnodes.borrow().get(&s.vnode).is_some_and(|v| !v.linked);
            if orphan && !self.referenced(s.vnode)? {
                self.vnodes.borrow_mut().remove(&s.vnode);
            }
            Ok(())
        })
    }

    fn size_of(&self, vnode: u64) -> u64 {
        self.vnodes.borrow().get(&vnode).map_or(0, |v| v.content.len() as u64)
    }

    pub fn stat(&self, path: &str) -> Result<StatBuf, OsError> {
        let path = normalize(path)?;
        self.syscall("stat", || {
            let (_, e) = self.resolve(&path)?.ok_or_else(|| OsError::NoEnt(path.clone()))?;
            Ok(StatBuf {
                vnode: e.vnode,
                kind: e.kind,
                size: self.size_of(e.vnode),
                dev: e.dev,
            })
        })
    }

    pub fn fstat(&self, fd: u32) -> Result<StatBuf, OsError> {
        self.syscall("fstat", || {
            let s = self.slot(fd)?;
            let (linked, slot, kind, dev) = {
                let v = self.vnodes.borrow();
                let v = v.get(&s.vnode).ok_or(OsError::BadFd(fd))?;
                (v.linked, v.meta_slot, v.kind, v.dev)
            };
            let (kind, dev) = match linked.then(|| self.entry(slot)).transpose()? {
                Some(e) if e.state == SlotState::Used && e.vnode == s.vnode => (e.kind, e.dev),
                _ => (kind, dev),
            };
            Ok(StatBuf { vnode: s.vnode, kind, size: self.size_of(s.vnode), dev })
        })
    }

    /// Maps `len` bytes of fresh zeroed memory and returns the region id.
    pub fn mmap_anon(&self, len: usize) -> Result<u64, OsError> {
        if len == 0 {
            return Err(OsError::Invalid("zero-length mapping".into()));
        }
        self.syscall("mmap", || {
            let raw = self.rd(&self.vma_table, 0, VMA_TABLE_BYTES)?;
            let next = u64::from_le_bytes(raw[0..8].try_into().expect("8 bytes")).max(1);
            let count = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes"));
            let mut out = [0u8; VMA_TABLE_BYTES];
            out[0..8].copy_from_slice(&(next + 1).to_le_bytes());
            out[8..16].copy_from_slice(&(count + 1).to_le_bytes());
            self.wr(&self.vma_table, 0, &out)?;
            let region = Region::map(len).map_err(|e| OsError::NoSpace(io_reason(&e)))?;
            self.regions.borrow_mut().insert(next, region);
            Ok(next)
        })
    }

    /// Drops a mapped region. Returns whether it existed.
    pub fn release_region(&self, id: u64) -> bool {
        self.regions.borrow_mut().remove(&id).is_some()
    }

    pub fn region_len(&self, id: u64) -> Option<usize> {
        self.regions.borrow().get(&id).map(|r| r.len)
    }

    pub fn read(&self, fd: u32, n: usize) -> Result<Vec<u8>, OsError> {
        self.syscall("read", || {
            let mut s = self.slot(fd)?;
            if s.flags & flags::READ == 0 {
                return Err(OsError::BadFd(fd));
            }
            if self.node_kind(s.vnode, fd)? == NodeKind::Dir {
                return Err(OsError::IsDir(format!("fd {fd}")));
            }
            let data = {
                let v = self.vnodes.borrow();
                let content = &v.get(&s.vnode).ok_or(OsError::BadFd(fd))?.content;
                let start = (s.offset as usize).min(content.len());
                let end = start.saturating_add(n).min(content.len());
                content[start..end].to_vec()
            };
            s.offset += data.len() as u64;
            self.set_slot(fd, &s)?;
            Ok(data)
        })
    }

    pub fn write(&self, fd: u32, data: &[u8]) -> Result<usize, OsError> {
        self.syscall("write", || {
            let mut s = self.slot(fd)?;
            if s.flags & flags::WRITE == 0 {
                return Err(OsError::BadFd(fd));
            }
            if self.node_kind(s.vnode, fd)? == NodeKind::Dir {
                return Err(OsError::IsDir(format!("fd {fd}")));
            }
            {
                let mut v = self.vnodes.borrow_mut();
                let content = &mut v.get_mut(&s.vnode).ok_or(OsError::BadFd(fd))?.content;
                let start = s.offset as usize;
                let end = start + data.len();
                if content.len() < end {
                    content.resize(end, 0);
                }
                content[start..end].copy_from_slice(data);
            }
            s.offset += data.len() as u64;
            self.set_slot(fd, &s)?;
            Ok(data.len())
        })
    }

    pub fn mkdir(&self, path: &str) -> Result<(), OsError> {
        let path = normalize(path)?;
        self.syscall("mkdir", || {
            if self.resolve(&path)?.is_some() {
                return Err(OsError::Exists(path.clone()));
            }
            self.create(&path, NodeKind::Dir).map(|_| ())
        })
    }

    /// Removes a file or an empty directory. Open descriptors keep the node
    /// alive until they are closed.
    pub fn unlink(&self, path: &str) -> Result<(), OsError> {
        let path = normalize(path)?;
        if path == "/" {
            return Err(OsError::Invalid("cannot remove the root".into()));
        }
        self.syscall("unlink", || {
            let (slot, e) = self.resolve(&path)?.ok_or_else(|| OsError::NoEnt(path.clone()))?;
            if e.kind == NodeKind::Dir {
                if self.mounts()?.iter().flatten().any(|m| m.path == path) {
                    return Err(OsError::Invalid(format!("{path} is a mount point")));
                }
                let prefix = format!("{path}/");
                for i in 0..INDEX_SLOTS {
                    let c = self.entry(i)?;
                    if c.state == SlotState::Used && c.path.starts_with(prefix.as_bytes()) {
                        return Err(OsError::Invalid(format!("{path} is not empty")));
                    }
                }
            }
            let tomb = IndexEntry { state: SlotState::Tombstone, ..e.clone() };
            self.wr(&self.fs_meta, index_offset(slot), &tomb.encode())?;
            let mut header = self.header()?;
            header.entries -= 1;
            self.wr(&self.fs_meta, 0, &header.encode())?;
            if self.referenced(e.vnode)? {
                if let Some(v) = self.vnodes.borrow_mut().get_mut(&e.vnode) {
                    v.linked = false;
                    v.dev = e.dev;
                }
            } else {
                self.vnodes.borrow_mut().remove(&e.vnode);
            }
            Ok(())
        })
    }

    /// Records `path`, an existing directory, as a mount point.
    pub fn mount(&self, path: &str) -> Result<(), OsError> {
        let path = normalize(path)?;
        if path.len() > MOUNT_PATH_MAX {
            return Err(OsError::NameTooLong(path));
        }
        self.syscall("mount", || {
            let (_, e) = self.resolve(&path)?.ok_or_else(|| OsError::NoEnt(path.clone()))?;
            if e.kind != NodeKind::Dir {
                return Err(OsError::NotDir(path.clone()));
            }
            let mounts = self.mounts()?;
            if mounts.iter().flatten().any(|m| m.path == path) {
                return Err(OsError::Exists(path.clone()));
            }
            let free = mounts.iter().position(Option::is_none).ok_or(OsError::NoSpace("mount table"))?;
            let m = MountEntry { path: path.clone(), root: e.vnode };
            self.wr(&self.fs_meta, mount_offset(free), &m.encode())?;
            // Names at or below the mount point move to it.
            let prefix = format!("{path}/");
            for i in 0..INDEX_SLOTS {
                let mut c = self.entry(i)?;
                let under = c.path == path.as_bytes() || c.path.starts_with(prefix.as_bytes());
                if c.state != SlotState::Used || !under {
                    continue;
                }
                let dev = self.mount_dev(&String::from_utf8_lossy(&c.path))?;
                if dev != c.dev {
                    c.dev = dev;
                    self.wr(&self.fs_meta, index_offset(i), &c.encode())?;
                }
            }
            let mut header = self.header()?;
            header.mounts += 1;
            self.wr(&self.fs_meta, 0, &header.encode())
        })
    }

    /// Copies the domain-resident tables out, under the `fstat` grant.
    pub fn tables(&self) -> Result<TableImage, OsError> {
        self.monitor.sandboxed_call("fstat", || {
            Ok(TableImage {
                fd_table: self.rd(&self.fd_table, 0, FD_TABLE_BYTES)?,
                vma_table: self.rd(&self.vma_table, 0, VMA_TABLE_BYTES)?,
                fs_meta: self.rd(&self.fs_meta, 0, FS_META_BYTES)?,
            })
        })?
    }

    /// Decoded descriptor table.
    pub fn fd_slots(&self) -> Result<Vec<FdSlot>, OsError> {
        let img = self.tables()?;
        Ok(img.fd_table.chunks(FD_SLOT_BYTES).map(FdSlot::decode).collect())
    }

    /// Decoded mount table, free entries omitted.
    pub fn mount_table(&self) -> Result<Vec<MountEntry>, OsError> {
        let img = self.tables()?;
        Ok(img.fs_meta[MOUNTS_OFFSET..INDEX_OFFSET]
            .chunks(MOUNT_ENTRY_BYTES)
            .filter_map(MountEntry::decode)
            .collect())
    }
}

/// Makes `path` absolute-canonical: no empty, `.` or `..` components.
pub fn normalize(path: &str) -> Result<String, OsError> {
    if !path.starts_with('/') {
        return Err(OsError::Invalid(format!("relative path `{path}`")));
    }
    if path.contains('\0') {
        return Err(OsError::Invalid("NUL in path".into()));
    }
    let mut parts: Vec<&str> = Vec::new();
    for c in path.split('/') {
        match c {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    let out = format!("/{}", parts.join("/"));
    if out.len() > PATH_MAX {
        return Err(OsError::NameTooLong(out));
    }
    Ok(out)
}
