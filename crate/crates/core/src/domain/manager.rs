use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use log::debug;

use super::alloc::AllocError;
use super::backend::{Backend, BackendChoice, BackendKind, PoolRegion};
use super::{AccessMode, DomainError, KeyId, KeyRegister, PoolAllocator, PAGE_SIZE, POISON_BYTE};
use crate::policy::Acl;

static NEXT_MANAGER_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    // One register per live manager on this thread.
    static REGISTERS: RefCell<HashMap<u64, KeyRegister>> = RefCell::new(HashMap::new());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessOp {
    Read,
    Write,
}

impl fmt::Display for AccessOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessOp::Read => "read",
            AccessOp::Write => "write",
        })
    }
}

/// One mediated access, recorded while tracing is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccessEvent {
    pub key: KeyId,
    pub op: AccessOp,
    pub allowed: bool,
}

/// A live allocation inside one domain's pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObjectHandle {
    manager: u64,
    domain: usize,
    id: u64,
    key: KeyId,
    addr: usize,
    offset: usize,
    size: usize,
}

impl ObjectHandle {
    pub fn key(&self) -> KeyId {
        self.key
    }

    /// Address of the first byte.
    pub fn addr(&self) -> usize {
        self.addr
    }

    /// Offset from the start of the domain's pool.
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainInfo {
    pub label: String,
    pub key: KeyId,
    pub base: usize,
    pub pages: usize,
    pub capacity: usize,
    pub in_use: usize,
    pub high_water: usize,
    pub live_objects: usize,
    pub bookkeeping_bytes: usize,
    pub peak_bookkeeping_bytes: usize,
}

struct MemoryDomain {
    label: String,
    key: KeyId,
    region: PoolRegion,
    alloc: Mutex<PoolAllocator>,
}

/// Owns the protection keys and page pools for every domain of an ACL.
pub struct DomainManager {
    id: u64,
    backend: Box<dyn Backend>,
    domains: Vec<MemoryDomain>,
    by_label: HashMap<String, usize>,
    torn_down: AtomicBool,
    startup: AtomicBool,
    live_frames: AtomicUsize,
    trace: Mutex<Option<Vec<AccessEvent>>>,
}

impl fmt::Debug for DomainManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DomainManager")
            .field("id", &self.id)
            .field("backend", &self.backend.kind())
            .field(
                "domains",
                &self.domains.iter().map(|d| (&d.label, d.key)).collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl DomainManager {
    pub fn new(acl: &Acl, backend: BackendChoice) -> Result<Self, DomainError> {
        Self::with_backend(acl, backend.instantiate()?)
    }

    /// Provisions one key and one tagged pool per domain of `acl`.
    pub fn with_backend(acl: &Acl, backend: Box<dyn Backend>) -> Result<Self, DomainError> {
        let mut mgr = DomainManager {
            id: NEXT_MANAGER_ID.fetch_add(1, Ordering::Relaxed),
            backend,
            domains: Vec::with_capacity(acl.domains.len()),
            by_label: HashMap::new(),
            torn_down: AtomicBool::new(false),
            startup: AtomicBool::new(true),
            live_frames: AtomicUsize::new(0),
            trace: Mutex::new(None),
        };
        for decl in &acl.domains {
            let pages = decl.pool_pages as usize;
            // On failure `mgr` drops and releases what was provisioned so far.
            let key = mgr.backend.provision_key()?;
            let region = match mgr.backend.map_pool(pages) {
                Ok(r) => r,
                Err(e) => {
                    let _ = mgr.backend.release_key(key);
                    return Err(e);
                }
            };
            mgr.by_label.insert(decl.domain_label.clone(), mgr.domains.len());
            mgr.domains.push(MemoryDomain {
                label: decl.domain_label.clone(),
                key,
                region,
                alloc: Mutex::new(PoolAllocator::new(pages * PAGE_SIZE)),
            });
            mgr.backend.tag_region(&region, key)?;
            debug!(
                "domain {} -> {key}, {pages} pages at {:#x}",
                decl.domain_label,
                region.base()
            );
        }
        Ok(mgr)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn is_live(&self) -> bool {
        !self.torn_down.load(Ordering::Acquire)
    }

    fn ensure_live(&self) -> Result<(), DomainError> {
        if self.is_live() {
            Ok(())
        } else {
            Err(DomainError::NotInitialized)
        }
    }

    /// Releases every key and unmaps every pool.
    pub fn teardown(&self) -> Result<(), DomainError> {
        self.ensure_live()?;
        let count = self.live_frames.load(Ordering::Acquire);
        if count > 0 {
            return Err(DomainError::ActiveSandbox { count });
        }
        self.release_all()
    }

    fn release_all(&self) -> Result<(), DomainError> {
        if self.torn_down.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        let mut first_err = None;
        for d in &self.domains {
            let mut res = self.backend.set_thread_access(d.key, AccessMode::None);
            res = res.and(self.backend.unmap_pool(d.region));
            res = res.and(self.backend.release_key(d.key));
            if let Err(e) = res {
                first_err.get_or_insert(e);
            }
        }
        REGISTERS.with(|r| r.borrow_mut().remove(&self.id));
        first_err.map_or(Ok(()), Err)
    }

    pub fn domain_labels(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(|d| d.label.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = KeyId> + '_ {
        self.domains.iter().map(|d| d.key)
    }

    pub fn key_of(&self, label: &str) -> Result<KeyId, DomainError> {
        self.domain(label).map(|(_, d)| d.key)
    }

    pub fn label_of(&self, key: KeyId) -> Option<&str> {
        self.domains.iter().find(|d| d.key == key).map(|d| d.label.as_str())
    }

    fn domain(&self, label: &str) -> Result<(usize, &MemoryDomain), DomainError> {
        self.by_label
            .get(label)
            .map(|&i| (i, &self.domains[i]))
            .ok_or_else(|| DomainError::NoSuchDomain(label.to_string()))
    }

    pub fn domain_info(&self, label: &str) -> Result<DomainInfo, DomainError> {
        let (_, d) = self.domain(label)?;
        let a = d.alloc.lock().unwrap_or_else(|e| e.into_inner());
        Ok(DomainInfo {
            label: d.label.clone(),
            key: d.key,
            base: d.region.base(),
            pages: d.region.pages(),
            capacity: a.capacity(),
            in_use: a.in_use(),
            high_water: a.high_water(),
            live_objects: a.live_count(),
            bookkeeping_bytes: a.bookkeeping_bytes(),
            peak_bookkeeping_bytes: a.peak_bookkeeping_bytes(),
        })
    }

    pub fn domain_infos(&self) -> Vec<DomainInfo> {
        self.domains
            .iter()
            .map(|d| self.domain_info(&d.label).expect("label is known"))
            .collect()
    }

    /// Free extents `(offset, len)` of a domain's pool, sorted by offset.
    pub fn free_extents(&self, label: &str) -> Result<Vec<(usize, usize)>, DomainError> {
        let (_, d) = self.domain(label)?;
        Ok(d.alloc.lock().unwrap_or_else(|e| e.into_inner()).free_extents())
    }

    /// The calling thread's view of this manager's keys.
    pub fn register(&self) -> KeyRegister {
        REGISTERS.with(|r| r.borrow().get(&self.id).copied().unwrap_or_default())
    }

    /// First contact between this thread and the manager: start from the
    /// default-deny register and make the backend agree with it.
    fn attach_thread(&self) -> Result<(), DomainError> {
        let fresh = REGISTERS.with(|r| {
            let mut regs = r.borrow_mut();
            if regs.contains_key(&self.id) {
                false
            } else {
                regs.insert(self.id, KeyRegister::default());
                true
            }
        });
        if fresh {
            let keys: Vec<KeyId> = self.keys().collect();
            self.backend.init_thread(&keys)?;
        }
        Ok(())
    }

    pub fn mode(&self, key: KeyId) -> AccessMode {
        self.register().get(key)
    }

    /// Sets the calling thread's access to `key`.
    pub fn set_access(&self, key: KeyId, mode: AccessMode) -> Result<(), DomainError> {
        self.ensure_live()?;
        if key == KeyId::DEFAULT || !self.domains.iter().any(|d| d.key == key) {
            return Err(DomainError::BadKey(key.get()));
        }
        self.attach_thread()?;
        REGISTERS.with(|r| {
            let mut regs = r.borrow_mut();
            regs.entry(self.id).or_default().set(key, mode)
        })?;
        self.backend.set_thread_access(key, mode)
    }

    /// Sets several of the calling thread's keys in one register update.
    pub fn set_access_many(&self, changes: &[(KeyId, AccessMode)]) -> Result<(), DomainError> {
        self.ensure_live()?;
        if let Some(&(bad, _)) = changes
            .iter()
            .find(|(k, _)| *k == KeyId::DEFAULT || !self.domains.iter().any(|d| d.key == *k))
        {
            return Err(DomainError::BadKey(bad.get()));
        }
        self.attach_thread()?;
        REGISTERS.with(|r| {
            let mut regs = r.borrow_mut();
            let reg = regs.entry(self.id).or_default();
            changes.iter().try_for_each(|&(k, m)| reg.set(k, m))
        })?;
        self.backend.set_thread_modes(changes)
    }

    /// Whether allocation is still allowed without a grant.
    pub fn in_startup(&self) -> bool {
        self.startup.load(Ordering::Acquire)
    }

    pub(crate) fn close_startup(&self) {
        self.startup.store(false, Ordering::Release);
    }

    pub(crate) fn frame_entered(&self) {
        self.live_frames.fetch_add(1, Ordering::AcqRel);
    }

    pub(crate) fn frame_exited(&self) {
        self.live_frames.fetch_sub(1, Ordering::AcqRel);
    }

    pub fn live_frames(&self) -> usize {
        self.live_frames.load(Ordering::Acquire)
    }

    fn check_alloc_permission(&self, d: &MemoryDomain) -> Result<(), DomainError> {
        let mode = self.mode(d.key);
        if self.in_startup() || mode.allows_write() {
            Ok(())
        } else {
            Err(DomainError::IsolationFault {
                key: d.key,
                op: AccessOp::Write,
                mode,
            })
        }
    }

    /// Allocates `size` zeroed bytes, 16-byte aligned, in domain `label`.
    pub fn domain_alloc(&self, label: &str, size: usize) -> Result<ObjectHandle, DomainError> {
        self.ensure_live()?;
        let (idx, d) = self.domain(label)?;
        if size == 0 {
            return Err(DomainError::BadSize);
        }
        self.check_alloc_permission(d)?;
        let (id, extent) = d
            .alloc
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .alloc(size)
            .map_err(|e| match e {
                AllocError::BadSize => DomainError::BadSize,
                _ => DomainError::PoolExhausted {
                    domain: label.to_string(),
                    requested: size,
                },
            })?;
        let addr = d.region.base() + extent.offset;
        self.internal_fill(d, addr, extent.size, 0)?;
        Ok(ObjectHandle {
            manager: self.id,
            domain: idx,
            id,
            key: d.key,
            addr,
            offset: extent.offset,
            size,
        })
    }

    /// Returns an allocation to its pool and poisons its bytes.
    pub fn domain_free(&self, label: &str, handle: &ObjectHandle) -> Result<(), DomainError> {
        self.ensure_live()?;
        let (idx, d) = self.domain(label)?;
        if handle.manager != self.id || handle.domain != idx {
            return Err(DomainError::UnknownHandle);
        }
        self.check_alloc_permission(d)?;
        let extent = d
            .alloc
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .free(handle.id)
            .map_err(|e| match e {
                AllocError::DoubleFree => DomainError::DoubleFree,
                _ => DomainError::UnknownHandle,
            })?;
        self.internal_fill(d, d.region.base() + extent.offset, extent.reserved, POISON_BYTE)
    }

    /// Writes below the monitor's abstraction: zeroing and poisoning.
    fn internal_fill(&self, d: &MemoryDomain, addr: usize, len: usize, byte: u8) -> Result<(), DomainError> {
        self.attach_thread()?;
        let mode = self.mode(d.key);
        let elevate = !mode.allows_write();
        if elevate {
            self.backend.set_thread_access(d.key, AccessMode::ReadWrite)?;
        }
        let res = self
            .backend
            .store(d.key, AccessMode::ReadWrite, addr, &vec![byte; len]);
        if elevate {
            self.backend.set_thread_access(d.key, mode)?;
        }
        res
    }

    fn live_handle(&self, h: &ObjectHandle) -> Result<&MemoryDomain, DomainError> {
        self.ensure_live()?;
        if h.manager != self.id {
            return Err(DomainError::UnknownHandle);
        }
        let d = self.domains.get(h.domain).ok_or(DomainError::UnknownHandle)?;
        match d.alloc.lock().unwrap_or_else(|e| e.into_inner()).get(h.id) {
            Some(e) if e.offset == h.offset => Ok(d),
            _ => Err(DomainError::UnknownHandle),
        }
    }

    fn bounds(h: &ObjectHandle, offset: usize, len: usize) -> Result<(), DomainError> {
        if offset.checked_add(len).is_some_and(|end| end <= h.size) {
            Ok(())
        } else {
            Err(DomainError::OutOfBounds {
                offset,
                len,
                size: h.size,
            })
        }
    }

    /// Reads `buf.len()` bytes of the object starting at `offset`, subject
    /// to the calling thread's access.
    pub fn read(&self, h: &ObjectHandle, offset: usize, buf: &mut [u8]) -> Result<(), DomainError> {
        let d = self.live_handle(h)?;
        Self::bounds(h, offset, buf.len())?;
        self.mediated_load(d, h.addr + offset, buf)
    }

    pub fn write(&self, h: &ObjectHandle, offset: usize, data: &[u8]) -> Result<(), DomainError> {
        let d = self.live_handle(h)?;
        Self::bounds(h, offset, data.len())?;
        self.mediated_store(d, h.addr + offset, data)
    }

    pub fn read_vec(&self, h: &ObjectHandle) -> Result<Vec<u8>, DomainError> {
        let mut buf = vec![0; h.size];
        self.read(h, 0, &mut buf)?;
        Ok(buf)
    }

    fn pool_at(&self, addr: usize, len: usize) -> Result<&MemoryDomain, DomainError> {
        self.ensure_live()?;
        self.domains
            .iter()
            .find(|d| d.region.contains(addr, len))
            .ok_or(DomainError::NotInPool(addr))
    }

    /// Loads from any pool address, like a plain load instruction would.
    pub fn load(&self, addr: usize, buf: &mut [u8]) -> Result<(), DomainError> {
        let d = self.pool_at(addr, buf.len())?;
        self.mediated_load(d, addr, buf)
    }

    /// Stores to any pool address, like a plain store instruction would.
    pub fn store(&self, addr: usize, data: &[u8]) -> Result<(), DomainError> {
        let d = self.pool_at(addr, data.len())?;
        self.mediated_store(d, addr, data)
    }

    fn mediated_load(&self, d: &MemoryDomain, addr: usize, buf: &mut [u8]) -> Result<(), DomainError> {
        self.attach_thread()?;
        let res = self.backend.load(d.key, self.mode(d.key), addr, buf);
        self.record(d.key, AccessOp::Read, &res);
        res
    }

    fn mediated_store(&self, d: &MemoryDomain, addr: usize, data: &[u8]) -> Result<(), DomainError> {
        self.attach_thread()?;
        let res = self.backend.store(d.key, self.mode(d.key), addr, data);
        self.record(d.key, AccessOp::Write, &res);
        res
    }

    fn record(&self, key: KeyId, op: AccessOp, res: &Result<(), DomainError>) {
        let mut trace = self.trace.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(events) = trace.as_mut() {
            events.push(AccessEvent {
                key,
                op,
                allowed: res.is_ok(),
            });
        }
    }

    /// Starts recording mediated accesses, discarding any earlier trace.
    pub fn start_trace(&self) {
        *self.trace.lock().unwrap_or_else(|e| e.into_inner()) = Some(Vec::new());
    }

    /// Stops recording and returns what was recorded.
    pub fn take_trace(&self) -> Vec<AccessEvent> {
        self.trace
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take()
            .unwrap_or_default()
    }

    /// Raw pointer to an object's first byte. Dereferencing it bypasses the
    /// checked backend and faults under the page-level backends when access
    /// is denied.
    pub fn raw_ptr(&self, h: &ObjectHandle) -> *mut u8 {
        h.addr as *mut u8
    }
}

impl Drop for DomainManager {
    fn drop(&mut self) {
        if let Err(e) = self.release_all() {
            log::warn!("releasing domains on drop: {e}");
        }
    }
}
