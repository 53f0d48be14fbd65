//! Dynamic execution sandboxes around privileged functions.
//!
//! A [`Monitor`] owns the domains of one ACL. [`Monitor::grant_data_access`]
//! opens a sandbox for a function on the calling thread and
//! [`Monitor::revoke_data_access`] closes it again, leaving every key denied.

mod grants;
pub mod global;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread::{self, ThreadId};
use std::time::Instant;

use log::warn;
use thiserror::Error;

use crate::domain::{
    AccessMode, BackendChoice, BackendKind, DomainError, DomainManager, KeyId, ObjectHandle,
};
use crate::policy::Acl;

pub use grants::{Grant, GrantTable};

/// Deepest sandbox nesting allowed on one thread.
pub const MAX_DEPTH: usize = 16;

static NEXT_SERIAL: AtomicU64 = AtomicU64::new(1);

thread_local! {
    // Open frame serials per manager id, innermost last.
    static STACKS: RefCell<HashMap<u64, Vec<u64>>> = RefCell::new(HashMap::new());
}

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("no access rule for function `{0}`")]
    UnknownFunction(String),
    #[error("sandbox nesting deeper than {MAX_DEPTH}")]
    NestedLimit { depth: usize },
    #[error("frame is not the innermost open sandbox on this thread")]
    FrameOrderViolation,
    #[error("frame belongs to another thread")]
    WrongThread,
    #[error("object `{0}` is not in the ACL")]
    UnknownObject(String),
    #[error("{size} bytes exceed the {limit} declared for `{object}`")]
    SizeExceeded { object: String, size: u64, limit: u64 },
    #[error("no active grant covers object `{object}`")]
    NoActiveGrant { object: String },
    #[error("object `{0}` is not allocated")]
    NotAllocated(String),
    #[error("object `{0}` is already allocated")]
    AlreadyAllocated(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl MonitorError {
    pub fn is_isolation_fault(&self) -> bool {
        matches!(self, MonitorError::Domain(e) if e.is_isolation_fault())
    }
}

/// Token for one open sandbox, handed back to
/// [`Monitor::revoke_data_access`].
#[derive(Debug)]
#[must_use = "an open sandbox must be revoked"]
pub struct SandboxFrame {
    manager: u64,
    thread: ThreadId,
    serial: u64,
    depth: usize,
    func: String,
    elevated: Vec<(KeyId, AccessMode)>,
}

impl SandboxFrame {
    pub fn func_name(&self) -> &str {
        &self.func
    }

    /// Zero-based position in the thread's sandbox stack.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn thread(&self) -> ThreadId {
        self.thread
    }

    /// Keys this frame raised above `None`.
    pub fn elevated_keys(&self) -> &[(KeyId, AccessMode)] {
        &self.elevated
    }
}

#[derive(Debug)]
struct ObjectEntry {
    domain: String,
    key: KeyId,
    declared: Option<u64>,
    handle: Mutex<Option<ObjectHandle>>,
}

/// Monitor memory in bytes, as reported by [`Monitor::bookkeeping`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bookkeeping {
    pub grant_table_bytes: usize,
    pub frame_stack_peak_bytes: usize,
    pub domains: Vec<DomainBookkeeping>,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBookkeeping {
    pub label: String,
    /// Grant table bytes attributable to this domain's key plus the peak of
    /// its allocator's bookkeeping.
    pub peak_bytes: usize,
    pub allocator_peak_bytes: usize,
    pub high_water_bytes: usize,
}

pub struct Monitor {
    manager: DomainManager,
    grants: GrantTable,
    objects: HashMap<String, ObjectEntry>,
    enforcing: AtomicBool,
    profiling: AtomicBool,
    monitor_ns: AtomicU64,
    peak_depth: AtomicUsize,
}

impl std::fmt::Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor")
            .field("manager", &self.manager)
            .field("functions", &self.grants.len())
            .field("objects", &self.objects.len())
            .field("enforcing", &self.is_enforcing())
            .finish()
    }
}

impl Monitor {
    pub fn new(acl: &Acl, backend: BackendChoice) -> Result<Self, MonitorError> {
        Self::from_manager(acl, DomainManager::new(acl, backend)?)
    }

    pub fn from_manager(acl: &Acl, manager: DomainManager) -> Result<Self, MonitorError> {
        let grants = GrantTable::build(acl, &manager)?;
        let mut objects = HashMap::with_capacity(acl.objects.len());
        for o in &acl.objects {
            objects.insert(
                o.object_label.clone(),
                ObjectEntry {
                    domain: o.domain_label.clone(),
                    key: manager.key_of(&o.domain_label)?,
                    declared: o.declared_size,
                    handle: Mutex::new(None),
                },
            );
        }
        Ok(Monitor {
            manager,
            grants,
            objects,
            enforcing: AtomicBool::new(true),
            profiling: AtomicBool::new(false),
            monitor_ns: AtomicU64::new(0),
            peak_depth: AtomicUsize::new(0),
        })
    }

    pub fn manager(&self) -> &DomainManager {
        &self.manager
    }

    pub fn grants(&self) -> &GrantTable {
        &self.grants
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.manager.backend_kind()
    }

    pub fn teardown(&self) -> Result<(), MonitorError> {
        Ok(self.manager.teardown()?)
    }

    /// Turns the monitor into a pass-through: every key becomes read-write
    /// on the calling thread and sandboxes no longer change access.
    pub fn disable_enforcement(&self) -> Result<(), MonitorError> {
        self.enforcing.store(false, Ordering::Release);
        for key in self.manager.keys().collect::<Vec<_>>() {
            self.manager.set_access(key, AccessMode::ReadWrite)?;
        }
        Ok(())
    }

    pub fn is_enforcing(&self) -> bool {
        self.enforcing.load(Ordering::Acquire)
    }

    /// Enables or disables accumulation of time spent in grant, revoke and
    /// size checks.
    pub fn set_profiling(&self, on: bool) {
        self.profiling.store(on, Ordering::Release);
    }

    pub fn monitor_ns(&self) -> u64 {
        self.monitor_ns.load(Ordering::Relaxed)
    }

    pub fn reset_monitor_ns(&self) {
        self.monitor_ns.store(0, Ordering::Relaxed);
    }

    fn timed<T>(&self, f: impl FnOnce() -> T) -> T {
        if !self.profiling.load(Ordering::Relaxed) {
            return f();
        }
        let start = Instant::now();
        let out = f();
        let ns = start.elapsed().as_nanos() as u64;
        self.monitor_ns.fetch_add(ns.max(1), Ordering::Relaxed);
        out
    }

    /// Sandbox depth of the calling thread.
    pub fn depth(&self) -> usize {
        let id = self.manager.id();
        STACKS.with(|s| s.borrow().get(&id).map_or(0, Vec::len))
    }

    fn apply(&self, target: impl Fn(KeyId) -> AccessMode) -> Result<(), MonitorError> {
        let current = self.manager.register();
        let changes: Vec<(KeyId, AccessMode)> = self
            .manager
            .keys()
            .map(|k| (k, target(k)))
            .filter(|&(k, m)| current.get(k) != m)
            .collect();
        if !changes.is_empty() {
            self.manager.set_access_many(&changes)?;
        }
        Ok(())
    }

    fn deny_all(&self) -> Result<(), MonitorError> {
        if self.is_enforcing() {
            self.apply(|_| AccessMode::None)
        } else {
            Ok(())
        }
    }

    /// Opens a sandbox for `func` on the calling thread.
    pub fn grant_data_access(&self, func: &str) -> Result<SandboxFrame, MonitorError> {
        self.timed(|| self.grant_inner(func))
    }

    fn grant_inner(&self, func: &str) -> Result<SandboxFrame, MonitorError> {
        let grant = self
            .grants
            .get(func)
            .ok_or_else(|| MonitorError::UnknownFunction(func.to_string()))?;
        let depth = self.depth();
        if depth >= MAX_DEPTH {
            return Err(MonitorError::NestedLimit { depth: depth + 1 });
        }
        self.manager.close_startup();
        if self.is_enforcing() {
            self.apply(|k| grant.mode_for(k))?;
        }
        let elevated = self
            .manager
            .keys()
            .map(|k| (k, grant.mode_for(k)))
            .filter(|&(_, m)| m != AccessMode::None)
            .collect();
        let serial = NEXT_SERIAL.fetch_add(1, Ordering::Relaxed);
        let id = self.manager.id();
        STACKS.with(|s| s.borrow_mut().entry(id).or_default().push(serial));
        self.manager.frame_entered();
        self.peak_depth.fetch_max(depth + 1, Ordering::Relaxed);
        Ok(SandboxFrame {
            manager: id,
            thread: thread::current().id(),
            serial,
            depth,
            func: func.to_string(),
            elevated,
        })
    }

    /// Closes the innermost sandbox. Every key ends up denied, whatever the
    /// enclosing frame had granted.
    pub fn revoke_data_access(&self, frame: &SandboxFrame) -> Result<(), MonitorError> {
        self.timed(|| self.revoke_inner(frame))
    }

    fn revoke_inner(&self, frame: &SandboxFrame) -> Result<(), MonitorError> {
        if frame.thread != thread::current().id() {
            return Err(MonitorError::WrongThread);
        }
        let id = self.manager.id();
        if frame.manager != id {
            return Err(MonitorError::FrameOrderViolation);
        }
        STACKS.with(|s| {
            let mut stacks = s.borrow_mut();
            let stack = stacks.entry(id).or_default();
            if stack.last() != Some(&frame.serial) {
                return Err(MonitorError::FrameOrderViolation);
            }
            stack.pop();
            Ok(())
        })?;
        self.manager.frame_exited();
        self.deny_all()
    }

    /// Closes `frame` and anything opened above it that was never revoked.
    fn unwind(&self, frame: &SandboxFrame) -> Result<(), MonitorError> {
        if frame.thread != thread::current().id() || frame.manager != self.manager.id() {
            return Err(MonitorError::WrongThread);
        }
        let popped = STACKS.with(|s| {
            let mut stacks = s.borrow_mut();
            let stack = stacks.entry(frame.manager).or_default();
            match stack.iter().position(|&x| x == frame.serial) {
                Some(p) => {
                    let n = stack.len() - p;
                    stack.truncate(p);
                    n
                }
                None => 0,
            }
        });
        for _ in 0..popped {
            self.manager.frame_exited();
        }
        self.deny_all()
    }

    /// Runs `body` inside a sandbox for `func`. The sandbox is closed on
    /// every exit path, panics included.
    pub fn sandboxed_call<T>(&self, func: &str, body: impl FnOnce() -> T) -> Result<T, MonitorError> {
        struct Guard<'a> {
            monitor: &'a Monitor,
            frame: Option<SandboxFrame>,
        }
        impl Drop for Guard<'_> {
            fn drop(&mut self) {
                if let Some(f) = self.frame.take() {
                    if let Err(e) = self.monitor.unwind(&f) {
                        warn!("unwinding sandbox for `{}`: {e}", f.func);
                    }
                }
            }
        }
        let frame = self.grant_data_access(func)?;
        let mut guard = Guard {
            monitor: self,
            frame: Some(frame),
        };
        let out = body();
        let frame = guard.frame.take().expect("frame present until here");
        match self.revoke_data_access(&frame) {
            Ok(()) => Ok(out),
            Err(e) => {
                // The body left frames open; close them before reporting.
                self.timed(|| self.unwind(&frame))?;
                Err(e)
            }
        }
    }

    fn entry(&self, object: &str) -> Result<&ObjectEntry, MonitorError> {
        self.objects
            .get(object)
            .ok_or_else(|| MonitorError::UnknownObject(object.to_string()))
    }

    fn check_size(&self, object: &str, size: u64) -> Result<(), MonitorError> {
        self.timed(|| {
            let e = self.entry(object)?;
            match e.declared {
                Some(limit) if size > limit => Err(MonitorError::SizeExceeded {
                    object: object.to_string(),
                    size,
                    limit,
                }),
                _ => Ok(()),
            }
        })
    }

    /// Ok iff the object has no declared size or `size` fits in it.
    pub fn check_input_size(&self, object: &str, size: u64) -> Result<(), MonitorError> {
        self.check_size(object, size)
    }

    pub fn check_output_size(&self, object: &str, size: u64) -> Result<(), MonitorError> {
        self.check_size(object, size)
    }

    pub fn declared_size(&self, object: &str) -> Result<Option<u64>, MonitorError> {
        Ok(self.entry(object)?.declared)
    }

    pub fn object_domain(&self, object: &str) -> Result<&str, MonitorError> {
        Ok(&self.entry(object)?.domain)
    }

    pub fn object_labels(&self) -> impl Iterator<Item = &str> {
        self.objects.keys().map(String::as_str)
    }

    /// Allocates an object in its domain. `size` defaults to the declared
    /// size and may not exceed it.
    pub fn alloc_object(&self, object: &str, size: Option<usize>) -> Result<ObjectHandle, MonitorError> {
        let e = self.entry(object)?;
        let size = match (size, e.declared) {
            (Some(s), _) => {
                self.check_size(object, s as u64)?;
                s
            }
            (None, Some(d)) => d as usize,
            (None, None) => return Err(DomainError::BadSize.into()),
        };
        let mut slot = e.handle.lock().unwrap_or_else(|p| p.into_inner());
        if slot.is_some() {
            return Err(MonitorError::AlreadyAllocated(object.to_string()));
        }
        let h = self.manager.domain_alloc(&e.domain, size)?;
        *slot = Some(h);
        Ok(h)
    }

    pub fn free_object(&self, object: &str) -> Result<(), MonitorError> {
        let e = self.entry(object)?;
        let mut slot = e.handle.lock().unwrap_or_else(|p| p.into_inner());
        let h = slot.ok_or_else(|| MonitorError::NotAllocated(object.to_string()))?;
        self.manager.domain_free(&e.domain, &h)?;
        *slot = None;
        Ok(())
    }

    pub fn object(&self, object: &str) -> Result<ObjectHandle, MonitorError> {
        let e = self.entry(object)?;
        let slot = e.handle.lock().unwrap_or_else(|p| p.into_inner());
        slot.ok_or_else(|| MonitorError::NotAllocated(object.to_string()))
    }

    /// Reads part of an object with the calling thread's current access.
    pub fn read_object(&self, object: &str, offset: usize, buf: &mut [u8]) -> Result<(), MonitorError> {
        let h = self.object(object)?;
        Ok(self.manager.read(&h, offset, buf)?)
    }

    pub fn write_object(&self, object: &str, offset: usize, data: &[u8]) -> Result<(), MonitorError> {
        let h = self.object(object)?;
        Ok(self.manager.write(&h, offset, data)?)
    }

    /// Copies untrusted bytes into the start of an object. Needs read-write
    /// access to the object's domain.
    pub fn copy_from_untrusted(&self, object: &str, src: &[u8]) -> Result<(), MonitorError> {
        let e = self.entry(object)?;
        self.check_input_size(object, src.len() as u64)?;
        if !self.manager.mode(e.key).allows_write() {
            return Err(MonitorError::NoActiveGrant {
                object: object.to_string(),
            });
        }
        let h = self.object(object)?;
        if src.len() > h.size() {
            return Err(MonitorError::SizeExceeded {
                object: object.to_string(),
                size: src.len() as u64,
                limit: h.size() as u64,
            });
        }
        Ok(self.manager.write(&h, 0, src)?)
    }

    /// Copies a whole object out to `dest`. Needs at least read access.
    pub fn copy_to_untrusted(&self, object: &str, dest: &mut [u8]) -> Result<usize, MonitorError> {
        let e = self.entry(object)?;
        let h = self.object(object)?;
        self.check_output_size(object, h.size() as u64)?;
        if dest.len() < h.size() {
            return Err(MonitorError::SizeExceeded {
                object: object.to_string(),
                size: h.size() as u64,
                limit: dest.len() as u64,
            });
        }
        if !self.manager.mode(e.key).allows_read() {
            return Err(MonitorError::NoActiveGrant {
                object: object.to_string(),
            });
        }
        self.manager.read(&h, 0, &mut dest[..h.size()])?;
        Ok(h.size())
    }

    /// Peak bytes of monitor bookkeeping: grant table, allocator metadata
    /// and sandbox stacks.
    pub fn bookkeeping(&self) -> Bookkeeping {
        let grant_table_bytes = self.grants.bookkeeping_bytes();
        let frame_stack_peak_bytes =
            self.peak_depth.load(Ordering::Relaxed) * std::mem::size_of::<u64>();
        let domains: Vec<DomainBookkeeping> = self
            .manager
            .domain_infos()
            .into_iter()
            .map(|d| DomainBookkeeping {
                peak_bytes: self.grants.bytes_for_key(d.key) + d.peak_bookkeeping_bytes,
                allocator_peak_bytes: d.peak_bookkeeping_bytes,
                high_water_bytes: d.high_water,
                label: d.label,
            })
            .collect();
        let total_bytes = grant_table_bytes
            + frame_stack_peak_bytes
            + domains.iter().map(|d| d.allocator_peak_bytes).sum::<usize>();
        Bookkeeping {
            grant_table_bytes,
            frame_stack_peak_bytes,
            domains,
            total_bytes,
        }
    }
}
