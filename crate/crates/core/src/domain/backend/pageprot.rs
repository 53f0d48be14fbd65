use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::sys::{self, KernelProbe};
use super::{fault, map_pages, unmap_pages, Backend, BackendKind, KeyPool, PoolRegion};
use crate::domain::{AccessMode, AccessOp, DomainError, KeyId};

/// Enforces access modes with page permissions.
///
/// A mode change rewrites the protection of every page tagged with the key,
/// so it applies to all threads of the process at once.
#[derive(Debug)]
pub struct PageProtBackend {
    keys: KeyPool,
    tagged: Mutex<HashMap<KeyId, Vec<PoolRegion>>>,
    mapped: AtomicUsize,
    probe: KernelProbe,
}

impl PageProtBackend {
    pub fn new() -> Result<Self, DomainError> {
        Ok(PageProtBackend {
            keys: KeyPool::default(),
            tagged: Mutex::new(HashMap::new()),
            mapped: AtomicUsize::new(0),
            probe: KernelProbe::new().map_err(|e| DomainError::Backend(e.to_string()))?,
        })
    }
}

impl Backend for PageProtBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::PageProt
    }

    fn provision_key(&self) -> Result<KeyId, DomainError> {
        self.keys.take()
    }

    fn release_key(&self, key: KeyId) -> Result<(), DomainError> {
        self.tagged
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&key);
        self.keys.give_back(key)
    }

    fn map_pool(&self, pages: usize) -> Result<PoolRegion, DomainError> {
        let region = map_pages(pages)?;
        self.mapped.fetch_add(pages, Ordering::Relaxed);
        Ok(region)
    }

    fn tag_region(&self, region: &PoolRegion, key: KeyId) -> Result<(), DomainError> {
        if !region.is_empty() {
            sys::mprotect(region.base(), region.len(), libc::PROT_NONE)
                .map_err(|e| DomainError::Backend(format!("mprotect: {e}")))?;
        }
        self.tagged
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(key)
            .or_default()
            .push(*region);
        Ok(())
    }

    fn unmap_pool(&self, region: PoolRegion) -> Result<(), DomainError> {
        for regions in self
            .tagged
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .values_mut()
        {
            regions.retain(|r| *r != region);
        }
        unmap_pages(region)?;
        self.mapped.fetch_sub(region.pages(), Ordering::Relaxed);
        Ok(())
    }

    fn set_thread_access(&self, key: KeyId, mode: AccessMode) -> Result<(), DomainError> {
        let tagged = self.tagged.lock().unwrap_or_else(|e| e.into_inner());
        for region in tagged.get(&key).into_iter().flatten() {
            if !region.is_empty() {
                sys::mprotect(region.base(), region.len(), sys::prot_for(mode))
                    .map_err(|e| DomainError::Backend(format!("mprotect: {e}")))?;
            }
        }
        Ok(())
    }

    fn load(
        &self,
        key: KeyId,
        mode: AccessMode,
        src: usize,
        dst: &mut [u8],
    ) -> Result<(), DomainError> {
        if self.probe.load(src, dst)? {
            Ok(())
        } else {
            Err(fault(key, AccessOp::Read, mode))
        }
    }

    fn store(
        &self,
        key: KeyId,
        mode: AccessMode,
        dst: usize,
        src: &[u8],
    ) -> Result<(), DomainError> {
        if self.probe.store(dst, src)? {
            Ok(())
        } else {
            Err(fault(key, AccessOp::Write, mode))
        }
    }

    fn enforces_raw_access(&self) -> bool {
        true
    }

    fn mapped_pages(&self) -> usize {
        self.mapped.load(Ordering::Relaxed)
    }

    fn provisioned_keys(&self) -> usize {
        self.keys.count()
    }
}
