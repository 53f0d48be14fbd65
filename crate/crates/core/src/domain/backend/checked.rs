use std::sync::atomic::{AtomicUsize, Ordering};

use super::{fault, map_pages, unmap_pages, Backend, BackendKind, KeyPool, PoolRegion};
use crate::domain::{AccessMode, AccessOp, DomainError, KeyId};

/// Software model of protection keys. Pool memory stays readable and
/// writable at the page level; the caller's key register decides.
#[derive(Debug, Default)]
pub struct CheckedBackend {
    keys: KeyPool,
    mapped: AtomicUsize,
}

impl CheckedBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for CheckedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Checked
    }

    fn provision_key(&self) -> Result<KeyId, DomainError> {
        self.keys.take()
    }

    fn release_key(&self, key: KeyId) -> Result<(), DomainError> {
        self.keys.give_back(key)
    }

    fn map_pool(&self, pages: usize) -> Result<PoolRegion, DomainError> {
        let region = map_pages(pages)?;
        self.mapped.fetch_add(pages, Ordering::Relaxed);
        Ok(region)
    }

    fn tag_region(&self, _region: &PoolRegion, _key: KeyId) -> Result<(), DomainError> {
        Ok(())
    }

    fn unmap_pool(&self, region: PoolRegion) -> Result<(), DomainError> {
        unmap_pages(region)?;
        self.mapped.fetch_sub(region.pages(), Ordering::Relaxed);
        Ok(())
    }

    fn set_thread_access(&self, _key: KeyId, _mode: AccessMode) -> Result<(), DomainError> {
        Ok(())
    }

    fn load(
        &self,
        key: KeyId,
        mode: AccessMode,
        src: usize,
        dst: &mut [u8],
    ) -> Result<(), DomainError> {
        if !mode.allows_read() {
            return Err(fault(key, AccessOp::Read, mode));
        }
        // SAFETY: the manager only passes ranges inside a mapped pool.
        unsafe { std::ptr::copy_nonoverlapping(src as *const u8, dst.as_mut_ptr(), dst.len()) };
        Ok(())
    }

    fn store(
        &self,
        key: KeyId,
        mode: AccessMode,
        dst: usize,
        src: &[u8],
    ) -> Result<(), DomainError> {
        if !mode.allows_write() {
            return Err(fault(key, AccessOp::Write, mode));
        }
        // SAFETY: the manager only passes ranges inside a mapped pool.
        unsafe { std::ptr::copy_nonoverlapping(src.as_ptr(), dst as *mut u8, src.len()) };
        Ok(())
    }

    fn enforces_raw_access(&self) -> bool {
        false
    }

    fn mapped_pages(&self) -> usize {
        self.mapped.load(Ordering::Relaxed)
    }

    fn provisioned_keys(&self) -> usize {
        self.keys.count()
    }
}
