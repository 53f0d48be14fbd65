use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::sys::{pkey, KernelProbe};
use super::{fault, map_pages, unmap_pages, Backend, BackendKind, PoolRegion};
use crate::domain::{AccessMode, AccessOp, DomainError, KeyId};

/// Host memory protection keys. Access changes write the calling thread's
/// PKRU, so they never affect other threads.
#[derive(Debug)]
pub struct PkeyBackend {
    owned: Mutex<u16>,
    mapped: AtomicUsize,
    probe: KernelProbe,
}

impl PkeyBackend {
    pub fn new() -> Result<Self, DomainError> {
        if !pkey::available() {
            return Err(DomainError::BackendUnavailable {
                backend: BackendKind::Pkey,
                reason: "pkey_alloc is not supported".into(),
            });
        }
        Ok(PkeyBackend {
            owned: Mutex::new(0),
            mapped: AtomicUsize::new(0),
            probe: KernelProbe::new().map_err(|e| DomainError::Backend(e.to_string()))?,
        })
    }

    fn write_mode(key: KeyId, mode: AccessMode) {
        let shift = 2 * u32::from(key.get());
        let pkru = pkey::rdpkru();
        let next = (pkru & !(0b11 << shift)) | (mode.pkru_bits() << shift);
        if next != pkru {
            // SAFETY: pool pages are only touched through this backend's
            // probe or by code that expects to fault.
            unsafe { pkey::wrpkru(next) };
        }
    }
}

impl Backend for PkeyBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Pkey
    }

    fn provision_key(&self) -> Result<KeyId, DomainError> {
        let mut owned = self.owned.lock().unwrap_or_else(|e| e.into_inner());
        match pkey::alloc(pkey::PKEY_DISABLE_ACCESS) {
            Ok(k) => {
                let key = KeyId::new(k).ok_or_else(|| {
                    DomainError::Backend(format!("host returned out-of-range key {k}"))
                })?;
                *owned |= 1 << k;
                Ok(key)
            }
            Err(e) if e.raw_os_error() == Some(libc::ENOSPC) => Err(DomainError::KeyExhaustion {
                provisioned: owned.count_ones() as usize,
            }),
            Err(e) => Err(DomainError::Backend(format!("pkey_alloc: {e}"))),
        }
    }

    fn release_key(&self, key: KeyId) -> Result<(), DomainError> {
        let mut owned = self.owned.lock().unwrap_or_else(|e| e.into_inner());
        let bit = 1u16 << key.get();
        if *owned & bit == 0 {
            return Err(DomainError::BadKey(key.get()));
        }
        Self::write_mode(key, AccessMode::None);
        pkey::free(key.get()).map_err(|e| DomainError::Backend(format!("pkey_free: {e}")))?;
        *owned &= !bit;
        Ok(())
    }

    fn map_pool(&self, pages: usize) -> Result<PoolRegion, DomainError> {
        let region = map_pages(pages)?;
        self.mapped.fetch_add(pages, Ordering::Relaxed);
        Ok(region)
    }

    fn tag_region(&self, region: &PoolRegion, key: KeyId) -> Result<(), DomainError> {
        if region.is_empty() {
            return Ok(());
        }
        pkey::mprotect(
            region.base(),
            region.len(),
            libc::PROT_READ | libc::PROT_WRITE,
            key.get(),
        )
        .map_err(|e| DomainError::Backend(format!("pkey_mprotect: {e}")))
    }

    fn unmap_pool(&self, region: PoolRegion) -> Result<(), DomainError> {
        unmap_pages(region)?;
        self.mapped.fetch_sub(region.pages(), Ordering::Relaxed);
        Ok(())
    }

    fn set_thread_access(&self, key: KeyId, mode: AccessMode) -> Result<(), DomainError> {
        Self::write_mode(key, mode);
        Ok(())
    }

    fn set_thread_modes(&self, changes: &[(KeyId, AccessMode)]) -> Result<(), DomainError> {
        let pkru = pkey::rdpkru();
        let next = changes.iter().fold(pkru, |acc, &(key, mode)| {
            let shift = 2 * u32::from(key.get());
            (acc & !(0b11 << shift)) | (mode.pkru_bits() << shift)
        });
        if next != pkru {
            // SAFETY: as in `write_mode`.
            unsafe { pkey::wrpkru(next) };
        }
        Ok(())
    }

    // Linux copies PKRU into new threads, so a thread spawned during a grant
    // starts out with that grant.
    fn init_thread(&self, keys: &[KeyId]) -> Result<(), DomainError> {
        for &k in keys {
            Self::write_mode(k, AccessMode::None);
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
        self.owned
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .count_ones() as usize
    }
}
