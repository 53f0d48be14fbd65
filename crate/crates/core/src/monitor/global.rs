//! One process-wide monitor, for callers that want the init/teardown style
//! of interface instead of passing a [`Monitor`] around.

use std::sync::{Arc, Mutex};

use super::{Monitor, MonitorError};
use crate::domain::{BackendChoice, DomainError};
use crate::policy::Acl;

static GLOBAL: Mutex<Option<Arc<Monitor>>> = Mutex::new(None);

pub fn init(acl: &Acl, backend: BackendChoice) -> Result<Arc<Monitor>, MonitorError> {
    let mut g = GLOBAL.lock().unwrap_or_else(|e| e.into_inner());
    if g.is_some() {
        return Err(DomainError::AlreadyInitialized.into());
    }
    let m = Arc::new(Monitor::new(acl, backend)?);
    *g = Some(Arc::clone(&m));
    Ok(m)
}

pub fn current() -> Result<Arc<Monitor>, MonitorError> {
    GLOBAL
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .clone()
        .ok_or_else(|| DomainError::NotInitialized.into())
}

/// Fails with `ActiveSandbox` while any thread has a sandbox open.
pub fn teardown() -> Result<(), MonitorError> {
    let mut g = GLOBAL.lock().unwrap_or_else(|e| e.into_inner());
    let m = g.as_ref().ok_or(DomainError::NotInitialized)?;
    m.teardown()?;
    *g = None;
    Ok(())
}
