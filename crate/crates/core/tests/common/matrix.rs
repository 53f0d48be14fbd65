//! Least-privilege matrix for the bundled minios policy.

use memdom::domain::AccessMode::{self, None as No, ReadOnly as Ro, ReadWrite as Rw};
use memdom::minios::{FD_TABLE, FS_META};
use memdom::monitor::Monitor;

/// Hand-transcribed from the fixture: `(syscall, handle_dom, fs_dom)`.
pub const EXPECTED: [(&str, AccessMode, AccessMode); 10] = [
    ("open", Rw, Rw),
    ("close", Rw, No),
    ("stat", No, Ro),
    ("fstat", Ro, Ro),
    ("mmap", Rw, No),
    ("read", Rw, Ro),
    ("write", Rw, Ro),
    ("mkdir", No, Rw),
    ("unlink", Rw, Rw),
    ("mount", No, Rw),
];

/// The mode a thread actually has on an object, found by trying a one-byte
/// read and a one-byte write-back.
pub fn probe(m: &Monitor, object: &str) -> AccessMode {
    let mut b = [0u8; 1];
    if m.read_object(object, 0, &mut b).is_err() {
        return No;
    }
    if m.write_object(object, 0, &b).is_err() {
        Ro
    } else {
        Rw
    }
}

/// Checks every function × domain cell inside its sandbox and again after
/// the sandbox closes. Returns the number of cells checked.
pub fn check(m: &Monitor) -> Result<usize, String> {
    let mut checked = 0;
    for (func, handle, fs) in EXPECTED {
        let got = m
            .sandboxed_call(func, || (probe(m, FD_TABLE), probe(m, FS_META)))
            .map_err(|e| e.to_string())?;
        if got != (handle, fs) {
            return Err(format!("{func}: inside got {got:?}, policy says {:?}", (handle, fs)));
        }
        checked += 2;
        let after = (probe(m, FD_TABLE), probe(m, FS_META));
        if after != (No, No) {
            return Err(format!("{func}: after revoke got {after:?}"));
        }
        checked += 2;
    }
    Ok(checked)
}
