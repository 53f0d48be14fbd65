//! Recorded handle-mediated access traces, replayable on any backend.

use std::collections::BTreeMap;

use memdom::domain::{AccessMode, BackendChoice, DomainError};
use memdom::monitor::{Monitor, MonitorError, SandboxFrame};
use memdom::policy::Acl;
use rand::seq::SliceRandom;
use rand::Rng;

use super::frames::expected_modes;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceOp {
    Grant(String),
    Revoke,
    Read { object: String, offset: usize, len: usize },
    Write { object: String, offset: usize, len: usize },
    /// A store through a bare address inside the object.
    Store { object: String, offset: usize, len: usize },
    Load { object: String, offset: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Verdict {
    Allowed,
    Denied,
    OutOfBounds,
    Other(String),
}

impl Verdict {
    fn of(res: Result<(), DomainError>) -> Verdict {
        match res {
            Ok(()) => Verdict::Allowed,
            Err(e) if e.is_isolation_fault() => Verdict::Denied,
            Err(DomainError::OutOfBounds { .. }) => Verdict::OutOfBounds,
            Err(e) => Verdict::Other(e.to_string()),
        }
    }

    fn of_monitor(res: Result<(), MonitorError>) -> Verdict {
        match res {
            Ok(()) => Verdict::Allowed,
            Err(MonitorError::Domain(e)) => Verdict::of(Err(e)),
            Err(e) => Verdict::Other(e.to_string()),
        }
    }
}

/// Bytes allocated for `object` in trace setups.
pub fn object_size(acl: &Acl, object: &str) -> usize {
    let declared = acl.object(object).and_then(|o| o.declared_size);
    declared.map_or(64, |d| (d as usize).min(256))
}

pub fn generate(acl: &Acl, len: usize, rng: &mut impl Rng) -> Vec<TraceOp> {
    let funcs: Vec<&str> = acl.rules.iter().map(|r| r.func_name.as_str()).collect();
    let objects: Vec<&str> = acl.objects.iter().map(|o| o.object_label.as_str()).collect();
    let mut depth = 0usize;
    let mut ops = Vec::with_capacity(len);
    while ops.len() < len {
        let roll = rng.gen_range(0..10);
        if roll < 2 && depth < 8 && !funcs.is_empty() {
            ops.push(TraceOp::Grant(funcs.choose(rng).unwrap().to_string()));
            depth += 1;
        } else if roll < 3 && depth > 0 {
            ops.push(TraceOp::Revoke);
            depth -= 1;
        } else if !objects.is_empty() {
            let object = objects.choose(rng).unwrap().to_string();
            let size = object_size(acl, &object);
            let offset = rng.gen_range(0..size);
            let len = if rng.gen_bool(0.05) {
                size - offset + 1
            } else {
                rng.gen_range(1..=size - offset)
            };
            ops.push(match rng.gen_range(0..4) {
                0 => TraceOp::Read { object, offset, len },
                1 => TraceOp::Write { object, offset, len },
                2 => TraceOp::Load { object, offset, len },
                _ => TraceOp::Store { object, offset, len },
            });
        }
    }
    ops
}

/// A monitor for `acl` with every object allocated.
pub fn setup(acl: &Acl, backend: BackendChoice) -> Result<Monitor, MonitorError> {
    let m = Monitor::new(acl, backend)?;
    for o in &acl.objects {
        m.alloc_object(&o.object_label, Some(object_size(acl, &o.object_label)))?;
    }
    Ok(m)
}

/// Replays `ops`, returning one verdict per access and the mediated access
/// log as `(domain, op, allowed)`.
pub fn replay(m: &Monitor, ops: &[TraceOp]) -> (Vec<Verdict>, Vec<(String, String, bool)>) {
    let mgr = m.manager();
    let mut frames: Vec<SandboxFrame> = Vec::new();
    let mut verdicts = Vec::new();
    mgr.start_trace();
    for op in ops {
        match op {
            TraceOp::Grant(f) => frames.push(m.grant_data_access(f).expect("grant")),
            TraceOp::Revoke => m.revoke_data_access(&frames.pop().unwrap()).expect("revoke"),
            TraceOp::Read { object, offset, len } => {
                let mut buf = vec![0; *len];
                verdicts.push(Verdict::of_monitor(m.read_object(object, *offset, &mut buf)));
            }
            TraceOp::Write { object, offset, len } => {
                let data = vec![0xa5; *len];
                verdicts.push(Verdict::of_monitor(m.write_object(object, *offset, &data)));
            }
            TraceOp::Load { object, offset, len } => {
                let h = m.object(object).unwrap();
                let mut buf = vec![0; *len];
                let v = if offset + len > h.size() {
                    Verdict::OutOfBounds
                } else {
                    Verdict::of(mgr.load(h.addr() + offset, &mut buf))
                };
                verdicts.push(v);
            }
            TraceOp::Store { object, offset, len } => {
                let h = m.object(object).unwrap();
                let v = if offset + len > h.size() {
                    Verdict::OutOfBounds
                } else {
                    Verdict::of(mgr.store(h.addr() + offset, &vec![0x5a; *len]))
                };
                verdicts.push(v);
            }
        }
    }
    while let Some(f) = frames.pop() {
        m.revoke_data_access(&f).expect("revoke");
    }
    let log = mgr
        .take_trace()
        .into_iter()
        .map(|e| (mgr.label_of(e.key).unwrap_or("?").to_string(), e.op.to_string(), e.allowed))
        .collect();
    (verdicts, log)
}

/// Verdicts a register-per-frame model predicts for `ops`.
pub fn model(acl: &Acl, ops: &[TraceOp]) -> Vec<Verdict> {
    let none: BTreeMap<String, AccessMode> = acl
        .domains
        .iter()
        .map(|d| (d.domain_label.clone(), AccessMode::None))
        .collect();
    let mut register = none.clone();
    let mut verdicts = Vec::new();
    let judge = |register: &BTreeMap<String, AccessMode>, object: &str, offset: usize, len: usize, write: bool| {
        if offset + len > object_size(acl, object) {
            return Verdict::OutOfBounds;
        }
        let domain = &acl.object(object).unwrap().domain_label;
        let mode = register[domain];
        let ok = if write { mode.allows_write() } else { mode.allows_read() };
        if ok {
            Verdict::Allowed
        } else {
            Verdict::Denied
        }
    };
    for op in ops {
        match op {
            TraceOp::Grant(f) => register = expected_modes(acl, f),
            TraceOp::Revoke => register = none.clone(),
            TraceOp::Read { object, offset, len } | TraceOp::Load { object, offset, len } => {
                verdicts.push(judge(&register, object, *offset, *len, false))
            }
            TraceOp::Write { object, offset, len } | TraceOp::Store { object, offset, len } => {
                verdicts.push(judge(&register, object, *offset, *len, true))
            }
        }
    }
    verdicts
}
