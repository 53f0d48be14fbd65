//! Random grant/revoke/unwind traces checked against a stack-of-registers
//! model.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use memdom::domain::{AccessMode, KeyId};
use memdom::monitor::{Monitor, MonitorError, SandboxFrame, MAX_DEPTH};
use memdom::policy::Acl;
use rand::seq::SliceRandom;
use rand::Rng;

use super::INJECTED_PANIC;

/// Domain modes a rule should produce, read straight off the ACL: outputs
/// are read-write, inputs read-only, read-write wins.
pub fn expected_modes(acl: &Acl, func: &str) -> BTreeMap<String, AccessMode> {
    let mut modes: BTreeMap<String, AccessMode> = acl
        .domains
        .iter()
        .map(|d| (d.domain_label.clone(), AccessMode::None))
        .collect();
    let rule = acl.rule(func).expect("rule exists");
    for s in &rule.inputs {
        let m = modes.get_mut(&s.domain_label).unwrap();
        *m = (*m).max(AccessMode::ReadOnly);
    }
    for s in &rule.outputs {
        modes.insert(s.domain_label.clone(), AccessMode::ReadWrite);
    }
    modes
}

fn all_none(acl: &Acl) -> BTreeMap<String, AccessMode> {
    acl.domains
        .iter()
        .map(|d| (d.domain_label.clone(), AccessMode::None))
        .collect()
}

/// Current modes of every domain key, plus the default key.
pub fn observed_modes(m: &Monitor) -> (BTreeMap<String, AccessMode>, AccessMode) {
    let mgr = m.manager();
    let modes = mgr
        .domain_labels()
        .map(|l| (l.to_string(), mgr.mode(mgr.key_of(l).unwrap())))
        .collect();
    (modes, mgr.mode(KeyId::DEFAULT))
}

fn expect_modes(m: &Monitor, want: &BTreeMap<String, AccessMode>, at: &str) -> Result<(), String> {
    let (got, default) = observed_modes(m);
    if default != AccessMode::ReadWrite {
        return Err(format!("{at}: default key changed to {default:?}"));
    }
    if &got != want {
        return Err(format!("{at}: register {got:?}, model {want:?}"));
    }
    Ok(())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FrameStats {
    pub grants: usize,
    pub revokes: usize,
    pub violations: usize,
    pub unwinds: usize,
    pub nested_limit: usize,
}

/// Runs `steps` random operations, then closes whatever is still open in
/// LIFO order and checks that every key is denied.
pub fn run_trace(m: &Monitor, acl: &Acl, steps: usize, rng: &mut impl Rng) -> Result<FrameStats, String> {
    let funcs: Vec<&str> = acl.rules.iter().map(|r| r.func_name.as_str()).collect();
    let mut held: Vec<SandboxFrame> = Vec::new();
    let mut stats = FrameStats::default();
    let deny = all_none(acl);
    // Per-trace grant weight, so some traces climb to the depth limit.
    let bias = rng.gen_range(3..=6);

    for step in 0..steps {
        let at = format!("step {step}");
        match rng.gen_range(0..10) {
            x if x < bias => {
                let f = *funcs.choose(rng).unwrap();
                match m.grant_data_access(f) {
                    Ok(frame) if held.len() < MAX_DEPTH => {
                        if frame.depth() != held.len() {
                            return Err(format!("{at}: frame depth {} != {}", frame.depth(), held.len()));
                        }
                        expect_modes(m, &expected_modes(acl, f), &at)?;
                        held.push(frame);
                        stats.grants += 1;
                    }
                    Err(MonitorError::NestedLimit { .. }) if held.len() == MAX_DEPTH => {
                        stats.nested_limit += 1;
                    }
                    other => return Err(format!("{at}: grant `{f}` at depth {}: {other:?}", held.len())),
                }
            }
            x if x < 9 && !held.is_empty() => {
                let i = if rng.gen_bool(0.7) { held.len() - 1 } else { rng.gen_range(0..held.len()) };
                let top = i == held.len() - 1;
                let before = observed_modes(m);
                match (m.revoke_data_access(&held[i]), top) {
                    (Ok(()), true) => {
                        held.pop();
                        expect_modes(m, &deny, &at)?;
                        stats.revokes += 1;
                    }
                    (Err(MonitorError::FrameOrderViolation), false) => {
                        if observed_modes(m) != before {
                            return Err(format!("{at}: rejected revoke changed the register"));
                        }
                        stats.violations += 1;
                    }
                    (got, _) => {
                        return Err(format!("{at}: revoke of frame {i} of {}: {got:?}", held.len()))
                    }
                }
            }
            _ => {
                let f = *funcs.choose(rng).unwrap();
                let leak = rng.gen_range(0..3usize);
                let panic = rng.gen_bool(0.5);
                let inner: Vec<&str> = (0..leak).map(|_| *funcs.choose(rng).unwrap()).collect();
                let depth_before = m.depth();
                let res = catch_unwind(AssertUnwindSafe(|| {
                    m.sandboxed_call(f, || {
                        for g in &inner {
                            // Opened and never revoked.
                            drop(m.grant_data_access(g));
                        }
                        if panic {
                            std::panic::panic_any(INJECTED_PANIC);
                        }
                    })
                }));
                let room = held.len() < MAX_DEPTH;
                let leaked = leak > 0 && held.len() + 1 < MAX_DEPTH;
                let ok = match &res {
                    Ok(Err(MonitorError::NestedLimit { .. })) => !room,
                    Err(_) => room && panic,
                    Ok(Ok(())) => room && !panic && !leaked,
                    Ok(Err(MonitorError::FrameOrderViolation)) => room && !panic && leaked,
                    Ok(Err(_)) => false,
                };
                if !ok {
                    return Err(format!(
                        "{at}: sandboxed_call(leak={leak}, panic={panic}) at depth {}: {:?}",
                        held.len(),
                        res.map_err(|_| "panicked")
                    ));
                }
                if !room {
                    stats.nested_limit += 1;
                }
                if m.depth() != depth_before {
                    return Err(format!("{at}: depth {} after unwind, was {depth_before}", m.depth()));
                }
                if room {
                    expect_modes(m, &deny, &at)?;
                }
                stats.unwinds += 1;
            }
        }
    }

    while let Some(frame) = held.pop() {
        m.revoke_data_access(&frame)
            .map_err(|e| format!("closing frame at depth {}: {e}", frame.depth()))?;
        stats.revokes += 1;
    }
    if m.depth() != 0 || m.manager().live_frames() != 0 {
        return Err(format!("stack not empty: depth {}", m.depth()));
    }
    expect_modes(m, &deny, "after the stack emptied")?;
    Ok(stats)
}
