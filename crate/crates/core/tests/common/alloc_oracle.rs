//! Brute-force model of a first-fit pool: one cell per 16-byte unit.

use std::collections::HashMap;

use memdom::domain::{DomainError, DomainManager, ObjectHandle, ALLOC_ALIGN, PAGE_SIZE};
use rand::Rng;

pub struct IntervalOracle {
    units: Vec<Option<usize>>,
    live: HashMap<usize, (usize, usize)>,
    next_tag: usize,
}

impl IntervalOracle {
    pub fn new(capacity: usize) -> Self {
        IntervalOracle {
            units: vec![None; capacity / ALLOC_ALIGN],
            live: HashMap::new(),
            next_tag: 0,
        }
    }

    fn units_for(size: usize) -> usize {
        size.div_ceil(ALLOC_ALIGN)
    }

    /// Lowest byte offset with room for `size` bytes.
    pub fn first_fit(&self, size: usize) -> Option<usize> {
        let need = Self::units_for(size);
        let mut run = 0;
        for (i, u) in self.units.iter().enumerate() {
            run = if u.is_none() { run + 1 } else { 0 };
            if run == need {
                return Some((i + 1 - need) * ALLOC_ALIGN);
            }
        }
        None
    }

    /// Marks `[offset, offset+size)` used. Fails on any overlap with a live
    /// interval or on running past the end.
    pub fn occupy(&mut self, offset: usize, size: usize) -> Result<usize, String> {
        if offset % ALLOC_ALIGN != 0 {
            return Err(format!("offset {offset} is not aligned"));
        }
        let first = offset / ALLOC_ALIGN;
        let end = first + Self::units_for(size);
        if end > self.units.len() {
            return Err(format!("[{offset}, +{size}) runs past the pool"));
        }
        if let Some(owner) = self.units[first..end].iter().flatten().next() {
            return Err(format!("[{offset}, +{size}) overlaps live interval {owner}"));
        }
        let tag = self.next_tag;
        self.next_tag += 1;
        for u in &mut self.units[first..end] {
            *u = Some(tag);
        }
        self.live.insert(tag, (first, end));
        Ok(tag)
    }

    pub fn release(&mut self, tag: usize) {
        let (first, end) = self.live.remove(&tag).expect("live tag");
        for u in &mut self.units[first..end] {
            *u = None;
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AllocStats {
    pub allocs: usize,
    pub frees: usize,
    pub exhausted: usize,
}

fn pick_size(rng: &mut impl Rng, capacity: usize) -> usize {
    match rng.gen_range(0..100) {
        0..=69 => rng.gen_range(1..=256),
        70..=94 => rng.gen_range(257..=2048),
        _ => rng.gen_range(2049..=capacity + 64),
    }
}

/// Drives `ops` random alloc/free calls against domain `label` and checks
/// each against the oracle.
pub fn check_domain(
    mgr: &DomainManager,
    label: &str,
    ops: usize,
    rng: &mut impl Rng,
) -> Result<AllocStats, String> {
    let info = mgr.domain_info(label).map_err(|e| e.to_string())?;
    if info.capacity != info.pages * PAGE_SIZE {
        return Err(format!(
            "{label}: capacity {} is not {} pages",
            info.capacity, info.pages
        ));
    }
    let mut oracle = IntervalOracle::new(info.capacity);
    let mut live: Vec<(ObjectHandle, usize)> = Vec::new();
    let mut stats = AllocStats::default();
    for step in 0..ops {
        if live.is_empty() || rng.gen_bool(0.6) {
            let size = pick_size(rng, info.capacity);
            let expected = oracle.first_fit(size);
            match (mgr.domain_alloc(label, size), expected) {
                (Ok(h), Some(at)) => {
                    if h.offset() != at {
                        return Err(format!(
                            "{label} step {step}: size {size} placed at {}, first fit is {at}",
                            h.offset()
                        ));
                    }
                    if h.addr() != info.base + h.offset() || h.size() != size {
                        return Err(format!("{label} step {step}: inconsistent handle {h:?}"));
                    }
                    let tag = oracle
                        .occupy(h.offset(), size)
                        .map_err(|e| format!("{label} step {step}: {e}"))?;
                    live.push((h, tag));
                    stats.allocs += 1;
                }
                (Err(DomainError::PoolExhausted { .. }), None) => stats.exhausted += 1,
                (got, want) => {
                    return Err(format!(
                        "{label} step {step}: size {size}: got {got:?}, oracle expected {want:?}"
                    ))
                }
            }
        } else {
            let (h, tag) = live.swap_remove(rng.gen_range(0..live.len()));
            mgr.domain_free(label, &h)
                .map_err(|e| format!("{label} step {step}: free failed: {e}"))?;
            oracle.release(tag);
            stats.frees += 1;
        }
    }
    for (h, _) in live {
        mgr.domain_free(label, &h).map_err(|e| e.to_string())?;
    }
    let extents = mgr.free_extents(label).map_err(|e| e.to_string())?;
    if extents != vec![(0, info.capacity)] {
        return Err(format!("{label}: free list did not coalesce: {extents:?}"));
    }
    Ok(stats)
}
