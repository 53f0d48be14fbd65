use std::collections::{BTreeSet, HashMap};
use std::mem::size_of;

use super::MonitorError;
use crate::domain::{AccessMode, DomainManager, KeyId};
use crate::policy::Acl;

/// Compiled access of one function.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grant {
    pub ro_keys: BTreeSet<KeyId>,
    pub rw_keys: BTreeSet<KeyId>,
    /// Objects named by the rule that carry a declared size.
    pub sized_objects: Vec<(String, u64)>,
}

impl Grant {
    pub fn mode_for(&self, key: KeyId) -> AccessMode {
        if self.rw_keys.contains(&key) {
            AccessMode::ReadWrite
        } else if self.ro_keys.contains(&key) {
            AccessMode::ReadOnly
        } else {
            AccessMode::None
        }
    }
}

/// Function name to grant, immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct GrantTable {
    entries: HashMap<String, Grant>,
}

impl GrantTable {
    pub fn build(acl: &Acl, manager: &DomainManager) -> Result<Self, MonitorError> {
        let mut entries = HashMap::with_capacity(acl.rules.len());
        for rule in &acl.rules {
            let mut grant = Grant::default();
            for spec in &rule.inputs {
                grant.ro_keys.insert(manager.key_of(&spec.domain_label)?);
            }
            for spec in &rule.outputs {
                grant.rw_keys.insert(manager.key_of(&spec.domain_label)?);
            }
            // One key cannot hold two modes; read-write wins.
            grant.ro_keys.retain(|k| !grant.rw_keys.contains(k));
            for spec in rule.specs() {
                if let (Some(obj), Some(size)) = (&spec.object_label, spec.declared_size) {
                    if !grant.sized_objects.iter().any(|(o, _)| o == obj) {
                        grant.sized_objects.push((obj.clone(), size));
                    }
                }
            }
            entries.insert(rule.func_name.clone(), grant);
        }
        Ok(GrantTable { entries })
    }

    pub fn get(&self, func: &str) -> Option<&Grant> {
        self.entries.get(func)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn functions(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn entry_bytes(func: &str, g: &Grant) -> usize {
        size_of::<(String, Grant)>()
            + func.len()
            + (g.ro_keys.len() + g.rw_keys.len()) * size_of::<KeyId>()
            + g.sized_objects
                .iter()
                .map(|(o, _)| size_of::<(String, u64)>() + o.len())
                .sum::<usize>()
    }

    /// Bytes of monitor memory held by the table.
    pub fn bookkeeping_bytes(&self) -> usize {
        size_of::<Self>()
            + self
                .entries
                .iter()
                .map(|(f, g)| Self::entry_bytes(f, g))
                .sum::<usize>()
    }

    /// Portion of [`Self::bookkeeping_bytes`] that exists because of `key`:
    /// key-set slots naming it.
    pub fn bytes_for_key(&self, key: KeyId) -> usize {
        self.entries
            .values()
            .map(|g| {
                usize::from(g.ro_keys.contains(&key) || g.rw_keys.contains(&key)) * size_of::<KeyId>()
            })
            .sum()
    }
}
