//! Policy language: per-function object access rules and their compiled ACL.
//!
//! A policy is a line-oriented text file. Each rule names one function and two
//! comma-separated lists of object specifications:
//!
//! ```text
//! // read `key`, write `sig`, both in the `crypto` domain
//! key#crypto:32 > sign > sig#crypto:
//! ```
//!
//! The left list is granted read-only, the right list read-write. An object
//! specification is `<object>#<domain>:<size>`; the object label may be
//! omitted for a blanket grant on the whole domain, and the size may be
//! omitted to skip size verification for that object.
//!
//! Two declaration forms are accepted besides rules:
//!
//! ```text
//! domain fs_dom pages=8
//! object fd_table#handle_dom:2048
//! ```
//!
//! [`parse_policy`] produces an [`Acl`], [`serialize_acl`] renders it in the
//! canonical `ENCLAVEDOM-ACL v1` format and [`load_acl`] reads that format back.

mod canonical;
mod lint;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub use canonical::{load_acl, serialize_acl, ACL_HEADER};
pub use lint::{lint_policy, LintFinding, LintReport, Severity};
pub use parse::{parse_policy, parse_policy_with, ParseOptions, ParsedPolicy, SourceMap};

/// Current canonical format version.
pub const ACL_VERSION: u32 = 1;

/// Pages given to a domain that is referenced but never declared.
pub const DEFAULT_POOL_PAGES: u32 = 4;

/// Upper bound on `pages=` for a single domain.
pub const MAX_POOL_PAGES: u32 = 1024;

/// Key 0 tags untagged memory, leaving 15 keys for domains.
pub const MAX_DOMAINS: usize = 15;

pub const MAX_LABEL_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("line {line}, column {column}: syntax error: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: duplicate rule for function `{func}`")]
    DuplicateRule { line: usize, func: String },
    #[error("line {line}: domain `{domain}` declared twice")]
    DuplicateDomain { line: usize, domain: String },
    #[error("line {line}: object `{object}` placed in `{second}` but already lives in `{first}`")]
    ConflictingObjectDomain {
        line: usize,
        object: String,
        first: String,
        second: String,
    },
    #[error("line {line}: {count} domains referenced, at most {max} allowed", max = MAX_DOMAINS)]
    TooManyDomains { line: usize, count: usize },
    #[error("line {line}, column {column}: invalid label `{label}`")]
    BadLabel {
        line: usize,
        column: usize,
        label: String,
    },
    #[error("line {line}, column {column}: {message}")]
    BadSize {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported ACL version `{found}` (expected v{expected})", expected = ACL_VERSION)]
    VersionMismatch { found: String },
}

impl PolicyError {
    /// Stable identifier used in lint output and CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            PolicyError::Syntax { .. } => "SyntaxError",
            PolicyError::DuplicateRule { .. } => "DuplicateRule",
            PolicyError::DuplicateDomain { .. } => "DuplicateDomain",
            PolicyError::ConflictingObjectDomain { .. } => "ConflictingObjectDomain",
            PolicyError::TooManyDomains { .. } => "TooManyDomains",
            PolicyError::BadLabel { .. } => "BadLabel",
            PolicyError::BadSize { .. } => "BadSize",
            PolicyError::VersionMismatch { .. } => "VersionMismatch",
        }
    }

    /// Source line the error is anchored to, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            PolicyError::Syntax { line, .. }
            | PolicyError::DuplicateRule { line, .. }
            | PolicyError::DuplicateDomain { line, .. }
            | PolicyError::ConflictingObjectDomain { line, .. }
            | PolicyError::TooManyDomains { line, .. }
            | PolicyError::BadLabel { line, .. }
            | PolicyError::BadSize { line, .. } => Some(*line),
            PolicyError::VersionMismatch { .. } => None,
        }
    }
}

/// Returns true if `s` is a valid object, domain or function label.
pub fn is_valid_label(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    s.len() <= MAX_LABEL_LEN && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// One entry of a rule's input or output list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectSpec {
    /// `None` for a blanket grant on the whole domain.
    pub object_label: Option<String>,
    pub domain_label: String,
    /// `None` skips size verification.
    pub declared_size: Option<u64>,
}

impl ObjectSpec {
    pub fn object(object: &str, domain: &str, size: Option<u64>) -> Self {
        ObjectSpec {
            object_label: Some(object.to_string()),
            domain_label: domain.to_string(),
            declared_size: size,
        }
    }

    pub fn blanket(domain: &str) -> Self {
        ObjectSpec {
            object_label: None,
            domain_label: domain.to_string(),
            declared_size: None,
        }
    }

    pub fn is_blanket(&self) -> bool {
        self.object_label.is_none()
    }
}

impl fmt::Display for ObjectSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(obj) = &self.object_label {
            f.write_str(obj)?;
        }
        write!(f, "#{}:", self.domain_label)?;
        if let Some(size) = self.declared_size {
            write!(f, "{size}")?;
        }
        Ok(())
    }
}

/// `inputs > func_name > outputs`: inputs are read-only, outputs read-write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRule {
    pub func_name: String,
    pub inputs: Vec<ObjectSpec>,
    pub outputs: Vec<ObjectSpec>,
}

impl AccessRule {
    pub fn specs(&self) -> impl Iterator<Item = &ObjectSpec> {
        self.inputs.iter().chain(self.outputs.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainDecl {
    pub domain_label: String,
    pub pool_pages: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectDecl {
    pub object_label: String,
    pub domain_label: String,
    pub declared_size: Option<u64>,
}

/// A validated access control list.
///
/// Equality is structural over the canonical form: domains and objects are
/// compared as sets keyed by label, rules in order.
#[derive(Debug, Clone)]
pub struct Acl {
    pub version: u32,
    pub domains: Vec<DomainDecl>,
    pub objects: Vec<ObjectDecl>,
    pub rules: Vec<AccessRule>,
}

impl Default for Acl {
    fn default() -> Self {
        Acl {
            version: ACL_VERSION,
            domains: Vec::new(),
            objects: Vec::new(),
            rules: Vec::new(),
        }
    }
}

impl PartialEq for Acl {
    fn eq(&self, other: &Self) -> bool {
        fn domains(acl: &Acl) -> BTreeMap<&str, u32> {
            acl.domains
                .iter()
                .map(|d| (d.domain_label.as_str(), d.pool_pages))
                .collect()
        }
        fn objects(acl: &Acl) -> BTreeMap<&str, (&str, Option<u64>)> {
            acl.objects
                .iter()
                .map(|o| {
                    (
                        o.object_label.as_str(),
                        (o.domain_label.as_str(), o.declared_size),
                    )
                })
                .collect()
        }
        self.version == other.version
            && self.domains.len() == other.domains.len()
            && self.objects.len() == other.objects.len()
            && domains(self) == domains(other)
            && objects(self) == objects(other)
            && self.rules == other.rules
    }
}

impl Eq for Acl {}

impl Acl {
    pub fn domain(&self, label: &str) -> Option<&DomainDecl> {
        self.domains.iter().find(|d| d.domain_label == label)
    }

    pub fn object(&self, label: &str) -> Option<&ObjectDecl> {
        self.objects.iter().find(|o| o.object_label == label)
    }

    pub fn rule(&self, func: &str) -> Option<&AccessRule> {
        self.rules.iter().find(|r| r.func_name == func)
    }

    /// Renders the ACL back into policy source that parses to an equal ACL.
    pub fn to_policy_source(&self) -> String {
        let mut out = String::new();
        for d in &self.domains {
            out.push_str(&format!("domain {} pages={}\n", d.domain_label, d.pool_pages));
        }
        let in_rules: BTreeSet<&str> = self
            .rules
            .iter()
            .flat_map(|r| r.specs())
            .filter_map(|s| s.object_label.as_deref())
            .collect();
        for o in &self.objects {
            if !in_rules.contains(o.object_label.as_str()) {
                let spec = ObjectSpec::object(&o.object_label, &o.domain_label, o.declared_size);
                out.push_str(&format!("object {spec}\n"));
            }
        }
        for r in &self.rules {
            let join = |specs: &[ObjectSpec]| {
                specs
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            out.push_str(&format!("{} > {} > {}\n", join(&r.inputs), r.func_name, join(&r.outputs)));
        }
        out
    }
}
