use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::{parse_policy_with, ParseOptions};
use crate::domain::PAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LintFinding {
    pub severity: Severity,
    pub code: String,
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct LintReport {
    pub findings: Vec<LintFinding>,
}

impl LintReport {
    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn codes(&self) -> Vec<&str> {
        self.findings.iter().map(|f| f.code.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lint findings are always serializable")
    }

    fn warn(&mut self, code: &str, line: usize, message: String) {
        self.findings.push(LintFinding {
            severity: Severity::Warn,
            code: code.to_string(),
            line: Some(line),
            message,
        });
    }
}

/// Parses `source` and reports policy smells. Parse failures become a single
/// error finding.
pub fn lint_policy(source: &str, opts: &ParseOptions) -> LintReport {
    let mut report = LintReport::default();
    let parsed = match parse_policy_with(source, opts) {
        Ok(p) => p,
        Err(e) => {
            report.findings.push(LintFinding {
                severity: Severity::Error,
                code: e.code().to_string(),
                line: e.line(),
                message: e.to_string(),
            });
            return report;
        }
    };
    let acl = &parsed.acl;
    let map = &parsed.source_map;

    // Declared sizes per domain against pool capacity.
    let mut declared: BTreeMap<&str, u64> = BTreeMap::new();
    for o in &acl.objects {
        if let Some(size) = o.declared_size {
            *declared.entry(o.domain_label.as_str()).or_default() += size;
        }
    }
    for d in &acl.domains {
        let capacity = u64::from(d.pool_pages) * PAGE_SIZE as u64;
        let total = declared.get(d.domain_label.as_str()).copied().unwrap_or(0);
        if total > capacity {
            report.warn(
                "CapacityWarn",
                map.domains[&d.domain_label],
                format!(
                    "objects in `{}` declare {total} bytes but the pool holds {capacity} ({} pages)",
                    d.domain_label, d.pool_pages
                ),
            );
        }
    }

    let referenced: HashSet<&str> = acl
        .rules
        .iter()
        .flat_map(|r| r.specs())
        .filter_map(|s| s.object_label.as_deref())
        .collect();
    for o in &acl.objects {
        if !referenced.contains(o.object_label.as_str()) {
            report.warn(
                "UnusedObject",
                map.objects[&o.object_label],
                format!("object `{}` is not mentioned by any rule", o.object_label),
            );
        }
    }

    for (rule, &line) in acl.rules.iter().zip(&map.rules) {
        let blanket_ro: HashSet<&str> = rule
            .inputs
            .iter()
            .filter(|s| s.is_blanket())
            .map(|s| s.domain_label.as_str())
            .collect();
        let blanket_rw: HashSet<&str> = rule
            .outputs
            .iter()
            .filter(|s| s.is_blanket())
            .map(|s| s.domain_label.as_str())
            .collect();
        let mut reported = HashSet::new();
        for (spec, writable) in rule
            .inputs
            .iter()
            .map(|s| (s, false))
            .chain(rule.outputs.iter().map(|s| (s, true)))
        {
            let Some(obj) = &spec.object_label else {
                continue;
            };
            let dom = spec.domain_label.as_str();
            let shadowed = blanket_rw.contains(dom) || (!writable && blanket_ro.contains(dom));
            if shadowed && reported.insert(("shadow", obj.as_str())) {
                report.warn(
                    "ShadowedObjectGrant",
                    line,
                    format!(
                        "`{}`: grant on `{obj}` is redundant with the blanket grant on `{dom}`",
                        rule.func_name
                    ),
                );
            } else if writable
                && blanket_ro.contains(dom)
                && !blanket_rw.contains(dom)
                && reported.insert(("mixed", dom))
            {
                report.warn(
                    "MixedBlanketRw",
                    line,
                    format!(
                        "`{}`: blanket read-only grant on `{dom}` is widened to read-write by `{obj}`",
                        rule.func_name
                    ),
                );
            }
        }
    }

    report
}
