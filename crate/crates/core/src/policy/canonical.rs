//! Canonical ACL artifact.
//!
//! ```text
//! ENCLAVEDOM-ACL v1
//! domain <label> pages=<n>                    (sorted by label)
//! object <label> domain=<label> size=<n|*>    (sorted by label)
//! rule func=<name> ro=<list> rw=<list>        (policy order)
//! ```
//!
//! A list is `-` when empty, otherwise comma-separated object labels and
//! `*<domain>` blanket entries in policy order. Every line ends with LF.

use std::collections::{HashMap, HashSet};

use super::{
    is_valid_label, AccessRule, Acl, DomainDecl, ObjectDecl, ObjectSpec, PolicyError,
    ACL_VERSION, MAX_DOMAINS, MAX_POOL_PAGES,
};

pub const ACL_HEADER: &str = "ENCLAVEDOM-ACL v1";

const HEADER_PREFIX: &str = "ENCLAVEDOM-ACL ";

pub fn serialize_acl(acl: &Acl) -> Vec<u8> {
    let mut out = String::with_capacity(64 + 48 * (acl.rules.len() + acl.objects.len()));
    out.push_str(ACL_HEADER);
    out.push('\n');

    let mut domains: Vec<&DomainDecl> = acl.domains.iter().collect();
    domains.sort_by(|a, b| a.domain_label.cmp(&b.domain_label));
    for d in domains {
        out.push_str(&format!("domain {} pages={}\n", d.domain_label, d.pool_pages));
    }

    let mut objects: Vec<&ObjectDecl> = acl.objects.iter().collect();
    objects.sort_by(|a, b| a.object_label.cmp(&b.object_label));
    for o in objects {
        let size = o
            .declared_size
            .map_or_else(|| "*".to_string(), |n| n.to_string());
        out.push_str(&format!(
            "object {} domain={} size={}\n",
            o.object_label, o.domain_label, size
        ));
    }

    for r in &acl.rules {
        out.push_str(&format!(
            "rule func={} ro={} rw={}\n",
            r.func_name,
            render_list(&r.inputs),
            render_list(&r.outputs)
        ));
    }
    out.into_bytes()
}

fn render_list(specs: &[ObjectSpec]) -> String {
    if specs.is_empty() {
        return "-".to_string();
    }
    specs
        .iter()
        .map(|s| match &s.object_label {
            Some(obj) => obj.clone(),
            None => format!("*{}", s.domain_label),
        })
        .collect::<Vec<_>>()
        .join(",")
}

pub fn load_acl(bytes: &[u8]) -> Result<Acl, PolicyError> {
    let text = std::str::from_utf8(bytes).map_err(|e| syntax(1, 1, format!("not UTF-8: {e}")))?;
    if text.is_empty() {
        return Err(syntax(1, 1, "empty input"));
    }
    let Some(body) = text.strip_suffix('\n') else {
        let line = text.split('\n').count();
        return Err(syntax(line, 1, "truncated input: missing final newline"));
    };
    let mut lines = body.split('\n').enumerate().map(|(i, l)| (i + 1, l));

    let (_, header) = lines.next().expect("split yields at least one item");
    if header != ACL_HEADER {
        return match header.strip_prefix(HEADER_PREFIX) {
            Some(found) => Err(PolicyError::VersionMismatch {
                found: found.to_string(),
            }),
            None => Err(syntax(1, 1, format!("expected `{ACL_HEADER}`"))),
        };
    }

    let mut acl = Acl {
        version: ACL_VERSION,
        ..Acl::default()
    };
    let mut domain_set = HashSet::new();
    let mut object_map: HashMap<String, usize> = HashMap::new();
    let mut funcs = HashSet::new();
    let mut section = 0;

    for (no, line) in lines {
        let mut fields = line.split(' ');
        let kind = fields.next().unwrap_or("");
        let fields: Vec<&str> = fields.collect();
        let rank = match kind {
            "domain" => 0,
            "object" => 1,
            "rule" => 2,
            _ => return Err(syntax(no, 1, format!("unexpected line `{line}`"))),
        };
        if rank < section {
            return Err(syntax(no, 1, format!("`{kind}` line out of section order")));
        }
        section = rank;
        match kind {
            "domain" => {
                let [label, pages] = expect_fields(no, line, &fields)?;
                let label = label_at(no, line, label)?;
                let pages = keyed(no, line, pages, "pages=")?;
                let n = uint(no, line, pages)?;
                if n < 1 || n > u64::from(MAX_POOL_PAGES) {
                    return Err(PolicyError::BadSize {
                        line: no,
                        column: col(line, pages),
                        message: format!("pool size {n} out of range"),
                    });
                }
                if !domain_set.insert(label.to_string()) {
                    return Err(PolicyError::DuplicateDomain {
                        line: no,
                        domain: label.to_string(),
                    });
                }
                if domain_set.len() > MAX_DOMAINS {
                    return Err(PolicyError::TooManyDomains {
                        line: no,
                        count: domain_set.len(),
                    });
                }
                acl.domains.push(DomainDecl {
                    domain_label: label.to_string(),
                    pool_pages: n as u32,
                });
            }
            "object" => {
                let [label, domain, size] = expect_fields(no, line, &fields)?;
                let label = label_at(no, line, label)?;
                let domain = label_at(no, line, keyed(no, line, domain, "domain=")?)?;
                let size = keyed(no, line, size, "size=")?;
                let declared_size = if size == "*" {
                    None
                } else {
                    match uint(no, line, size)? {
                        0 => {
                            return Err(PolicyError::BadSize {
                                line: no,
                                column: col(line, size),
                                message: "object size must be greater than zero".into(),
                            })
                        }
                        n => Some(n),
                    }
                };
                if !domain_set.contains(domain) {
                    return Err(syntax(no, col(line, domain), format!("unknown domain `{domain}`")));
                }
                if object_map.contains_key(label) {
                    return Err(syntax(no, col(line, label), format!("object `{label}` listed twice")));
                }
                object_map.insert(label.to_string(), acl.objects.len());
                acl.objects.push(ObjectDecl {
                    object_label: label.to_string(),
                    domain_label: domain.to_string(),
                    declared_size,
                });
            }
            _ => {
                let [func, ro, rw] = expect_fields(no, line, &fields)?;
                let func = label_at(no, line, keyed(no, line, func, "func=")?)?;
                let inputs = parse_list(no, line, keyed(no, line, ro, "ro=")?, &acl, &object_map, &domain_set)?;
                let outputs = parse_list(no, line, keyed(no, line, rw, "rw=")?, &acl, &object_map, &domain_set)?;
                if !funcs.insert(func.to_string()) {
                    return Err(PolicyError::DuplicateRule {
                        line: no,
                        func: func.to_string(),
                    });
                }
                acl.rules.push(AccessRule {
                    func_name: func.to_string(),
                    inputs,
                    outputs,
                });
            }
        }
    }
    Ok(acl)
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> PolicyError {
    PolicyError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

/// Column of `part`, which must be a subslice of `line`.
fn col(line: &str, part: &str) -> usize {
    let offset = (part.as_ptr() as usize).saturating_sub(line.as_ptr() as usize);
    line[..offset.min(line.len())].chars().count() + 1
}

fn expect_fields<'a, const N: usize>(
    no: usize,
    line: &str,
    fields: &[&'a str],
) -> Result<[&'a str; N], PolicyError> {
    <[&str; N]>::try_from(fields)
        .map_err(|_| syntax(no, 1, format!("expected {N} fields after the keyword in `{line}`")))
}

fn keyed<'a>(no: usize, line: &str, field: &'a str, key: &str) -> Result<&'a str, PolicyError> {
    field
        .strip_prefix(key)
        .ok_or_else(|| syntax(no, col(line, field), format!("expected `{key}...`, found `{field}`")))
}

fn label_at<'a>(no: usize, line: &str, s: &'a str) -> Result<&'a str, PolicyError> {
    if is_valid_label(s) {
        Ok(s)
    } else {
        Err(PolicyError::BadLabel {
            line: no,
            column: col(line, s),
            label: s.to_string(),
        })
    }
}

fn uint(no: usize, line: &str, s: &str) -> Result<u64, PolicyError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(syntax(no, col(line, s), format!("expected an unsigned integer, found `{s}`")));
    }
    s.parse().map_err(|_| PolicyError::BadSize {
        line: no,
        column: col(line, s),
        message: format!("`{s}` does not fit in 64 bits"),
    })
}

fn parse_list(
    no: usize,
    line: &str,
    list: &str,
    acl: &Acl,
    objects: &HashMap<String, usize>,
    domains: &HashSet<String>,
) -> Result<Vec<ObjectSpec>, PolicyError> {
    if list == "-" {
        return Ok(Vec::new());
    }
    list.split(',')
        .map(|item| {
            if let Some(domain) = item.strip_prefix('*') {
                let domain = label_at(no, line, domain)?;
                if !domains.contains(domain) {
                    return Err(syntax(no, col(line, domain), format!("unknown domain `{domain}`")));
                }
                Ok(ObjectSpec::blanket(domain))
            } else {
                let label = label_at(no, line, item)?;
                let &idx = objects
                    .get(label)
                    .ok_or_else(|| syntax(no, col(line, label), format!("unknown object `{label}`")))?;
                let o = &acl.objects[idx];
                Ok(ObjectSpec::object(&o.object_label, &o.domain_label, o.declared_size))
            }
        })
        .collect()
}
