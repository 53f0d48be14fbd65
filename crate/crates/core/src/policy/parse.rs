use std::collections::{HashMap, HashSet};

use super::{
    is_valid_label, AccessRule, Acl, DomainDecl, ObjectDecl, ObjectSpec, PolicyError,
    ACL_VERSION, DEFAULT_POOL_PAGES, MAX_DOMAINS, MAX_POOL_PAGES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    /// Pool size for every domain without an explicit `pages=`.
    pub default_pages: u32,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            default_pages: DEFAULT_POOL_PAGES,
        }
    }
}

/// Line numbers (1-based) of the constructs that produced an [`Acl`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceMap {
    /// Declaration line, or first reference for implicit domains.
    pub domains: HashMap<String, usize>,
    /// First line mentioning each object.
    pub objects: HashMap<String, usize>,
    /// Line of each rule, parallel to `Acl::rules`.
    pub rules: Vec<usize>,
    pub explicit_domains: HashSet<String>,
}

#[derive(Debug, Clone)]
pub struct ParsedPolicy {
    pub acl: Acl,
    pub source_map: SourceMap,
}

/// Parses policy source with the default pool size for implicit domains.
pub fn parse_policy(source: &str) -> Result<Acl, PolicyError> {
    parse_policy_with(source, &ParseOptions::default()).map(|p| p.acl)
}

pub fn parse_policy_with(source: &str, opts: &ParseOptions) -> Result<ParsedPolicy, PolicyError> {
    let mut b = Builder::default();
    for (idx, raw) in source.split('\n').enumerate() {
        let line_no = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let line = match raw.find("//") {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        if line.trim().is_empty() {
            continue;
        }
        let cx = Line { text: raw, no: line_no };
        if line.contains('>') {
            b.rule(&cx, line)?;
        } else {
            let trimmed = line.trim_start();
            let start = line.len() - trimmed.len();
            let keyword = trimmed.split_whitespace().next().unwrap_or("");
            match keyword {
                "domain" => b.domain_decl(&cx, line, start)?,
                "object" => b.object_decl(&cx, line, start)?,
                _ => {
                    return Err(cx.syntax(start, "expected a rule, `domain` or `object` declaration"))
                }
            }
        }
    }
    b.finish(opts)
}

struct Line<'a> {
    text: &'a str,
    no: usize,
}

impl Line<'_> {
    /// 1-based character column of byte offset `at`.
    fn column(&self, at: usize) -> usize {
        self.text[..at.min(self.text.len())].chars().count() + 1
    }

    fn syntax(&self, at: usize, message: impl Into<String>) -> PolicyError {
        PolicyError::Syntax {
            line: self.no,
            column: self.column(at),
            message: message.into(),
        }
    }

    fn bad_label(&self, at: usize, label: &str) -> PolicyError {
        PolicyError::BadLabel {
            line: self.no,
            column: self.column(at),
            label: label.to_string(),
        }
    }

    fn bad_size(&self, at: usize, message: impl Into<String>) -> PolicyError {
        PolicyError::BadSize {
            line: self.no,
            column: self.column(at),
            message: message.into(),
        }
    }

    fn label<'s>(&self, s: &'s str, at: usize) -> Result<&'s str, PolicyError> {
        if is_valid_label(s) {
            Ok(s)
        } else {
            Err(self.bad_label(at, s))
        }
    }

    fn uint(&self, s: &str, at: usize) -> Result<u64, PolicyError> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.syntax(at, format!("expected an unsigned integer, found `{s}`")));
        }
        s.parse::<u64>()
            .map_err(|_| self.bad_size(at, format!("`{s}` does not fit in 64 bits")))
    }
}

/// Splits `s` on `sep`, yielding each piece with its byte offset in `s`.
fn split_with_offsets(s: &str, sep: char) -> impl Iterator<Item = (usize, &str)> {
    let mut start = 0;
    s.split(sep).map(move |piece| {
        let at = start;
        start += piece.len() + sep.len_utf8();
        (at, piece)
    })
}

/// Trims whitespace, returning the new offset along with the slice.
fn trim_at(s: &str, at: usize) -> (usize, &str) {
    let t = s.trim_start();
    (at + s.len() - t.len(), t.trim_end())
}

#[derive(Default)]
struct Builder {
    explicit: Vec<DomainDecl>,
    implicit: Vec<String>,
    known_domains: HashSet<String>,
    objects: Vec<ObjectDecl>,
    object_index: HashMap<String, usize>,
    rules: Vec<AccessRule>,
    rule_names: HashSet<String>,
    map: SourceMap,
}

impl Builder {
    fn rule(&mut self, cx: &Line<'_>, line: &str) -> Result<(), PolicyError> {
        let arrows: Vec<usize> = line.match_indices('>').map(|(i, _)| i).collect();
        if arrows.len() != 2 {
            let at = arrows.get(2).copied().unwrap_or(line.len());
            return Err(cx.syntax(at, "a rule has the form `inputs > function > outputs`"));
        }
        let (first, second) = (arrows[0], arrows[1]);
        let (func_at, func) = trim_at(&line[first + 1..second], first + 1);
        if func.is_empty() {
            return Err(cx.syntax(func_at, "missing function name"));
        }
        let func = cx.label(func, func_at)?.to_string();
        let inputs = self.objlist(cx, &line[..first], 0)?;
        let outputs = self.objlist(cx, &line[second + 1..], second + 1)?;
        if !self.rule_names.insert(func.clone()) {
            return Err(PolicyError::DuplicateRule { line: cx.no, func });
        }
        self.map.rules.push(cx.no);
        self.rules.push(AccessRule {
            func_name: func,
            inputs,
            outputs,
        });
        Ok(())
    }

    fn objlist(&mut self, cx: &Line<'_>, s: &str, at: usize) -> Result<Vec<ObjectSpec>, PolicyError> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        let mut specs = Vec::new();
        for (off, piece) in split_with_offsets(s, ',') {
            let (spec_at, text) = trim_at(piece, at + off);
            if text.is_empty() {
                return Err(cx.syntax(spec_at, "empty object specification"));
            }
            let spec = parse_objspec(cx, text, spec_at)?;
            self.register(cx, &spec, spec_at)?;
            specs.push(spec);
        }
        Ok(specs)
    }

    fn domain_decl(&mut self, cx: &Line<'_>, line: &str, start: usize) -> Result<(), PolicyError> {
        let tokens: Vec<(usize, &str)> = split_with_offsets(line, ' ')
            .flat_map(|(at, piece)| split_with_offsets(piece, '\t').map(move |(o, p)| (at + o, p)))
            .filter(|(_, t)| !t.is_empty())
            .collect();
        if tokens.len() < 2 || tokens.len() > 3 || tokens[0].1 != "domain" {
            return Err(cx.syntax(start, "expected `domain <label> [pages=<n>]`"));
        }
        let (label_at, label) = tokens[1];
        let label = cx.label(label, label_at)?.to_string();
        let pages = match tokens.get(2) {
            None => None,
            Some(&(at, tok)) => {
                let Some(n) = tok.strip_prefix("pages=") else {
                    return Err(cx.syntax(at, format!("expected `pages=<n>`, found `{tok}`")));
                };
                let n = cx.uint(n, at + "pages=".len())?;
                if n < 1 || n > u64::from(MAX_POOL_PAGES) {
                    return Err(cx.bad_size(
                        at,
                        format!("pool size must be between 1 and {MAX_POOL_PAGES} pages, got {n}"),
                    ));
                }
                Some(n as u32)
            }
        };
        if self.explicit.iter().any(|d| d.domain_label == label) {
            return Err(PolicyError::DuplicateDomain {
                line: cx.no,
                domain: label,
            });
        }
        if self.known_domains.insert(label.clone()) {
            self.check_domain_count(cx)?;
            self.map.domains.insert(label.clone(), cx.no);
        } else {
            // referenced earlier, declared now
            self.implicit.retain(|d| *d != label);
        }
        self.map.explicit_domains.insert(label.clone());
        self.explicit.push(DomainDecl {
            domain_label: label,
            pool_pages: pages.unwrap_or(0),
        });
        Ok(())
    }

    fn object_decl(&mut self, cx: &Line<'_>, line: &str, start: usize) -> Result<(), PolicyError> {
        let rest_at = start + "object".len();
        let (spec_at, text) = trim_at(&line[rest_at..], rest_at);
        if text.is_empty() || !line[start..].starts_with("object") || spec_at == rest_at {
            return Err(cx.syntax(start, "expected `object <label>#<domain>:[size]`"));
        }
        let spec = parse_objspec(cx, text, spec_at)?;
        if spec.is_blanket() {
            return Err(cx.syntax(spec_at, "object declaration needs an object label"));
        }
        self.register(cx, &spec, spec_at)
    }

    fn register(&mut self, cx: &Line<'_>, spec: &ObjectSpec, at: usize) -> Result<(), PolicyError> {
        if self.known_domains.insert(spec.domain_label.clone()) {
            self.check_domain_count(cx)?;
            self.implicit.push(spec.domain_label.clone());
            self.map.domains.insert(spec.domain_label.clone(), cx.no);
        }
        let Some(obj) = &spec.object_label else {
            return Ok(());
        };
        match self.object_index.get(obj) {
            None => {
                self.object_index.insert(obj.clone(), self.objects.len());
                self.map.objects.insert(obj.clone(), cx.no);
                self.objects.push(ObjectDecl {
                    object_label: obj.clone(),
                    domain_label: spec.domain_label.clone(),
                    declared_size: spec.declared_size,
                });
            }
            Some(&i) => {
                let existing = &mut self.objects[i];
                if existing.domain_label != spec.domain_label {
                    return Err(PolicyError::ConflictingObjectDomain {
                        line: cx.no,
                        object: obj.clone(),
                        first: existing.domain_label.clone(),
                        second: spec.domain_label.clone(),
                    });
                }
                match (existing.declared_size, spec.declared_size) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(cx.bad_size(
                            at,
                            format!("object `{obj}` declared with sizes {a} and {b}"),
                        ))
                    }
                    (None, Some(b)) => existing.declared_size = Some(b),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn check_domain_count(&self, cx: &Line<'_>) -> Result<(), PolicyError> {
        let count = self.known_domains.len();
        if count > MAX_DOMAINS {
            return Err(PolicyError::TooManyDomains { line: cx.no, count });
        }
        Ok(())
    }

    fn finish(mut self, opts: &ParseOptions) -> Result<ParsedPolicy, PolicyError> {
        // Every spec of an object carries the object's single declared size.
        let sizes: HashMap<&str, Option<u64>> = self
            .objects
            .iter()
            .map(|o| (o.object_label.as_str(), o.declared_size))
            .collect();
        for rule in &mut self.rules {
            for spec in rule.inputs.iter_mut().chain(rule.outputs.iter_mut()) {
                if let Some(obj) = &spec.object_label {
                    spec.declared_size = sizes[obj.as_str()];
                }
            }
        }
        let mut domains = self.explicit;
        for d in &mut domains {
            if d.pool_pages == 0 {
                d.pool_pages = opts.default_pages;
            }
        }
        domains.extend(self.implicit.into_iter().map(|label| DomainDecl {
            domain_label: label,
            pool_pages: opts.default_pages,
        }));
        Ok(ParsedPolicy {
            acl: Acl {
                version: ACL_VERSION,
                domains,
                objects: self.objects,
                rules: self.rules,
            },
            source_map: self.map,
        })
    }
}

fn parse_objspec(cx: &Line<'_>, text: &str, at: usize) -> Result<ObjectSpec, PolicyError> {
    if let Some(ws) = text.find(char::is_whitespace) {
        return Err(cx.syntax(at + ws, "whitespace inside an object specification"));
    }
    let Some(hash) = text.find('#') else {
        return Err(cx.syntax(at, format!("expected `<object>#<domain>:[size]`, found `{text}`")));
    };
    let obj = &text[..hash];
    let rest = &text[hash + 1..];
    let Some(colon) = rest.find(':') else {
        return Err(cx.syntax(at + text.len(), "missing `:` after domain label"));
    };
    let dom = &rest[..colon];
    let size = &rest[colon + 1..];
    let dom_at = at + hash + 1;
    let size_at = dom_at + colon + 1;

    let object_label = if obj.is_empty() {
        None
    } else {
        Some(cx.label(obj, at)?.to_string())
    };
    let domain_label = cx.label(dom, dom_at)?.to_string();
    let declared_size = if size.is_empty() {
        None
    } else {
        let n = cx.uint(size, size_at)?;
        if n == 0 {
            return Err(cx.bad_size(size_at, "object size must be greater than zero"));
        }
        if object_label.is_none() {
            return Err(cx.bad_size(size_at, "a blanket domain grant cannot carry a size"));
        }
        Some(n)
    };
    Ok(ObjectSpec {
        object_label,
        domain_label,
        declared_size,
    })
}
