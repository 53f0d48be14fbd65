use rand::seq::SliceRandom;
use rand::Rng;

struct Obj {
    label: String,
    domain: usize,
    size: Option<u64>,
}

fn spec(rng: &mut impl Rng, objects: &[Obj], domains: &[String]) -> String {
    if rng.gen_bool(0.15) {
        return format!("#{}:", domains.choose(rng).unwrap());
    }
    let o = objects.choose(rng).unwrap();
    let size = match o.size {
        Some(s) if rng.gen_bool(0.7) => s.to_string(),
        _ => String::new(),
    };
    format!("{}#{}:{size}", o.label, domains[o.domain])
}

fn side(rng: &mut impl Rng, objects: &[Obj], domains: &[String]) -> String {
    let n = rng.gen_range(0..=3);
    let sep = if rng.gen_bool(0.5) { "," } else { ", " };
    (0..n)
        .map(|_| spec(rng, objects, domains))
        .collect::<Vec<_>>()
        .join(sep)
}

/// A random well-formed policy with exactly `rules` rules.
pub fn random_policy(rng: &mut impl Rng, rules: usize) -> String {
    let ndom = rng.gen_range(1..=6);
    let domains: Vec<String> = (0..ndom)
        .map(|i| format!("d{i}_{}", rng.gen_range(0..100)))
        .collect();
    let objects: Vec<Obj> = (0..rng.gen_range(1..=10))
        .map(|i| Obj {
            label: format!("obj{i}"),
            domain: rng.gen_range(0..ndom),
            size: rng.gen_bool(0.6).then(|| rng.gen_range(1..=2048)),
        })
        .collect();

    let mut out = String::new();
    if rng.gen_bool(0.5) {
        out.push_str("// generated\n\n");
    }
    for d in &domains {
        match rng.gen_range(0..3) {
            0 => out.push_str(&format!("domain {d}\n")),
            1 => out.push_str(&format!("domain {d} pages={}\n", rng.gen_range(1..=8))),
            _ => {}
        }
    }
    for o in &objects {
        if rng.gen_bool(0.2) {
            let size = o.size.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("object {}#{}:{size}\n", o.label, domains[o.domain]));
        }
    }
    for i in 0..rules {
        let inputs = side(rng, &objects, &domains);
        let outputs = side(rng, &objects, &domains);
        let comment = if rng.gen_bool(0.1) { "  // note" } else { "" };
        out.push_str(&format!("{inputs} > fn{i} > {outputs}{comment}\n"));
    }
    out
}

/// A policy whose shape grows with `rules` only: four domains, eight
/// objects, one rule per function.
pub fn scaled_policy(rules: usize) -> String {
    let mut out = String::new();
    for i in 0..rules {
        let a = i % 8;
        let b = (i + 1) % 8;
        out.push_str(&format!(
            "o{a}#d{}:64 > f{i} > o{b}#d{}:64\n",
            a % 4,
            b % 4
        ));
    }
    out
}

/// Functions named in the rules of `acl`, in order.
pub fn rule_functions(acl: &memdom::policy::Acl) -> Vec<String> {
    acl.rules.iter().map(|r| r.func_name.clone()).collect()
}
