//! Acceptance suite. Runs each criterion at its pinned size and time budget
//! and prints one PASS/FAIL line per criterion.

mod common;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use memdom::bench::{run_syscall_bench, BenchConfig, REFERENCE_DOMAIN_BYTES, REFERENCE_TOTAL_BYTES};
use memdom::domain::backend::pkey_available;
use memdom::domain::{BackendChoice, DomainManager};
use memdom::minios::adversary::{run_attack, AttackOutcome, AttackVariant};
use memdom::minios::{MiniOs, Mode, FD_TABLE, POLICY_SOURCE};
use memdom::monitor::{Monitor, MonitorError};
use memdom::policy::{load_acl, parse_policy, serialize_acl, ObjectSpec};

use common::policies::random_policy;
use common::{alloc_oracle, frames, matrix, traces, workload};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn attack_line(mode: &str, backend: &str) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_minios-demo"))
        .args(["run-attack", "--mode", mode, "--backend", backend])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn case_study() -> Outcome {
    let mut backends = vec!["checked", "pageprot"];
    if pkey_available() {
        backends.push("pkey");
    }
    for backend in &backends {
        let v = attack_line("vanilla", backend)?;
        ensure(v.starts_with("outcome=Succeeded"), || format!("{backend} vanilla: {v}"))?;
        let p = attack_line("protected", backend)?;
        ensure(p.starts_with("outcome=Denied"), || format!("{backend} protected: {p}"))?;
        if *backend != "checked" {
            ensure(p.contains("SIGSEGV"), || format!("{backend}: child did not fault: {p}"))?;
        }
    }
    Ok(format!("vanilla Succeeded, protected Denied on {}", backends.join("/")))
}

fn default_deny() -> Outcome {
    let os = MiniOs::boot(BackendChoice::Checked, Mode::Protected).map_err(|e| e.to_string())?;
    let n = matrix::check(os.monitor())?;
    ensure(n == 40, || format!("{n} assertions"))?;
    Ok(format!("{n} assertions"))
}

fn confused_deputy() -> Outcome {
    let os = MiniOs::boot(BackendChoice::Checked, Mode::Protected).map_err(|e| e.to_string())?;
    let m = os.monitor();
    let body = |m: &Monitor| m.write_object(FD_TABLE, 0, &[0; 32]);
    let raw = body(m);
    ensure(raw.as_ref().is_err_and(MonitorError::is_isolation_fault), || {
        format!("raw body: {raw:?}")
    })?;
    let wrapped = m.sandboxed_call("close", || body(m)).map_err(|e| e.to_string())?;
    ensure(wrapped.is_ok(), || format!("wrapped body: {wrapped:?}"))?;

    let fresh = MiniOs::boot(BackendChoice::Checked, Mode::Protected).map_err(|e| e.to_string())?;
    let r = run_attack(&fresh, AttackVariant::HijackedClose).map_err(|e| e.to_string())?;
    ensure(r.outcome == AttackOutcome::Denied && r.table_unchanged, || format!("{r:?}"))?;
    Ok("2 scenarios denied".into())
}

fn table_rows() -> Outcome {
    let source = "\
key#crypto:32 > verify >
> keygen > key#crypto:32,pub#public:
#crypto: > audit >
blob#public: > digest > out#public:16
object other#crypto:8
";
    let acl = parse_policy(source).map_err(|e| e.to_string())?;
    let m = Monitor::new(&acl, BackendChoice::Checked).map_err(|e| e.to_string())?;
    for o in ["key", "pub", "blob", "out", "other"] {
        m.alloc_object(o, Some(8)).map_err(|e| e.to_string())?;
    }
    let probe = |f: &str, o: &str| m.sandboxed_call(f, || matrix::probe(&m, o)).unwrap();
    use memdom::domain::AccessMode::*;

    let verify = acl.rule("verify").unwrap();
    ensure(verify.outputs.is_empty() && probe("verify", "key") == ReadOnly, || {
        "no writable objects: key must be read-only".into()
    })?;
    let keygen = acl.rule("keygen").unwrap();
    ensure(
        keygen.inputs.is_empty() && probe("keygen", "key") == ReadWrite && probe("keygen", "pub") == ReadWrite,
        || "all writable objects: key and pub must be read-write".into(),
    )?;
    let audit = acl.rule("audit").unwrap();
    ensure(
        audit.inputs == [ObjectSpec::blanket("crypto")]
            && probe("audit", "other") == ReadOnly
            && probe("audit", "pub") == None,
        || "blanket access: every crypto object readable, nothing else".into(),
    )?;
    let digest = acl.rule("digest").unwrap();
    ensure(digest.inputs[0].declared_size.is_none(), || "blob carries a size".into())?;
    ensure(m.check_input_size("blob", 1_000_000).is_ok(), || "unsized blob was size-checked".into())?;
    ensure(
        matches!(m.check_output_size("out", 17), Err(MonitorError::SizeExceeded { .. })),
        || "sized out accepted 17 bytes".into(),
    )?;
    Ok("4 rows".into())
}

fn allocator_oracle() -> Outcome {
    let acl = parse_policy(POLICY_SOURCE).map_err(|e| e.to_string())?;
    let mgr = DomainManager::new(&acl, BackendChoice::Checked).map_err(|e| e.to_string())?;
    let mut rng = common::rng(0xa11c);
    let mut parts = Vec::new();
    for label in ["handle_dom", "fs_dom"] {
        let s = alloc_oracle::check_domain(&mgr, label, 10_000, &mut rng)?;
        ensure(s.exhausted > 0, || format!("{label}: pool never filled"))?;
        parts.push(format!("{label} {} allocs/{} exhausted", s.allocs, s.exhausted));
    }
    Ok(parts.join(", "))
}

fn deny_all_restoration() -> Outcome {
    common::quiet_injected_panics();
    let mut rng = common::rng(0xf4a3e);
    let mut violations = 0;
    let mut unwinds = 0;
    for t in 0..1000 {
        let acl = parse_policy(&random_policy(&mut rng, 4)).map_err(|e| e.to_string())?;
        let m = Monitor::new(&acl, BackendChoice::Checked).map_err(|e| e.to_string())?;
        let s = frames::run_trace(&m, &acl, 60, &mut rng).map_err(|e| format!("trace {t}: {e}"))?;
        violations += s.violations;
        unwinds += s.unwinds;
    }
    ensure(violations > 0, || "no LIFO violation was exercised".into())?;
    Ok(format!("1000 traces, {violations} LIFO violations rejected, {unwinds} unwinds"))
}

fn metadata_integrity() -> Outcome {
    let ops = workload::generate(1000, 7, &mut common::rng(0xd1ff));
    let s = workload::differential(&ops, BackendChoice::Checked)?;
    ensure(s.forged_denied > 0 && s.hijacks_denied > 0, || format!("{s:?}"))?;
    Ok(format!(
        "{} legal ops, {} forged stores and {} hijacked closes denied, tables identical",
        s.legal, s.forged_denied, s.hijacks_denied
    ))
}

fn backend_equivalence() -> Outcome {
    let mut rng = common::rng(0xbe);
    let mut accesses = 0;
    for t in 0..100 {
        let acl = parse_policy(&random_policy(&mut rng, 6)).map_err(|e| e.to_string())?;
        let ops = traces::generate(&acl, 200, &mut rng);
        let a = traces::setup(&acl, BackendChoice::Checked).map_err(|e| e.to_string())?;
        let b = traces::setup(&acl, BackendChoice::PageProt).map_err(|e| e.to_string())?;
        let (va, _) = traces::replay(&a, &ops);
        let (vb, _) = traces::replay(&b, &ops);
        ensure(va == vb, || format!("trace {t}: verdict sequences differ"))?;
        accesses += va.len();
    }
    Ok(format!("100 traces, {accesses} verdicts identical"))
}

fn bench_plausibility() -> Outcome {
    let r = run_syscall_bench(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let f = |n: &str| r.row(n).map(|row| row.fraction).ok_or(format!("missing row {n}"));
    let (open, mmap) = (f("open")?, f("mmap")?);
    for high in ["stat", "fstat", "close"] {
        let v = f(high)?;
        ensure(v > open && v > mmap, || {
            format!("{high} {v:.3} not above open {open:.3} and mmap {mmap:.3}")
        })?;
    }
    let cols: Vec<String> = r
        .syscalls
        .iter()
        .map(|s| format!("{} {:.1}%", s.name, s.fraction * 100.0))
        .collect();
    Ok(cols.join(", "))
}

fn memory_overhead() -> Outcome {
    let os = MiniOs::boot(BackendChoice::Checked, Mode::Protected).map_err(|e| e.to_string())?;
    let ops = workload::generate(500, 0, &mut common::rng(3));
    for op in &ops {
        workload::apply(&os, op);
    }
    let report = memdom::bench::measure_memory_overhead(os.monitor());
    ensure(report.total_bytes < 64 * 1024, || format!("total {} B", report.total_bytes))?;
    for d in &report.domains {
        let reference = REFERENCE_DOMAIN_BYTES.iter().find(|(l, _)| *l == d.label).map(|&(_, v)| v);
        println!(
            "        {:<11} {:>6} B   (reference {} B)",
            d.label,
            d.bookkeeping_peak_bytes,
            reference.map_or("-".into(), |v| v.to_string())
        );
    }
    println!(
        "        {:<11} {:>6} B   (reference {REFERENCE_TOTAL_BYTES} B)",
        "total", report.total_bytes
    );

    let sizes = [8usize, 16, 32];
    let ys: Vec<f64> = sizes.iter().map(|&n| common::bookkeeping_for_rules(n) as f64).collect();
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let (slope, _, r2) = common::linear_fit(&xs, &ys);
    ensure(slope > 0.0 && r2 > 0.9, || format!("slope {slope}, r2 {r2}, {ys:?}"))?;
    Ok(format!(
        "total {} B < 64 KiB; {:.1} B/rule, R² {r2:.4}",
        report.total_bytes, slope
    ))
}

fn aclgen_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a.acl", "b.acl"] {
        let path = dir.path().join(name);
        let st = Command::new(env!("CARGO_BIN_EXE_aclgen"))
            .args(["compile", concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/minios.policy"), "-o"])
            .arg(&path)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(st.success(), || format!("aclgen exited {st}"))?;
        outputs.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "two compilations differ".into())?;

    let mut rng = common::rng(0xac1);
    for i in 0..500 {
        let source = random_policy(&mut rng, 1 + i % 20);
        let acl = parse_policy(&source).map_err(|e| format!("policy {i}: {e}"))?;
        let bytes = serialize_acl(&acl);
        let back = load_acl(&bytes).map_err(|e| format!("policy {i}: {e}"))?;
        ensure(back == acl && serialize_acl(&back) == bytes, || format!("policy {i} is not a fixed point"))?;
        let again = parse_policy(&acl.to_policy_source()).map_err(|e| format!("policy {i}: {e}"))?;
        ensure(serialize_acl(&again) == bytes, || format!("policy {i}: source round trip differs"))?;
    }
    Ok("fixture identical twice; 500 generated policies are fixed points".into())
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "case-study attack", budget: Some(Duration::from_secs(5)), run: case_study },
        Criterion { id: 2, name: "default-deny matrix", budget: Some(Duration::from_secs(1)), run: default_deny },
        Criterion { id: 3, name: "confused deputy", budget: Some(Duration::from_secs(1)), run: confused_deputy },
        Criterion { id: 4, name: "policy table rows", budget: None, run: table_rows },
        Criterion { id: 5, name: "allocator oracle", budget: Some(Duration::from_secs(10)), run: allocator_oracle },
        Criterion { id: 6, name: "deny-all restoration", budget: None, run: deny_all_restoration },
        Criterion { id: 7, name: "metadata-integrity differential", budget: None, run: metadata_integrity },
        Criterion { id: 8, name: "backend equivalence", budget: None, run: backend_equivalence },
        Criterion { id: 9, name: "benchmark ordering", budget: Some(Duration::from_secs(60)), run: bench_plausibility },
        Criterion { id: 10, name: "memory overhead", budget: None, run: memory_overhead },
        Criterion { id: 11, name: "aclgen determinism", budget: None, run: aclgen_determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let mut outcome = (c.run)();
        let took = start.elapsed();
        if let (Ok(_), Some(budget)) = (&outcome, c.budget) {
            if took > budget {
                outcome = Err(format!("took {took:.2?}, budget {budget:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {:<32} {:>9.2?}  {detail}", c.id, c.name, took),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2}. {:<32} {:>9.2?}  {why}", c.id, c.name, took);
            }
        }
    }
    println!("\n{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
