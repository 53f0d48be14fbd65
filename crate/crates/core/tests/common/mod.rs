//! Generators and reference models shared by the integration tests and the
//! acceptance harness.

#![allow(dead_code)]

pub mod alloc_oracle;
pub mod frames;
pub mod matrix;
pub mod policies;
pub mod traces;
pub mod workload;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Installs a panic hook that stays quiet for panics injected by tests and
/// defers to the default hook for everything else.
pub fn quiet_injected_panics() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        let default = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            let injected = info
                .payload()
                .downcast_ref::<&str>()
                .is_some_and(|s| *s == INJECTED_PANIC);
            if !injected {
                default(info);
            }
        }));
    });
}

pub const INJECTED_PANIC: &str = "injected fault";

/// Least-squares line through `(xs, ys)`: `(slope, intercept, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2)
}

/// Total monitor bookkeeping after exercising every rule of a generated
/// policy with `rules` rules once.
pub fn bookkeeping_for_rules(rules: usize) -> u64 {
    use memdom::domain::BackendChoice;
    use memdom::monitor::Monitor;

    let acl = memdom::policy::parse_policy(&policies::scaled_policy(rules)).unwrap();
    let m = Monitor::new(&acl, BackendChoice::Checked).unwrap();
    for o in &acl.objects {
        m.alloc_object(&o.object_label, None).unwrap();
    }
    for r in &acl.rules {
        m.sandboxed_call(&r.func_name, || ()).unwrap();
    }
    memdom::bench::measure_memory_overhead(&m).total_bytes
}
