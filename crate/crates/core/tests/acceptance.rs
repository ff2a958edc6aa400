//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Exits non-zero when any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::criteria::{self, Outcome};

type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let checks: [Check; 10] = [
        ("gradients match finite differences", criteria::gradient_suite),
        ("losses match brute-force oracles", criteria::loss_oracles),
        ("DTW matches exhaustive alignment", criteria::dtw_oracle),
        ("split protocol", criteria::split_protocol),
        ("generation budget", criteria::generation_budget),
        ("MG sample statistics", criteria::mg_statistics),
        ("end-to-end pretraining beats chance", criteria::end_to_end),
        ("average rank and top-k", criteria::ranking_math),
        ("size vs gain regression", criteria::size_gain_regression),
        ("deterministic records", criteria::determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id == *f) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("{id}: PASS [{name}] {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("{id}: FAIL [{name}] {msg} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
