//! Runs the acceptance suite at quick scale and prints one PASS/FAIL line per
//! criterion, followed by the individual checks.

use std::time::Instant;

use market_thermo::verify::{verify_suite, VerifyOptions, CRITERIA};

#[test]
fn acceptance() {
    let start = Instant::now();
    let report = verify_suite(&VerifyOptions::default());
    let elapsed = start.elapsed().as_secs_f64();
    for line in report.criterion_lines() {
        println!("{line}");
    }
    for c in &report.checks {
        println!(
            "  [{:>2}] {} {} measured={:.6e} expected={:.6e} tolerance={:.3e}",
            c.criterion,
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.expected,
            c.tolerance
        );
    }
    println!("suite time {elapsed:.1} s");
    for (k, _) in CRITERIA {
        assert!(report.criterion(k).next().is_some(), "criterion {k} has no checks");
    }
    let failed: Vec<u8> = CRITERIA.iter().map(|c| c.0).filter(|&k| !report.criterion_passed(k)).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
