mod support;

use std::time::Instant;

use support::grad_suite::{all_cases, TOLERANCE};

#[test]
fn every_op_and_objective_matches_central_differences() {
    let start = Instant::now();
    let cases = all_cases();
    let elapsed = start.elapsed();
    let mut failures = Vec::new();
    for (name, err) in &cases {
        println!("{name:<32} max rel err {err:.3e}");
        if err.is_nan() || *err >= TOLERANCE {
            failures.push(format!("{name}: {err:e}"));
        }
    }
    println!("{} cases in {:.2?}", cases.len(), elapsed);
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
    assert!(cases.len() >= 40, "suite shrank to {} cases", cases.len());
}
