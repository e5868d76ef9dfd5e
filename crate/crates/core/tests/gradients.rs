//! Backprop against central differences for every primitive and block.

mod common;

use common::{all_cases, TOL};

#[test]
fn all_gradients_match_finite_differences() {
    let mut failures = Vec::new();
    for case in all_cases() {
        let err = (case.run)();
        println!("{:<40} max rel err {err:.2e}", case.name);
        if !(err < TOL) {
            failures.push(format!("{} ({err:.2e})", case.name));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
