mod common;

use common::{gradient_check, GRADIENT_KINDS};

const INSTANCES: u64 = 20;
const TOLERANCE: f64 = 1e-4;

#[test]
fn analytic_gradients_match_central_differences_for_every_layer_kind() {
    let mut failures = Vec::new();
    for (k, kind) in GRADIENT_KINDS.iter().enumerate() {
        for i in 0..INSTANCES {
            let err = gradient_check(kind, 1000 * k as u64 + i);
            if err.is_nan() || err >= TOLERANCE {
                failures.push(format!("{kind} #{i}: {err:e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn relative_error_floor() {
    assert_eq!(common::rel_error(1.0, 1.0), 0.0);
    assert!((common::rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    // both tiny: measured against the floor
    assert!(common::rel_error(1e-9, 2e-9) < 1e-2);
}
