//! Sanity checks on the test-side oracles themselves.

mod common;

use common::*;

#[test]
fn riccati_known_values() {
    // One step: P = 1. Two steps with c = 1: P = 1 + 1/2.
    assert_eq!(riccati_optimum(1.0, 1, 2.0), -4.0);
    assert!((riccati_optimum(1.0, 2, 1.0) + 1.5).abs() < 1e-15);
}

#[test]
fn lambda_return_hand_example() {
    let v = lambda_return_oracle(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5], 0.5, 1.0);
    let want = [3.125, 3.75, 3.0, 0.0];
    for (a, b) in v.iter().zip(want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn log_log_slope_of_power_law() {
    let xs = [10.0, 20.0, 40.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
    assert!((log_log_slope(&xs, &ys) - 1.5).abs() < 1e-12);
}
