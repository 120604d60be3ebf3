//! Gradient checks for every differentiable primitive.

mod support;

use support::grad_oracle::{adjoint_gap, run_suite, INSTANCES, SUITES, TOL};

#[test]
fn primitive_gradients_match_finite_differences() {
    for (name, case) in SUITES {
        assert!(run_suite(name, case) <= TOL);
    }
}

#[test]
fn conv_adjoint_identity() {
    for seed in 0..INSTANCES {
        let gap = adjoint_gap(seed);
        assert!(gap < 1e-5, "seed {seed}: adjoint gap {gap:.2e}");
    }
}

#[test]
fn loss_gradient_through_the_unet() {
    let worst = (0..INSTANCES)
        .map(support::grad_oracle::loss_directional_gap)
        .fold(0.0, f64::max);
    println!("end-to-end loss: worst relative directional error {worst:.2e}");
    assert!(worst <= 5e-3, "{worst:.2e}");
}
