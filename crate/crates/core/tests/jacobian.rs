//! Multi-step Jacobian against central differences of the h-step propagation.

mod common;

#[test]
fn jacobian_matches_finite_differences() {
    common::jacobian_oracle().assert();
}
