//! Invariants of the model, filter, cost-to-go and episode runner.

mod common;

#[test]
fn properties_hold() {
    common::property_suite().assert();
}
