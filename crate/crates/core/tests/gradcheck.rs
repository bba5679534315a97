//! Randomized finite-difference verification of the autodiff kernel, from
//! single primitives up to the composed training losses.

use std::time::{Duration, Instant};

use dmiforge_core::diagnostics::{audit_composed_losses, audit_primitives};

#[test]
fn primitives_match_finite_differences() {
    let start = Instant::now();
    let worst = audit_primitives(100, 11);
    assert!(worst < 1e-4, "max relative error {:.3e}", worst);
    assert!(
        start.elapsed() < Duration::from_secs(120),
        "primitive audit took {:?}",
        start.elapsed()
    );
}

#[test]
fn composed_losses_match_finite_differences() {
    let start = Instant::now();
    let worst = audit_composed_losses(100, 12);
    assert!(worst < 1e-4, "max relative error {:.3e}", worst);
    assert!(
        start.elapsed() < Duration::from_secs(120),
        "composed-loss audit took {:?}",
        start.elapsed()
    );
}
