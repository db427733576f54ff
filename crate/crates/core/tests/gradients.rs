mod common;

use common::*;

const INSTANCES: usize = 32;
const TOLERANCE: f64 = 1e-4;

#[test]
fn primitives_match_finite_differences() {
    let failures: Vec<_> = primitive_errors(INSTANCES).into_iter().filter(|(_, e)| *e > TOLERANCE).collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn policy_loss_through_policy_and_encoder() {
    let err = policy_loss_error(INSTANCES, 27, 64);
    assert!(err <= TOLERANCE, "{err:e}");
}

#[test]
fn contextual_loss_through_encoder_and_latent() {
    let err = contextual_loss_error(INSTANCES, 28, 64);
    assert!(err <= TOLERANCE, "{err:e}");
}
