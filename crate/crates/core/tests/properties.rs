//! Property suites for the numerical core. Each test is a seeded proptest run.

mod common;

#[test]
fn autodiff_matches_finite_differences() {
    common::autodiff_finite_differences().unwrap();
}

#[test]
fn invertible_net_round_trips() {
    common::invertibility_roundtrip().unwrap();
}

#[test]
fn spectral_estimate_matches_svd() {
    common::spectral_norm_vs_svd().unwrap();
}

#[test]
fn convex_net_satisfies_jensen() {
    common::convexity_inequality().unwrap();
}

#[test]
fn softmax_partition_and_argmax_invariants() {
    common::softmax_partition_argmax().unwrap();
}

#[test]
fn clip_and_penalty_pointwise_values() {
    common::gcgp_pointwise().unwrap();
}

#[test]
fn soft_assignment_converges_to_hard() {
    common::soft_to_hard_convergence().unwrap();
}
