mod support;

use coanno_core::context::HeadKind;
use support::*;

#[test]
fn pq_matches_brute_force_matcher() {
    let start = std::time::Instant::now();
    let delta = pq_oracle_max_delta(200, 2024);
    assert!(delta <= 1e-12, "max |delta| {delta}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn relabel_head_gradients_at_fifty_points() {
    let r = check_context_head(HeadKind::Relabel, 50, 1);
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn add_head_gradients_at_fifty_points() {
    let r = check_context_head(HeadKind::Add, 50, 2);
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn ia_net_gradients_at_fifty_points() {
    let r = check_ia_net(50, 3);
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn loss_gradients_at_fifty_points() {
    let worst = loss_gradient_max_error(50, 4);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn pooling_is_bitwise_invariant_on_a_hundred_instances() {
    assert_eq!(pooling_invariance_failures(100, 5), 0);
}
