mod common;

use common::{diffusion_error, elasticity_error, newton_histories, quadratic_tail, rate, stokes_divergence};

#[test]
fn p1_diffusion_converges_at_second_order() {
    let (e8, e16) = (diffusion_error(8), diffusion_error(16));
    assert!(rate(e8, e16) >= 1.9, "rate {}", rate(e8, e16));
}

#[test]
fn elasticity_converges_at_second_order() {
    let (e8, e16) = (elasticity_error(8), elasticity_error(16));
    assert!(rate(e8, e16) >= 1.9, "rate {}", rate(e8, e16));
}

#[test]
fn stokes_velocity_is_discretely_divergence_free() {
    for n in [2, 5, 10] {
        assert!(stokes_divergence(n) <= 1e-9);
    }
}

#[test]
fn hyperelastic_newton_has_quadratic_tail() {
    let histories = newton_histories(8);
    assert!(!histories.is_empty());
    for h in &histories {
        assert!(quadratic_tail(h, 100.0), "{h:?}");
    }
}
