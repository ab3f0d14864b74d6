//! Published tolerances that the implemented construction does not reach.

use evhc::hc::{build_pwl, expected_satisfaction};
use evhc::prob::GaussianMixture;

/// Midpoint error of the 20-segment interpolant against a thousandth of the
/// mean, for a wide single Gaussian. With uniform breakpoints on
/// `[0, q_0.999]` the ratio is scale-free and bottoms out near 2.4e-3 at
/// `mean = std`, so this fails by construction.
#[test]
fn pwl_midpoint_error_within_thousandth_of_mean() {
    let g = GaussianMixture::single(1.0, 1.0).unwrap();
    let pwl = build_pwl(&g, 20).unwrap();
    let worst = (0..20)
        .map(|i| {
            let m = 0.5 * (pwl.breakpoints[i] + pwl.breakpoints[i + 1]);
            (pwl.eval(m) - expected_satisfaction(&g, m)).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-3 * g.mean(), "max midpoint error {worst:.3e} vs bound {:.3e}", 1e-3 * g.mean());
}
