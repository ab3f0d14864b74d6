mod common;

use std::sync::OnceLock;

use common::ks_distance;
use evhc::grid::{compute_sensitivity, solve_power_flow, DistributionNetwork, Injections};
use evhc::ppf::{
    gmm_ppf, identify_boundary, mc_demand_samples, mc_ppf, McResult, PpfError, PpfOptions, PpfResult, Scenario,
};
use evhc::prob::{Component, GaussianMixture, STD_FLOOR};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bundled() -> (DistributionNetwork, Vec<GaussianMixture>) {
    let sc = Scenario::bundled();
    let net = sc.network(&DistributionNetwork::ieee33());
    let g = sc.mixtures(&net).unwrap();
    (net, g)
}

/// One shared 10^5-sample Monte Carlo run of the bundled scenario.
fn bundled_mc() -> &'static (PpfResult, McResult) {
    static MC: OnceLock<(PpfResult, McResult)> = OnceLock::new();
    MC.get_or_init(|| {
        let (net, g) = bundled();
        let ppf = gmm_ppf(&net, &g, &PpfOptions::default()).unwrap();
        let mc = mc_ppf(&net, &g, 100_000, 17).unwrap();
        (ppf, mc)
    })
}

fn point_masses(g: &[GaussianMixture]) -> Vec<GaussianMixture> {
    g.iter().map(|m| GaussianMixture::point_mass(m.mean())).collect()
}

#[test]
fn point_mass_inputs_collapse_to_base_point() {
    let (net, g) = bundled();
    let pm = point_masses(&g);
    let means: Vec<f64> = g.iter().map(|m| m.mean()).collect();
    let op = solve_power_flow(&net, &Injections::with_station_demand(&net, &means)).unwrap();
    let ppf = gmm_ppf(&net, &pm, &PpfOptions::default()).unwrap();
    assert_eq!(ppf.buses.len(), net.n_buses() - 1);
    for b in &ppf.buses {
        assert_eq!(b.base_voltage, op.v_mag[b.bus - 1]);
        assert!((b.mixture.mean() - op.v_mag[b.bus - 1]).abs() < 1e-12);
        assert!(b.mixture.std() <= 10.0 * STD_FLOOR, "bus {}: {}", b.bus, b.mixture.std());
    }

    // Point masses carry the floor std, so samples stay within six floor
    // deviations per station, weighted by the sensitivity.
    let sens = compute_sensitivity(&net, &op).unwrap();
    let mc = mc_ppf(&net, &pm, 50, 3).unwrap();
    assert_eq!(mc.diverged, 0);
    for (&bus, row) in mc.buses.iter().zip(&mc.voltages) {
        let tol: f64 = net.station_buses().iter().map(|&s| sens.dv_dp(bus - 1, s).abs() * 6.0 * STD_FLOOR).sum();
        assert_eq!(row.len(), 50);
        assert!(row.iter().all(|&v| (v - op.v_mag[bus - 1]).abs() <= tol + 1e-12), "bus {bus}");
    }
}

#[test]
fn single_gaussian_station_scales_by_sensitivity() {
    let (net, g) = bundled();
    let mut inputs = point_masses(&g);
    let (mu, sigma) = (0.02, 0.004);
    let s = 3;
    inputs[s] = GaussianMixture::single(mu, sigma).unwrap();
    let ppf = gmm_ppf(&net, &inputs, &PpfOptions::default()).unwrap();

    // Slope of each bus voltage in the station's demand, by central differences
    // of the exact power flow.
    let demand: Vec<f64> = inputs.iter().map(|m| m.mean()).collect();
    let h = 1e-5;
    let solve = |d: f64| {
        let mut x = demand.clone();
        x[s] = d;
        solve_power_flow(&net, &Injections::with_station_demand(&net, &x)).unwrap().v_mag
    };
    let (up, down) = (solve(mu + h), solve(mu - h));
    for b in &ppf.buses {
        let k = b.bus - 1;
        let slope = (up[k] - down[k]) / (2.0 * h);
        let expect = slope.abs() * sigma;
        assert!((b.mixture.std() - expect).abs() < 1e-6 * sigma.max(expect) + 1e-9, "bus {}", b.bus);
        assert_eq!(b.mixture.len(), 1);
    }
}

#[test]
fn bus18_matches_monte_carlo() {
    let (ppf, mc) = bundled_mc();
    assert!(mc.diverged as f64 <= 1e-3 * mc.n as f64);
    let ks = ks_distance(&ppf.bus(18).unwrap().mixture, &mut mc.bus(18).unwrap().to_vec());
    assert!(ks < 0.01, "KS {ks}");
}

#[test]
fn monte_carlo_means_agree_with_mixture_means() {
    let (ppf, mc) = bundled_mc();
    for b in &ppf.buses {
        let s = mc.bus(b.bus).unwrap();
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let bound = 3.0 * sd / n.sqrt();
        assert!(
            (mean - b.mixture.mean()).abs() <= bound,
            "bus {}: MC {mean:.7} vs {:.7}, bound {bound:.2e}",
            b.bus,
            b.mixture.mean()
        );
    }
}

#[test]
fn monte_carlo_stream_has_prefix_property() {
    let (net, g) = bundled();
    let short = mc_demand_samples(&g, 10, 5);
    let long = mc_demand_samples(&g, 1000, 5);
    assert_eq!(short[..], long[..10]);
    let a = mc_ppf(&net, &g, 10, 5).unwrap();
    let b = mc_ppf(&net, &g, 10, 5).unwrap();
    assert_eq!(a.voltages, b.voltages);
    assert!(matches!(mc_ppf(&net, &g, 0, 5), Err(PpfError::Invalid(_))));
}

/// Sampled CDF of the unreduced linear model `V0 + sum S (D - mean D)`.
fn linear_model_samples(net: &DistributionNetwork, g: &[GaussianMixture], bus: usize, n: usize) -> Vec<f64> {
    let means: Vec<f64> = g.iter().map(|m| m.mean()).collect();
    let op = solve_power_flow(net, &Injections::with_station_demand(net, &means)).unwrap();
    let sens = compute_sensitivity(net, &op).unwrap();
    let coeffs: Vec<f64> = net.station_buses().iter().map(|&s| -sens.dv_dp(bus - 1, s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    (0..n)
        .map(|_| {
            op.v_mag[bus - 1]
                + g.iter()
                    .zip(&coeffs)
                    .zip(&means)
                    .map(|((m, c), mu)| c * (m.sample_with(&mut rng, 1)[0] - mu))
                    .sum::<f64>()
        })
        .collect()
}

/// Splits every component in two with matching first and second moments.
fn split_components(g: &GaussianMixture) -> GaussianMixture {
    let mut out = Vec::new();
    for c in g.components() {
        let d = 0.6 * c.std;
        let s = (c.std * c.std - d * d).sqrt();
        for sign in [-1.0, 1.0] {
            out.push(Component { weight: c.weight / 2.0, mean: c.mean + sign * d, std: s });
        }
    }
    GaussianMixture::new(out).unwrap()
}

#[test]
fn reduction_keeps_bus_distributions() {
    let (net, g) = bundled();
    let rich: Vec<GaussianMixture> = g.iter().map(split_components).collect();
    for inputs in [&g, &rich] {
        let ppf = gmm_ppf(&net, inputs, &PpfOptions::default()).unwrap();
        assert!(ppf.reduction.input_after.iter().all(|&k| k <= 3));
        assert!(ppf.buses.iter().all(|b| b.mixture.len() <= 16));
        for bus in [18, 33] {
            let mut samples = linear_model_samples(&net, inputs, bus, 1_000_000);
            let ks = ks_distance(&ppf.bus(bus).unwrap().mixture, &mut samples);
            assert!(ks < 0.005, "bus {bus}: sup distance {ks}");
        }
    }
    assert!(rich.iter().all(|m| m.len() == 4));
}

fn with_bus_mixture(mix: GaussianMixture) -> PpfResult {
    let (net, g) = bundled();
    let mut ppf = gmm_ppf(&net, &point_masses(&g), &PpfOptions::default()).unwrap();
    ppf.buses.truncate(1);
    ppf.buses[0].mixture = mix;
    ppf
}

#[test]
fn boundary_examples() {
    let normal = with_bus_mixture(GaussianMixture::single(0.95, 0.01).unwrap());
    let r = identify_boundary(&normal, 0.5, None).unwrap();
    assert!((r.network_boundary - 0.95).abs() < 1e-9);
    let r = identify_boundary(&normal, 0.001, Some(0.9)).unwrap();
    assert!((r.network_boundary - 0.91910).abs() < 1e-4, "{}", r.network_boundary);
    let p = r.buses[0].violation_probability.unwrap();
    assert!((p - 2.8665e-7).abs() < 1e-9, "{p}");

    let point = with_bus_mixture(GaussianMixture::point_mass(0.93));
    for varsigma in [0.001, 0.1, 0.9] {
        let r = identify_boundary(&point, varsigma, None).unwrap();
        assert!((r.network_boundary - 0.93).abs() < 1e-4);
    }
    for bad in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(identify_boundary(&normal, bad, None), Err(PpfError::Invalid(_))));
    }
}

#[test]
fn bundled_boundary_sits_at_weakest_bus() {
    let (ppf, _) = bundled_mc();
    let r = identify_boundary(ppf, 0.001, Some(0.9)).unwrap();
    let min = r.buses.iter().map(|b| b.boundary).fold(f64::INFINITY, f64::min);
    assert_eq!(r.network_boundary, min);
    assert_eq!(r.network_boundary_bus, 18);
    assert!(r.buses.iter().all(|b| (0.0..=1.0).contains(&b.violation_probability.unwrap())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn violation_at_boundary_equals_chance_level(varsigma in 1e-4f64..0.999) {
        let (ppf, _) = bundled_mc();
        let r = identify_boundary(ppf, varsigma, None).unwrap();
        for (b, risk) in ppf.buses.iter().zip(&r.buses) {
            prop_assert!((b.mixture.cdf(risk.boundary) - varsigma).abs() < 1e-6);
        }
    }

    #[test]
    fn higher_demand_never_raises_voltage(station in 0usize..12, delta in 1e-4f64..0.02) {
        let (net, g) = bundled();
        let base = gmm_ppf(&net, &g, &PpfOptions::default()).unwrap();
        let mut up = g.clone();
        up[station] = up[station].shift(delta);
        let shifted = gmm_ppf(&net, &up, &PpfOptions::default()).unwrap();
        for (a, b) in base.buses.iter().zip(&shifted.buses) {
            prop_assert!(b.mixture.mean() <= a.mixture.mean() + 1e-12, "bus {}", a.bus);
        }
    }
}
