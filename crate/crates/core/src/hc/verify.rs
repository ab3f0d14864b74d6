use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bnb::HcSolution;
use super::expected_satisfaction;
use crate::grid::{distflow_residual, solve_power_flow, DistFlowPoint, DistributionNetwork, Injections};
use crate::prob::GaussianMixture;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    pub mc_samples: usize,
    pub seed: u64,
    pub voltage_tol: f64,
    pub residual_tol: f64,
    /// Allowed shortfall of the sampled satisfaction frequency below `1 - epsilon`.
    pub frequency_slack: f64,
    pub soc_tol: f64,
    /// Relative tolerance between the PWL and exact objectives.
    pub objective_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            mc_samples: 10_000,
            seed: 0,
            voltage_tol: 1e-6,
            residual_tol: 1e-6,
            frequency_slack: 0.01,
            soc_tol: 1e-5,
            objective_tol: 0.005,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChanceCheck {
    pub station: usize,
    pub pbar: f64,
    pub epsilon: f64,
    pub frequency: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub power_flow_converged: bool,
    pub min_voltage: f64,
    /// 1-based id of the lowest-voltage bus.
    pub min_voltage_bus: usize,
    pub voltage_ok: bool,
    pub distflow_residual: f64,
    /// Largest difference between optimizer and power-flow voltage magnitudes.
    pub voltage_mismatch: f64,
    pub max_soc_gap: f64,
    pub soc_ok: bool,
    pub chance: Vec<ChanceCheck>,
    pub chance_ok: bool,
    pub objective_pwl: f64,
    pub objective_exact: f64,
    pub objective_rel_diff: f64,
    pub objective_ok: bool,
    /// Voltage and chance checks together.
    pub feasible: bool,
    pub all_passed: bool,
}

/// Re-checks a solution against the nonlinear power flow, the conic gaps,
/// sampled demand and the exact objective. Never fails; problems are flagged.
pub fn verify_solution(
    net: &DistributionNetwork,
    sol: &HcSolution,
    gmms: &[GaussianMixture],
    epsilons: &[f64],
    opts: &VerifyOptions,
) -> VerificationReport {
    let pbar: Vec<f64> = sol.stations.iter().map(|s| s.pbar).collect();
    let inj = Injections::with_station_demand(net, &pbar);
    let (converged, min_v, min_bus, residual, mismatch) = match solve_power_flow(net, &inj) {
        Ok(op) => {
            let (k, v) = op.min_voltage();
            let res = distflow_residual(net, &DistFlowPoint::from_operating_point(&op, &inj)).max();
            let mismatch = op.v_mag.iter().zip(&sol.voltages).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            (true, v, net.buses[k].id, res, mismatch)
        }
        Err(_) => (false, f64::NAN, 0, f64::INFINITY, f64::INFINITY),
    };
    let voltage_ok = converged && min_v >= net.v_min - opts.voltage_tol;
    let distflow_ok = residual < opts.residual_tol;

    let max_soc_gap = sol.soc_gaps.iter().copied().fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let chance: Vec<ChanceCheck> = sol
        .stations
        .iter()
        .zip(gmms)
        .zip(epsilons)
        .map(|((s, g), &eps)| {
            let draws = g.sample_with(&mut rng, opts.mc_samples);
            let frequency = draws.iter().filter(|&&d| d <= s.pbar).count() as f64 / opts.mc_samples.max(1) as f64;
            ChanceCheck {
                station: s.station,
                pbar: s.pbar,
                epsilon: eps,
                frequency,
                ok: frequency >= 1.0 - eps - opts.frequency_slack,
            }
        })
        .collect();
    let chance_ok = chance.len() == pbar.len() && chance.iter().all(|c| c.ok);

    let objective_pwl = sol.objective;
    let objective_exact: f64 = sol.stations.iter().zip(gmms).map(|(s, g)| expected_satisfaction(g, s.pbar)).sum();
    let objective_rel_diff = (objective_pwl - objective_exact).abs() / objective_exact.abs().max(1e-12);

    let feasible = voltage_ok && distflow_ok && chance_ok;
    let soc_ok = max_soc_gap < opts.soc_tol;
    let objective_ok = objective_rel_diff < opts.objective_tol;
    VerificationReport {
        power_flow_converged: converged,
        min_voltage: min_v,
        min_voltage_bus: min_bus,
        voltage_ok,
        distflow_residual: residual,
        voltage_mismatch: mismatch,
        max_soc_gap,
        soc_ok,
        chance,
        chance_ok,
        objective_pwl,
        objective_exact,
        objective_rel_diff,
        objective_ok,
        feasible,
        all_passed: feasible && soc_ok && objective_ok,
    }
}
