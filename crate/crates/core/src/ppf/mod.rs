//! Probabilistic power flow by linearized GMM propagation, a Monte Carlo
//! reference on the exact power flow, and chance-constrained voltage
//! boundary identification.

mod report;
mod scenario;

use std::time::Instant;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    compute_sensitivity, solve_power_flow, solve_power_flow_from, DistributionNetwork, GridError, Injections,
    OperatingPoint, PowerFlowOptions,
};
use crate::prob::{gmm_linear_combination, gmm_reduce, gmm_shift, GaussianMixture, ProbError};

pub use report::{ks_distance, plot_rows, write_plot_csv, PlotRow, PpfReport};
pub use scenario::{Scenario, StationDemand, SCENARIO12_JSON};

/// Share of Monte Carlo samples allowed to fail before the run is rejected.
pub const MC_DIVERGENCE_LIMIT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PpfError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("{failed} of {n} Monte Carlo power flows diverged")]
    Divergence { failed: usize, n: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePoint {
    /// Linearize at the power flow with every station at its mean demand.
    MeanDemand,
    /// Linearize at the base load without any charging demand.
    NoEv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpfOptions {
    /// Components kept per station disturbance before combination.
    pub input_cap: usize,
    /// Components kept in each bus-voltage mixture.
    pub output_cap: usize,
    pub base: BasePoint,
}

impl Default for PpfOptions {
    fn default() -> Self {
        Self { input_cap: 3, output_cap: 16, base: BasePoint::MeanDemand }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusVoltage {
    /// 1-based bus id.
    pub bus: usize,
    pub base_voltage: f64,
    pub mixture: GaussianMixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionReport {
    pub input_before: Vec<usize>,
    pub input_after: Vec<usize>,
    /// Component count of the unreduced product, per bus.
    pub full_product: f64,
    pub output_cap: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpfResult {
    pub base_point: OperatingPoint,
    /// Station demands at the linearization point, per unit.
    pub base_demand: Vec<f64>,
    /// Every non-slack bus, ascending.
    pub buses: Vec<BusVoltage>,
    pub reduction: ReductionReport,
    pub elapsed_s: f64,
}

impl PpfResult {
    pub fn bus(&self, id: usize) -> Option<&BusVoltage> {
        self.buses.iter().find(|b| b.bus == id)
    }
}

fn check_inputs(net: &DistributionNetwork, gmms: &[GaussianMixture]) -> Result<(), PpfError> {
    let n = net.station_buses().len();
    if gmms.len() != n {
        return Err(PpfError::Invalid(format!("{} station mixtures for {n} stations", gmms.len())));
    }
    Ok(())
}

/// Linear combination `sum c_s X_s`, folding one input at a time and reducing
/// the running mixture to `cap` components after each step.
pub fn combine_sequential(gmms: &[GaussianMixture], coeffs: &[f64], cap: usize) -> Result<GaussianMixture, ProbError> {
    if gmms.len() != coeffs.len() {
        return Err(ProbError::LengthMismatch(gmms.len(), coeffs.len()));
    }
    let mut acc: Option<GaussianMixture> = None;
    for (g, &c) in gmms.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        let next = match acc {
            None => g.scale(c),
            Some(a) => gmm_linear_combination(&[a, g.clone()], &[1.0, c])?,
        };
        acc = Some(gmm_reduce(&next, cap)?);
    }
    Ok(acc.unwrap_or_else(|| GaussianMixture::point_mass(0.0)))
}

/// Bus-voltage mixtures from independent station demand mixtures (per unit,
/// positive = consumption).
pub fn gmm_ppf(
    net: &DistributionNetwork,
    station_gmms: &[GaussianMixture],
    opts: &PpfOptions,
) -> Result<PpfResult, PpfError> {
    check_inputs(net, station_gmms)?;
    if opts.input_cap == 0 || opts.output_cap == 0 {
        return Err(PpfError::Invalid("component caps must be positive".into()));
    }
    let start = Instant::now();
    let base_demand: Vec<f64> = match opts.base {
        BasePoint::MeanDemand => station_gmms.iter().map(|g| g.mean()).collect(),
        BasePoint::NoEv => vec![0.0; station_gmms.len()],
    };
    let op = solve_power_flow(net, &Injections::with_station_demand(net, &base_demand))?;
    let sens = compute_sensitivity(net, &op)?;

    // Disturbances relative to the base demand, reduced before combination.
    let mut input_after = Vec::with_capacity(station_gmms.len());
    let disturbances: Vec<GaussianMixture> = station_gmms
        .iter()
        .zip(&base_demand)
        .map(|(g, &d0)| {
            let r = gmm_reduce(&gmm_shift(g, -d0), opts.input_cap)?;
            input_after.push(r.len());
            Ok(r)
        })
        .collect::<Result<_, ProbError>>()?;
    let stations = net.station_buses();
    let full_product = disturbances.iter().map(|g| g.len() as f64).product();

    let mut buses = Vec::new();
    for i in net.pq_buses() {
        // A demand increase is a negative active injection.
        let coeffs: Vec<f64> = stations.iter().map(|&s| -sens.dv_dp(i, s)).collect();
        let dv = combine_sequential(&disturbances, &coeffs, opts.output_cap)?;
        buses.push(BusVoltage { bus: i + 1, base_voltage: op.v_mag[i], mixture: gmm_shift(&dv, op.v_mag[i]) });
    }
    let elapsed_s = start.elapsed().as_secs_f64();
    debug!("gmm_ppf: {} buses in {elapsed_s:.3} s", buses.len());
    Ok(PpfResult {
        base_point: op,
        base_demand,
        buses,
        reduction: ReductionReport {
            input_before: station_gmms.iter().map(|g| g.len()).collect(),
            input_after,
            full_product,
            output_cap: opts.output_cap,
        },
        elapsed_s,
    })
}

#[derive(Debug, Clone)]
pub struct McResult {
    /// 1-based bus id per row of `voltages`.
    pub buses: Vec<usize>,
    /// Sorted voltage samples per non-slack bus.
    pub voltages: Vec<Vec<f64>>,
    pub n: usize,
    pub diverged: usize,
    pub elapsed_s: f64,
}

impl McResult {
    pub fn bus(&self, id: usize) -> Option<&[f64]> {
        self.buses.iter().position(|&b| b == id).map(|k| &self.voltages[k][..])
    }

    pub fn quantile(&self, id: usize, q: f64) -> Option<f64> {
        let s = self.bus(id)?;
        if s.is_empty() {
            return None;
        }
        let k = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
        Some(s[k])
    }
}

/// Station demand draws, sample-major so that any prefix of a run is
/// reproduced by a shorter run with the same seed.
pub fn mc_demand_samples(station_gmms: &[GaussianMixture], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| station_gmms.iter().map(|g| g.sample_with(&mut rng, 1)[0]).collect()).collect()
}

/// Exact nonlinear power flow for each sampled demand vector.
pub fn mc_ppf(
    net: &DistributionNetwork,
    station_gmms: &[GaussianMixture],
    n: usize,
    seed: u64,
) -> Result<McResult, PpfError> {
    check_inputs(net, station_gmms)?;
    if n == 0 {
        return Err(PpfError::Invalid("sample count must be positive".into()));
    }
    let start = Instant::now();
    let means: Vec<f64> = station_gmms.iter().map(|g| g.mean()).collect();
    let warm = solve_power_flow(net, &Injections::with_station_demand(net, &means))?;
    let pq = net.pq_buses();
    let mut voltages = vec![Vec::with_capacity(n); pq.len()];
    let mut diverged = 0;
    let opts = PowerFlowOptions::default();
    for d in mc_demand_samples(station_gmms, n, seed) {
        match solve_power_flow_from(net, &Injections::with_station_demand(net, &d), Some(&warm), opts) {
            Ok(op) => {
                for (row, &k) in voltages.iter_mut().zip(&pq) {
                    row.push(op.v_mag[k]);
                }
            }
            Err(GridError::Divergence { .. }) => diverged += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if diverged as f64 > MC_DIVERGENCE_LIMIT * n as f64 {
        return Err(PpfError::Divergence { failed: diverged, n });
    }
    if diverged > 0 {
        warn!("mc_ppf: {diverged} of {n} samples diverged and were excluded");
    }
    for row in &mut voltages {
        row.sort_by(f64::total_cmp);
    }
    Ok(McResult {
        buses: pq.iter().map(|k| k + 1).collect(),
        voltages,
        n,
        diverged,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusRisk {
    pub bus: usize,
    /// Largest voltage limit whose violation probability stays within the chance level.
    pub boundary: f64,
    /// Probability of falling below the external limit, when one is given.
    pub violation_probability: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskReport {
    pub varsigma: f64,
    pub limit: Option<f64>,
    pub buses: Vec<BusRisk>,
    /// Minimum boundary over load buses.
    pub network_boundary: f64,
    pub network_boundary_bus: usize,
}

pub fn identify_boundary(ppf: &PpfResult, varsigma: f64, limit: Option<f64>) -> Result<RiskReport, PpfError> {
    if !(varsigma > 0.0 && varsigma < 1.0) {
        return Err(PpfError::Invalid(format!("chance level {varsigma} must lie in (0, 1)")));
    }
    let mut buses = Vec::with_capacity(ppf.buses.len());
    for b in &ppf.buses {
        buses.push(BusRisk {
            bus: b.bus,
            boundary: b.mixture.quantile(varsigma)?,
            violation_probability: limit.map(|v| b.mixture.cdf(v)),
        });
    }
    let worst = buses
        .iter()
        .min_by(|a, b| a.boundary.total_cmp(&b.boundary))
        .ok_or_else(|| PpfError::Invalid("no load buses".into()))?;
    Ok(RiskReport { varsigma, limit, network_boundary: worst.boundary, network_boundary_bus: worst.bus, buses })
}
