use std::io::Write;

use serde::{Deserialize, Serialize};

use super::bnb::{BnbStats, HcSolution};
use super::expected_satisfaction;
use super::misocp::LongTermSolution;
use super::verify::VerificationReport;
use crate::grid::DistributionNetwork;
use crate::prob::GaussianMixture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationReportRow {
    pub station: usize,
    pub bus: usize,
    pub expected_demand: f64,
    pub demand_std: f64,
    pub chance_bound: f64,
    pub cap: f64,
    pub pbar_real_time: f64,
    pub pbar_long_term: Option<f64>,
    /// Voltage at the station bus under the real-time solution.
    pub voltage: f64,
    pub satisfaction_pwl: f64,
    pub satisfaction_exact: f64,
    pub satisfaction_long_term: Option<f64>,
}

/// Real-time objective against the exact satisfaction of the long-term P̄.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub real_time_objective: f64,
    pub long_term_evaluated: f64,
    pub long_term_total_pbar: f64,
    /// `(real_time - long_term) / long_term`.
    pub relative_improvement: f64,
    pub dominates: bool,
    pub strictly_dominates: bool,
}

impl CompareReport {
    pub fn new(sol: &HcSolution, lt: &LongTermSolution, gmms: &[GaussianMixture]) -> Self {
        let rt = sol.objective_exact;
        let lte: f64 = lt.pbar.iter().zip(gmms).map(|(&p, g)| expected_satisfaction(g, p)).sum();
        Self {
            real_time_objective: rt,
            long_term_evaluated: lte,
            long_term_total_pbar: lt.objective,
            relative_improvement: (rt - lte) / lte.abs().max(1e-12),
            dominates: rt >= lte,
            strictly_dominates: rt > lte,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HcReport {
    pub epsilon: Vec<f64>,
    pub segments: usize,
    pub objective_pwl: f64,
    pub objective_exact: f64,
    pub stations: Vec<StationReportRow>,
    /// `(bus id, voltage)` per bus.
    pub voltages: Vec<(usize, f64)>,
    pub soc_gaps: Vec<f64>,
    pub max_soc_gap: f64,
    pub stats: BnbStats,
    pub verification: Option<VerificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long_term: Option<LongTermSolution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<CompareReport>,
}

impl HcReport {
    pub fn new(
        net: &DistributionNetwork,
        sol: &HcSolution,
        gmms: &[GaussianMixture],
        epsilon: &[f64],
        segments: usize,
        long_term: Option<&LongTermSolution>,
    ) -> Self {
        let stations = sol
            .stations
            .iter()
            .zip(gmms)
            .enumerate()
            .map(|(k, (s, g))| {
                let lt = long_term.map(|l| l.pbar[k]);
                StationReportRow {
                    station: s.station,
                    bus: net.buses[s.bus].id,
                    expected_demand: g.mean(),
                    demand_std: g.std(),
                    chance_bound: s.chance_bound,
                    cap: s.cap,
                    pbar_real_time: s.pbar,
                    pbar_long_term: lt,
                    voltage: sol.voltages[s.bus],
                    satisfaction_pwl: s.satisfaction_pwl,
                    satisfaction_exact: s.satisfaction_exact,
                    satisfaction_long_term: lt.map(|p| expected_satisfaction(g, p)),
                }
            })
            .collect();
        Self {
            epsilon: epsilon.to_vec(),
            segments,
            objective_pwl: sol.objective,
            objective_exact: sol.objective_exact,
            stations,
            voltages: net.buses.iter().zip(&sol.voltages).map(|(b, &v)| (b.id, v)).collect(),
            soc_gaps: sol.soc_gaps.clone(),
            max_soc_gap: sol.soc_gaps.iter().copied().fold(0.0, f64::max),
            stats: sol.stats.clone(),
            verification: sol.verification.clone(),
            long_term: long_term.cloned(),
            comparison: long_term.map(|l| CompareReport::new(sol, l, gmms)),
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-station bounds, P̄ values, voltages and satisfaction.
pub fn write_station_csv<W: Write>(w: W, rows: &[StationReportRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "station",
        "bus",
        "expected_demand",
        "demand_std",
        "chance_bound",
        "cap",
        "pbar_real_time",
        "pbar_long_term",
        "voltage",
        "satisfaction_pwl",
        "satisfaction_exact",
        "satisfaction_long_term",
    ])?;
    for r in rows {
        out.write_record([
            r.station.to_string(),
            r.bus.to_string(),
            r.expected_demand.to_string(),
            r.demand_std.to_string(),
            r.chance_bound.to_string(),
            r.cap.to_string(),
            r.pbar_real_time.to_string(),
            opt(r.pbar_long_term),
            r.voltage.to_string(),
            r.satisfaction_pwl.to_string(),
            r.satisfaction_exact.to_string(),
            opt(r.satisfaction_long_term),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Demand pdf and cdf per station on `points` uniform values over `[0, cap]`.
pub fn write_distribution_csv<W: Write>(
    w: W,
    rows: &[StationReportRow],
    gmms: &[GaussianMixture],
    points: usize,
) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["station", "demand", "pdf", "cdf"])?;
    let points = points.max(2);
    for (r, g) in rows.iter().zip(gmms) {
        for k in 0..points {
            let d = r.cap * k as f64 / (points - 1) as f64;
            out.write_record([r.station.to_string(), d.to_string(), g.pdf(d).to_string(), g.cdf(d).to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
