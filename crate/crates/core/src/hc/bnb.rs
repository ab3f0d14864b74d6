use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::conic::{solve_socp, SocpStatus};
use super::misocp::HcModel;
use super::verify::{verify_solution, VerificationReport, VerifyOptions};
use super::{expected_satisfaction, HcError, HcProblem};

/// Weights below this count as zero when testing the SOS2 pattern.
const SOS2_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnbOptions {
    pub rel_gap: f64,
    pub node_limit: usize,
    /// Run the rounding heuristic every this many nodes (and at the root).
    pub heuristic_every: usize,
    pub verify: VerifyOptions,
}

impl Default for BnbOptions {
    fn default() -> Self {
        Self { rel_gap: 1e-4, node_limit: 100_000, heuristic_every: 16, verify: VerifyOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnbStatus {
    Optimal,
    NodeLimit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnbStats {
    pub status: BnbStatus,
    pub nodes: usize,
    pub max_depth: usize,
    /// `(node, objective)` each time the incumbent improved.
    pub incumbent_trace: Vec<(usize, f64)>,
    pub rejected_incumbents: usize,
    pub best_bound: f64,
    pub rel_gap: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationResult {
    pub station: usize,
    pub bus: usize,
    pub pbar: f64,
    pub chance_bound: f64,
    /// Right end of the linearization range.
    pub cap: f64,
    pub segment: usize,
    pub satisfaction_pwl: f64,
    pub satisfaction_exact: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HcSolution {
    pub stations: Vec<StationResult>,
    /// Voltage magnitude per bus index.
    pub voltages: Vec<f64>,
    pub line_p: Vec<f64>,
    pub line_q: Vec<f64>,
    pub line_i_sq: Vec<f64>,
    /// Total PWL expected satisfaction.
    pub objective: f64,
    pub objective_exact: f64,
    /// Objective including the loss term, as seen by the search.
    pub search_objective: f64,
    pub soc_gaps: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub stats: BnbStats,
    pub verification: Option<VerificationReport>,
}

impl HcSolution {
    pub fn pbar(&self) -> Vec<f64> {
        self.stations.iter().map(|s| s.pbar).collect()
    }
}

struct Node {
    bound: f64,
    depth: usize,
    /// Allowed segment range per station.
    ranges: Vec<(usize, usize)>,
    x: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound)
    }
}

fn node_bounds(hc: &HcModel, ranges: &[(usize, usize)]) -> Vec<(f64, f64)> {
    let mut b: Vec<(f64, f64)> = hc.model.vars.iter().map(|v| (v.lb, v.ub)).collect();
    for (s, &(lo, hi)) in hc.layout.stations.iter().zip(ranges) {
        for (k, &j) in s.sos2.z.iter().enumerate() {
            if k < lo || k > hi {
                b[j] = (0.0, 0.0);
            }
        }
        for (k, &j) in s.sos2.w.iter().enumerate() {
            if k < lo || k > hi + 1 {
                b[j] = (0.0, 0.0);
            }
        }
    }
    b
}

fn relax(hc: &HcModel, problem: &HcProblem, ranges: &[(usize, usize)]) -> Result<Option<(f64, Vec<f64>)>, HcError> {
    let sol = solve_socp(&hc.model, Some(&node_bounds(hc, ranges)), &problem.settings)?;
    Ok(match sol.status {
        SocpStatus::Optimal => Some((sol.objective, sol.x)),
        SocpStatus::Infeasible => None,
        SocpStatus::Unbounded => return Err(HcError::Numerical("relaxation reported unbounded".into())),
    })
}

/// Segment index when the nonzero weights occupy at most two adjacent breakpoints.
fn sos2_segment(w: &[f64]) -> Option<usize> {
    let nz: Vec<usize> = (0..w.len()).filter(|&k| w[k] > SOS2_TOL).collect();
    match nz.as_slice() {
        [k] => Some((*k).min(w.len() - 2)),
        [a, b] if b - a == 1 => Some(*a),
        _ => None,
    }
}

fn rounded_ranges(hc: &HcModel, x: &[f64], ranges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    hc.layout
        .stations
        .iter()
        .zip(ranges)
        .map(|(s, &(lo, hi))| {
            let w: Vec<f64> = s.sos2.w.iter().map(|&j| x[j]).collect();
            let k = sos2_segment(&w).unwrap_or_else(|| s.pwl.segment_of(x[s.pbar])).clamp(lo, hi);
            (k, k)
        })
        .collect()
}

fn extract(hc: &HcModel, problem: &HcProblem, x: &[f64], segments: &[usize], stats: BnbStats) -> HcSolution {
    let net = &problem.network;
    let l = &hc.layout;
    let stations: Vec<StationResult> = l
        .stations
        .iter()
        .zip(&problem.demands)
        .zip(segments)
        .map(|((s, g), &seg)| StationResult {
            station: s.station,
            bus: s.bus,
            pbar: x[s.pbar],
            chance_bound: s.chance_bound,
            cap: s.pwl.right_endpoint(),
            segment: seg,
            satisfaction_pwl: x[s.sos2.f],
            satisfaction_exact: expected_satisfaction(g, x[s.pbar]),
        })
        .collect();
    HcSolution {
        voltages: l.voltages(x),
        line_p: l.p.iter().map(|&j| x[j]).collect(),
        line_q: l.q.iter().map(|&j| x[j]).collect(),
        line_i_sq: l.i.iter().map(|&j| x[j]).collect(),
        objective: hc.satisfaction(x),
        objective_exact: stations.iter().map(|s| s.satisfaction_exact).sum(),
        search_objective: hc.model.objective.eval(x),
        soc_gaps: l.soc_gaps(net, x),
        z: l.stations.iter().map(|s| s.sos2.z.iter().map(|&j| x[j]).collect()).collect(),
        stations,
        stats,
        verification: None,
    }
}

fn rel_gap(bound: f64, incumbent: f64) -> f64 {
    ((bound - incumbent) / incumbent.abs().max(1e-9)).max(0.0)
}

type Incumbent = (f64, Vec<f64>, Vec<usize>, VerificationReport);

/// Fixes every station to one segment, re-solves and offers the result as an incumbent.
fn try_round(
    hc: &HcModel,
    problem: &HcProblem,
    opts: &BnbOptions,
    x: &[f64],
    ranges: &[(usize, usize)],
    stats: &mut BnbStats,
    incumbent: &mut Option<Incumbent>,
) -> Result<(), HcError> {
    let fixed = rounded_ranges(hc, x, ranges);
    let Some((obj, xr)) = relax(hc, problem, &fixed)? else {
        return Ok(());
    };
    if incumbent.as_ref().is_some_and(|inc| obj <= inc.0) {
        return Ok(());
    }
    let segments: Vec<usize> = fixed.iter().map(|r| r.0).collect();
    let cand = extract(hc, problem, &xr, &segments, stats.clone());
    let report = verify_solution(&problem.network, &cand, &problem.demands, &problem.epsilon, &opts.verify);
    if !report.feasible {
        stats.rejected_incumbents += 1;
        warn!("rejected incumbent {obj:.6}: min voltage {:.6}, chance ok {}", report.min_voltage, report.chance_ok);
        return Ok(());
    }
    stats.incumbent_trace.push((stats.nodes, obj));
    *incumbent = Some((obj, xr, segments, report));
    Ok(())
}

/// Best-first branch-and-bound over SOS2 segment ranges. Incumbents must pass
/// the feasibility part of [`verify_solution`] before they are accepted.
pub fn branch_and_bound(hc: &HcModel, problem: &HcProblem, opts: &BnbOptions) -> Result<HcSolution, HcError> {
    problem.validate()?;
    let start = Instant::now();
    let n_seg = problem.segments;
    let root_ranges = vec![(0, n_seg - 1); hc.layout.stations.len()];
    let mut stats = BnbStats {
        status: BnbStatus::Optimal,
        nodes: 0,
        max_depth: 0,
        incumbent_trace: Vec::new(),
        rejected_incumbents: 0,
        best_bound: f64::NEG_INFINITY,
        rel_gap: f64::INFINITY,
        elapsed_s: 0.0,
    };
    let mut incumbent: Option<Incumbent> = None;

    let mut heap = BinaryHeap::new();
    stats.nodes += 1;
    if let Some((bound, x)) = relax(hc, problem, &root_ranges)? {
        heap.push(Node { bound, depth: 0, ranges: root_ranges, x });
    }

    let mut explored = 0usize;
    while let Some(node) = heap.pop() {
        let inc_obj = incumbent.as_ref().map(|i| i.0);
        if let Some(inc) = inc_obj {
            if rel_gap(node.bound, inc) <= opts.rel_gap {
                heap.push(node);
                break;
            }
        }
        if stats.nodes >= opts.node_limit {
            stats.status = BnbStatus::NodeLimit;
            heap.push(node);
            break;
        }
        explored += 1;
        stats.max_depth = stats.max_depth.max(node.depth);

        let frac: Vec<(usize, f64)> = hc
            .layout
            .stations
            .iter()
            .enumerate()
            .filter_map(|(s, st)| {
                let w: Vec<f64> = st.sos2.w.iter().map(|&j| node.x[j]).collect();
                if sos2_segment(&w).is_some() {
                    return None;
                }
                let zmax = st.sos2.z.iter().map(|&j| node.x[j]).fold(0.0, f64::max);
                Some((s, 1.0 - zmax))
            })
            .collect();
        if frac.is_empty() || explored == 1 || explored % opts.heuristic_every.max(1) == 0 {
            try_round(hc, problem, opts, &node.x, &node.ranges, &mut stats, &mut incumbent)?;
        }
        let Some(&(s, _)) = frac.iter().max_by(|a, b| a.1.total_cmp(&b.1)) else {
            continue;
        };

        let (lo, hi) = node.ranges[s];
        let zs = &hc.layout.stations[s].sos2.z;
        let (mut num, mut den) = (0.0, 0.0);
        for k in lo..=hi {
            num += k as f64 * node.x[zs[k]].max(0.0);
            den += node.x[zs[k]].max(0.0);
        }
        let mid = if den > 0.0 { (num / den).floor() as usize } else { (lo + hi) / 2 };
        let mid = mid.clamp(lo, hi - 1);
        for child in [(lo, mid), (mid + 1, hi)] {
            let mut ranges = node.ranges.clone();
            ranges[s] = child;
            stats.nodes += 1;
            if let Some((bound, x)) = relax(hc, problem, &ranges)? {
                debug_assert!(
                    bound <= node.bound + 1e-6 * node.bound.abs().max(1.0),
                    "child bound {bound} above parent {}",
                    node.bound
                );
                if incumbent.as_ref().is_some_and(|inc| rel_gap(bound, inc.0) <= opts.rel_gap) {
                    continue;
                }
                heap.push(Node { bound: bound.min(node.bound), depth: node.depth + 1, ranges, x });
            }
        }
    }

    let Some((obj, x, segments, report)) = incumbent else {
        return Err(if stats.status == BnbStatus::NodeLimit {
            HcError::Numerical(format!("node limit {} reached without a verified incumbent", opts.node_limit))
        } else {
            HcError::Infeasible("no segment assignment satisfies the network and chance constraints".into())
        });
    };
    stats.best_bound = heap.iter().map(|n| n.bound).fold(obj, f64::max);
    stats.rel_gap = rel_gap(stats.best_bound, obj);
    stats.elapsed_s = start.elapsed().as_secs_f64();
    debug!(
        "branch_and_bound: {} nodes, objective {obj:.6}, gap {:.2e}, {:.3} s",
        stats.nodes, stats.rel_gap, stats.elapsed_s
    );
    let mut sol = extract(hc, problem, &x, &segments, stats);
    sol.verification = Some(report);
    Ok(sol)
}
