//! Radial distribution network model.
//!
//! Buses are numbered `1..=n` in the network file; internally every vector is
//! indexed by `bus_id - 1`. All quantities are per-unit on the file's base.

mod distflow;
mod power_flow;
mod sensitivity;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use distflow::{distflow_residual, DistFlowPoint, DistFlowResidual};
pub use power_flow::{solve_power_flow, solve_power_flow_from, Injections, OperatingPoint, PowerFlowOptions};
pub use sensitivity::{compute_sensitivity, jacobian, SensitivityMatrix, StateQuantity};

/// Bundled IEEE 33-bus feeder with twelve charging stations.
pub const IEEE33_JSON: &str = include_str!("../../data/ieee33.json");

/// Station buses of the bundled case.
pub const IEEE33_STATION_BUSES: [usize; 12] = [5, 8, 10, 12, 14, 16, 18, 22, 25, 27, 30, 33];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("failed to read network file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse network file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("non-radial network: {lines} lines for {buses} buses")]
    NonRadial { buses: usize, lines: usize },
    #[error("disconnected network: bus {0} unreachable from the slack bus")]
    Disconnected(usize),
    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),
    #[error("power flow diverged after {iterations} iterations (last residual {residual:.3e})")]
    Divergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian at pivot {pivot} ({label})")]
    SingularJacobian { pivot: usize, label: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    #[serde(default)]
    pub station: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub i_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkFile {
    #[serde(default)]
    name: Option<String>,
    base_mva: f64,
    base_kv: f64,
    v_slack: f64,
    v_min: f64,
    v_max: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
}

/// Orientation of the radial tree rooted at the slack bus.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Bus indices in breadth-first order from the slack bus.
    pub order: Vec<usize>,
    /// For each bus index, the line index feeding it (None for the slack).
    pub parent_line: Vec<Option<usize>>,
    /// For each line index, (upstream bus index, downstream bus index).
    pub oriented: Vec<(usize, usize)>,
    /// For each bus index, the lines leaving it towards the leaves.
    pub children: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct DistributionNetwork {
    pub name: String,
    pub base_mva: f64,
    pub base_kv: f64,
    pub v_slack: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    topology: Topology,
    slack: usize,
}

impl DistributionNetwork {
    pub fn new(
        base_mva: f64,
        base_kv: f64,
        v_slack: f64,
        v_min: f64,
        v_max: f64,
        buses: Vec<Bus>,
        lines: Vec<Line>,
    ) -> Result<Self, GridError> {
        let file = NetworkFile { name: None, base_mva, base_kv, v_slack, v_min, v_max, buses, lines };
        Self::from_file(file)
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let file: NetworkFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    pub fn ieee33() -> Self {
        Self::from_json(IEEE33_JSON).expect("bundled IEEE-33 case is valid")
    }

    fn from_file(file: NetworkFile) -> Result<Self, GridError> {
        let NetworkFile { name, base_mva, base_kv, v_slack, v_min, v_max, mut buses, lines } = file;
        if buses.is_empty() {
            return Err(GridError::Invalid("network has no buses".into()));
        }
        for (label, v) in [("base_mva", base_mva), ("base_kv", base_kv), ("v_slack", v_slack)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GridError::Invalid(format!("{label} must be positive, got {v}")));
            }
        }
        if !(v_min.is_finite() && v_max.is_finite() && 0.0 < v_min && v_min < v_max) {
            return Err(GridError::Invalid(format!("bad voltage bounds [{v_min}, {v_max}]")));
        }

        let mut seen = HashSet::new();
        for b in &buses {
            if !seen.insert(b.id) {
                return Err(GridError::DuplicateBus(b.id));
            }
        }
        buses.sort_by_key(|b| b.id);
        for (k, b) in buses.iter().enumerate() {
            if b.id != k + 1 {
                return Err(GridError::Invalid(format!(
                    "bus ids must be contiguous from 1, found {} at position {}",
                    b.id,
                    k + 1
                )));
            }
            if !(b.p_load.is_finite() && b.q_load.is_finite()) {
                return Err(GridError::Invalid(format!("bus {} has non-finite load", b.id)));
            }
        }
        let slacks: Vec<usize> =
            buses.iter().enumerate().filter(|(_, b)| b.kind == BusKind::Slack).map(|(k, _)| k).collect();
        if slacks.len() != 1 {
            return Err(GridError::Invalid(format!("exactly one slack bus required, found {}", slacks.len())));
        }
        let mut stations = HashSet::new();
        for b in &buses {
            if let Some(s) = b.station {
                if !stations.insert(s) {
                    return Err(GridError::Invalid(format!("duplicate station id {s}")));
                }
            }
        }

        let n = buses.len();
        for (k, l) in lines.iter().enumerate() {
            if l.from < 1 || l.from > n || l.to < 1 || l.to > n || l.from == l.to {
                return Err(GridError::Invalid(format!("line {} connects invalid buses {}-{}", k, l.from, l.to)));
            }
            if !(l.r >= 0.0 && l.x >= 0.0 && l.r.is_finite() && l.x.is_finite()) {
                return Err(GridError::Invalid(format!("line {k} has negative or non-finite impedance")));
            }
            if l.r == 0.0 && l.x == 0.0 {
                return Err(GridError::Invalid(format!("line {k} has zero impedance")));
            }
            if !(l.i_max > 0.0) {
                return Err(GridError::Invalid(format!("line {k} has non-positive current limit")));
            }
        }
        if lines.len() + 1 != n {
            return Err(GridError::NonRadial { buses: n, lines: lines.len() });
        }

        let slack = slacks[0];
        let topology = build_topology(n, slack, &lines)?;
        Ok(Self {
            name: name.unwrap_or_else(|| "network".into()),
            base_mva,
            base_kv,
            v_slack,
            v_min,
            v_max,
            buses,
            lines,
            topology,
            slack,
        })
    }

    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            name: Some(self.name.clone()),
            base_mva: self.base_mva,
            base_kv: self.base_kv,
            v_slack: self.v_slack,
            v_min: self.v_min,
            v_max: self.v_max,
            buses: self.buses.clone(),
            lines: self.lines.clone(),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Index (0-based) of the slack bus.
    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Non-slack bus indices in ascending order; the state/injection ordering
    /// used by the Jacobian.
    pub fn pq_buses(&self) -> Vec<usize> {
        (0..self.n_buses()).filter(|&k| k != self.slack).collect()
    }

    /// (station id, bus index) pairs in ascending bus order.
    pub fn stations(&self) -> Vec<(usize, usize)> {
        self.buses.iter().enumerate().filter_map(|(k, b)| b.station.map(|s| (s, k))).collect()
    }

    pub fn station_buses(&self) -> Vec<usize> {
        self.stations().into_iter().map(|(_, k)| k).collect()
    }

    /// Per-unit conversion for a power value in kW.
    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / (self.base_mva * 1000.0)
    }

    /// Copy of this network with every bus load scaled by `factor`.
    pub fn with_load_scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for b in &mut out.buses {
            b.p_load *= factor;
            b.q_load *= factor;
        }
        out
    }

    pub fn with_voltage_limits(&self, v_min: f64, v_max: f64) -> Self {
        let mut out = self.clone();
        out.v_min = v_min;
        out.v_max = v_max;
        out
    }

    pub fn with_slack_voltage(&self, v_slack: f64) -> Self {
        let mut out = self.clone();
        out.v_slack = v_slack;
        out
    }
}

pub fn load_network(path: &Path) -> Result<DistributionNetwork, GridError> {
    let text = std::fs::read_to_string(path)?;
    DistributionNetwork::from_json(&text)
}

fn build_topology(n: usize, slack: usize, lines: &[Line]) -> Result<Topology, GridError> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, l) in lines.iter().enumerate() {
        adj[l.from - 1].push((l.to - 1, k));
        adj[l.to - 1].push((l.from - 1, k));
    }
    let mut visited = vec![false; n];
    let mut parent_line = vec![None; n];
    let mut oriented = vec![(usize::MAX, usize::MAX); lines.len()];
    let mut children = vec![Vec::new(); n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    visited[slack] = true;
    queue.push_back(slack);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &(v, k) in &adj[u] {
            if visited[v] {
                continue;
            }
            visited[v] = true;
            parent_line[v] = Some(k);
            oriented[k] = (u, v);
            children[u].push(k);
            queue.push_back(v);
        }
    }
    if let Some(k) = visited.iter().position(|&v| !v) {
        return Err(GridError::Disconnected(k + 1));
    }
    Ok(Topology { order, parent_line, oriented, children })
}
