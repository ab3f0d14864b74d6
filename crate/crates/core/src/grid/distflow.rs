//! Branch-flow (DistFlow) equations in squared voltage/current variables.

use serde::{Deserialize, Serialize};

use super::{DistributionNetwork, Injections, OperatingPoint};

/// Full DistFlow assignment. Lines follow the network's line indexing and are
/// oriented away from the slack bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistFlowPoint {
    /// Squared voltage magnitude per bus.
    pub v_sq: Vec<f64>,
    /// Sending-end active flow per line.
    pub p: Vec<f64>,
    /// Sending-end reactive flow per line.
    pub q: Vec<f64>,
    /// Squared current magnitude per line.
    pub i_sq: Vec<f64>,
    /// Active consumption per bus.
    pub load_p: Vec<f64>,
    /// Reactive consumption per bus.
    pub load_q: Vec<f64>,
}

impl DistFlowPoint {
    pub fn from_operating_point(op: &OperatingPoint, injections: &Injections) -> Self {
        Self {
            v_sq: op.v_mag.iter().map(|v| v * v).collect(),
            p: op.line_p.clone(),
            q: op.line_q.clone(),
            i_sq: op.line_i.iter().map(|i| i * i).collect(),
            load_p: injections.p.iter().map(|x| -x).collect(),
            load_q: injections.q.iter().map(|x| -x).collect(),
        }
    }
}

/// Max-abs residual of each equation family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistFlowResidual {
    pub voltage_drop: f64,
    pub p_balance: f64,
    pub q_balance: f64,
    pub flow_current: f64,
}

impl DistFlowResidual {
    pub fn max(&self) -> f64 {
        self.voltage_drop.max(self.p_balance).max(self.q_balance).max(self.flow_current)
    }
}

pub fn distflow_residual(net: &DistributionNetwork, c: &DistFlowPoint) -> DistFlowResidual {
    let topo = net.topology();
    let mut res = DistFlowResidual { voltage_drop: 0.0, p_balance: 0.0, q_balance: 0.0, flow_current: 0.0 };
    for (k, l) in net.lines.iter().enumerate() {
        let (u, w) = topo.oriented[k];
        let z2 = l.r * l.r + l.x * l.x;
        let drop = c.v_sq[u] - 2.0 * (l.r * c.p[k] + l.x * c.q[k]) + z2 * c.i_sq[k];
        res.voltage_drop = res.voltage_drop.max((c.v_sq[w] - drop).abs());

        let out_p: f64 = topo.children[w].iter().map(|&ch| c.p[ch]).sum();
        let out_q: f64 = topo.children[w].iter().map(|&ch| c.q[ch]).sum();
        let bal_p = c.p[k] - l.r * c.i_sq[k] - out_p;
        let bal_q = c.q[k] - l.x * c.i_sq[k] - out_q;
        res.p_balance = res.p_balance.max((c.load_p[w] - bal_p).abs());
        res.q_balance = res.q_balance.max((c.load_q[w] - bal_q).abs());

        let prod = c.v_sq[u] * c.i_sq[k] - (c.p[k] * c.p[k] + c.q[k] * c.q[k]);
        res.flow_current = res.flow_current.max(prod.abs());
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::solve_power_flow;

    #[test]
    fn converged_flow_satisfies_distflow() {
        let net = DistributionNetwork::ieee33();
        let inj = Injections::from_base_load(&net);
        let op = solve_power_flow(&net, &inj).unwrap();
        let res = distflow_residual(&net, &DistFlowPoint::from_operating_point(&op, &inj));
        assert!(res.max() < 1e-6, "{res:?}");
    }

    #[test]
    fn trivial_point_is_exactly_feasible() {
        let net = DistributionNetwork::ieee33().with_load_scale(0.0);
        let n = net.n_buses();
        let nl = net.n_lines();
        let c = DistFlowPoint {
            v_sq: vec![1.0; n],
            p: vec![0.0; nl],
            q: vec![0.0; nl],
            i_sq: vec![0.0; nl],
            load_p: vec![0.0; n],
            load_q: vec![0.0; n],
        };
        let res = distflow_residual(&net, &c);
        assert_eq!(res.max(), 0.0);
    }

    #[test]
    fn flat_point_with_load_reports_load() {
        let net = DistributionNetwork::ieee33();
        let n = net.n_buses();
        let nl = net.n_lines();
        let mut load_p = vec![0.0; n];
        load_p[17] = 0.009;
        let c = DistFlowPoint {
            v_sq: vec![1.0; n],
            p: vec![0.0; nl],
            q: vec![0.0; nl],
            i_sq: vec![0.0; nl],
            load_p,
            load_q: vec![0.0; n],
        };
        let res = distflow_residual(&net, &c);
        assert_eq!(res.p_balance, 0.009);
        assert_eq!(res.voltage_drop, 0.0);
    }
}
