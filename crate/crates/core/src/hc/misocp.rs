use serde::{Deserialize, Serialize};

use super::conic::{solve_socp, ConicModel, LinExpr, Sense, SocpSettings, SocpStatus};
use super::pwl::{build_pwl, encode_sos2, PiecewiseLinear, Sos2Vars};
use super::{chance_bound, HcError, HcProblem, LOSS_WEIGHT};
use crate::grid::DistributionNetwork;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationVars {
    pub station: usize,
    pub bus: usize,
    pub pbar: usize,
    /// Lower bound on `pbar` from the chance constraint (before clipping at zero).
    pub chance_bound: f64,
    pub pwl: PiecewiseLinear,
    pub sos2: Sos2Vars,
}

/// Variable indices of the branch-flow block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelLayout {
    /// Squared voltage per bus.
    pub v: Vec<usize>,
    pub p: Vec<usize>,
    pub q: Vec<usize>,
    /// Squared current per line.
    pub i: Vec<usize>,
    pub stations: Vec<StationVars>,
}

impl ModelLayout {
    pub fn voltages(&self, x: &[f64]) -> Vec<f64> {
        self.v.iter().map(|&j| x[j].max(0.0).sqrt()).collect()
    }

    /// `|V_u I - (P^2 + Q^2)|` per line.
    pub fn soc_gaps(&self, net: &DistributionNetwork, x: &[f64]) -> Vec<f64> {
        let topo = net.topology();
        (0..net.n_lines())
            .map(|k| {
                let u = topo.oriented[k].0;
                let (p, q) = (x[self.p[k]], x[self.q[k]]);
                (x[self.v[u]] * x[self.i[k]] - (p * p + q * q)).abs()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HcModel {
    pub model: ConicModel,
    pub layout: ModelLayout,
}

impl HcModel {
    /// Sum of the PWL satisfaction variables.
    pub fn satisfaction(&self, x: &[f64]) -> f64 {
        self.layout.stations.iter().map(|s| x[s.sos2.f]).sum()
    }
}

/// Branch-flow variables and rows with an extra demand variable at each
/// station bus. Returns the layout without stations and the loss expression.
fn branch_flow(
    model: &mut ConicModel,
    net: &DistributionNetwork,
    station_demand: &[(usize, usize)],
) -> (ModelLayout, LinExpr) {
    let topo = net.topology();
    let slack = net.slack();
    let (vlo, vhi) = (net.v_min * net.v_min, net.v_max * net.v_max);
    let v: Vec<usize> = net
        .buses
        .iter()
        .enumerate()
        .map(|(k, b)| {
            if k == slack {
                let v0 = net.v_slack * net.v_slack;
                model.add_var(format!("V{}", b.id), v0, v0)
            } else {
                model.add_var(format!("V{}", b.id), vlo, vhi)
            }
        })
        .collect();
    let mut p = Vec::with_capacity(net.n_lines());
    let mut q = Vec::with_capacity(net.n_lines());
    let mut i = Vec::with_capacity(net.n_lines());
    for l in &net.lines {
        let tag = format!("{}-{}", l.from, l.to);
        p.push(model.add_var(format!("P{tag}"), f64::NEG_INFINITY, f64::INFINITY));
        q.push(model.add_var(format!("Q{tag}"), f64::NEG_INFINITY, f64::INFINITY));
        i.push(model.add_var(format!("I{tag}"), 0.0, l.i_max * l.i_max));
    }
    let mut losses = LinExpr::default();
    for (k, l) in net.lines.iter().enumerate() {
        let (u, w) = topo.oriented[k];
        let tag = format!("{}-{}", l.from, l.to);
        let z2 = l.r * l.r + l.x * l.x;
        model.add_constraint(
            format!("drop{tag}"),
            LinExpr::new(vec![(v[w], 1.0), (v[u], -1.0), (p[k], 2.0 * l.r), (q[k], 2.0 * l.x), (i[k], -z2)], 0.0),
            Sense::Eq,
            0.0,
        );
        let mut bal_p = vec![(p[k], 1.0), (i[k], -l.r)];
        let mut bal_q = vec![(q[k], 1.0), (i[k], -l.x)];
        for &c in &topo.children[w] {
            bal_p.push((p[c], -1.0));
            bal_q.push((q[c], -1.0));
        }
        for &(bus, d) in station_demand {
            if bus == w {
                bal_p.push((d, -1.0));
            }
        }
        let bus = &net.buses[w];
        model.add_constraint(format!("balP{}", bus.id), LinExpr::new(bal_p, 0.0), Sense::Eq, bus.p_load);
        model.add_constraint(format!("balQ{}", bus.id), LinExpr::new(bal_q, 0.0), Sense::Eq, bus.q_load);
        model.add_cone(
            format!("soc{tag}"),
            LinExpr::new(vec![(v[u], 1.0), (i[k], 1.0)], 0.0),
            vec![
                LinExpr::new(vec![(p[k], 2.0)], 0.0),
                LinExpr::new(vec![(q[k], 2.0)], 0.0),
                LinExpr::new(vec![(v[u], 1.0), (i[k], -1.0)], 0.0),
            ],
        );
        losses.terms.push((i[k], l.r));
    }
    (ModelLayout { v, p, q, i, stations: Vec::new() }, losses)
}

/// Real-time hosting-capacity model: maximize the PWL expected satisfaction
/// subject to branch-flow, conic, voltage, current and chance constraints.
pub fn build_misocp(problem: &HcProblem) -> Result<HcModel, HcError> {
    problem.validate()?;
    let net = &problem.network;
    let mut model = ConicModel::default();
    let mut pending = Vec::new();
    for (((id, bus), g), &eps) in net.stations().into_iter().zip(&problem.demands).zip(&problem.epsilon) {
        let pwl = build_pwl(g, problem.segments)?;
        let lb = chance_bound(g, eps)?;
        let cap = pwl.right_endpoint();
        if lb > cap {
            return Err(HcError::Infeasible(format!(
                "station {id}: chance bound {lb:.6} exceeds the linearization range {cap:.6} (epsilon {eps})"
            )));
        }
        let pbar = model.add_var(format!("Pbar{id}"), lb.max(0.0), cap);
        pending.push((id, bus, pbar, lb, pwl));
    }
    let demand: Vec<(usize, usize)> = pending.iter().map(|s| (s.1, s.2)).collect();
    let (mut layout, losses) = branch_flow(&mut model, net, &demand);
    let mut objective = losses.scaled(-problem.loss_weight);
    for (id, bus, pbar, lb, pwl) in pending {
        let sos2 = encode_sos2(&mut model, &pwl, pbar, &format!("s{id}"));
        objective.terms.push((sos2.f, 1.0));
        layout.stations.push(StationVars { station: id, bus, pbar, chance_bound: lb, pwl, sos2 });
    }
    model.objective = objective;
    model.validate()?;
    Ok(HcModel { model, layout })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongTermSolution {
    pub stations: Vec<usize>,
    pub pbar: Vec<f64>,
    /// Total accommodated demand.
    pub objective: f64,
    pub voltages: Vec<f64>,
    pub soc_gaps: Vec<f64>,
}

/// Deterministic baseline: maximize total station demand with each station
/// between its scalar demand and its cap.
pub fn long_term_hc(
    net: &DistributionNetwork,
    scalars: &[f64],
    caps: &[f64],
    settings: &SocpSettings,
) -> Result<LongTermSolution, HcError> {
    let stations = net.stations();
    if scalars.len() != stations.len() || caps.len() != stations.len() {
        return Err(HcError::Invalid(format!(
            "{} scalars and {} caps for {} stations",
            scalars.len(),
            caps.len(),
            stations.len()
        )));
    }
    let mut model = ConicModel::default();
    let mut demand = Vec::new();
    for ((&(id, bus), &s), &c) in stations.iter().zip(scalars).zip(caps) {
        if !(s >= 0.0 && c >= s) {
            return Err(HcError::Invalid(format!("station {id}: scalar {s} and cap {c}")));
        }
        demand.push((bus, model.add_var(format!("Pbar{id}"), s, c)));
    }
    let (layout, losses) = branch_flow(&mut model, net, &demand);
    let mut objective = losses.scaled(-LOSS_WEIGHT);
    objective.terms.extend(demand.iter().map(|&(_, j)| (j, 1.0)));
    model.objective = objective;
    let sol = solve_socp(&model, None, settings)?;
    match sol.status {
        SocpStatus::Optimal => {}
        SocpStatus::Infeasible => {
            return Err(HcError::Infeasible("long-term baseline: scalar demands violate the network limits".into()))
        }
        SocpStatus::Unbounded => return Err(HcError::Numerical("long-term baseline reported unbounded".into())),
    }
    let pbar: Vec<f64> = demand.iter().map(|&(_, j)| sol.x[j]).collect();
    Ok(LongTermSolution {
        stations: stations.iter().map(|s| s.0).collect(),
        objective: pbar.iter().sum(),
        pbar,
        voltages: layout.voltages(&sol.x),
        soc_gaps: layout.soc_gaps(net, &sol.x),
    })
}
