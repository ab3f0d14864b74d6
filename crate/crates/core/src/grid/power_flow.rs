//! Polar Newton power flow.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DistributionNetwork, GridError};

/// Net per-bus injections (generation minus load), per-unit.
/// Entries for the slack bus are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Injections {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Injections {
    pub fn zeros(n: usize) -> Self {
        Self { p: vec![0.0; n], q: vec![0.0; n] }
    }

    /// Injections equal to minus the base bus loads.
    pub fn from_base_load(net: &DistributionNetwork) -> Self {
        Self { p: net.buses.iter().map(|b| -b.p_load).collect(), q: net.buses.iter().map(|b| -b.q_load).collect() }
    }

    /// Base load plus active-only station demand (one value per station, in
    /// ascending bus order).
    pub fn with_station_demand(net: &DistributionNetwork, demand: &[f64]) -> Self {
        let mut inj = Self::from_base_load(net);
        for (&k, &d) in net.station_buses().iter().zip(demand) {
            inj.p[k] -= d;
        }
        inj
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iter: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Sending-end flows per line, oriented away from the slack bus.
    pub line_p: Vec<f64>,
    pub line_q: Vec<f64>,
    pub line_i: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl OperatingPoint {
    pub fn min_voltage(&self) -> (usize, f64) {
        self.v_mag
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc })
    }
}

/// Dense bus admittance matrix split into conductance and susceptance.
pub(crate) struct Admittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub neighbors: Vec<Vec<usize>>,
}

impl Admittance {
    pub fn new(net: &DistributionNetwork) -> Self {
        let n = net.n_buses();
        let mut g = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        let mut neighbors = vec![Vec::new(); n];
        for l in &net.lines {
            let (i, j) = (l.from - 1, l.to - 1);
            let den = l.r * l.r + l.x * l.x;
            let (gy, by) = (l.r / den, -l.x / den);
            g[(i, i)] += gy;
            b[(i, i)] += by;
            g[(j, j)] += gy;
            b[(j, j)] += by;
            g[(i, j)] -= gy;
            b[(i, j)] -= by;
            g[(j, i)] -= gy;
            b[(j, i)] -= by;
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        Self { g, b, neighbors }
    }

    /// Calculated injections P_i, Q_i at the given voltages.
    pub fn injections(&self, v: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = v.len();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            let mut pi = v[i] * self.g[(i, i)];
            let mut qi = -v[i] * self.b[(i, i)];
            for &k in &self.neighbors[i] {
                let (s, c) = (th[i] - th[k]).sin_cos();
                pi += v[k] * (self.g[(i, k)] * c + self.b[(i, k)] * s);
                qi += v[k] * (self.g[(i, k)] * s - self.b[(i, k)] * c);
            }
            p[i] = v[i] * pi;
            q[i] = v[i] * qi;
        }
        (p, q)
    }

    /// d(P,Q)/d(theta,V) over the non-slack buses in `pq` order.
    pub fn injection_jacobian(&self, pq: &[usize], v: &[f64], th: &[f64]) -> DMatrix<f64> {
        let n = v.len();
        let m = pq.len();
        let mut pos = vec![usize::MAX; n];
        for (r, &k) in pq.iter().enumerate() {
            pos[k] = r;
        }
        let (p, q) = self.injections(v, th);
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for (r, &i) in pq.iter().enumerate() {
            let (gii, bii) = (self.g[(i, i)], self.b[(i, i)]);
            jac[(r, r)] = -q[i] - bii * v[i] * v[i];
            jac[(r, m + r)] = p[i] / v[i] + gii * v[i];
            jac[(m + r, r)] = p[i] - gii * v[i] * v[i];
            jac[(m + r, m + r)] = q[i] / v[i] - bii * v[i];
            for &k in &self.neighbors[i] {
                let c_idx = pos[k];
                if c_idx == usize::MAX {
                    continue;
                }
                let (s, c) = (th[i] - th[k]).sin_cos();
                let (gik, bik) = (self.g[(i, k)], self.b[(i, k)]);
                jac[(r, c_idx)] = v[i] * v[k] * (gik * s - bik * c);
                jac[(r, m + c_idx)] = v[i] * (gik * c + bik * s);
                jac[(m + r, c_idx)] = -v[i] * v[k] * (gik * c + bik * s);
                jac[(m + r, m + c_idx)] = v[i] * (gik * s - bik * c);
            }
        }
        jac
    }
}

pub fn solve_power_flow(net: &DistributionNetwork, injections: &Injections) -> Result<OperatingPoint, GridError> {
    solve_power_flow_from(net, injections, None, PowerFlowOptions::default())
}

/// Newton iteration from a flat start, or from `warm` when given.
pub fn solve_power_flow_from(
    net: &DistributionNetwork,
    injections: &Injections,
    warm: Option<&OperatingPoint>,
    opts: PowerFlowOptions,
) -> Result<OperatingPoint, GridError> {
    let n = net.n_buses();
    if injections.p.len() != n || injections.q.len() != n {
        return Err(GridError::Dimension(format!(
            "expected {n} injections, got {}/{}",
            injections.p.len(),
            injections.q.len()
        )));
    }
    if injections.p.iter().chain(&injections.q).any(|x| !x.is_finite()) {
        return Err(GridError::Invalid("non-finite injection".into()));
    }
    let slack = net.slack();
    let pq = net.pq_buses();
    let m = pq.len();
    let y = Admittance::new(net);

    let (mut v, mut th) = match warm {
        Some(op) => (op.v_mag.clone(), op.v_ang.clone()),
        None => (vec![net.v_slack; n], vec![0.0; n]),
    };
    v[slack] = net.v_slack;
    th[slack] = 0.0;

    let mismatch = |v: &[f64], th: &[f64]| -> DVector<f64> {
        let (p, q) = y.injections(v, th);
        let mut f = DVector::zeros(2 * m);
        for (r, &k) in pq.iter().enumerate() {
            f[r] = injections.p[k] - p[k];
            f[m + r] = injections.q[k] - q[k];
        }
        f
    };

    let mut f = mismatch(&v, &th);
    let mut residual = f.amax();
    let mut iterations = 0;
    while residual > opts.tolerance {
        if iterations >= opts.max_iter || !residual.is_finite() {
            return Err(GridError::Divergence { iterations, residual });
        }
        let jac = y.injection_jacobian(&pq, &v, &th);
        let dx = jac.lu().solve(&f).ok_or(GridError::Divergence { iterations, residual })?;
        for (r, &k) in pq.iter().enumerate() {
            th[k] += dx[r];
            v[k] += dx[m + r];
        }
        iterations += 1;
        f = mismatch(&v, &th);
        residual = f.amax();
        if v.iter().any(|&x| !(x > 0.0)) {
            return Err(GridError::Divergence { iterations, residual: f64::INFINITY });
        }
    }
    Ok(finish(net, v, th, iterations, residual))
}

pub(crate) fn finish(
    net: &DistributionNetwork,
    v: Vec<f64>,
    th: Vec<f64>,
    iterations: usize,
    residual: f64,
) -> OperatingPoint {
    let topo = net.topology();
    let nl = net.n_lines();
    let mut line_p = vec![0.0; nl];
    let mut line_q = vec![0.0; nl];
    let mut line_i = vec![0.0; nl];
    for (k, l) in net.lines.iter().enumerate() {
        let (u, w) = topo.oriented[k];
        let den = l.r * l.r + l.x * l.x;
        let (gy, by) = (l.r / den, -l.x / den);
        let (vu_re, vu_im) = (v[u] * th[u].cos(), v[u] * th[u].sin());
        let (vw_re, vw_im) = (v[w] * th[w].cos(), v[w] * th[w].sin());
        let (d_re, d_im) = (vu_re - vw_re, vu_im - vw_im);
        let (i_re, i_im) = (d_re * gy - d_im * by, d_re * by + d_im * gy);
        // S = V_u * conj(I)
        line_p[k] = vu_re * i_re + vu_im * i_im;
        line_q[k] = vu_im * i_re - vu_re * i_im;
        line_i[k] = (i_re * i_re + i_im * i_im).sqrt();
    }
    OperatingPoint { v_mag: v, v_ang: th, line_p, line_q, line_i, iterations, residual }
}
