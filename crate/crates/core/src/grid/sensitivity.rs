//! First-order linearization of the power-flow equations around a converged
//! operating point: `dw = -J dx`, `dx = S dw` with `S = (-J)^-1`.

use nalgebra::DMatrix;

use super::power_flow::Admittance;
use super::{DistributionNetwork, GridError, OperatingPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateQuantity {
    Angle,
    Magnitude,
}

#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    /// Full sensitivity `S`, rows `[theta_pq; V_pq]`, columns `[P_pq; Q_pq]`.
    pub full: DMatrix<f64>,
    /// Non-slack bus indices defining both row and column blocks.
    pub pq: Vec<usize>,
    position: Vec<Option<usize>>,
}

impl SensitivityMatrix {
    pub fn dim(&self) -> usize {
        self.pq.len()
    }

    /// dV_bus / dP_inj, zero when either bus is the slack.
    pub fn dv_dp(&self, bus: usize, inj_bus: usize) -> f64 {
        match (self.position[bus], self.position[inj_bus]) {
            (Some(r), Some(c)) => self.full[(self.dim() + r, c)],
            _ => 0.0,
        }
    }

    pub fn dv_dq(&self, bus: usize, inj_bus: usize) -> f64 {
        match (self.position[bus], self.position[inj_bus]) {
            (Some(r), Some(c)) => self.full[(self.dim() + r, self.dim() + c)],
            _ => 0.0,
        }
    }

    pub fn dtheta_dp(&self, bus: usize, inj_bus: usize) -> f64 {
        match (self.position[bus], self.position[inj_bus]) {
            (Some(r), Some(c)) => self.full[(r, c)],
            _ => 0.0,
        }
    }

    /// Voltage-magnitude rows of `S` (the exported block).
    pub fn voltage_rows(&self) -> DMatrix<f64> {
        let m = self.dim();
        self.full.rows(m, m).into_owned()
    }

    pub fn row_label(&self, r: usize) -> (usize, StateQuantity) {
        let m = self.dim();
        if r < m {
            (self.pq[r], StateQuantity::Angle)
        } else {
            (self.pq[r - m], StateQuantity::Magnitude)
        }
    }
}

/// Jacobian of the mismatch `w_spec - f(x)` with respect to `x = [theta; V]`.
pub fn jacobian(net: &DistributionNetwork, op: &OperatingPoint) -> DMatrix<f64> {
    let y = Admittance::new(net);
    -y.injection_jacobian(&net.pq_buses(), &op.v_mag, &op.v_ang)
}

pub fn compute_sensitivity(net: &DistributionNetwork, op: &OperatingPoint) -> Result<SensitivityMatrix, GridError> {
    let pq = net.pq_buses();
    let m = pq.len();
    let neg_j = -jacobian(net, op);
    let scale = neg_j.amax().max(1.0);
    let lu = neg_j.clone().lu();
    let u = lu.u();
    for p in 0..2 * m {
        if !(u[(p, p)].abs() > 1e-12 * scale) {
            let (bus, what) = if p < m { (pq[p], "angle") } else { (pq[p - m], "magnitude") };
            return Err(GridError::SingularJacobian { pivot: p, label: format!("bus {} {what}", bus + 1) });
        }
    }
    let full = lu.try_inverse().ok_or(GridError::SingularJacobian { pivot: 0, label: "inverse failed".into() })?;
    if full.iter().any(|x| !x.is_finite()) {
        return Err(GridError::SingularJacobian { pivot: 0, label: "non-finite inverse".into() });
    }
    let mut position = vec![None; net.n_buses()];
    for (r, &k) in pq.iter().enumerate() {
        position[k] = Some(r);
    }
    Ok(SensitivityMatrix { full, pq, position })
}
