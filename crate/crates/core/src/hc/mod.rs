//! Real-time hosting capacity: a chance-constrained mixed-integer SOCP over
//! the branch-flow model, solved by SOS2 branch-and-bound on conic relaxations.

mod bnb;
mod conic;
mod misocp;
mod pwl;
mod report;
mod verify;

use thiserror::Error;

use crate::grid::{DistributionNetwork, GridError};
use crate::prob::{normal_cdf, normal_pdf, GaussianMixture, ProbError};

pub use bnb::{branch_and_bound, BnbOptions, BnbStats, BnbStatus, HcSolution, StationResult};
pub use conic::{
    solve_socp, ConicModel, Constraint, LinExpr, Sense, SocBlock, SocpSettings, SocpSolution, SocpStatus, Variable,
};
pub use misocp::{build_misocp, long_term_hc, HcModel, LongTermSolution, ModelLayout, StationVars};
pub use pwl::{build_pwl, encode_sos2, PiecewiseLinear, Sos2Vars};
pub use report::{write_distribution_csv, write_station_csv, CompareReport, HcReport, StationReportRow};
pub use verify::{verify_solution, ChanceCheck, VerificationReport, VerifyOptions};

/// Weight of total line losses subtracted from the objective. It keeps every
/// conic block tight at the optimum without moving the optimum measurably.
pub const LOSS_WEIGHT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum HcError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("malformed model: {0}")]
    Model(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("conic solver error: {0}")]
    Solver(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// `E[D 1{0 <= D <= pbar}]`, i.e. the integral of `p pdf(p)` over `[0, pbar]`.
pub fn expected_satisfaction(g: &GaussianMixture, pbar: f64) -> f64 {
    if pbar <= 0.0 {
        return 0.0;
    }
    g.components()
        .iter()
        .map(|c| {
            let a = -c.mean / c.std;
            let b = (pbar - c.mean) / c.std;
            c.weight * (c.mean * (normal_cdf(b) - normal_cdf(a)) - c.std * (normal_pdf(b) - normal_pdf(a)))
        })
        .sum()
}

/// Smallest `pbar` with `P(D <= pbar) >= 1 - epsilon`.
pub fn chance_bound(g: &GaussianMixture, epsilon: f64) -> Result<f64, HcError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(HcError::Invalid(format!("epsilon {epsilon} must lie in (0, 1)")));
    }
    Ok(g.quantile(1.0 - epsilon)?)
}

#[derive(Debug, Clone)]
pub struct HcProblem {
    pub network: DistributionNetwork,
    /// Demand mixture per station in the network's station order, per unit.
    pub demands: Vec<GaussianMixture>,
    pub epsilon: Vec<f64>,
    pub segments: usize,
    pub settings: SocpSettings,
    pub loss_weight: f64,
}

impl HcProblem {
    pub fn new(network: DistributionNetwork, demands: Vec<GaussianMixture>, epsilon: f64) -> Self {
        let n = demands.len();
        Self {
            network,
            demands,
            epsilon: vec![epsilon; n],
            segments: 20,
            settings: SocpSettings::default(),
            loss_weight: LOSS_WEIGHT,
        }
    }

    pub fn with_segments(mut self, n: usize) -> Self {
        self.segments = n;
        self
    }

    pub fn validate(&self) -> Result<(), HcError> {
        let n = self.network.station_buses().len();
        if self.demands.len() != n || self.epsilon.len() != n {
            return Err(HcError::Invalid(format!(
                "{} mixtures and {} epsilons for {n} stations",
                self.demands.len(),
                self.epsilon.len()
            )));
        }
        if let Some(e) = self.epsilon.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(HcError::Invalid(format!("epsilon {e} must lie in (0, 1)")));
        }
        if self.segments == 0 {
            return Err(HcError::Invalid("segment count must be at least 1".into()));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(HcError::Invalid(format!("loss weight {}", self.loss_weight)));
        }
        Ok(())
    }
}
