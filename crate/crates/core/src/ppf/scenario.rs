use serde::{Deserialize, Serialize};

use super::PpfError;
use crate::grid::DistributionNetwork;
use crate::prob::GaussianMixture;

/// Bundled IEEE 33-bus scenario with one demand mixture per station.
pub const SCENARIO12_JSON: &str = include_str!("../../data/scenario12.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationDemand {
    /// Station id (its bus number).
    pub station: usize,
    /// Charging demand, per unit on the network base.
    pub demand: GaussianMixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Multiplier applied to every base load of the network.
    pub load_scale: f64,
    pub v_min: f64,
    pub epsilon: f64,
    pub varsigma: f64,
    pub stations: Vec<StationDemand>,
}

impl Scenario {
    pub fn bundled() -> Self {
        serde_json::from_str(SCENARIO12_JSON).expect("bundled scenario parses")
    }

    pub fn network(&self, base: &DistributionNetwork) -> DistributionNetwork {
        base.with_load_scale(self.load_scale).with_voltage_limits(self.v_min, base.v_max)
    }

    /// Mixtures in the network's station order (ascending bus).
    pub fn mixtures(&self, net: &DistributionNetwork) -> Result<Vec<GaussianMixture>, PpfError> {
        net.stations()
            .iter()
            .map(|(id, _)| {
                self.stations
                    .iter()
                    .find(|s| s.station == *id)
                    .map(|s| s.demand.clone())
                    .ok_or_else(|| PpfError::Invalid(format!("scenario has no demand for station {id}")))
            })
            .collect()
    }
}
