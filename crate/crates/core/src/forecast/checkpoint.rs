use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ForecastError, ForecastModelParams, LossPoint, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: config echo, tensors with shapes, training metadata and
/// the per-station scale factors needed to de-normalize forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: ForecastModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub curve: Vec<LossPoint>,
    /// kW per normalized unit, keyed by station id.
    pub scales: Vec<(usize, f64)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ForecastError> {
        let text = serde_json::to_string(self).map_err(|e| ForecastError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ForecastError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ForecastError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ForecastError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| ForecastError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(ForecastError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}
