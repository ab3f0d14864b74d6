//! Adaptive spatio-temporal graph convolutional forecaster (ASTGCN).
//!
//! The forward graph is: feature embedding, adaptive adjacency (embedding
//! similarity plus a demand-driven Gaussian kernel), two ST-Conv blocks
//! (gated temporal conv with attention, Chebyshev graph conv, gated temporal
//! conv with attention), second-order pooling and an MLP head.

mod baseline;
mod checkpoint;
pub mod layers;
mod model;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::AutogradError;

pub use baseline::baseline_ha;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use model::{forward, forward_raw, grad, loss, Batch};
pub use params::{ForecastModelParams, ModelSpec, ShapeEntry};
pub use train::{evaluate_rmse, predict, train, LossPoint, TrainResult};

/// Slots per day at 15-minute resolution.
pub const SLOTS_PER_DAY: usize = 96;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    NonFinite(#[from] AutogradError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Variant {
    Full,
    /// Fixed demand-correlation similarity instead of the adaptive adjacency.
    NoWA,
    /// Temporal attention removed.
    NoTA,
    /// Flatten-plus-dense head instead of second-order pooling.
    Fc,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "ASTGCN",
            Variant::NoWA => "noWA",
            Variant::NoTA => "noTA",
            Variant::Fc => "fc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "full" | "ASTGCN" | "astgcn" => Some(Variant::Full),
            "noWA" | "nowa" => Some(Variant::NoWA),
            "noTA" | "nota" => Some(Variant::NoTA),
            "fc" | "FC" => Some(Variant::Fc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k_s: usize,
    pub n_e: usize,
    /// Output width of each ST-Conv block.
    pub channels: Vec<usize>,
    pub k_t: usize,
    pub d_k: usize,
    pub z_prime: usize,
    pub hidden: usize,
    /// Width of the time-of-day and day-of-week embeddings.
    pub time_embedding: usize,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 60,
            k_s: 3,
            n_e: 10,
            channels: vec![16, 16],
            k_t: 2,
            d_k: 16,
            z_prime: 16,
            hidden: 64,
            time_embedding: 4,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: &str| Err(ForecastError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.k_s == 0 {
            return bad("k_s must be at least 1");
        }
        if self.k_t == 0 {
            return bad("k_t must be at least 1");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive widths");
        }
        if self.n_e == 0 || self.d_k == 0 || self.z_prime == 0 || self.hidden == 0 {
            return bad("n_e, d_k, z_prime and hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.rms_alpha) || self.rms_eps <= 0.0 {
            return bad("rms_alpha must lie in [0, 1) and rms_eps must be positive");
        }
        Ok(())
    }
}

/// One input window: raw demand history plus calendar indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    pub n_stations: usize,
    pub t: usize,
    /// Normalized demand, station-major `[station][time]`.
    pub demand: Vec<f64>,
    /// Slot of day (0..96) per time step.
    pub tod: Vec<usize>,
    /// Day of week (0 = Monday) per time step.
    pub dow: Vec<usize>,
    /// Optional covariates `[station][time][k]`; empty when unused.
    pub covariates: Vec<f64>,
}

impl FeatureTensor {
    pub fn n_covariates(&self) -> usize {
        if self.covariates.is_empty() {
            0
        } else {
            self.covariates.len() / (self.n_stations * self.t)
        }
    }

    pub fn station_window(&self, s: usize) -> &[f64] {
        &self.demand[s * self.t..(s + 1) * self.t]
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        let n = self.n_stations * self.t;
        if self.demand.len() != n || self.tod.len() != self.t || self.dow.len() != self.t {
            return Err(ForecastError::Shape(format!(
                "window of {} stations x {} slots has {} demand values, {} tod, {} dow",
                self.n_stations,
                self.t,
                self.demand.len(),
                self.tod.len(),
                self.dow.len()
            )));
        }
        if !self.covariates.is_empty() && self.covariates.len() % n != 0 {
            return Err(ForecastError::Shape("covariate length".into()));
        }
        if self.tod.iter().any(|&x| x >= SLOTS_PER_DAY) || self.dow.iter().any(|&x| x >= 7) {
            return Err(ForecastError::Shape("calendar index out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureTensor,
    /// Next-slot normalized demand per station.
    pub target: Vec<f64>,
}
