//! Data lifecycle: synthetic transactions, cleaning, aggregation into
//! 15-minute demand series, normalization, windowing and splits, the
//! interval-conditioned probabilistic forecast, and evaluation metrics.

mod dataset;
mod metrics;
mod probabilistic;
mod synth;
mod transactions;

use thiserror::Error;

use crate::forecast::ForecastError;
use crate::prob::ProbError;

pub use dataset::{
    denormalize, fit_scale, normalize, prepare_dataset, read_series_csv, split_indices, window_and_split,
    window_targets, write_series_csv, DatasetManifest, DemandSeries, SplitRatios, WindowedDataset,
};
pub use metrics::{metrics, Metrics, MetricsAccumulator};
pub use probabilistic::{
    build_interval_error_model, build_interval_error_model_from_pairs, demand_similarity, forecast_pairs,
    probabilistic_forecast, probabilistic_from_point, ErrorModelOptions,
};
pub use synth::{synth_generate, SynthOutput, SynthSpec};
pub use transactions::{
    aggregate, clean_transactions, read_transactions_csv, write_transactions_csv, ChargingTransaction, CleaningRules,
    Rejection,
};

/// Slot length in minutes.
pub const SLOT_MINUTES: i64 = 15;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("WAPE undefined: truths sum to zero")]
    UndefinedWape,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}
