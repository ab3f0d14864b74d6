use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::forecast::{predict, FeatureTensor, ForecastModelParams, Sample};
use crate::prob::{gmm_shift, EmOptions, GaussianMixture, IntervalErrorModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorModelOptions {
    /// Number of equal-width forecast intervals on [0, 1].
    pub n_f: usize,
    /// Intervals with fewer errors use the station's pooled fit.
    pub min_samples: usize,
    /// Largest component count tried by BIC selection.
    pub k_max: usize,
    pub seed: u64,
}

impl Default for ErrorModelOptions {
    fn default() -> Self {
        Self { n_f: 100, min_samples: 30, k_max: 4, seed: 0 }
    }
}

impl ErrorModelOptions {
    fn em(&self) -> EmOptions {
        EmOptions { tol: 1e-7, max_iter: 300, seed: self.seed, n_init: 1 }
    }
}

/// `(clamped forecast, truth)` pairs per station id.
pub fn forecast_pairs(
    params: &ForecastModelParams,
    samples: &[Sample],
    stations: &[usize],
) -> Result<BTreeMap<usize, Vec<(f64, f64)>>, PipelineError> {
    let preds = predict(params, samples)?;
    let mut pairs: BTreeMap<usize, Vec<(f64, f64)>> = stations.iter().map(|&s| (s, Vec::new())).collect();
    for (p, s) in preds.iter().zip(samples) {
        for (i, id) in stations.iter().enumerate() {
            pairs.get_mut(id).expect("station key").push((p[i], s.target[i]));
        }
    }
    Ok(pairs)
}

pub fn build_interval_error_model_from_pairs(
    pairs: &BTreeMap<usize, Vec<(f64, f64)>>,
    opts: &ErrorModelOptions,
) -> Result<IntervalErrorModel, PipelineError> {
    if pairs.values().all(|v| v.is_empty()) {
        return Err(PipelineError::Data("empty forecast history".into()));
    }
    if opts.n_f == 0 {
        return Err(PipelineError::Config("n_f must be at least 1".into()));
    }
    Ok(IntervalErrorModel::fit(opts.n_f, opts.min_samples, opts.k_max, pairs, &opts.em())?)
}

/// Runs the deterministic model over `history` and fits one error mixture per
/// station and forecast interval.
pub fn build_interval_error_model(
    params: &ForecastModelParams,
    history: &[Sample],
    stations: &[usize],
    opts: &ErrorModelOptions,
) -> Result<IntervalErrorModel, PipelineError> {
    if history.is_empty() {
        return Err(PipelineError::Data("empty forecast history".into()));
    }
    build_interval_error_model_from_pairs(&forecast_pairs(params, history, stations)?, opts)
}

/// Shifts each station's interval error mixture by its point forecast.
pub fn probabilistic_from_point(
    model: &IntervalErrorModel,
    stations: &[usize],
    point: &[f64],
) -> Result<Vec<GaussianMixture>, PipelineError> {
    stations
        .iter()
        .zip(point)
        .map(|(&id, &p)| {
            model
                .error_for(id, p)
                .map(|e| gmm_shift(e, p))
                .ok_or_else(|| PipelineError::Data(format!("error model has no station {id}")))
        })
        .collect()
}

pub fn probabilistic_forecast(
    params: &ForecastModelParams,
    model: &IntervalErrorModel,
    features: &FeatureTensor,
    stations: &[usize],
) -> Result<Vec<GaussianMixture>, PipelineError> {
    let point = crate::forecast::forward(params, features)?;
    probabilistic_from_point(model, stations, &point)
}

/// Pearson correlation of station target series, negatives clipped to zero;
/// the fixed adjacency of the noWA variant.
pub fn demand_similarity(samples: &[Sample], n: usize) -> Vec<f64> {
    let m = samples.len() as f64;
    let mean: Vec<f64> = (0..n).map(|i| samples.iter().map(|s| s.target[i]).sum::<f64>() / m).collect();
    let mut cov = vec![0.0; n * n];
    for s in samples {
        for i in 0..n {
            let di = s.target[i] - mean[i];
            for j in 0..n {
                cov[i * n + j] += di * (s.target[j] - mean[j]);
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let den = (cov[i * n + i] * cov[j * n + j]).sqrt();
            out[i * n + j] = if i == j {
                1.0
            } else if den > 0.0 {
                (cov[i * n + j] / den).max(0.0)
            } else {
                0.0
            };
        }
    }
    out
}
