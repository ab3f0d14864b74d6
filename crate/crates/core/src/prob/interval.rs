//! Forecast-interval-conditioned error distributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{fit_gmm_bic, EmOptions, GaussianMixture, ProbError};

/// 1-based interval index of a normalized forecast: `ceil(p * n_f)` clamped to
/// `[1, n_f]`. Intervals are right-closed, so `0.40` belongs to interval 40.
pub fn interval_index(p: f64, n_f: usize) -> usize {
    let raw = (p * n_f as f64 - 1e-9).ceil();
    if raw.is_nan() || raw < 1.0 {
        1
    } else if raw > n_f as f64 {
        n_f
    } else {
        raw as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationErrorModel {
    /// One entry per interval; `None` marks intervals with too few samples.
    pub intervals: Vec<Option<GaussianMixture>>,
    pub counts: Vec<usize>,
    /// Fit over all of the station's errors; used for sparse intervals.
    pub pooled: GaussianMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalErrorModel {
    pub n_intervals: usize,
    pub min_samples: usize,
    pub stations: BTreeMap<usize, StationErrorModel>,
}

impl IntervalErrorModel {
    /// Fits one model per station from `(forecast, truth)` pairs.
    pub fn fit(
        n_intervals: usize,
        min_samples: usize,
        k_max: usize,
        pairs: &BTreeMap<usize, Vec<(f64, f64)>>,
        opts: &EmOptions,
    ) -> Result<Self, ProbError> {
        if n_intervals == 0 {
            return Err(ProbError::InvalidArgument("n_intervals must be positive".into()));
        }
        let mut stations = BTreeMap::new();
        for (&id, obs) in pairs {
            if obs.is_empty() {
                return Err(ProbError::TooFewSamples { needed: 1, got: 0 });
            }
            let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n_intervals];
            let all: Vec<f64> = obs.iter().map(|(f, t)| t - f).collect();
            for ((f, _), e) in obs.iter().zip(&all) {
                buckets[interval_index(*f, n_intervals) - 1].push(*e);
            }
            let pooled = fit_gmm_bic(&all, k_max, opts)?.mixture;
            let mut intervals = Vec::with_capacity(n_intervals);
            let mut counts = Vec::with_capacity(n_intervals);
            for (j, b) in buckets.iter().enumerate() {
                counts.push(b.len());
                if b.len() >= min_samples.max(1) {
                    let o = EmOptions { seed: opts.seed ^ ((id as u64) << 20) ^ j as u64, ..*opts };
                    intervals.push(Some(fit_gmm_bic(b, k_max, &o)?.mixture));
                } else {
                    intervals.push(None);
                }
            }
            stations.insert(id, StationErrorModel { intervals, counts, pooled });
        }
        Ok(Self { n_intervals, min_samples, stations })
    }

    /// Error distribution for a station's deterministic forecast `p`,
    /// falling back to the pooled fit for sparse intervals.
    pub fn error_for(&self, station: usize, p: f64) -> Option<&GaussianMixture> {
        let s = self.stations.get(&station)?;
        let j = interval_index(p, self.n_intervals);
        Some(s.intervals[j - 1].as_ref().unwrap_or(&s.pooled))
    }
}
