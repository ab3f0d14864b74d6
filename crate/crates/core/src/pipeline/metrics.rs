use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Deterministic forecast accuracy. MAE and RMSE sum the error over stations
/// and average over samples; WAPE is a fraction (multiply by 100 for percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub wape: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    samples: usize,
    abs: f64,
    sq: f64,
    truth: f64,
}

impl MetricsAccumulator {
    pub fn push(&mut self, prediction: &[f64], truth: &[f64]) -> Result<(), PipelineError> {
        if prediction.len() != truth.len() {
            return Err(PipelineError::Data(format!(
                "prediction has {} stations, truth {}",
                prediction.len(),
                truth.len()
            )));
        }
        for (p, t) in prediction.iter().zip(truth) {
            self.abs += (t - p).abs();
            self.sq += (t - p).powi(2);
            self.truth += t;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics, PipelineError> {
        if self.samples == 0 {
            return Err(PipelineError::Data("no samples to score".into()));
        }
        if self.truth == 0.0 {
            return Err(PipelineError::UndefinedWape);
        }
        let d = self.samples as f64;
        Ok(Metrics { mae: self.abs / d, rmse: (self.sq / d).sqrt(), wape: self.abs / self.truth })
    }
}

pub fn metrics(predictions: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Metrics, PipelineError> {
    if predictions.len() != truths.len() {
        return Err(PipelineError::Data(format!("{} predictions for {} truths", predictions.len(), truths.len())));
    }
    let mut acc = MetricsAccumulator::default();
    for (p, t) in predictions.iter().zip(truths) {
        acc.push(p, t)?;
    }
    acc.finish()
}
