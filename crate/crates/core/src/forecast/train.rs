use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward_raw, grad, loss, Batch};
use super::{ForecastError, ForecastModelParams, Sample, TrainConfig};

const EVAL_CHUNK: usize = 256;
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters with the lowest validation loss.
    pub params: ForecastModelParams,
    pub curve: Vec<LossPoint>,
    pub initial_train_loss: f64,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Mean loss over a split, evaluated in fixed-size chunks.
fn split_loss(params: &ForecastModelParams, samples: &[Sample]) -> Result<f64, ForecastError> {
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        total += loss(params, &batch)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Clamped predictions for every sample, one vector per sample.
pub fn predict(params: &ForecastModelParams, samples: &[Sample]) -> Result<Vec<Vec<f64>>, ForecastError> {
    let n = params.spec.n_stations;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let feats: Vec<_> = chunk.iter().map(|s| &s.features).collect();
        let batch = Batch::from_features(&feats)?;
        let raw = forward_raw(params, &batch)?;
        out.extend(raw.chunks(n).map(|r| r.iter().map(|v| v.clamp(0.0, 1.0)).collect()));
    }
    Ok(out)
}

/// Root of the mean (over samples) station-summed squared error of clamped forecasts.
pub fn evaluate_rmse(params: &ForecastModelParams, samples: &[Sample]) -> Result<f64, ForecastError> {
    if samples.is_empty() {
        return Err(ForecastError::EmptySplit("evaluation"));
    }
    let preds = predict(params, samples)?;
    let sse: f64 = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| p.iter().zip(&s.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok((sse / samples.len() as f64).sqrt())
}

/// Mini-batch RMSprop; keeps the parameters with the lowest validation loss.
pub fn train(
    init: ForecastModelParams,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    test_set: &[Sample],
) -> Result<TrainResult, ForecastError> {
    cfg.validate()?;
    init.validate()?;
    for (name, s) in [("train", train_set), ("validation", val_set), ("test", test_set)] {
        if s.is_empty() {
            return Err(ForecastError::EmptySplit(name));
        }
    }
    let mut params = init;
    let mut sq: Vec<Vec<f64>> = params.tensors.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let initial_train_loss = split_loss(&params, train_set)?;
    let mut best = (params.clone(), f64::INFINITY, 0usize);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_samples(&refs)?;
            let (l, grads) = grad(&params, &batch)?;
            if !l.is_finite() || l > DIVERGENCE_LOSS {
                return Err(ForecastError::Diverged { epoch, loss: l });
            }
            acc += l * idx.len() as f64;
            for (((_, p), g), v) in params.tensors.iter_mut().zip(&grads).zip(sq.iter_mut()) {
                for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                    *vv = cfg.rms_alpha * *vv + (1.0 - cfg.rms_alpha) * gv * gv;
                    *pv -= cfg.learning_rate * gv / (vv.sqrt() + cfg.rms_eps);
                }
            }
        }
        let train_loss = acc / train_set.len() as f64;
        let val = split_loss(&params, val_set)?;
        let test = split_loss(&params, test_set)?;
        debug!("epoch {epoch}: train {train_loss:.6} val {val:.6} test {test:.6}");
        curve.push(LossPoint { epoch, train: train_loss, val, test });
        if val < best.1 {
            best = (params.clone(), val, epoch);
        }
    }
    if cfg.epochs == 0 {
        best.1 = split_loss(&params, val_set)?;
    }
    info!("training finished: best validation loss {:.6} at epoch {}", best.1, best.2);
    Ok(TrainResult { params: best.0, curve, initial_train_loss, best_epoch: best.2, best_val: best.1 })
}
