use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, SLOT_MINUTES};
use crate::forecast::{FeatureTensor, Sample};

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSeries {
    pub station: usize,
    pub t0: NaiveDateTime,
    pub step_minutes: i64,
    pub values: Vec<f64>,
    /// kW per unit; 1 for raw series.
    pub scale: f64,
}

impl DemandSeries {
    pub fn timestamp(&self, k: usize) -> NaiveDateTime {
        self.t0 + Duration::minutes(self.step_minutes * k as i64)
    }
}

/// Largest value over `slots` (all slots when `None`); 1 for an all-zero series.
pub fn fit_scale(values: &[f64], slots: Option<&BTreeSet<usize>>) -> f64 {
    let max = match slots {
        Some(s) => s.iter().map(|&k| values[k]).fold(0.0, f64::max),
        None => values.iter().copied().fold(0.0, f64::max),
    };
    if max > 0.0 {
        max
    } else {
        1.0
    }
}

/// Divides by `scale`; values above 1 (outside the fitting slots) are clipped.
pub fn normalize(series: &DemandSeries, scale: f64) -> DemandSeries {
    let mut clipped = 0usize;
    let values = series
        .values
        .iter()
        .map(|v| {
            let x = v / scale;
            if x > 1.0 {
                clipped += 1;
                1.0
            } else {
                x
            }
        })
        .collect();
    if clipped > 0 {
        warn!("station {}: {clipped} normalized values above 1 clipped", series.station);
    }
    DemandSeries { values, scale: series.scale * scale, ..series.clone() }
}

pub fn denormalize(series: &DemandSeries) -> DemandSeries {
    DemandSeries { values: series.values.iter().map(|v| v * series.scale).collect(), scale: 1.0, ..series.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config(format!("split ratios {parts:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

/// Target slots of all length-`t` windows that stay inside one segment.
pub fn window_targets(t: usize, segments: &[Range<usize>]) -> Vec<usize> {
    segments.iter().flat_map(|seg| (seg.start + t)..seg.end.max(seg.start + t)).collect()
}

/// Seeded random partition of `0..n` into sorted train/val/test index lists.
pub fn split_indices(n: usize, ratios: &SplitRatios, seed: u64) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * ratios.train).round() as usize;
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
    let mut parts =
        [order[..n_train].to_vec(), order[n_train..n_train + n_val].to_vec(), order[n_train + n_val..].to_vec()];
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub stations: Vec<usize>,
    pub t: usize,
    pub t0: NaiveDateTime,
    pub samples: Vec<Sample>,
    /// Slot index of each sample's target.
    pub target_slots: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// kW per normalized unit, per station.
    pub scales: Vec<f64>,
}

impl WindowedDataset {
    pub fn subset(&self, idx: &[usize]) -> Vec<Sample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn train_samples(&self) -> Vec<Sample> {
        self.subset(&self.train)
    }

    pub fn val_samples(&self) -> Vec<Sample> {
        self.subset(&self.val)
    }

    pub fn test_samples(&self) -> Vec<Sample> {
        self.subset(&self.test)
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }
}

fn check_aligned(series: &[DemandSeries]) -> Result<(usize, NaiveDateTime), PipelineError> {
    let first = series.first().ok_or_else(|| PipelineError::Data("no series".into()))?;
    let len = first.values.len();
    for s in series {
        if s.values.len() != len || s.t0 != first.t0 || s.step_minutes != SLOT_MINUTES {
            return Err(PipelineError::Data(format!(
                "series for station {} is not aligned with station {}",
                s.station, first.station
            )));
        }
    }
    Ok((len, first.t0))
}

fn calendar(t0: NaiveDateTime, k: usize) -> (usize, usize) {
    let ts = t0 + Duration::minutes(SLOT_MINUTES * k as i64);
    let tod = (ts.hour() as usize * 60 + ts.minute() as usize) / SLOT_MINUTES as usize;
    (tod, ts.weekday().num_days_from_monday() as usize)
}

/// Sliding windows of `t` slots with the next slot as target, partitioned at
/// random under `seed`. `segments` defaults to the whole series.
pub fn window_and_split(
    series: &[DemandSeries],
    t: usize,
    ratios: &SplitRatios,
    seed: u64,
    segments: Option<&[Range<usize>]>,
) -> Result<WindowedDataset, PipelineError> {
    let targets = targets_for(series, t, segments)?;
    let [train, val, test] = split_indices(targets.len(), ratios, seed);
    build_windows(series, t, targets, [train, val, test])
}

fn targets_for(
    series: &[DemandSeries],
    t: usize,
    segments: Option<&[Range<usize>]>,
) -> Result<Vec<usize>, PipelineError> {
    if t == 0 {
        return Err(PipelineError::Config("window length must be positive".into()));
    }
    let (len, _) = check_aligned(series)?;
    let whole = [0..len];
    let segments = segments.unwrap_or(&whole);
    if segments.iter().any(|s| s.end > len) {
        return Err(PipelineError::Data("segment extends past the series".into()));
    }
    let targets = window_targets(t, segments);
    if targets.is_empty() {
        return Err(PipelineError::Data(format!("series too short for windows of {t} slots")));
    }
    Ok(targets)
}

pub(crate) fn build_windows(
    series: &[DemandSeries],
    t: usize,
    targets: Vec<usize>,
    split: [Vec<usize>; 3],
) -> Result<WindowedDataset, PipelineError> {
    let (_, t0) = check_aligned(series)?;
    let n = series.len();
    if split.iter().flatten().any(|&i| i >= targets.len()) {
        return Err(PipelineError::Data("split index out of range".into()));
    }
    let samples = targets
        .iter()
        .map(|&k| {
            let mut demand = Vec::with_capacity(n * t);
            for s in series {
                demand.extend_from_slice(&s.values[k - t..k]);
            }
            let (tod, dow) = (k - t..k).map(|j| calendar(t0, j)).unzip();
            Sample {
                features: FeatureTensor { n_stations: n, t, demand, tod, dow, covariates: Vec::new() },
                target: series.iter().map(|s| s.values[k]).collect(),
            }
        })
        .collect();
    let [train, val, test] = split;
    Ok(WindowedDataset {
        stations: series.iter().map(|s| s.station).collect(),
        t,
        t0,
        samples,
        target_slots: targets,
        train,
        val,
        test,
        scales: series.iter().map(|s| s.scale).collect(),
    })
}

/// Windows raw kW series, then normalizes each station by the maximum over
/// the slots touched by training windows.
pub fn prepare_dataset(
    raw: &[DemandSeries],
    t: usize,
    ratios: &SplitRatios,
    seed: u64,
    segments: Option<&[Range<usize>]>,
) -> Result<WindowedDataset, PipelineError> {
    ratios.validate()?;
    let targets = targets_for(raw, t, segments)?;
    let split = split_indices(targets.len(), ratios, seed);
    let train_slots: BTreeSet<usize> = split[0].iter().flat_map(|&i| targets[i] - t..=targets[i]).collect();
    let normalized: Vec<DemandSeries> =
        raw.iter().map(|s| normalize(s, fit_scale(&s.values, Some(&train_slots)))).collect();
    build_windows(&normalized, t, targets, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub t: usize,
    pub ratios: SplitRatios,
    pub stations: Vec<usize>,
    pub t0: NaiveDateTime,
    pub n_slots: usize,
    pub scales: Vec<f64>,
    pub n_transactions: usize,
    pub n_rejected: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn from_dataset(ds: &WindowedDataset, seed: u64, ratios: SplitRatios, n_slots: usize) -> Self {
        Self {
            seed,
            t: ds.t,
            ratios,
            stations: ds.stations.clone(),
            t0: ds.t0,
            n_slots,
            scales: ds.scales.clone(),
            n_transactions: 0,
            n_rejected: 0,
            train: ds.train.clone(),
            val: ds.val.clone(),
            test: ds.test.clone(),
        }
    }

    /// Rebuilds the windowed dataset from normalized series and the stored split.
    pub fn restore(&self, normalized: &[DemandSeries]) -> Result<WindowedDataset, PipelineError> {
        let by_station: Vec<DemandSeries> = self
            .stations
            .iter()
            .zip(&self.scales)
            .map(|(id, &scale)| {
                normalized
                    .iter()
                    .find(|s| s.station == *id)
                    .map(|s| DemandSeries { scale, ..s.clone() })
                    .ok_or_else(|| PipelineError::Data(format!("no series for station {id}")))
            })
            .collect::<Result<_, _>>()?;
        let (len, _) = check_aligned(&by_station)?;
        if len != self.n_slots {
            return Err(PipelineError::Data(format!("manifest expects {} slots, series have {len}", self.n_slots)));
        }
        let targets = targets_for(&by_station, self.t, None)?;
        build_windows(&by_station, self.t, targets, [self.train.clone(), self.val.clone(), self.test.clone()])
    }
}

pub fn write_series_csv<W: Write>(w: W, series: &[DemandSeries]) -> Result<(), PipelineError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["station", "timestamp", "value"])?;
    for s in series {
        for (k, v) in s.values.iter().enumerate() {
            out.write_record([s.station.to_string(), s.timestamp(k).format(TIME_FORMAT).to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads `station,timestamp,value` rows; each station's rows must be evenly
/// spaced at the slot length. Scales are set to 1.
pub fn read_series_csv<R: Read>(r: R) -> Result<Vec<DemandSeries>, PipelineError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out: Vec<DemandSeries> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| PipelineError::Data(format!("series row {}: bad {what}", line + 2));
        let station: usize = rec.get(0).ok_or_else(|| bad("station"))?.trim().parse().map_err(|_| bad("station"))?;
        let ts = NaiveDateTime::parse_from_str(rec.get(1).ok_or_else(|| bad("timestamp"))?.trim(), TIME_FORMAT)
            .map_err(|_| bad("timestamp"))?;
        let value: f64 = rec.get(2).ok_or_else(|| bad("value"))?.trim().parse().map_err(|_| bad("value"))?;
        match out.iter_mut().find(|s| s.station == station) {
            Some(s) => {
                if s.timestamp(s.values.len()) != ts {
                    return Err(bad("spacing"));
                }
                s.values.push(value);
            }
            None => {
                out.push(DemandSeries { station, t0: ts, step_minutes: SLOT_MINUTES, values: vec![value], scale: 1.0 })
            }
        }
    }
    Ok(out)
}
