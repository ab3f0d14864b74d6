//! Synthetic charging data with a known spatial correlation structure.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ChargingTransaction, DemandSeries, PipelineError, SLOT_MINUTES};
use crate::forecast::SLOTS_PER_DAY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub stations: Vec<usize>,
    pub days: usize,
    pub start: NaiveDate,
    pub seed: u64,
    /// Row-major lag-0 correlation of the AR(1) noise; identity-like if empty.
    pub correlation: Vec<f64>,
    /// Correlation between neighbouring stations when `correlation` is empty.
    pub neighbour_correlation: f64,
    /// Station peak demand in kW; cycled if shorter than `stations`.
    pub peak_kw: Vec<f64>,
    pub noise_amp: f64,
    pub ar_coef: f64,
    pub spike_prob: f64,
    pub spike_amp: f64,
    pub weekend_factor: f64,
    pub charger_kw: f64,
    /// Draws below this are treated as idle.
    pub min_power_kw: f64,
    /// Per-station-slot probability of an additional invalid transaction.
    pub invalid_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            stations: crate::grid::IEEE33_STATION_BUSES.to_vec(),
            days: 365,
            start: NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date"),
            seed: 0,
            correlation: Vec::new(),
            neighbour_correlation: 0.6,
            peak_kw: vec![180.0, 240.0, 150.0, 300.0, 210.0, 270.0, 160.0, 330.0, 200.0, 250.0, 190.0, 280.0],
            noise_amp: 0.12,
            ar_coef: 0.7,
            spike_prob: 0.02,
            spike_amp: 0.5,
            weekend_factor: 0.6,
            charger_kw: 60.0,
            min_power_kw: 4.0,
            invalid_rate: 0.002,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let n = self.stations.len();
        if self.days == 0 {
            return bad("days must be at least 1".into());
        }
        if n == 0 {
            return bad("at least one station is required".into());
        }
        if !self.correlation.is_empty() && self.correlation.len() != n * n {
            return bad(format!("correlation has {} entries for {n} stations", self.correlation.len()));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return bad("ar_coef must lie in (-1, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.spike_prob) || !(0.0..=1.0).contains(&self.invalid_rate) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.peak_kw.is_empty() || self.peak_kw.iter().any(|p| !(*p > 0.0)) {
            return bad("peak_kw must be a non-empty list of positive values".into());
        }
        if !(self.charger_kw > 0.0) || self.min_power_kw < 0.0 || self.noise_amp < 0.0 {
            return bad("charger_kw must be positive; min_power_kw and noise_amp non-negative".into());
        }
        Ok(())
    }

    pub fn t0(&self) -> NaiveDateTime {
        self.start.and_hms_opt(0, 0, 0).expect("midnight")
    }

    pub fn n_slots(&self) -> usize {
        self.days * SLOTS_PER_DAY
    }

    pub fn peak(&self, station_index: usize) -> f64 {
        self.peak_kw[station_index % self.peak_kw.len()]
    }

    /// Correlation matrix of the noise: the explicit one, or a chain where
    /// stations `i` and `j` correlate as `rho^|i-j|`.
    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        let n = self.stations.len();
        if self.correlation.is_empty() {
            DMatrix::from_fn(n, n, |i, j| self.neighbour_correlation.powi(i.abs_diff(j) as i32))
        } else {
            DMatrix::from_row_slice(n, n, &self.correlation)
        }
    }

    /// Noise-free demand fraction of peak for a station at a slot of day.
    pub fn base_profile(&self, station_index: usize, slot_of_day: usize, weekend: bool) -> f64 {
        let hour = slot_of_day as f64 * SLOT_MINUTES as f64 / 60.0;
        let shift = (station_index % 5) as f64 * 0.5 - 1.0;
        let bump = |center: f64, width: f64| {
            let mut d = (hour - center).abs();
            d = d.min(24.0 - d);
            (-0.5 * (d / width).powi(2)).exp()
        };
        let peaks = 0.55 * bump(8.5 + shift, 1.5) + 0.8 * bump(18.5 + shift, 2.0);
        let damp = if weekend { self.weekend_factor } else { 1.0 };
        0.12 + damp * peaks
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Valid transactions reproducing `series`, with invalid ones mixed in.
    pub transactions: Vec<ChargingTransaction>,
    /// Ground-truth demand in kW.
    pub series: Vec<DemandSeries>,
    /// Unit-variance AR(1) noise per station.
    pub noise: Vec<Vec<f64>>,
}

/// Symmetric square root factor `L` with `L L^T = c`, tolerating
/// semidefinite inputs (eigenvalues clipped at zero).
fn correlation_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = c.clone().symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    l
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput, PipelineError> {
    spec.validate()?;
    let n = spec.stations.len();
    let slots = spec.n_slots();
    let t0 = spec.t0();
    let l = correlation_factor(&spec.correlation_matrix());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let innov = (1.0 - spec.ar_coef * spec.ar_coef).sqrt();

    let mut noise = vec![vec![0.0; slots]; n];
    let mut state = vec![0.0; n];
    let mut xi = vec![0.0; n];
    for k in 0..slots {
        for x in xi.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        for i in 0..n {
            let shock: f64 = (0..n).map(|j| l[(i, j)] * xi[j]).sum();
            state[i] = if k == 0 { shock } else { spec.ar_coef * state[i] + innov * shock };
            noise[i][k] = state[i];
        }
    }

    let mut values = vec![vec![0.0; slots]; n];
    for k in 0..slots {
        let day = spec.start + Duration::days((k / SLOTS_PER_DAY) as i64);
        let weekend = day.weekday().num_days_from_monday() >= 5;
        for i in 0..n {
            let spike =
                if rng.random::<f64>() < spec.spike_prob { spec.spike_amp * rng.random_range(0.5..1.0) } else { 0.0 };
            let frac = spec.base_profile(i, k % SLOTS_PER_DAY, weekend) + spec.noise_amp * noise[i][k] + spike;
            let kw = spec.peak(i) * frac.max(0.0);
            values[i][k] = if kw < spec.min_power_kw { 0.0 } else { kw };
        }
    }

    let slot_h = SLOT_MINUTES as f64 / 60.0;
    let mut transactions = Vec::new();
    for k in 0..slots {
        let start = t0 + Duration::minutes(SLOT_MINUTES * k as i64);
        let end = start + Duration::minutes(SLOT_MINUTES);
        for i in 0..n {
            let p = values[i][k];
            if p > 0.0 {
                let count = (p / spec.charger_kw).ceil() as usize;
                let each = p / count as f64;
                for _ in 0..count {
                    transactions.push(ChargingTransaction {
                        station: spec.stations[i],
                        start,
                        end,
                        energy: each * slot_h,
                        mean_power: each,
                    });
                }
            }
            if rng.random::<f64>() < spec.invalid_rate {
                transactions.push(invalid_transaction(&mut rng, spec.stations[i], start));
            }
        }
    }

    let series = spec
        .stations
        .iter()
        .zip(values)
        .map(|(&station, values)| DemandSeries { station, t0, step_minutes: SLOT_MINUTES, values, scale: 1.0 })
        .collect();
    Ok(SynthOutput { transactions, series, noise })
}

/// A transaction that the default cleaning rules reject.
fn invalid_transaction(rng: &mut ChaCha8Rng, station: usize, start: NaiveDateTime) -> ChargingTransaction {
    let (minutes, energy) = match rng.random_range(0..4) {
        0 => (15, 0.5),
        1 => (25 * 60, 100.0),
        2 => (15, 100.0),
        _ => (0, 2.0),
    };
    let end = start + Duration::minutes(minutes);
    let hours = minutes as f64 / 60.0;
    ChargingTransaction {
        station,
        start,
        end,
        energy,
        mean_power: if hours > 0.0 { energy / hours } else { f64::INFINITY },
    }
}
