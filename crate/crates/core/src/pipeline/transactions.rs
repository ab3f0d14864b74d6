use std::io::{Read, Write};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{DemandSeries, PipelineError, SLOT_MINUTES};

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingTransaction {
    pub station: usize,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    /// kWh
    pub energy: f64,
    /// kW
    pub mean_power: f64,
}

impl ChargingTransaction {
    pub fn duration_hours(&self) -> f64 {
        (self.end - self.start).num_seconds() as f64 / 3600.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningRules {
    pub min_energy_kwh: f64,
    pub min_duration_minutes: f64,
    pub max_duration_hours: f64,
    /// Upper bound on the mean charging power, kW.
    pub p_max_kw: f64,
}

impl Default for CleaningRules {
    fn default() -> Self {
        Self { min_energy_kwh: 1.0, min_duration_minutes: 1.0, max_duration_hours: 24.0, p_max_kw: 150.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub transaction: ChargingTransaction,
    /// One of "energy", "duration", "power".
    pub reason: &'static str,
}

pub fn clean_transactions(
    raw: &[ChargingTransaction],
    rules: &CleaningRules,
) -> (Vec<ChargingTransaction>, Vec<Rejection>) {
    let mut valid = Vec::with_capacity(raw.len());
    let mut rejected = Vec::new();
    for t in raw {
        let hours = t.duration_hours();
        let reason = if !(t.energy >= rules.min_energy_kwh) {
            Some("energy")
        } else if !(hours * 60.0 >= rules.min_duration_minutes && hours <= rules.max_duration_hours) {
            Some("duration")
        } else if !(t.mean_power > 0.0 && t.mean_power <= rules.p_max_kw) {
            Some("power")
        } else {
            None
        };
        match reason {
            Some(reason) => rejected.push(Rejection { transaction: t.clone(), reason }),
            None => valid.push(t.clone()),
        }
    }
    (valid, rejected)
}

/// Spreads each transaction's energy over the slots it overlaps, in
/// proportion to the overlap; slot values are average power in kW.
/// Energy falling outside `[t0, t0 + n_slots)` is dropped.
pub fn aggregate(
    valid: &[ChargingTransaction],
    stations: &[usize],
    t0: NaiveDateTime,
    n_slots: usize,
) -> Result<Vec<DemandSeries>, PipelineError> {
    let slot_s = SLOT_MINUTES * 60;
    let slot_h = SLOT_MINUTES as f64 / 60.0;
    let mut values = vec![vec![0.0; n_slots]; stations.len()];
    for t in valid {
        let row = stations
            .iter()
            .position(|&s| s == t.station)
            .ok_or_else(|| PipelineError::Data(format!("transaction for unknown station {}", t.station)))?;
        let a = (t.start - t0).num_seconds();
        let b = (t.end - t0).num_seconds();
        if b <= a {
            return Err(PipelineError::Data("transaction ends before it starts".into()));
        }
        let span = (b - a) as f64;
        let first = a.div_euclid(slot_s).max(0);
        let last = (b - 1).div_euclid(slot_s).min(n_slots as i64 - 1);
        for k in first..=last {
            let lo = a.max(k * slot_s);
            let hi = b.min((k + 1) * slot_s);
            if hi > lo {
                values[row][k as usize] += t.energy * (hi - lo) as f64 / span / slot_h;
            }
        }
    }
    Ok(stations
        .iter()
        .zip(values)
        .map(|(&station, values)| DemandSeries { station, t0, step_minutes: SLOT_MINUTES, values, scale: 1.0 })
        .collect())
}

pub fn write_transactions_csv<W: Write>(w: W, txs: &[ChargingTransaction]) -> Result<(), PipelineError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["station", "start_iso8601", "end_iso8601", "energy_kwh", "mean_power_kw"])?;
    for t in txs {
        out.write_record([
            t.station.to_string(),
            t.start.format(TIME_FORMAT).to_string(),
            t.end.format(TIME_FORMAT).to_string(),
            t.energy.to_string(),
            t.mean_power.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_transactions_csv<R: Read>(r: R) -> Result<Vec<ChargingTransaction>, PipelineError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| PipelineError::Data(format!("transactions row {}: bad {what}", line + 2));
        let field = |i: usize| rec.get(i).ok_or_else(|| bad("column count"));
        out.push(ChargingTransaction {
            station: field(0)?.trim().parse().map_err(|_| bad("station"))?,
            start: NaiveDateTime::parse_from_str(field(1)?.trim(), TIME_FORMAT).map_err(|_| bad("start"))?,
            end: NaiveDateTime::parse_from_str(field(2)?.trim(), TIME_FORMAT).map_err(|_| bad("end"))?,
            energy: field(3)?.trim().parse().map_err(|_| bad("energy"))?,
            mean_power: field(4)?.trim().parse().map_err(|_| bad("power"))?,
        });
    }
    Ok(out)
}
