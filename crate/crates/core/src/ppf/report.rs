use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{McResult, PpfResult, RiskReport};
use crate::prob::{Component, GaussianMixture};

pub const REPORT_QUANTILES: [f64; 4] = [0.001, 0.01, 0.5, 0.99];

/// Two-sided Kolmogorov-Smirnov distance between a mixture CDF and the
/// empirical CDF of sorted samples.
pub fn ks_distance(g: &GaussianMixture, sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = g.cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusEntry {
    pub bus: usize,
    pub base_voltage: f64,
    pub mean: f64,
    pub std: f64,
    pub components: Vec<Component>,
    /// `(probability, voltage)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks_vs_mc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpfReport {
    pub buses: Vec<BusEntry>,
    pub components_before: Vec<usize>,
    pub components_after: Vec<usize>,
    pub output_cap: usize,
    pub analytical_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskReport>,
}

impl PpfReport {
    pub fn new(ppf: &PpfResult, mc: Option<&McResult>, risk: Option<RiskReport>) -> Self {
        let buses = ppf
            .buses
            .iter()
            .map(|b| BusEntry {
                bus: b.bus,
                base_voltage: b.base_voltage,
                mean: b.mixture.mean(),
                std: b.mixture.std(),
                components: b.mixture.components().to_vec(),
                quantiles: REPORT_QUANTILES.iter().map(|&q| (q, b.mixture.quantile(q).unwrap_or(f64::NAN))).collect(),
                ks_vs_mc: mc.and_then(|m| m.bus(b.bus)).map(|s| ks_distance(&b.mixture, s)),
            })
            .collect();
        Self {
            buses,
            components_before: ppf.reduction.input_before.clone(),
            components_after: ppf.reduction.input_after.clone(),
            output_cap: ppf.reduction.output_cap,
            analytical_s: ppf.elapsed_s,
            mc_samples: mc.map(|m| m.n - m.diverged),
            mc_s: mc.map(|m| m.elapsed_s),
            risk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotRow {
    pub bus: usize,
    pub voltage: f64,
    pub analytical_pdf: f64,
    /// Histogram density of the Monte Carlo samples, when available.
    pub empirical_density: Option<f64>,
}

/// Density comparison on a uniform grid of `bins` cells for one bus.
pub fn plot_rows(ppf: &PpfResult, mc: Option<&McResult>, bus: usize, bins: usize) -> Vec<PlotRow> {
    let Some(b) = ppf.bus(bus) else { return Vec::new() };
    let samples = mc.and_then(|m| m.bus(bus)).filter(|s| !s.is_empty());
    let (lo, hi) = match samples {
        Some(s) => (s[0], s[s.len() - 1]),
        None => (
            b.mixture.quantile(1e-4).unwrap_or(b.base_voltage),
            b.mixture.quantile(1.0 - 1e-4).unwrap_or(b.base_voltage),
        ),
    };
    let bins = bins.max(1);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts = vec![0usize; bins];
    if let Some(s) = samples {
        for &x in s {
            counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    (0..bins)
        .map(|k| {
            let v = lo + (k as f64 + 0.5) * width;
            PlotRow {
                bus,
                voltage: v,
                analytical_pdf: b.mixture.pdf(v),
                empirical_density: samples.map(|s| counts[k] as f64 / (s.len() as f64 * width)),
            }
        })
        .collect()
}

pub fn write_plot_csv<W: Write>(w: W, rows: &[PlotRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bus", "voltage", "analytical_pdf", "empirical_density"])?;
    for r in rows {
        out.write_record([
            r.bus.to_string(),
            r.voltage.to_string(),
            r.analytical_pdf.to_string(),
            r.empirical_density.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
