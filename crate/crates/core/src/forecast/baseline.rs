use super::FeatureTensor;

/// Historical-average forecast: per-station mean of the input window.
pub fn baseline_ha(window: &FeatureTensor) -> Vec<f64> {
    (0..window.n_stations)
        .map(|s| {
            let w = window.station_window(s);
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}
