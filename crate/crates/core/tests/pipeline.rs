use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use evhc::pipeline::{
    aggregate, build_interval_error_model_from_pairs, clean_transactions, denormalize, fit_scale, metrics, normalize,
    probabilistic_from_point, read_series_csv, read_transactions_csv, split_indices, synth_generate, window_and_split,
    write_series_csv, write_transactions_csv, ChargingTransaction, CleaningRules, DemandSeries, ErrorModelOptions,
    MetricsAccumulator, PipelineError, SplitRatios, SynthSpec,
};
use evhc::prob::{interval_index, STD_FLOOR};
use proptest::prelude::*;

const SLOTS_PER_DAY: usize = 96;

fn at(h: u32, m: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2023, 3, 1).unwrap().and_hms_opt(h, m, 0).unwrap()
}

fn tx(start: NaiveDateTime, minutes: i64, energy: f64) -> ChargingTransaction {
    ChargingTransaction {
        station: 7,
        start,
        end: start + Duration::minutes(minutes),
        energy,
        mean_power: energy / (minutes as f64 / 60.0),
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn zero_noise_reproduces_base_profile() {
    let spec = SynthSpec {
        stations: vec![5, 9],
        days: 14,
        noise_amp: 0.0,
        spike_prob: 0.0,
        min_power_kw: 0.0,
        invalid_rate: 0.0,
        ..SynthSpec::default()
    };
    let out = synth_generate(&spec).unwrap();
    for (i, s) in out.series.iter().enumerate() {
        assert_eq!(s.values.len(), 14 * SLOTS_PER_DAY);
        for (k, &v) in s.values.iter().enumerate() {
            let day = spec.start + Duration::days((k / SLOTS_PER_DAY) as i64);
            let weekend = matches!(day.format("%a").to_string().as_str(), "Sat" | "Sun");
            let expect = spec.peak(i) * spec.base_profile(i, k % SLOTS_PER_DAY, weekend).max(0.0);
            assert!((v - expect).abs() < 1e-12, "station {i} slot {k}: {v} vs {expect}");
        }
    }
    // Weekdays repeat exactly.
    let s = &out.series[0].values;
    assert_eq!(s[SLOTS_PER_DAY..2 * SLOTS_PER_DAY], s[2 * SLOTS_PER_DAY..3 * SLOTS_PER_DAY]);
}

#[test]
fn unit_correlation_gives_identical_noise() {
    let spec =
        SynthSpec { stations: vec![1, 2], days: 20, correlation: vec![1.0, 1.0, 1.0, 1.0], ..SynthSpec::default() };
    let out = synth_generate(&spec).unwrap();
    for (a, b) in out.noise[0].iter().zip(&out.noise[1]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn noise_cross_correlation_matches_specification() {
    let rho = [1.0, 0.6, 0.3, 0.6, 1.0, 0.5, 0.3, 0.5, 1.0];
    let spec =
        SynthSpec { stations: vec![1, 2, 3], days: 365, seed: 11, correlation: rho.to_vec(), ..SynthSpec::default() };
    let out = synth_generate(&spec).unwrap();
    for i in 0..3 {
        for j in i + 1..3 {
            let r = pearson(&out.noise[i], &out.noise[j]);
            assert!((r - rho[i * 3 + j]).abs() < 0.05, "pair ({i}, {j}): {r}");
        }
    }
    // Default chain: neighbours at 0.6, two hops at 0.36.
    let chain = synth_generate(&SynthSpec { stations: vec![1, 2, 3], seed: 4, ..SynthSpec::default() }).unwrap();
    assert!((pearson(&chain.noise[0], &chain.noise[1]) - 0.6).abs() < 0.05);
    assert!((pearson(&chain.noise[0], &chain.noise[2]) - 0.36).abs() < 0.05);
}

#[test]
fn synthetic_generation_is_deterministic_and_validated() {
    let spec = SynthSpec { stations: vec![3, 4], days: 3, seed: 99, ..SynthSpec::default() };
    let a = synth_generate(&spec).unwrap();
    let b = synth_generate(&spec).unwrap();
    assert_eq!(a.transactions, b.transactions);
    assert_eq!(a.series, b.series);
    let bad = SynthSpec { days: 0, ..spec };
    assert!(matches!(synth_generate(&bad), Err(PipelineError::Config(_))));
}

#[test]
fn generated_transactions_reproduce_series() {
    let spec = SynthSpec { stations: vec![6, 8, 10], days: 10, seed: 2, ..SynthSpec::default() };
    let out = synth_generate(&spec).unwrap();
    let (valid, rejected) = clean_transactions(&out.transactions, &CleaningRules::default());
    assert!(!rejected.is_empty());
    let series = aggregate(&valid, &spec.stations, spec.t0(), spec.n_slots()).unwrap();
    for (a, b) in series.iter().zip(&out.series) {
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn cleaning_rules() {
    let rules = CleaningRules::default();
    assert_eq!(rules.p_max_kw, 150.0);
    let raw =
        vec![tx(at(8, 0), 30, 0.5), tx(at(8, 0), 25 * 60, 100.0), tx(at(8, 0), 30, 10.0), tx(at(8, 0), 15, 100.0)];
    let (ok, rej) = clean_transactions(&raw, &rules);
    assert_eq!(ok, vec![raw[2].clone()]);
    assert_eq!(ok[0].mean_power, 20.0);
    let reasons: Vec<_> = rej.iter().map(|r| r.reason).collect();
    assert_eq!(reasons, ["energy", "duration", "power"]);
    assert_eq!(rej[0].transaction, raw[0]);
}

#[test]
fn aggregation_splits_by_overlap() {
    let t0 = at(0, 0);
    let s = aggregate(&[tx(at(0, 15), 15, 5.0)], &[7], t0, 4).unwrap();
    assert_eq!(s[0].values, vec![0.0, 20.0, 0.0, 0.0]);
    assert_eq!(s[0].step_minutes, 15);
    let s = aggregate(&[tx(at(0, 7), 30, 10.0)], &[7], t0, 4).unwrap();
    // 8, 15 and 7 minutes of a 20 kW session.
    let expect = [8.0 / 15.0 * 20.0, 20.0, 7.0 / 15.0 * 20.0, 0.0];
    for (v, e) in s[0].values.iter().zip(expect) {
        assert!((v - e).abs() < 1e-12);
    }
}

#[test]
fn series_and_transaction_csv_round_trip() {
    let txs = vec![tx(at(1, 0), 45, 12.0), tx(at(5, 30), 90, 30.0)];
    let mut buf = Vec::new();
    write_transactions_csv(&mut buf, &txs).unwrap();
    assert_eq!(read_transactions_csv(&buf[..]).unwrap(), txs);

    let series = vec![
        DemandSeries { station: 4, t0: at(0, 0), step_minutes: 15, values: vec![0.0, 0.25, 1.0], scale: 80.0 },
        DemandSeries { station: 9, t0: at(0, 0), step_minutes: 15, values: vec![0.5, 0.5, 0.125], scale: 12.5 },
    ];
    let mut buf = Vec::new();
    write_series_csv(&mut buf, &series).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("station,timestamp,value\n"));
    let back = read_series_csv(&buf[..]).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in back.iter().zip(&series) {
        assert_eq!((a.station, a.t0, &a.values), (b.station, b.t0, &b.values));
    }
}

#[test]
fn normalization_examples() {
    let s = DemandSeries { station: 1, t0: at(0, 0), step_minutes: 15, values: vec![10.0, 80.0, 40.0], scale: 1.0 };
    let scale = fit_scale(&s.values, None);
    assert_eq!(scale, 80.0);
    let n = normalize(&s, scale);
    assert_eq!(n.values[1], 1.0);
    assert_eq!(n.scale, 80.0);
    assert_eq!(denormalize(&n).values, s.values);

    let z = DemandSeries { values: vec![0.0; 5], ..s.clone() };
    let scale = fit_scale(&z.values, None);
    assert_eq!(scale, 1.0);
    assert_eq!(normalize(&z, scale).values, z.values);
}

fn ramp(n: usize) -> Vec<DemandSeries> {
    (0..2)
        .map(|i| DemandSeries {
            station: i + 1,
            t0: at(0, 0),
            step_minutes: 15,
            values: (0..n).map(|k| ((k * (i + 3)) % 17) as f64 / 17.0).collect(),
            scale: 1.0,
        })
        .collect()
}

#[test]
fn windows_and_splits() {
    let ds = window_and_split(&ramp(100), 8, &SplitRatios::default(), 5, None).unwrap();
    assert_eq!(ds.samples.len(), 92);
    assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 92);
    for (s, &k) in ds.samples.iter().zip(&ds.target_slots) {
        assert_eq!(s.features.t, 8);
        assert_eq!(s.target, vec![ramp(100)[0].values[k], ramp(100)[1].values[k]]);
    }

    let [a, b, c] = split_indices(1000, &SplitRatios::default(), 21);
    assert_eq!((a.len(), b.len(), c.len()), (600, 200, 200));
    let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    assert_eq!(split_indices(1000, &SplitRatios::default(), 21), [a.clone(), b, c]);
    assert_ne!(split_indices(1000, &SplitRatios::default(), 22)[0], a);
}

#[test]
fn windows_do_not_cross_segment_gaps() {
    let series = ramp(60);
    let ds = window_and_split(&series, 8, &SplitRatios::default(), 1, Some(&[0..30, 30..60])).unwrap();
    assert_eq!(ds.samples.len(), 44);
    for &k in &ds.target_slots {
        assert!(k >= 8 && !(30..38).contains(&k));
    }
    assert!(window_and_split(&series, 0, &SplitRatios::default(), 1, None).is_err());
    assert!(window_and_split(&series, 60, &SplitRatios::default(), 1, None).is_err());
}

#[test]
fn interval_assignment_examples() {
    assert_eq!(interval_index(0.395, 100), 40);
    assert_eq!(interval_index(0.0, 100), 1);
    assert_eq!(interval_index(-0.2, 100), 1);
    assert_eq!(interval_index(1.3, 100), 100);
}

#[test]
fn perfect_forecaster_has_degenerate_errors() {
    let mut pairs = BTreeMap::new();
    pairs.insert(3usize, (0..400).map(|k| ((k % 97) as f64 / 97.0, (k % 97) as f64 / 97.0)).collect());
    let opts = ErrorModelOptions { min_samples: 3, ..ErrorModelOptions::default() };
    let model = build_interval_error_model_from_pairs(&pairs, &opts).unwrap();
    let st = &model.stations[&3];
    let fitted: Vec<_> = st.intervals.iter().flatten().chain([&st.pooled]).collect();
    assert!(fitted.len() > 50);
    for g in fitted {
        assert!(g.mean().abs() < 1e-6);
        assert!(g.components().iter().all(|c| c.std == STD_FLOOR));
    }
    // The shifted mixture sits on the point forecast.
    let mix = probabilistic_from_point(&model, &[3], &[0.42]).unwrap();
    assert!((mix[0].mean() - 0.42).abs() < STD_FLOOR);

    let empty: BTreeMap<usize, Vec<(f64, f64)>> = [(3, Vec::new())].into_iter().collect();
    assert!(build_interval_error_model_from_pairs(&empty, &opts).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shifted_mean_is_forecast_plus_error_mean(
        errs in prop::collection::vec(-0.2f64..0.2, 60..200),
        p in 0.0f64..1.0,
    ) {
        let pairs: BTreeMap<usize, Vec<(f64, f64)>> =
            [(1, errs.iter().enumerate().map(|(k, e)| ((k % 10) as f64 / 10.0 + 0.05, (k % 10) as f64 / 10.0 + 0.05 + e)).collect())]
                .into_iter()
                .collect();
        let model = build_interval_error_model_from_pairs(&pairs, &ErrorModelOptions { min_samples: 5, ..ErrorModelOptions::default() }).unwrap();
        let e = model.error_for(1, p).unwrap();
        let mix = probabilistic_from_point(&model, &[1], &[p]).unwrap();
        prop_assert!((mix[0].mean() - (p + e.mean())).abs() < 1e-12);
        prop_assert!((mix[0].variance() - e.variance()).abs() < 1e-12);
    }

    #[test]
    fn interval_partition_is_exact(p in 0.0f64..=1.0, n_f in 1usize..200) {
        let j = interval_index(p, n_f);
        prop_assert!((1..=n_f).contains(&j));
        let (lo, hi) = ((j - 1) as f64 / n_f as f64, j as f64 / n_f as f64);
        prop_assert!(p <= hi + 1e-9 && (p > lo - 1e-9 || j == 1));
    }

    #[test]
    fn error_model_counts_cover_population(
        pairs in prop::collection::vec((0.0f64..1.0, -0.3f64..1.3), 40..300),
        n_f in 1usize..40,
    ) {
        let map: BTreeMap<usize, Vec<(f64, f64)>> = [(2, pairs.clone())].into_iter().collect();
        let opts = ErrorModelOptions { n_f, min_samples: 10_000, k_max: 1, ..ErrorModelOptions::default() };
        let model = build_interval_error_model_from_pairs(&map, &opts).unwrap();
        let counts = &model.stations[&2].counts;
        prop_assert_eq!(counts.len(), n_f);
        prop_assert_eq!(counts.iter().sum::<usize>(), pairs.len());
        let mut oracle = vec![0usize; n_f];
        for (f, _) in &pairs {
            oracle[((f * n_f as f64).ceil() as usize).clamp(1, n_f) - 1] += 1;
        }
        prop_assert_eq!(counts, &oracle);
    }

    #[test]
    fn aggregation_conserves_energy(
        sessions in prop::collection::vec((0i64..600, 1i64..300, 1.0f64..80.0), 1..40),
    ) {
        let t0 = at(0, 0);
        let txs: Vec<_> = sessions.iter().map(|&(s, d, e)| tx(t0 + Duration::minutes(s), d, e)).collect();
        let series = aggregate(&txs, &[7], t0, 96).unwrap();
        let slot_energy: f64 = series[0].values.iter().map(|p| p * 0.25).sum();
        let total: f64 = txs.iter().map(|t| t.energy).sum();
        prop_assert!((slot_energy - total).abs() < 1e-9, "{slot_energy} vs {total}");
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(0.0f64..500.0, 1..100)) {
        let s = DemandSeries { station: 1, t0: at(0, 0), step_minutes: 15, values, scale: 1.0 };
        let n = normalize(&s, fit_scale(&s.values, None));
        prop_assert!(n.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (a, b) in denormalize(&n).values.iter().zip(&s.values) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_and_batch_metrics_agree(
        rows in prop::collection::vec(prop::collection::vec((0.0f64..1.0, 0.01f64..1.0), 4), 1..50),
    ) {
        let preds: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.0).collect()).collect();
        let truths: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
        let batch = metrics(&preds, &truths).unwrap();

        // Independent oracle: accumulate per sample, then average.
        let d = rows.len() as f64;
        let mae: f64 = rows.iter().map(|r| r.iter().map(|(p, t)| (t - p).abs()).sum::<f64>()).sum::<f64>() / d;
        let rmse = (rows.iter().map(|r| r.iter().map(|(p, t)| (t - p).powi(2)).sum::<f64>()).sum::<f64>() / d).sqrt();
        let sum_truth: f64 = truths.iter().flatten().sum();
        let wape = rows.iter().flatten().map(|(p, t)| (t - p).abs()).sum::<f64>() / sum_truth;
        prop_assert!((batch.mae - mae).abs() < 1e-12);
        prop_assert!((batch.rmse - rmse).abs() < 1e-12);
        prop_assert!((batch.wape - wape).abs() < 1e-12);
        // WAPE is MAE times the sample count over the summed truth.
        prop_assert!((batch.wape - batch.mae * d / sum_truth).abs() < 1e-12);

        let mut acc = MetricsAccumulator::default();
        for (p, t) in preds.iter().zip(&truths) {
            acc.push(p, t).unwrap();
        }
        let stream = acc.finish().unwrap();
        prop_assert!((stream.mae - batch.mae).abs() < 1e-12);
        prop_assert!((stream.rmse - batch.rmse).abs() < 1e-12);
        prop_assert!((stream.wape - batch.wape).abs() < 1e-12);
    }
}

#[test]
fn metric_examples() {
    let m = metrics(&[vec![0.3, 0.7]], &[vec![0.3, 0.7]]).unwrap();
    assert_eq!((m.mae, m.rmse, m.wape), (0.0, 0.0, 0.0));
    let m = metrics(&[vec![0.4]], &[vec![0.5]]).unwrap();
    assert!((m.mae - 0.1).abs() < 1e-12);
    assert!((m.rmse - 0.1).abs() < 1e-12);
    assert!((m.wape * 100.0 - 20.0).abs() < 1e-9);
    assert!(matches!(metrics(&[vec![0.1]], &[vec![0.0]]), Err(PipelineError::UndefinedWape)));
}

/// Persistence forecasts (last observed slot) over one synthetic year feed the
/// error model; a second, independently seeded year checks the calibration of
/// the 80% central interval.
#[test]
fn central_interval_coverage_on_held_out_year() {
    let stations = vec![6, 10, 14];
    let year = |seed| {
        synth_generate(&SynthSpec {
            stations: stations.clone(),
            seed,
            peak_kw: vec![180.0, 240.0, 150.0],
            ..SynthSpec::default()
        })
        .unwrap()
        .series
    };
    let fit_year = year(100);
    let held_out = year(200);
    let scales: Vec<f64> = fit_year.iter().map(|s| fit_scale(&s.values, None)).collect();
    let pairs_of = |series: &[DemandSeries]| -> BTreeMap<usize, Vec<(f64, f64)>> {
        series
            .iter()
            .zip(&scales)
            .map(|(s, &c)| {
                let v = normalize(s, c).values;
                (s.station, v.windows(2).map(|w| (w[0], w[1])).collect())
            })
            .collect()
    };
    let model = build_interval_error_model_from_pairs(&pairs_of(&fit_year), &ErrorModelOptions::default()).unwrap();

    let test = pairs_of(&held_out);
    let (mut hits, mut total) = (0usize, 0usize);
    for (&id, obs) in &test {
        for &(p, truth) in obs.iter().step_by(7) {
            let mix = &probabilistic_from_point(&model, &[id], &[p]).unwrap()[0];
            let (lo, hi) = (mix.quantile(0.1).unwrap(), mix.quantile(0.9).unwrap());
            hits += usize::from(lo <= truth && truth <= hi);
            total += 1;
        }
    }
    let coverage = hits as f64 / total as f64;
    assert!((coverage - 0.80).abs() <= 0.03, "coverage {coverage:.4} over {total} forecasts");
}
