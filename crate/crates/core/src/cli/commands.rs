use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use chrono::{Duration, NaiveDateTime};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{sub_seed, CliError, Command, DemandSource, RunConfig};
use crate::forecast::{
    baseline_ha, forward, predict, train, Checkpoint, ForecastModelParams, ModelSpec, Sample, TrainResult, Variant,
    CHECKPOINT_VERSION,
};
use crate::grid::{load_network, DistributionNetwork};
use crate::hc::{
    branch_and_bound, build_misocp, long_term_hc, write_distribution_csv, write_station_csv, BnbOptions, CompareReport,
    HcProblem, HcReport, SocpSettings, VerifyOptions,
};
use crate::pipeline::{
    aggregate, build_interval_error_model, clean_transactions, demand_similarity, metrics, normalize, prepare_dataset,
    probabilistic_forecast, read_series_csv, write_series_csv, write_transactions_csv, CleaningRules, DatasetManifest,
    DemandSeries, ErrorModelOptions, Metrics, WindowedDataset, SLOT_MINUTES,
};
use crate::ppf::{
    gmm_ppf, identify_boundary, mc_ppf, plot_rows, write_plot_csv, McResult, PpfOptions, PpfReport, PpfResult,
    RiskReport, Scenario,
};
use crate::prob::{GaussianMixture, IntervalErrorModel};

/// Keys holding wall-clock measurements; moved out of primary outputs into
/// `timings.json` so reruns stay byte-identical.
const TIMING_KEYS: [&str; 3] = ["elapsed_s", "analytical_s", "mc_s"];

struct Ctx<'a> {
    cfg: &'a RunConfig,
    timings: BTreeMap<String, f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn strip_timings(v: &mut Value, prefix: &str, out: &mut BTreeMap<String, f64>) {
    match v {
        Value::Object(map) => {
            for key in TIMING_KEYS {
                if let Some(t) = map.remove(key) {
                    if let Some(x) = t.as_f64() {
                        out.insert(format!("{prefix}.{key}"), x);
                    }
                }
            }
            for (k, child) in map.iter_mut() {
                strip_timings(child, &format!("{prefix}.{k}"), out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter_mut().enumerate() {
                strip_timings(child, &format!("{prefix}[{i}]"), out);
            }
        }
        _ => {}
    }
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> std::path::PathBuf {
        self.cfg.paths.out_dir.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut v = serde_json::to_value(value)?;
        strip_timings(&mut v, name.trim_end_matches(".json"), &mut self.timings);
        write_json_file(&self.out(name), &v)
    }

    fn time(&mut self, label: &str, start: Instant) {
        self.timings.insert(label.to_string(), start.elapsed().as_secs_f64());
    }
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("missing {} ({e}); {hint}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn execute(cmd: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    write_json_file(&out.join("resolved_config.json"), cfg)?;
    let mut ctx = Ctx { cfg, timings: BTreeMap::new() };
    let start = Instant::now();
    match cmd {
        Command::GenData { .. } => gen_data(&mut ctx)?,
        Command::Train { .. } => cmd_train(&mut ctx)?,
        Command::Eval => eval(&mut ctx)?,
        Command::FitErrors => fit_errors(&mut ctx)?,
        Command::Forecast { .. } => cmd_forecast(&mut ctx)?,
        Command::Ppf(_) => {
            ppf_and_risk(&mut ctx)?;
        }
        Command::Risk(_) => {
            let (_, _, _, risk) = ppf_and_risk(&mut ctx)?;
            ctx.write_json("risk_report.json", &risk)?;
        }
        Command::Assess { .. } => assess(&mut ctx)?,
        Command::Compare(_) => compare(&mut ctx)?,
    }
    ctx.time("total_s", start);
    write_json_file(&out.join("timings.json"), &ctx.timings)
}

fn gen_data(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let spec = &cfg.synth;
    let synth = crate::pipeline::synth_generate(spec)?;
    let (valid, rejected) = clean_transactions(&synth.transactions, &CleaningRules::default());
    let series = aggregate(&valid, &spec.stations, spec.t0(), spec.n_slots())?;
    let ds = prepare_dataset(&series, cfg.pipeline.t, &cfg.pipeline.ratios, spec.seed, None)?;
    let normalized: Vec<DemandSeries> = series.iter().zip(&ds.scales).map(|(s, &k)| normalize(s, k)).collect();
    let mut manifest = DatasetManifest::from_dataset(&ds, spec.seed, cfg.pipeline.ratios, spec.n_slots());
    manifest.n_transactions = synth.transactions.len();
    manifest.n_rejected = rejected.len();

    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    write_transactions_csv(create(&dir.join("transactions.csv"))?, &synth.transactions)?;
    write_series_csv(create(&dir.join("series_kw.csv"))?, &series)?;
    write_series_csv(create(&dir.join("series.csv"))?, &normalized)?;
    write_json_file(&dir.join("manifest.json"), &manifest)?;
    info!(
        "gen-data: {} stations, {} slots, {} transactions ({} rejected), {} windows",
        spec.stations.len(),
        spec.n_slots(),
        manifest.n_transactions,
        manifest.n_rejected,
        ds.samples.len()
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<WindowedDataset, CliError> {
    let dir = cfg.data_dir();
    let hint = "run gen-data first";
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"), hint)?;
    let path = dir.join("series.csv");
    let file = File::open(&path).map_err(|e| CliError::Data(format!("missing {} ({e}); {hint}", path.display())))?;
    let normalized = read_series_csv(file)?;
    Ok(manifest.restore(&normalized)?)
}

fn model_metrics(params: &ForecastModelParams, samples: &[Sample]) -> Result<Metrics, CliError> {
    let preds = predict(params, samples)?;
    let truths: Vec<Vec<f64>> = samples.iter().map(|s| s.target.clone()).collect();
    Ok(metrics(&preds, &truths)?)
}

fn ha_metrics(samples: &[Sample]) -> Result<Metrics, CliError> {
    let preds: Vec<Vec<f64>> = samples.iter().map(|s| baseline_ha(&s.features)).collect();
    let truths: Vec<Vec<f64>> = samples.iter().map(|s| s.target.clone()).collect();
    Ok(metrics(&preds, &truths)?)
}

fn write_metrics_csv(path: &Path, rows: &[(&str, Metrics)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["model", "mae", "wape", "rmse"])?;
    for (name, m) in rows {
        w.write_record([name.to_string(), m.mae.to_string(), m.wape.to_string(), m.rmse.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn train_variant(
    cfg: &RunConfig,
    variant: Variant,
    ds: &WindowedDataset,
    split: (&[Sample], &[Sample], &[Sample]),
) -> Result<TrainResult, CliError> {
    let (tr, va, te) = split;
    let mut spec = ModelSpec::new(&cfg.train, variant, ds.n_stations(), ds.t, 0)?;
    if variant == Variant::NoWA {
        spec = spec.with_fixed_adjacency(demand_similarity(tr, ds.n_stations()))?;
    }
    let init = ForecastModelParams::init(spec, cfg.train.seed);
    Ok(train(init, &cfg.train, tr, va, te)?)
}

fn cmd_train(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let ds = load_dataset(cfg)?;
    let (tr, va, te) = (ds.train_samples(), ds.val_samples(), ds.test_samples());
    let start = Instant::now();
    let full = train_variant(cfg, Variant::Full, &ds, (&tr, &va, &te))?;
    ctx.time("train.ASTGCN_s", start);

    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.train.clone(),
        params: full.params.clone(),
        best_epoch: full.best_epoch,
        best_val_loss: full.best_val,
        curve: full.curve.clone(),
        scales: ds.stations.iter().copied().zip(ds.scales.iter().copied()).collect(),
    };
    ck.save(&ctx.out("checkpoint.json"))?;

    let mut w = csv::Writer::from_writer(create(&ctx.out("loss_curve.csv"))?);
    w.write_record(["epoch", "train", "val", "test"])?;
    for p in &full.curve {
        w.write_record([p.epoch.to_string(), p.train.to_string(), p.val.to_string(), p.test.to_string()])?;
    }
    w.flush()?;

    write_metrics_csv(
        &ctx.out("metrics.csv"),
        &[("HA", ha_metrics(&te)?), ("ASTGCN", model_metrics(&full.params, &te)?)],
    )?;

    let variants = cfg.variants()?;
    if !variants.is_empty() {
        let mut rows = vec![(Variant::Full, full)];
        for v in variants.into_iter().filter(|v| *v != Variant::Full) {
            let start = Instant::now();
            let r = train_variant(cfg, v, &ds, (&tr, &va, &te))?;
            ctx.time(&format!("train.{}_s", v.name()), start);
            rows.push((v, r));
        }
        let mut w = csv::Writer::from_writer(create(&ctx.out("ablation.csv"))?);
        w.write_record(["model", "val_rmse", "test_rmse", "test_mae", "test_wape"])?;
        let mut val = Vec::new();
        for (v, r) in &rows {
            let vm = model_metrics(&r.params, &va)?;
            let tm = model_metrics(&r.params, &te)?;
            val.push((v.name(), vm.rmse));
            w.write_record([
                v.name().to_string(),
                vm.rmse.to_string(),
                tm.rmse.to_string(),
                tm.mae.to_string(),
                tm.wape.to_string(),
            ])?;
        }
        w.flush()?;
        let full_val = val[0].1;
        for (name, rmse) in &val[1..] {
            if *rmse < full_val {
                warn!("ablation ordering inverted: {name} validation RMSE {rmse:.6} below ASTGCN {full_val:.6}");
            }
        }
        let mut w = csv::Writer::from_writer(create(&ctx.out("ablation_curves.csv"))?);
        w.write_record(["model", "epoch", "train", "val", "test"])?;
        for (v, r) in &rows {
            for p in &r.curve {
                w.write_record([
                    v.name().to_string(),
                    p.epoch.to_string(),
                    p.train.to_string(),
                    p.val.to_string(),
                    p.test.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg.paths.out_dir.join("checkpoint.json");
    if !path.exists() {
        return Err(CliError::Data(format!("missing {}; run train first", path.display())));
    }
    Ok(Checkpoint::load(&path)?)
}

fn eval(ctx: &mut Ctx) -> Result<(), CliError> {
    let ck = load_checkpoint(ctx.cfg)?;
    let ds = load_dataset(ctx.cfg)?;
    let te = ds.test_samples();
    write_metrics_csv(&ctx.out("metrics.csv"), &[("HA", ha_metrics(&te)?), ("ASTGCN", model_metrics(&ck.params, &te)?)])
}

fn fit_errors(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let ck = load_checkpoint(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut history = ds.train_samples();
    history.extend(ds.val_samples());
    let opts = ErrorModelOptions {
        n_f: cfg.pipeline.n_f,
        min_samples: cfg.pipeline.min_samples,
        k_max: cfg.pipeline.k_max,
        seed: sub_seed(cfg.seed, "errors"),
    };
    let start = Instant::now();
    let model = build_interval_error_model(&ck.params, &history, &ds.stations, &opts)?;
    ctx.time("fit_errors_s", start);
    ctx.write_json("error_model.json", &model)
}

#[derive(Debug, Serialize)]
struct StationForecast {
    station: usize,
    point: f64,
    point_kw: f64,
    truth_kw: f64,
    mean_kw: f64,
    std_kw: f64,
    mixture_kw: GaussianMixture,
}

#[derive(Debug, Serialize)]
struct ForecastReport {
    sample: usize,
    target_time: NaiveDateTime,
    stations: Vec<StationForecast>,
}

/// Probabilistic forecast of one test sample, in kW per station.
fn forecast_sample(cfg: &RunConfig) -> Result<ForecastReport, CliError> {
    let ck = load_checkpoint(cfg)?;
    let model: IntervalErrorModel = read_json(&cfg.paths.out_dir.join("error_model.json"), "run fit-errors first")?;
    let ds = load_dataset(cfg)?;
    let idx = cfg.assess.sample;
    let &k = ds
        .test
        .get(idx)
        .ok_or_else(|| CliError::Config(format!("sample {idx} outside the {} test windows", ds.test.len())))?;
    let sample = &ds.samples[k];
    let point = forward(&ck.params, &sample.features)?;
    let mixtures = probabilistic_forecast(&ck.params, &model, &sample.features, &ds.stations)?;
    let stations = ds
        .stations
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let g = mixtures[i].scale(ds.scales[i]);
            StationForecast {
                station: id,
                point: point[i],
                point_kw: point[i] * ds.scales[i],
                truth_kw: sample.target[i] * ds.scales[i],
                mean_kw: g.mean(),
                std_kw: g.std(),
                mixture_kw: g,
            }
        })
        .collect();
    Ok(ForecastReport {
        sample: idx,
        target_time: ds.t0 + Duration::minutes(SLOT_MINUTES * ds.target_slots[k] as i64),
        stations,
    })
}

fn cmd_forecast(ctx: &mut Ctx) -> Result<(), CliError> {
    let report = forecast_sample(ctx.cfg)?;
    ctx.write_json("forecast.json", &report)
}

fn base_network(cfg: &RunConfig) -> Result<DistributionNetwork, CliError> {
    Ok(match &cfg.paths.network {
        Some(p) => load_network(p)?,
        None => DistributionNetwork::ieee33(),
    })
}

/// Network and per-unit station demand mixtures in station order.
fn demand_mixtures(cfg: &RunConfig) -> Result<(DistributionNetwork, Vec<GaussianMixture>), CliError> {
    let base = base_network(cfg)?;
    match cfg.assess.source {
        DemandSource::Scenario => {
            let sc: Scenario = match &cfg.paths.scenario {
                Some(p) => read_json(p, "check paths.scenario")?,
                None => Scenario::bundled(),
            };
            let net = sc.network(&base);
            let g = sc.mixtures(&net)?;
            Ok((net, g))
        }
        DemandSource::Forecast => {
            let net = base.with_load_scale(cfg.grid.load_scale).with_voltage_limits(cfg.grid.v_min, base.v_max);
            let fc = forecast_sample(cfg)?;
            let g = net
                .stations()
                .iter()
                .map(|(id, _)| {
                    fc.stations
                        .iter()
                        .find(|s| s.station == *id)
                        .map(|s| s.mixture_kw.scale(net.kw_to_pu(1.0)))
                        .ok_or_else(|| CliError::Data(format!("no forecast for station {id}")))
                })
                .collect::<Result<_, _>>()?;
            Ok((net, g))
        }
    }
}

fn ppf_and_risk(ctx: &mut Ctx) -> Result<(DistributionNetwork, Vec<GaussianMixture>, PpfResult, RiskReport), CliError> {
    let cfg = ctx.cfg;
    let (net, g) = demand_mixtures(cfg)?;
    let opts = PpfOptions { input_cap: cfg.ppf.input_cap, output_cap: cfg.ppf.output_cap, base: cfg.ppf.base };
    let ppf = gmm_ppf(&net, &g, &opts)?;
    let mc: Option<McResult> = if cfg.ppf.mc_samples > 0 {
        Some(mc_ppf(&net, &g, cfg.ppf.mc_samples, sub_seed(cfg.seed, "mc"))?)
    } else {
        None
    };
    let risk = identify_boundary(&ppf, cfg.ppf.varsigma, Some(net.v_min))?;
    ctx.write_json("ppf_report.json", &PpfReport::new(&ppf, mc.as_ref(), Some(risk.clone())))?;
    let rows = plot_rows(&ppf, mc.as_ref(), cfg.ppf.plot_bus, cfg.ppf.plot_bins);
    write_plot_csv(create(&ctx.out("ppf_density.csv"))?, &rows)?;
    Ok((net, g, ppf, risk))
}

fn hc_problem(cfg: &RunConfig, net: &DistributionNetwork, g: &[GaussianMixture]) -> Result<HcProblem, CliError> {
    let mut problem = HcProblem::new(net.clone(), g.to_vec(), cfg.hc.epsilon).with_segments(cfg.hc.segments);
    if let Some(e) = &cfg.hc.epsilons {
        if e.len() != g.len() {
            return Err(CliError::Config(format!("hc.epsilons has {} values for {} stations", e.len(), g.len())));
        }
        problem.epsilon = e.clone();
    }
    problem.settings =
        SocpSettings { tol_feas: cfg.hc.solver_tol, tol_gap: cfg.hc.solver_tol, ..SocpSettings::default() };
    Ok(problem)
}

fn solve_hc(
    ctx: &mut Ctx,
    net: &DistributionNetwork,
    g: &[GaussianMixture],
    with_long_term: bool,
) -> Result<HcReport, CliError> {
    let cfg = ctx.cfg;
    let problem = hc_problem(cfg, net, g)?;
    let model = build_misocp(&problem)?;
    let opts = BnbOptions {
        rel_gap: cfg.hc.rel_gap,
        node_limit: cfg.hc.node_limit,
        verify: VerifyOptions {
            mc_samples: cfg.hc.verify_samples,
            seed: sub_seed(cfg.seed, "verify"),
            ..VerifyOptions::default()
        },
        ..BnbOptions::default()
    };
    let sol = branch_and_bound(&model, &problem, &opts)?;
    let lt = if with_long_term {
        let means: Vec<f64> = g.iter().map(|x| x.mean().max(0.0)).collect();
        let caps: Vec<f64> = model.layout.stations.iter().map(|s| s.pwl.right_endpoint()).collect();
        Some(long_term_hc(net, &means, &caps, &problem.settings)?)
    } else {
        None
    };
    let report = HcReport::new(net, &sol, g, &problem.epsilon, problem.segments, lt.as_ref());
    write_station_csv(create(&ctx.out("hc_stations.csv"))?, &report.stations)?;
    write_distribution_csv(create(&ctx.out("hc_distributions.csv"))?, &report.stations, g, 101)?;
    if let Some(c) = &report.comparison {
        if !c.dominates {
            warn!(
                "real-time objective {:.6} below long-term evaluation {:.6}",
                c.real_time_objective, c.long_term_evaluated
            );
        }
    }
    Ok(report)
}

fn assess(ctx: &mut Ctx) -> Result<(), CliError> {
    let (net, g, _, risk) = ppf_and_risk(ctx)?;
    ctx.write_json("risk_report.json", &risk)?;
    let report = solve_hc(ctx, &net, &g, ctx.cfg.assess.compare)?;
    ctx.write_json("hc_solution.json", &report)?;
    if let Some(c) = &report.comparison {
        ctx.write_json("compare_report.json", c)?;
    }
    Ok(())
}

fn compare(ctx: &mut Ctx) -> Result<(), CliError> {
    let (net, g) = demand_mixtures(ctx.cfg)?;
    let report = solve_hc(ctx, &net, &g, true)?;
    let c: &CompareReport = report.comparison.as_ref().expect("long-term solved");
    ctx.write_json("compare_report.json", c)
}
