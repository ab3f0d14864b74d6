#![allow(dead_code)]

use evhc::forecast::{grad, loss, Batch, FeatureTensor, ForecastModelParams, ModelSpec, Sample, TrainConfig, Variant};
use evhc::prob::GaussianMixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small configuration used by gradient checks: 3 stations, 4 slots, one
/// block of width 2.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        channels: vec![2],
        k_t: 2,
        k_s: 3,
        n_e: 3,
        d_k: 2,
        z_prime: 2,
        hidden: 4,
        time_embedding: 2,
        ..TrainConfig::default()
    }
}

pub fn random_sample(n: usize, t: usize, rng: &mut ChaCha8Rng) -> Sample {
    let start = rng.random_range(0..90);
    let day = rng.random_range(0..7);
    Sample {
        features: FeatureTensor {
            n_stations: n,
            t,
            demand: (0..n * t).map(|_| rng.random_range(0.0..1.0)).collect(),
            tod: (0..t).map(|i| start + i).collect(),
            dow: vec![day; t],
            covariates: Vec::new(),
        },
        target: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    }
}

pub fn tiny_params(variant: Variant, seed: u64) -> (ForecastModelParams, Vec<Sample>) {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Sample> = (0..3).map(|_| random_sample(3, 4, &mut rng)).collect();
    let mut spec = ModelSpec::new(&cfg, variant, 3, 4, 0).unwrap();
    if variant == Variant::NoWA {
        spec = spec.with_fixed_adjacency(vec![1.0, 0.5, 0.2, 0.5, 1.0, 0.3, 0.2, 0.3, 1.0]).unwrap();
    }
    let mut params = ForecastModelParams::init(spec, seed);
    // Nonzero biases so every path carries gradient.
    for (_, t) in params.tensors.iter_mut() {
        for v in t.data.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    (params, samples)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub worst_name: String,
}

/// Compares every gradient entry with central differences (step 1e-5).
/// An entry passes when the absolute difference is below 1e-8 or the
/// relative difference is below 1e-3.
pub fn finite_difference_check(params: &ForecastModelParams, samples: &[Sample]) -> GradCheck {
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs).unwrap();
    let (_, grads) = grad(params, &batch).unwrap();
    let h = 1e-5;
    let mut out = GradCheck { checked: 0, failures: 0, worst_rel: 0.0, worst_abs: 0.0, worst_name: String::new() };
    let mut p = params.clone();
    for (ti, (name, t)) in params.tensors.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data[j];
            p.tensors[ti].1.data[j] = orig + h;
            let up = loss(&p, &batch).unwrap();
            p.tensors[ti].1.data[j] = orig - h;
            let down = loss(&p, &batch).unwrap();
            p.tensors[ti].1.data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[ti].data[j];
            let diff = (numeric - analytic).abs();
            let rel = diff / numeric.abs().max(analytic.abs()).max(1e-300);
            out.checked += 1;
            out.worst_abs = out.worst_abs.max(diff);
            if diff > 1e-8 {
                if rel > out.worst_rel {
                    out.worst_rel = rel;
                    out.worst_name = format!("{name}[{j}]");
                }
                if rel > 1e-3 {
                    out.failures += 1;
                }
            }
        }
    }
    out
}

/// Kolmogorov-Smirnov distance between a mixture CDF and a sample.
pub fn ks_distance(g: &GaussianMixture, samples: &mut [f64]) -> f64 {
    ks_distance_by(|x| g.cdf(x), samples)
}

pub fn ks_distance_by(cdf: impl Fn(f64) -> f64, samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
