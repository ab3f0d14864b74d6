//! Expectation-maximization for univariate mixtures, with BIC model selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{log_sum_exp, Component, GaussianMixture, ProbError, STD_FLOOR};

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    /// Stop when the average log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Independent k-means++ initializations; the best likelihood wins.
    pub n_init: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 500, seed: 0, n_init: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub mixture: GaussianMixture,
    /// Total log-likelihood of the training samples.
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Total log-likelihood after each E-step.
    pub trace: Vec<f64>,
}

/// Bayesian information criterion, lower is better.
pub fn bic(log_likelihood: f64, k: usize, n: usize) -> f64 {
    let params = (3 * k - 1) as f64;
    -2.0 * log_likelihood + params * (n as f64).ln()
}

pub fn fit_gmm_em(samples: &[f64], k: usize, opts: &EmOptions) -> Result<GmmFit, ProbError> {
    if samples.is_empty() {
        return Err(ProbError::TooFewSamples { needed: 1, got: 0 });
    }
    if k == 0 {
        return Err(ProbError::InvalidArgument("k must be at least 1".into()));
    }
    if samples.len() < k {
        return Err(ProbError::TooFewSamples { needed: k, got: samples.len() });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(ProbError::InvalidArgument("non-finite sample".into()));
    }
    let mut best: Option<GmmFit> = None;
    for init in 0..opts.n_init.max(1) {
        let seed = opts.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(init as u64));
        let fit = run_em(samples, k, opts, seed);
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one initialization"))
}

/// Fits k = 1..=k_max and returns the fit with the lowest BIC.
pub fn fit_gmm_bic(samples: &[f64], k_max: usize, opts: &EmOptions) -> Result<GmmFit, ProbError> {
    let k_max = k_max.min(samples.len()).max(1);
    let mut best: Option<(f64, GmmFit)> = None;
    for k in 1..=k_max {
        let fit = fit_gmm_em(samples, k, opts)?;
        let score = bic(fit.log_likelihood, fit.mixture.len(), samples.len());
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, fit));
        }
    }
    Ok(best.expect("k_max >= 1").1)
}

fn kmeanspp_means(samples: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = samples.len();
    let mut centers = vec![samples[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = samples.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            samples[pick]
        } else {
            samples[rng.random_range(0..n)]
        };
        centers.push(next);
        for (d, x) in d2.iter_mut().zip(samples) {
            *d = d.min((x - next).powi(2));
        }
    }
    centers
}

fn run_em(samples: &[f64], k: usize, opts: &EmOptions, seed: u64) -> GmmFit {
    let n = samples.len();
    let var_floor = STD_FLOOR * STD_FLOOR;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = kmeanspp_means(samples, k, &mut rng);

    // Initial hard assignment to the nearest center.
    let mut weights = vec![0.0; k];
    let mut vars = vec![0.0; k];
    let mut sums = vec![0.0; k];
    let mut assign = vec![0usize; n];
    for (i, x) in samples.iter().enumerate() {
        let c = (0..k).min_by(|&a, &b| (x - means[a]).abs().total_cmp(&(x - means[b]).abs())).unwrap();
        assign[i] = c;
        weights[c] += 1.0;
        sums[c] += x;
    }
    for c in 0..k {
        if weights[c] > 0.0 {
            means[c] = sums[c] / weights[c];
        }
    }
    let overall_mean = samples.iter().sum::<f64>() / n as f64;
    let overall_var = samples.iter().map(|x| (x - overall_mean).powi(2)).sum::<f64>() / n as f64;
    for (i, x) in samples.iter().enumerate() {
        vars[assign[i]] += (x - means[assign[i]]).powi(2);
    }
    for c in 0..k {
        vars[c] = if weights[c] > 1.0 { (vars[c] / weights[c]).max(var_floor) } else { overall_var.max(var_floor) };
        weights[c] = (weights[c] / n as f64).max(1.0 / n as f64);
    }
    let wsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= wsum);

    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut ll_prev = f64::NEG_INFINITY;
    let mut iterations = 0;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut logs = vec![0.0; k];
    loop {
        // E-step
        let consts: Vec<f64> =
            (0..k)
                .map(|c| {
                    if weights[c] > 0.0 {
                        weights[c].ln() - 0.5 * vars[c].ln() - half_ln_2pi
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
        let mut ll = 0.0;
        for (i, x) in samples.iter().enumerate() {
            for c in 0..k {
                logs[c] = consts[c] - 0.5 * (x - means[c]).powi(2) / vars[c];
            }
            let lse = log_sum_exp(&logs);
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (logs[c] - lse).exp();
            }
        }
        trace.push(ll);
        let converged = (ll - ll_prev) / n as f64 <= opts.tol;
        if converged || iterations >= opts.max_iter {
            break;
        }
        ll_prev = ll;
        iterations += 1;

        // M-step
        for c in 0..k {
            let mut nk = 0.0;
            let mut s1 = 0.0;
            for (i, x) in samples.iter().enumerate() {
                let r = resp[i * k + c];
                nk += r;
                s1 += r * x;
            }
            if nk <= 0.0 {
                weights[c] = 0.0;
                continue;
            }
            let mu = s1 / nk;
            let mut s2 = 0.0;
            for (i, x) in samples.iter().enumerate() {
                s2 += resp[i * k + c] * (x - mu).powi(2);
            }
            weights[c] = nk / n as f64;
            means[c] = mu;
            vars[c] = (s2 / nk).max(var_floor);
        }
    }

    let comps: Vec<Component> = (0..k)
        .filter(|&c| weights[c] > 0.0)
        .map(|c| Component { weight: weights[c], mean: means[c], std: vars[c].sqrt().max(STD_FLOOR) })
        .collect();
    let mixture = GaussianMixture::normalized(comps).expect("EM keeps at least one component");
    let log_likelihood = *trace.last().unwrap();
    GmmFit { mixture, log_likelihood, iterations, trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_recovers_moments() {
        let truth = GaussianMixture::single(0.02, 0.01).unwrap();
        let xs = truth.sample(10_000, 11);
        let fit = fit_gmm_em(&xs, 1, &EmOptions::default()).unwrap();
        let c = fit.mixture.components()[0];
        assert!((c.mean - 0.02).abs() < 3.0 * 0.01 / 100.0, "{}", c.mean);
        assert!((c.std - 0.01).abs() < 0.05 * 0.01, "{}", c.std);
    }

    #[test]
    fn identical_samples_hit_the_floor() {
        let xs = vec![0.37; 50];
        let fit = fit_gmm_em(&xs, 1, &EmOptions::default()).unwrap();
        let c = fit.mixture.components()[0];
        assert!((c.mean - 0.37).abs() < 1e-12);
        assert_eq!(c.std, STD_FLOOR);
    }

    #[test]
    fn em_is_monotone() {
        let truth = GaussianMixture::new(vec![
            Component { weight: 0.5, mean: -1.0, std: 0.4 },
            Component { weight: 0.3, mean: 1.0, std: 0.3 },
            Component { weight: 0.2, mean: 3.0, std: 0.8 },
        ])
        .unwrap();
        let xs = truth.sample(2_000, 3);
        let fit = fit_gmm_em(&xs, 3, &EmOptions::default()).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(matches!(fit_gmm_em(&[], 1, &EmOptions::default()), Err(ProbError::TooFewSamples { .. })));
        assert!(matches!(
            fit_gmm_em(&[1.0, 2.0], 3, &EmOptions::default()),
            Err(ProbError::TooFewSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn bic_prefers_one_component_for_gaussian_data() {
        let xs = GaussianMixture::single(0.0, 1.0).unwrap().sample(3_000, 5);
        let fit = fit_gmm_bic(&xs, 5, &EmOptions::default()).unwrap();
        assert_eq!(fit.mixture.len(), 1);
    }
}
