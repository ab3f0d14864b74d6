//! Univariate Gaussian-mixture algebra.
//!
//! A [`GaussianMixture`] is the uncertainty currency of the whole pipeline:
//! forecast errors, probabilistic demand forecasts and bus-voltage
//! distributions are all mixtures, combined linearly under independence and
//! reduced by moment-preserving merges.

mod em;
mod interval;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use em::{bic, fit_gmm_bic, fit_gmm_em, EmOptions, GmmFit};
pub use interval::{interval_index, IntervalErrorModel, StationErrorModel};

/// Standard deviation floor applied after fitting (normalized units).
pub const STD_FLOOR: f64 = 1e-6;

/// Default cap on the component count of a linear combination.
pub const DEFAULT_COMPONENT_CAP: usize = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum ProbError {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("probability {0} outside the open interval (0, 1)")]
    InvalidProbability(f64),
    #[error("length mismatch: {0} mixtures vs {1} coefficients")]
    LengthMismatch(usize, usize),
    #[error("linear combination would produce {count} components (cap {cap}); reduce inputs first")]
    TooManyComponents { count: f64, cap: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    #[serde(rename = "w")]
    pub weight: f64,
    #[serde(rename = "mu")]
    pub mean: f64,
    #[serde(rename = "sigma")]
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture")]
pub struct GaussianMixture {
    components: Vec<Component>,
}

#[derive(Deserialize)]
struct RawMixture {
    components: Vec<Component>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = ProbError;
    fn try_from(raw: RawMixture) -> Result<Self, ProbError> {
        GaussianMixture::new(raw.components)
    }
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self, ProbError> {
        if components.is_empty() {
            return Err(ProbError::InvalidMixture("no components".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(ProbError::InvalidMixture(format!("weight {} not positive", c.weight)));
            }
            if !(c.std > 0.0 && c.std.is_finite()) {
                return Err(ProbError::InvalidMixture(format!("std {} not positive", c.std)));
            }
            if !c.mean.is_finite() {
                return Err(ProbError::InvalidMixture("non-finite mean".into()));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(ProbError::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(Self { components })
    }

    /// Builds a mixture after renormalizing the weights and dropping
    /// zero-weight components.
    pub fn normalized(components: Vec<Component>) -> Result<Self, ProbError> {
        let total: f64 = components.iter().map(|c| c.weight.max(0.0)).sum();
        if !(total > 0.0) {
            return Err(ProbError::InvalidMixture("total weight is zero".into()));
        }
        let comps = components
            .into_iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| Component { weight: c.weight / total, ..c })
            .collect();
        Self::new(comps)
    }

    pub fn single(mean: f64, std: f64) -> Result<Self, ProbError> {
        Self::new(vec![Component { weight: 1.0, mean, std }])
    }

    /// Degenerate distribution at `value` with the floor standard deviation.
    pub fn point_mass(value: f64) -> Self {
        Self { components: vec![Component { weight: 1.0, mean: value, std: STD_FLOOR }] }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components.iter().map(|c| c.weight * (c.std * c.std + (c.mean - m) * (c.mean - m))).sum()
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.weight * normal_pdf((x - c.mean) / c.std) / c.std).sum()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let z = (x - c.mean) / c.std;
                c.weight.ln() - 0.5 * z * z - c.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .collect();
        log_sum_exp(&logs)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let v: f64 = self.components.iter().map(|c| c.weight * normal_cdf((x - c.mean) / c.std)).sum();
        v.clamp(0.0, 1.0)
    }

    /// Interval guaranteed to contain essentially all probability mass.
    pub fn support_hint(&self) -> (f64, f64) {
        let lo = self.components.iter().map(|c| c.mean - 40.0 * c.std).fold(f64::INFINITY, f64::min);
        let hi = self.components.iter().map(|c| c.mean + 40.0 * c.std).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Inverse CDF by bracketing bisection.
    pub fn quantile(&self, q: f64) -> Result<f64, ProbError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(ProbError::InvalidProbability(q));
        }
        let (mut lo, mut hi) = self.support_hint();
        while self.cdf(lo) > q {
            lo -= hi - lo;
        }
        while self.cdf(hi) < q {
            hi += hi - lo;
        }
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (flo, fhi) = (self.cdf(lo), self.cdf(hi));
        Ok(if (q - flo).abs() <= (fhi - q).abs() { lo } else { hi })
    }

    pub fn shift(&self, c: f64) -> Self {
        Self { components: self.components.iter().map(|k| Component { mean: k.mean + c, ..*k }).collect() }
    }

    /// Distribution of `a * X` for scalar `a`.
    pub fn scale(&self, a: f64) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|k| Component {
                    weight: k.weight,
                    mean: a * k.mean,
                    std: (a.abs() * k.std).max(f64::MIN_POSITIVE),
                })
                .collect(),
        }
    }

    /// Raises every component standard deviation to at least `floor`.
    pub fn with_std_floor(&self, floor: f64) -> Self {
        Self { components: self.components.iter().map(|k| Component { std: k.std.max(floor), ..*k }).collect() }
    }

    /// Same distribution with every mean shifted so the mixture mean is zero.
    pub fn centered(&self) -> Self {
        self.shift(-self.mean())
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, n)
    }

    pub fn sample_with<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let cum: Vec<f64> = self
            .components
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight;
                Some(*acc)
            })
            .collect();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * cum[cum.len() - 1];
                let k = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
                let z: f64 = rng.sample(StandardNormal);
                let c = &self.components[k];
                c.mean + c.std * z
            })
            .collect()
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn gmm_pdf(g: &GaussianMixture, x: f64) -> f64 {
    g.pdf(x)
}

pub fn gmm_cdf(g: &GaussianMixture, x: f64) -> f64 {
    g.cdf(x)
}

pub fn gmm_quantile(g: &GaussianMixture, q: f64) -> Result<f64, ProbError> {
    g.quantile(q)
}

pub fn gmm_shift(g: &GaussianMixture, c: f64) -> GaussianMixture {
    g.shift(c)
}

pub fn gmm_sample(g: &GaussianMixture, n: usize, seed: u64) -> Vec<f64> {
    g.sample(n, seed)
}

/// Distribution of `sum_s coeffs[s] * X_s` for independent mixtures `X_s`.
///
/// Every index tuple `(k_1, .., k_S)` yields one output component with weight
/// `prod pi_{s,k_s}`, mean `sum c_s mu_{s,k_s}` and standard deviation
/// `sqrt(sum c_s^2 sigma_{s,k_s}^2)`.
pub fn gmm_linear_combination(gmms: &[GaussianMixture], coeffs: &[f64]) -> Result<GaussianMixture, ProbError> {
    gmm_linear_combination_capped(gmms, coeffs, DEFAULT_COMPONENT_CAP)
}

pub fn gmm_linear_combination_capped(
    gmms: &[GaussianMixture],
    coeffs: &[f64],
    cap: usize,
) -> Result<GaussianMixture, ProbError> {
    if gmms.len() != coeffs.len() {
        return Err(ProbError::LengthMismatch(gmms.len(), coeffs.len()));
    }
    if gmms.is_empty() {
        return Err(ProbError::InvalidArgument("empty linear combination".into()));
    }
    let count: f64 = gmms.iter().map(|g| g.len() as f64).product();
    if count > cap as f64 {
        return Err(ProbError::TooManyComponents { count, cap });
    }
    let mut acc: Vec<(f64, f64, f64)> = vec![(1.0, 0.0, 0.0)];
    for (g, &c) in gmms.iter().zip(coeffs) {
        let mut next = Vec::with_capacity(acc.len() * g.len());
        for &(w, m, v) in &acc {
            for k in g.components() {
                next.push((w * k.weight, m + c * k.mean, v + c * c * k.std * k.std));
            }
        }
        acc = next;
    }
    Ok(GaussianMixture {
        components: acc
            .into_iter()
            .map(|(w, m, v)| Component { weight: w, mean: m, std: v.sqrt().max(f64::MIN_POSITIVE) })
            .collect(),
    })
}

/// Dissimilarity used to pick the next pair to merge.
fn merge_cost(a: &Component, b: &Component) -> f64 {
    let w = a.weight * b.weight / (a.weight + b.weight);
    let dm = a.mean - b.mean;
    let ds = a.std - b.std;
    w * (dm * dm + ds * ds)
}

/// Moment-preserving merge of two weighted components.
pub fn merge_components(a: &Component, b: &Component) -> Component {
    let w = a.weight + b.weight;
    let (fa, fb) = (a.weight / w, b.weight / w);
    let mean = fa * a.mean + fb * b.mean;
    let (da, db) = (a.mean - mean, b.mean - mean);
    let var = fa * (a.std * a.std + da * da) + fb * (b.std * b.std + db * db);
    Component { weight: w, mean, std: var.sqrt() }
}

/// Greedy pairwise reduction down to `k_target` components.
pub fn gmm_reduce(g: &GaussianMixture, k_target: usize) -> Result<GaussianMixture, ProbError> {
    if k_target < 1 {
        return Err(ProbError::InvalidArgument("k_target must be at least 1".into()));
    }
    let mut comps = g.components.clone();
    if comps.len() <= k_target {
        return Ok(g.clone());
    }
    // cost[i][j] for i < j; recomputed only for the merged row.
    let n = comps.len();
    let mut alive = vec![true; n];
    let mut cost = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            cost[i][j] = merge_cost(&comps[i], &comps[j]);
        }
    }
    let mut count = n;
    while count > k_target {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if alive[j] && cost[i][j] < best.0 {
                    best = (cost[i][j], i, j);
                }
            }
        }
        let (_, i, j) = best;
        comps[i] = merge_components(&comps[i], &comps[j]);
        alive[j] = false;
        count -= 1;
        for k in 0..n {
            if k == i || !alive[k] {
                continue;
            }
            let c = merge_cost(&comps[i], &comps[k]);
            if k < i {
                cost[k][i] = c;
            } else {
                cost[i][k] = c;
            }
        }
    }
    let out: Vec<Component> = comps.into_iter().zip(alive).filter_map(|(c, a)| a.then_some(c)).collect();
    Ok(GaussianMixture { components: out })
}
