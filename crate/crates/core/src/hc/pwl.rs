use serde::{Deserialize, Serialize};

use super::conic::{ConicModel, LinExpr, Sense};
use super::{expected_satisfaction, HcError};
use crate::prob::GaussianMixture;

/// Upper end of the breakpoint domain as a demand quantile.
pub const PWL_QUANTILE: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest error against the exact function at segment midpoints, when known.
    pub max_midpoint_error: f64,
}

impl PiecewiseLinear {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self, HcError> {
        if breakpoints.len() < 2 || breakpoints.len() != values.len() {
            return Err(HcError::Invalid(format!("{} breakpoints and {} values", breakpoints.len(), values.len())));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(HcError::Invalid("breakpoints must be strictly increasing".into()));
        }
        Ok(Self { breakpoints, values, max_midpoint_error: 0.0 })
    }

    pub fn segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn right_endpoint(&self) -> f64 {
        self.breakpoints[self.segments()]
    }

    pub fn slope(&self, i: usize) -> f64 {
        (self.values[i + 1] - self.values[i]) / (self.breakpoints[i + 1] - self.breakpoints[i])
    }

    pub fn intercept(&self, i: usize) -> f64 {
        self.values[i] - self.slope(i) * self.breakpoints[i]
    }

    /// Segment holding `p`; the left one at an interior breakpoint, clamped to the domain.
    pub fn segment_of(&self, p: f64) -> usize {
        let n = self.segments();
        self.breakpoints[1..n].partition_point(|&b| b < p).min(n - 1)
    }

    pub fn eval(&self, p: f64) -> f64 {
        let i = self.segment_of(p);
        self.slope(i) * p + self.intercept(i)
    }
}

/// `n`-segment interpolant of the expected satisfaction on uniform breakpoints
/// over `[0, q_0.999]`.
pub fn build_pwl(g: &GaussianMixture, n: usize) -> Result<PiecewiseLinear, HcError> {
    if n == 0 {
        return Err(HcError::Invalid("segment count must be at least 1".into()));
    }
    let top = g.quantile(PWL_QUANTILE)?;
    if !(top > 0.0) {
        return Err(HcError::Invalid(format!("demand quantile {top} is not positive")));
    }
    let bp: Vec<f64> = (0..=n).map(|k| top * k as f64 / n as f64).collect();
    let values = bp.iter().map(|&p| expected_satisfaction(g, p)).collect();
    let mut pwl = PiecewiseLinear::new(bp, values)?;
    pwl.max_midpoint_error = (0..n)
        .map(|i| {
            let m = 0.5 * (pwl.breakpoints[i] + pwl.breakpoints[i + 1]);
            (0.5 * (pwl.values[i] + pwl.values[i + 1]) - expected_satisfaction(g, m)).abs()
        })
        .fold(0.0, f64::max);
    Ok(pwl)
}

/// Variable indices created by [`encode_sos2`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sos2Vars {
    pub p: usize,
    pub f: usize,
    pub w: Vec<usize>,
    pub z: Vec<usize>,
}

/// Adds the SOS2 linking rows that tie `p` and a new variable `f` to the
/// interpolant through weights `w` and segment binaries `z`.
pub fn encode_sos2(model: &mut ConicModel, pwl: &PiecewiseLinear, p: usize, label: &str) -> Sos2Vars {
    let n = pwl.segments();
    let f = model.add_var(format!("{label}.f"), f64::NEG_INFINITY, f64::INFINITY);
    let w: Vec<usize> = (0..=n).map(|k| model.add_var(format!("{label}.w{k}"), 0.0, 1.0)).collect();
    let z: Vec<usize> = (0..n).map(|k| model.add_binary(format!("{label}.z{k}"))).collect();

    let mut p_row = vec![(p, -1.0)];
    p_row.extend(w.iter().zip(&pwl.breakpoints).map(|(&j, &b)| (j, b)));
    model.add_constraint(format!("{label}.p"), LinExpr::new(p_row, 0.0), Sense::Eq, 0.0);
    let mut f_row = vec![(f, -1.0)];
    f_row.extend(w.iter().zip(&pwl.values).map(|(&j, &v)| (j, v)));
    model.add_constraint(format!("{label}.f"), LinExpr::new(f_row, 0.0), Sense::Eq, 0.0);

    for k in 0..=n {
        let mut row = vec![(w[k], 1.0)];
        if k > 0 {
            row.push((z[k - 1], -1.0));
        }
        if k < n {
            row.push((z[k], -1.0));
        }
        model.add_constraint(format!("{label}.adj{k}"), LinExpr::new(row, 0.0), Sense::Le, 0.0);
    }
    let ones = |v: &[usize]| LinExpr::new(v.iter().map(|&j| (j, 1.0)).collect(), 0.0);
    model.add_constraint(format!("{label}.sum_w"), ones(&w), Sense::Eq, 1.0);
    model.add_constraint(format!("{label}.sum_z"), ones(&z), Sense::Eq, 1.0);
    Sos2Vars { p, f, w, z }
}
