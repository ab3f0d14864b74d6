//! Linear-plus-second-order-cone models and their continuous relaxation.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use serde::{Deserialize, Serialize};

use super::HcError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub lb: f64,
    pub ub: f64,
    pub binary: bool,
}

/// `sum a_j x_j + constant`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn var(j: usize) -> Self {
        Self::new(vec![(j, 1.0)], 0.0)
    }

    pub fn scaled(mut self, a: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= a;
        }
        self.constant *= a;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(j, a)| a * x[j]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Eq,
    Le,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub expr: LinExpr,
    pub sense: Sense,
    pub rhs: f64,
}

/// `|| x || <= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocBlock {
    pub name: String,
    pub t: LinExpr,
    pub x: Vec<LinExpr>,
}

/// Maximization model over continuous and binary variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConicModel {
    pub vars: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    pub cones: Vec<SocBlock>,
    pub objective: LinExpr,
}

impl ConicModel {
    pub fn add_var(&mut self, name: impl Into<String>, lb: f64, ub: f64) -> usize {
        self.vars.push(Variable { name: name.into(), lb, ub, binary: false });
        self.vars.len() - 1
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> usize {
        self.vars.push(Variable { name: name.into(), lb: 0.0, ub: 1.0, binary: true });
        self.vars.len() - 1
    }

    pub fn add_constraint(&mut self, name: impl Into<String>, expr: LinExpr, sense: Sense, rhs: f64) {
        self.constraints.push(Constraint { name: name.into(), expr, sense, rhs });
    }

    pub fn add_cone(&mut self, name: impl Into<String>, t: LinExpr, x: Vec<LinExpr>) {
        self.cones.push(SocBlock { name: name.into(), t, x });
    }

    pub fn binaries(&self) -> Vec<usize> {
        (0..self.vars.len()).filter(|&j| self.vars[j].binary).collect()
    }

    /// Every expression references declared variables and bounds are ordered.
    pub fn validate(&self) -> Result<(), HcError> {
        let n = self.vars.len();
        let check = |e: &LinExpr, what: &str| -> Result<(), HcError> {
            match e.terms.iter().find(|(j, a)| *j >= n || !a.is_finite()) {
                Some((j, _)) => Err(HcError::Model(format!("{what} references undeclared or bad variable {j}"))),
                None if !e.constant.is_finite() => Err(HcError::Model(format!("{what} has a non-finite constant"))),
                None => Ok(()),
            }
        };
        for v in &self.vars {
            if v.lb > v.ub || v.lb.is_nan() || v.ub.is_nan() {
                return Err(HcError::Model(format!("variable {} has bounds [{}, {}]", v.name, v.lb, v.ub)));
            }
        }
        for c in &self.constraints {
            check(&c.expr, &c.name)?;
        }
        for k in &self.cones {
            check(&k.t, &k.name)?;
            for e in &k.x {
                check(e, &k.name)?;
            }
        }
        check(&self.objective, "objective")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SocpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SocpSolution {
    pub status: SocpStatus,
    pub x: Vec<f64>,
    /// Objective of the maximization model at `x`.
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// `|primal - dual| / max(1, |primal|)`.
    pub gap: f64,
    pub iterations: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocpSettings {
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub max_iter: u32,
}

impl Default for SocpSettings {
    fn default() -> Self {
        Self { tol_feas: 1e-9, tol_gap: 1e-9, max_iter: 200 }
    }
}

struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    fn push(&mut self, terms: &[(usize, f64)], b: f64) {
        let r = self.b.len();
        for &(j, a) in terms {
            if a != 0.0 {
                self.i.push(r);
                self.j.push(j);
                self.v.push(a);
            }
        }
        self.b.push(b);
    }
}

/// Solves the continuous relaxation (binaries in `[0, 1]`) with variable
/// bounds optionally overridden by `bounds`.
pub fn solve_socp(
    model: &ConicModel,
    bounds: Option<&[(f64, f64)]>,
    settings: &SocpSettings,
) -> Result<SocpSolution, HcError> {
    model.validate()?;
    let n = model.vars.len();
    let bound = |j: usize| bounds.map_or((model.vars[j].lb, model.vars[j].ub), |b| b[j]);
    let mut eq = Rows { i: vec![], j: vec![], v: vec![], b: vec![] };
    let mut ineq = Rows { i: vec![], j: vec![], v: vec![], b: vec![] };
    for j in 0..n {
        let (lb, ub) = bound(j);
        if lb > ub {
            return Ok(infeasible(n));
        }
        if lb == ub {
            eq.push(&[(j, 1.0)], lb);
            continue;
        }
        if lb.is_finite() {
            ineq.push(&[(j, -1.0)], -lb);
        }
        if ub.is_finite() {
            ineq.push(&[(j, 1.0)], ub);
        }
    }
    for c in &model.constraints {
        let b = c.rhs - c.expr.constant;
        match c.sense {
            Sense::Eq => eq.push(&c.expr.terms, b),
            Sense::Le => ineq.push(&c.expr.terms, b),
            Sense::Ge => {
                let neg: Vec<(usize, f64)> = c.expr.terms.iter().map(|&(j, a)| (j, -a)).collect();
                ineq.push(&neg, -b);
            }
        }
    }
    let mut soc = Rows { i: vec![], j: vec![], v: vec![], b: vec![] };
    let mut cone_dims = Vec::with_capacity(model.cones.len());
    for k in &model.cones {
        for e in std::iter::once(&k.t).chain(&k.x) {
            let neg: Vec<(usize, f64)> = e.terms.iter().map(|&(j, a)| (j, -a)).collect();
            soc.push(&neg, e.constant);
        }
        cone_dims.push(k.x.len() + 1);
    }

    let (m_eq, m_in) = (eq.b.len(), ineq.b.len());
    let mut ti = eq.i;
    let mut tj = eq.j;
    let mut tv = eq.v;
    let mut b = eq.b;
    ti.extend(ineq.i.iter().map(|r| r + m_eq));
    tj.extend(ineq.j);
    tv.extend(ineq.v);
    b.extend(ineq.b);
    ti.extend(soc.i.iter().map(|r| r + m_eq + m_in));
    tj.extend(soc.j);
    tv.extend(soc.v);
    b.extend(soc.b);
    let m = b.len();

    let a = CscMatrix::new_from_triplets(m, n, ti, tj, tv);
    let p = CscMatrix::zeros((n, n));
    let mut q = vec![0.0; n];
    for &(j, c) in &model.objective.terms {
        q[j] -= c;
    }
    let mut cones = Vec::new();
    if m_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(m_eq));
    }
    if m_in > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(m_in));
    }
    cones.extend(cone_dims.iter().map(|&d| SupportedConeT::SecondOrderConeT(d)));

    let cfg = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_feas(settings.tol_feas)
        .tol_gap_abs(settings.tol_gap)
        .tol_gap_rel(settings.tol_gap)
        .max_iter(settings.max_iter)
        .build()
        .map_err(|e| HcError::Solver(format!("settings: {e:?}")))?;
    let mut solver =
        DefaultSolver::new(&p, &q, &a, &b, &cones, cfg).map_err(|e| HcError::Solver(format!("setup: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SocpStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SocpStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SocpStatus::Unbounded,
        other => {
            return Err(HcError::Numerical(format!(
                "{other:?} after {} iterations (primal residual {:.2e}, dual residual {:.2e})",
                sol.iterations, sol.r_prim, sol.r_dual
            )))
        }
    };
    let objective = model.objective.eval(&sol.x);
    Ok(SocpSolution {
        status,
        x: sol.x.clone(),
        objective,
        primal_residual: sol.r_prim,
        dual_residual: sol.r_dual,
        gap: (sol.obj_val - sol.obj_val_dual).abs() / sol.obj_val.abs().max(1.0),
        iterations: sol.iterations,
    })
}

fn infeasible(n: usize) -> SocpSolution {
    SocpSolution {
        status: SocpStatus::Infeasible,
        x: vec![f64::NAN; n],
        objective: f64::NEG_INFINITY,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        gap: f64::NAN,
        iterations: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanity_lp() {
        let mut m = ConicModel::default();
        let x = m.add_var("x", f64::NEG_INFINITY, f64::INFINITY);
        m.add_constraint("cap", LinExpr::var(x), Sense::Le, 3.0);
        m.objective = LinExpr::var(x);
        let s = solve_socp(&m, None, &SocpSettings::default()).unwrap();
        assert_eq!(s.status, SocpStatus::Optimal);
        assert!((s.x[x] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn single_cone() {
        // max x1 s.t. ||(2 x1, 0, 1 - x2)|| <= 1 + x2, x2 <= 1, i.e. x1^2 <= x2.
        let mut m = ConicModel::default();
        let x1 = m.add_var("x1", f64::NEG_INFINITY, f64::INFINITY);
        let x2 = m.add_var("x2", f64::NEG_INFINITY, 1.0);
        m.add_cone(
            "toy",
            LinExpr::new(vec![(x2, 1.0)], 1.0),
            vec![LinExpr::new(vec![(x1, 2.0)], 0.0), LinExpr::new(vec![], 0.0), LinExpr::new(vec![(x2, -1.0)], 1.0)],
        );
        m.objective = LinExpr::var(x1);
        let s = solve_socp(&m, None, &SocpSettings::default()).unwrap();
        assert_eq!(s.status, SocpStatus::Optimal);
        assert!((s.objective - 1.0).abs() < 1e-6, "{}", s.objective);
        assert!(s.primal_residual < 1e-7 && s.dual_residual < 1e-7 && s.gap < 1e-6);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut m = ConicModel::default();
        let x = m.add_var("x", 0.0, 1.0);
        m.add_constraint("low", LinExpr::var(x), Sense::Ge, 2.0);
        m.objective = LinExpr::var(x);
        assert_eq!(solve_socp(&m, None, &SocpSettings::default()).unwrap().status, SocpStatus::Infeasible);
        let mut u = ConicModel::default();
        let y = u.add_var("y", 0.0, f64::INFINITY);
        u.objective = LinExpr::var(y);
        assert_eq!(solve_socp(&u, None, &SocpSettings::default()).unwrap().status, SocpStatus::Unbounded);
    }
}
