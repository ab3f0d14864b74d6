//! Minimal reverse-mode tape over dense `f64` tensors.
//!
//! Ops are coarse (a temporal convolution or a rescaled graph Laplacian is a
//! single node) so a full forecaster step stays a few dozen nodes per batch.
//! Shapes are row-major; "last" ops act on the innermost axis.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match {} values", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(vec![1], vec![x])
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Self::new(vec![m.nrows(), m.ncols()], data)
    }

    /// Interprets the last two axes as a matrix (leading axes must be 1).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let (r, c) = self.matrix_dims();
        assert_eq!(r * c, self.data.len(), "tensor is a stack of matrices");
        DMatrix::from_row_slice(r, c, &self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            n => (self.shape[n - 2], self.shape[n - 1]),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AutogradError {
    #[error("non-finite value produced in layer '{layer}'")]
    NonFinite { layer: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct LaplacianAux {
    s: Vec<f64>,
    deg: Vec<f64>,
    lam: Vec<f64>,
    vec: Vec<f64>,
    lap: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddBatch(Var, Var),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Recip(Var),
    MatmulLast(Var, Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxLast(Var),
    TemporalConv(Var, Var),
    SliceTime { x: Var, start: usize },
    Features { tod: Var, dow: Var, tod_idx: Vec<usize>, dow_idx: Vec<usize> },
    Mahalanobis { p: Vec<f64>, t: usize, m: Var },
    Symmetrize(Var),
    ChebLaplacian { w: Var, aux: LaplacianAux },
    GraphMix(Var, Var),
    ConcatLast(Var, Var),
    Reshape(Var),
    MseLoss { pred: Var, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    layer: usize,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    layers: Vec<String>,
    current: usize,
}

fn batch_of(shape: &[usize], tail: usize) -> usize {
    shape[..shape.len() - tail].iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `c += op(a) @ op(b)` with explicit row/column strides (in elements).
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index touched is bounded by the assertions above, and
    // `c` is exclusively borrowed with non-aliasing (row, col) strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `c += op(a) @ op(b)` for contiguous row-major storage; `op(a)` is `m x k`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    let sa = if ta { (1, m) } else { (k, 1) };
    let sb = if tb { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, sa, b, sb, c, (n, 1));
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), layers: vec!["input".into()], current: 0 }
    }

    /// Labels subsequently created nodes, for non-finite diagnostics.
    pub fn set_layer(&mut self, name: &str) {
        self.layers.push(name.to_string());
        self.current = self.layers.len() - 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, layer: self.current });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// First node holding a non-finite value, reported by layer label.
    pub fn check_finite(&self) -> Result<(), AutogradError> {
        for n in &self.nodes {
            if n.value.data.iter().any(|x| !x.is_finite()) {
                return Err(AutogradError::NonFinite { layer: self.layers[n.layer].clone() });
            }
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| f(a)).collect());
        let ng = self.ng(&[x]);
        self.push(out, op, ng)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape.clone(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |a| a * a)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.map(x, Op::Recip(x), |a| 1.0 / a)
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let c = vx.last_dim();
        assert_eq!(vb.len(), c, "bias length");
        let mut out = vx.clone();
        for row in out.data.chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(&vb.data) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddBias(x, b), ng)
    }

    /// `x[b, ...] + y[...]`, broadcasting `y` over the leading axis.
    pub fn add_batch(&mut self, x: Var, y: Var) -> Var {
        let (vx, vy) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        let inner = vy.len();
        assert_eq!(vx.len() % inner, 0, "broadcast shape");
        let mut out = vx.clone();
        for chunk in out.data.chunks_mut(inner) {
            for (o, a) in chunk.iter_mut().zip(&vy.data) {
                *o += a;
            }
        }
        let ng = self.ng(&[x, y]);
        self.push(out, Op::AddBatch(x, y), ng)
    }

    /// `x * s` with `s` a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.data[0];
        let vx = &self.nodes[x.0].value;
        let out = Tensor::new(vx.shape.clone(), vx.data.iter().map(|a| a * sv).collect());
        let ng = self.ng(&[x, s]);
        self.push(out, Op::MulScalar(x, s), ng)
    }

    /// `x[..., k] @ w[k, m]`.
    pub fn matmul_last(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(vw.shape.len(), 2, "weight must be 2-D");
        let (k, m) = (vw.shape[0], vw.shape[1]);
        assert_eq!(vx.last_dim(), k, "matmul inner dimension");
        let rows = vx.len() / k;
        let mut data = vec![0.0; rows * m];
        gemm(rows, k, m, &vx.data, false, &vw.data, false, &mut data);
        let mut shape = vx.shape.clone();
        *shape.last_mut().unwrap() = m;
        let ng = self.ng(&[x, w]);
        self.push(Tensor::new(shape, data), Op::MatmulLast(x, w), ng)
    }

    /// Batched `op(a) @ op(b)` over the last two axes, `op` an optional transpose.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, ca) = va.matrix_dims();
        let (rb, cb) = vb.matrix_dims();
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "bmm inner dimension");
        let batch = batch_of(&va.shape, 2.min(va.shape.len()));
        assert_eq!(batch, batch_of(&vb.shape, 2.min(vb.shape.len())), "bmm batch");
        let (sa, sb) = (ra * ca, rb * cb);
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let am = &va.data[bi * sa..(bi + 1) * sa];
            let bm = &vb.data[bi * sb..(bi + 1) * sb];
            gemm(m, k, n, am, ta, bm, tb, &mut data[bi * m * n..(bi + 1) * m * n]);
        }
        let mut shape = va.shape[..va.shape.len().saturating_sub(2)].to_vec();
        shape.push(m);
        shape.push(n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(shape, data), Op::Bmm { a, b, ta, tb }, ng)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let c = vx.last_dim();
        let mut out = vx.clone();
        for row in out.data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SoftmaxLast(x), ng)
    }

    /// Valid convolution along axis 2 of `x[b, n, t, ci]` with `w[kt, ci, co]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (bn, t, ci) = (vx.shape[0] * vx.shape[1], vx.shape[2], vx.shape[3]);
        let (kt, co) = (vw.shape[0], vw.shape[2]);
        assert_eq!(vw.shape[1], ci, "conv input channels");
        assert!(t >= kt, "time axis shorter than kernel");
        let to = t - kt + 1;
        // Rows of the implicit im2col matrix start every `ci` values, so one
        // strided gemm covers all windows; rows crossing a series are dropped.
        let rows = bn * t - (kt - 1);
        let mut full = vec![0.0; rows * co];
        gemm_strided(rows, kt * ci, co, &vx.data, (ci, 1), &vw.data, (co, 1), &mut full, (co, 1));
        let mut data = Vec::with_capacity(bn * to * co);
        for r in 0..bn {
            data.extend_from_slice(&full[r * t * co..(r * t + to) * co]);
        }
        let shape = vec![vx.shape[0], vx.shape[1], to, co];
        let ng = self.ng(&[x, w]);
        self.push(Tensor::new(shape, data), Op::TemporalConv(x, w), ng)
    }

    /// `x[:, :, start..start + len, :]`.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let (bn, t, c) = (vx.shape[0] * vx.shape[1], vx.shape[2], vx.shape[3]);
        assert!(start + len <= t);
        let mut data = Vec::with_capacity(bn * len * c);
        for r in 0..bn {
            data.extend_from_slice(&vx.data[(r * t + start) * c..(r * t + start + len) * c]);
        }
        let shape = vec![vx.shape[0], vx.shape[1], len, c];
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::SliceTime { x, start }, ng)
    }

    /// Assembles `[b, n, t, 1 + 2e + nc]` input features: demand, time-of-day
    /// and day-of-week embeddings (shared across stations), covariates.
    pub fn features(
        &mut self,
        demand: &Tensor,
        covariates: Option<&Tensor>,
        tod_idx: Vec<usize>,
        dow_idx: Vec<usize>,
        tod: Var,
        dow: Var,
    ) -> Var {
        let (b, n, t) = (demand.shape[0], demand.shape[1], demand.shape[2]);
        let (vt, vd) = (&self.nodes[tod.0].value, &self.nodes[dow.0].value);
        let (et, ed) = (vt.shape[1], vd.shape[1]);
        let nc = covariates.map_or(0, |c| c.shape[3]);
        let ch = 1 + et + ed + nc;
        let mut data = Vec::with_capacity(b * n * t * ch);
        for bi in 0..b {
            for ni in 0..n {
                for ti in 0..t {
                    data.push(demand.data[(bi * n + ni) * t + ti]);
                    let it = tod_idx[bi * t + ti];
                    let id = dow_idx[bi * t + ti];
                    data.extend_from_slice(&vt.data[it * et..(it + 1) * et]);
                    data.extend_from_slice(&vd.data[id * ed..(id + 1) * ed]);
                    if let Some(c) = covariates {
                        let o = ((bi * n + ni) * t + ti) * nc;
                        data.extend_from_slice(&c.data[o..o + nc]);
                    }
                }
            }
        }
        let ng = self.ng(&[tod, dow]);
        self.push(Tensor::new(vec![b, n, t, ch], data), Op::Features { tod, dow, tod_idx, dow_idx }, ng)
    }

    /// `d[b, i, j] = ||(p_i - p_j) M||` for constant windows `p[b, n, t]`.
    pub fn mahalanobis(&mut self, p: &Tensor, m: Var) -> Var {
        let (b, n, t) = (p.shape[0], p.shape[1], p.shape[2]);
        let vm = &self.nodes[m.0].value;
        assert_eq!(vm.shape, vec![t, t], "M must be T x T");
        let mut data = vec![0.0; b * n * n];
        let mut diff = vec![0.0; t];
        for bi in 0..b {
            let base = bi * n * t;
            for i in 0..n {
                for j in (i + 1)..n {
                    for (s, d) in diff.iter_mut().enumerate() {
                        *d = p.data[base + i * t + s] - p.data[base + j * t + s];
                    }
                    let mut acc = 0.0;
                    for c in 0..t {
                        let r: f64 = (0..t).map(|s| diff[s] * vm.data[s * t + c]).sum();
                        acc += r * r;
                    }
                    let d = acc.sqrt();
                    data[(bi * n + i) * n + j] = d;
                    data[(bi * n + j) * n + i] = d;
                }
            }
        }
        let ng = self.ng(&[m]);
        self.push(Tensor::new(vec![b, n, n], data), Op::Mahalanobis { p: p.data.clone(), t, m }, ng)
    }

    /// `(w + w^T) / 2` over the last two axes.
    pub fn symmetrize(&mut self, w: Var) -> Var {
        let vw = &self.nodes[w.0].value;
        let (n, _) = vw.matrix_dims();
        let mut out = vw.clone();
        for chunk in out.data.chunks_mut(n * n) {
            for i in 0..n {
                for j in (i + 1)..n {
                    let a = 0.5 * (chunk[i * n + j] + chunk[j * n + i]);
                    chunk[i * n + j] = a;
                    chunk[j * n + i] = a;
                }
            }
        }
        let ng = self.ng(&[w]);
        self.push(out, Op::Symmetrize(w), ng)
    }

    /// Rescaled normalized Laplacian `2L/lambda_max - I` of each symmetric
    /// adjacency in the stack, `L = I - D^-1/2 W D^-1/2`.
    pub fn cheb_laplacian(&mut self, w: Var) -> Var {
        let vw = &self.nodes[w.0].value;
        let (n, _) = vw.matrix_dims();
        let b = vw.len() / (n * n);
        let mut aux = LaplacianAux {
            s: vec![0.0; b * n],
            deg: vec![0.0; b * n],
            lam: vec![0.0; b],
            vec: vec![0.0; b * n],
            lap: vec![0.0; b * n * n],
        };
        let mut out = vec![0.0; b * n * n];
        for bi in 0..b {
            let wm = &vw.data[bi * n * n..(bi + 1) * n * n];
            for i in 0..n {
                let d: f64 = wm[i * n..(i + 1) * n].iter().sum();
                aux.deg[bi * n + i] = d;
                aux.s[bi * n + i] = 1.0 / d.sqrt();
            }
            let s = &aux.s[bi * n..(bi + 1) * n];
            let mut lap = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    lap[(i, j)] = eye - s[i] * wm[i * n + j] * s[j];
                }
            }
            let (lam, v) = largest_eigenpair(&lap);
            aux.lam[bi] = lam;
            for i in 0..n {
                aux.vec[bi * n + i] = v[i];
                for j in 0..n {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    aux.lap[(bi * n + i) * n + j] = lap[(i, j)];
                    out[(bi * n + i) * n + j] = 2.0 * lap[(i, j)] / lam - eye;
                }
            }
        }
        let ng = self.ng(&[w]);
        self.push(Tensor::new(vw.shape.clone(), out), Op::ChebLaplacian { w, aux }, ng)
    }

    /// `y[b, i, ...] = sum_j l[b, i, j] x[b, j, ...]`; a 2-D `l` is shared.
    pub fn graph_mix(&mut self, l: Var, x: Var) -> Var {
        let (vl, vx) = (&self.nodes[l.0].value, &self.nodes[x.0].value);
        let (b, n) = (vx.shape[0], vx.shape[1]);
        let inner = vx.len() / (b * n);
        let shared = vl.shape.len() == 2;
        let mut data = vec![0.0; vx.len()];
        for bi in 0..b {
            let lm = if shared { &vl.data[..] } else { &vl.data[bi * n * n..(bi + 1) * n * n] };
            let xs = &vx.data[bi * n * inner..(bi + 1) * n * inner];
            gemm(n, n, inner, lm, false, xs, false, &mut data[bi * n * inner..(bi + 1) * n * inner]);
        }
        let ng = self.ng(&[l, x]);
        self.push(Tensor::new(vx.shape.clone(), data), Op::GraphMix(l, x), ng)
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ca, cb) = (va.last_dim(), vb.last_dim());
        let rows = va.len() / ca;
        assert_eq!(rows, vb.len() / cb, "concat rows");
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data[r * cb..(r + 1) * cb]);
        }
        let mut shape = va.shape.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(shape, data), Op::ConcatLast(a, b), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        let out = Tensor::new(shape.to_vec(), vx.data.clone());
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Mean over the leading axis of the per-sample sum of squared errors.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64]) -> Var {
        let vp = &self.nodes[pred.0].value;
        assert_eq!(vp.len(), target.len(), "loss shape");
        let b = vp.shape[0] as f64;
        let s: f64 = vp.data.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
        let ng = self.ng(&[pred]);
        self.push(Tensor::scalar(s / b), Op::MseLoss { pred, target: target.to_vec() }, ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut seed = Tensor::zeros(&self.nodes[out.0].value.shape);
        seed.data.iter_mut().for_each(|x| *x = 1.0);
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(&self.nodes[v.0].value.shape)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn unary(&self, x: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let vx = self.val(x);
        let data = vx.data.iter().zip(&g.data).map(|(&a, &gg)| f(a, gg)).collect();
        Tensor::new(vx.shape.clone(), data)
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let mut n = g.clone();
                n.data.iter_mut().for_each(|x| *x = -*x);
                self.acc(grads, *b, n);
            }
            Op::Mul(a, b) => {
                let ga = self.unary(*b, g, |bv, gg| bv * gg);
                let gb = self.unary(*a, g, |av, gg| av * gg);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                let c = *c;
                let gx = Tensor::new(g.shape.clone(), g.data.iter().map(|v| v * c).collect());
                self.acc(grads, *x, gx);
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                let c = g.last_dim();
                let mut gb = self.zeros_like(*b);
                for row in g.data.chunks(c) {
                    for (o, v) in gb.data.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.acc(grads, *b, gb);
            }
            Op::AddBatch(x, y) => {
                self.acc(grads, *x, g.clone());
                let mut gy = self.zeros_like(*y);
                let inner = gy.len();
                for chunk in g.data.chunks(inner) {
                    for (o, v) in gy.data.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                self.acc(grads, *y, gy);
            }
            Op::MulScalar(x, s) => {
                let sv = self.val(*s).data[0];
                let gx = Tensor::new(g.shape.clone(), g.data.iter().map(|v| v * sv).collect());
                let gs: f64 = g.data.iter().zip(&self.val(*x).data).map(|(a, b)| a * b).sum();
                self.acc(grads, *x, gx);
                self.acc(grads, *s, Tensor::new(self.val(*s).shape.clone(), vec![gs]));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y.data.iter().zip(&g.data).map(|(s, gg)| gg * s * (1.0 - s)).collect();
                self.acc(grads, *x, Tensor::new(y.shape.clone(), data));
            }
            Op::Relu(x) => {
                let gx = self.unary(*x, g, |a, gg| if a > 0.0 { gg } else { 0.0 });
                self.acc(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = self.unary(*x, g, |a, gg| gg * sigmoid(a));
                self.acc(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = self.unary(*x, g, |a, gg| 2.0 * a * gg);
                self.acc(grads, *x, gx);
            }
            Op::Recip(x) => {
                let gx = self.unary(*x, g, |a, gg| -gg / (a * a));
                self.acc(grads, *x, gx);
            }
            Op::MatmulLast(x, w) => self.back_matmul_last(*x, *w, g, grads),
            Op::Bmm { a, b, ta, tb } => self.back_bmm(*a, *b, *ta, *tb, g, grads),
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut gx = y.clone();
                for (yr, gr) in gx.data.chunks_mut(c).zip(g.data.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (yv, gv) in yr.iter_mut().zip(gr) {
                        *yv *= gv - dot;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::TemporalConv(x, w) => self.back_conv(*x, *w, g, grads),
            Op::SliceTime { x, start } => {
                let mut gx = self.zeros_like(*x);
                let (bn, t, c) = (gx.shape[0] * gx.shape[1], gx.shape[2], gx.shape[3]);
                let len = g.shape[2];
                for r in 0..bn {
                    let dst = &mut gx.data[(r * t + start) * c..(r * t + start + len) * c];
                    dst.copy_from_slice(&g.data[r * len * c..(r + 1) * len * c]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Features { tod, dow, tod_idx, dow_idx } => {
                let (et, ed) = (self.val(*tod).shape[1], self.val(*dow).shape[1]);
                let (b, n, t, ch) = (g.shape[0], g.shape[1], g.shape[2], g.shape[3]);
                let mut gt = self.zeros_like(*tod);
                let mut gd = self.zeros_like(*dow);
                for bi in 0..b {
                    for ni in 0..n {
                        for ti in 0..t {
                            let row = &g.data[((bi * n + ni) * t + ti) * ch..][..ch];
                            let it = tod_idx[bi * t + ti];
                            let id = dow_idx[bi * t + ti];
                            for e in 0..et {
                                gt.data[it * et + e] += row[1 + e];
                            }
                            for e in 0..ed {
                                gd.data[id * ed + e] += row[1 + et + e];
                            }
                        }
                    }
                }
                self.acc(grads, *tod, gt);
                self.acc(grads, *dow, gd);
            }
            Op::Mahalanobis { p, t, m } => {
                let t = *t;
                let (b, n) = (g.shape[0], g.shape[1]);
                let vm = self.val(*m);
                let d = &node.value;
                let mut gm = self.zeros_like(*m);
                let mut diff = vec![0.0; t];
                let mut r = vec![0.0; t];
                for bi in 0..b {
                    let base = bi * n * t;
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let dij = d.data[(bi * n + i) * n + j];
                            if dij == 0.0 {
                                continue;
                            }
                            let gij = g.data[(bi * n + i) * n + j] + g.data[(bi * n + j) * n + i];
                            if gij == 0.0 {
                                continue;
                            }
                            for (s, dv) in diff.iter_mut().enumerate() {
                                *dv = p[base + i * t + s] - p[base + j * t + s];
                            }
                            for (c, rv) in r.iter_mut().enumerate() {
                                *rv = (0..t).map(|s| diff[s] * vm.data[s * t + c]).sum();
                            }
                            let k = gij / dij;
                            for s in 0..t {
                                for c in 0..t {
                                    gm.data[s * t + c] += k * diff[s] * r[c];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *m, gm);
            }
            Op::Symmetrize(w) => {
                let (n, _) = g.matrix_dims();
                let mut gw = g.clone();
                for (dst, src) in gw.data.chunks_mut(n * n).zip(g.data.chunks(n * n)) {
                    for i in 0..n {
                        for j in 0..n {
                            dst[i * n + j] = 0.5 * (src[i * n + j] + src[j * n + i]);
                        }
                    }
                }
                self.acc(grads, *w, gw);
            }
            Op::ChebLaplacian { w, aux } => self.back_laplacian(*w, aux, g, grads),
            Op::GraphMix(l, x) => {
                let (vl, vx) = (self.val(*l), self.val(*x));
                let (b, n) = (vx.shape[0], vx.shape[1]);
                let inner = vx.len() / (b * n);
                let shared = vl.shape.len() == 2;
                let mut gl = self.zeros_like(*l);
                let mut gx = self.zeros_like(*x);
                for bi in 0..b {
                    let lo = if shared { 0 } else { bi * n * n };
                    let span = bi * n * inner..(bi + 1) * n * inner;
                    let gb = &g.data[span.clone()];
                    gemm(n, n, inner, &vl.data[lo..lo + n * n], true, gb, false, &mut gx.data[span.clone()]);
                    gemm(n, inner, n, gb, false, &vx.data[span], true, &mut gl.data[lo..lo + n * n]);
                }
                self.acc(grads, *l, gl);
                self.acc(grads, *x, gx);
            }
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (self.val(*a).last_dim(), self.val(*b).last_dim());
                let mut ga = Vec::with_capacity(self.val(*a).len());
                let mut gb = Vec::with_capacity(self.val(*b).len());
                for row in g.data.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.acc(grads, *a, Tensor::new(self.val(*a).shape.clone(), ga));
                self.acc(grads, *b, Tensor::new(self.val(*b).shape.clone(), gb));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, Tensor::new(self.val(*x).shape.clone(), g.data.clone()));
            }
            Op::MseLoss { pred, target } => {
                let vp = self.val(*pred);
                let k = 2.0 * g.data[0] / vp.shape[0] as f64;
                let data = vp.data.iter().zip(target).map(|(p, t)| k * (p - t)).collect();
                self.acc(grads, *pred, Tensor::new(vp.shape.clone(), data));
            }
        }
    }

    fn back_matmul_last(&self, x: Var, w: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (vx, vw) = (self.val(x), self.val(w));
        let (k, m) = (vw.shape[0], vw.shape[1]);
        let rows = vx.len() / k;
        if self.nodes[x.0].needs_grad {
            let mut gx = self.zeros_like(x);
            gemm(rows, m, k, &g.data, false, &vw.data, true, &mut gx.data);
            self.acc(grads, x, gx);
        }
        if self.nodes[w.0].needs_grad {
            let mut gw = self.zeros_like(w);
            gemm(k, rows, m, &vx.data, true, &g.data, false, &mut gw.data);
            self.acc(grads, w, gw);
        }
    }

    fn back_bmm(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (va, vb) = (self.val(a), self.val(b));
        let (ra, ca) = va.matrix_dims();
        let (rb, cb) = vb.matrix_dims();
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let batch = va.len() / (ra * ca);
        let (sa, sb) = (ra * ca, rb * cb);
        let mut ga = self.zeros_like(a);
        let mut gb = self.zeros_like(b);
        for bi in 0..batch {
            let am = &va.data[bi * sa..(bi + 1) * sa];
            let bm = &vb.data[bi * sb..(bi + 1) * sb];
            let gm = &g.data[bi * m * n..(bi + 1) * m * n];
            let gam = &mut ga.data[bi * sa..(bi + 1) * sa];
            if ta {
                gemm(k, n, m, bm, tb, gm, true, gam);
            } else {
                gemm(m, n, k, gm, false, bm, !tb, gam);
            }
            let gbm = &mut gb.data[bi * sb..(bi + 1) * sb];
            if tb {
                gemm(n, m, k, gm, true, am, ta, gbm);
            } else {
                gemm(k, m, n, am, !ta, gm, false, gbm);
            }
        }
        self.acc(grads, a, ga);
        self.acc(grads, b, gb);
    }

    fn back_conv(&self, x: Var, w: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (vx, vw) = (self.val(x), self.val(w));
        let (bn, t, ci) = (vx.shape[0] * vx.shape[1], vx.shape[2], vx.shape[3]);
        let (kt, co) = (vw.shape[0], vw.shape[2]);
        let to = t - kt + 1;
        let rows = bn * t - (kt - 1);
        let mut full = vec![0.0; rows * co];
        for r in 0..bn {
            full[r * t * co..(r * t + to) * co].copy_from_slice(&g.data[r * to * co..(r + 1) * to * co]);
        }
        let mut gw = self.zeros_like(w);
        gemm_strided(kt * ci, rows, co, &vx.data, (1, ci), &full, (co, 1), &mut gw.data, (co, 1));
        if self.nodes[x.0].needs_grad {
            let mut gx = self.zeros_like(x);
            for k in 0..kt {
                let wk = &vw.data[k * ci * co..(k + 1) * ci * co];
                gemm_strided(rows, co, ci, &full, (co, 1), wk, (1, co), &mut gx.data[k * ci..], (ci, 1));
            }
            self.acc(grads, x, gx);
        }
        self.acc(grads, w, gw);
    }

    fn back_laplacian(&self, w: Var, aux: &LaplacianAux, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let vw = self.val(w);
        let (n, _) = vw.matrix_dims();
        let b = vw.len() / (n * n);
        let mut gw = self.zeros_like(w);
        let mut gl = vec![0.0; n * n];
        let mut gs = vec![0.0; n];
        for bi in 0..b {
            let lam = aux.lam[bi];
            let v = &aux.vec[bi * n..(bi + 1) * n];
            let lap = &aux.lap[bi * n * n..(bi + 1) * n * n];
            let gm = &g.data[bi * n * n..(bi + 1) * n * n];
            let glam: f64 = gm.iter().zip(lap).map(|(a, l)| -2.0 * a * l / (lam * lam)).sum();
            for i in 0..n {
                for j in 0..n {
                    gl[i * n + j] = 2.0 * gm[i * n + j] / lam + glam * v[i] * v[j];
                }
            }
            // L = I - diag(s) W diag(s), s = deg^-1/2, deg = row sums of W.
            let s = &aux.s[bi * n..(bi + 1) * n];
            let wm = &vw.data[bi * n * n..(bi + 1) * n * n];
            let gwm = &mut gw.data[bi * n * n..(bi + 1) * n * n];
            gs.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..n {
                for j in 0..n {
                    let ga = -gl[i * n + j];
                    gwm[i * n + j] += ga * s[i] * s[j];
                    gs[i] += ga * wm[i * n + j] * s[j];
                    gs[j] += ga * wm[i * n + j] * s[i];
                }
            }
            for i in 0..n {
                let d = aux.deg[bi * n + i];
                let gdeg = gs[i] * (-0.5) * d.powf(-1.5);
                for j in 0..n {
                    gwm[i * n + j] += gdeg;
                }
            }
        }
        self.acc(grads, w, gw);
    }
}

/// Largest eigenvalue and unit eigenvector of a symmetric matrix.
pub fn largest_eigenpair(m: &DMatrix<f64>) -> (f64, Vec<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let (idx, lam) =
        eig.eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
    let v = eig.eigenvectors.column(idx).iter().cloned().collect();
    (lam, v)
}
