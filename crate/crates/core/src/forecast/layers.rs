//! Single-layer entry points on plain matrices, evaluated through the same
//! tape ops the full model uses. Feature tensors here follow the
//! `[channel, station, time]` convention.

use nalgebra::DMatrix;

use super::ForecastError;
use crate::autograd::{Tape, Tensor};

fn to_nt_c(x: &Tensor) -> Tensor {
    let (c, n, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut data = vec![0.0; c * n * t];
    for ci in 0..c {
        for ni in 0..n {
            for ti in 0..t {
                data[(ni * t + ti) * c + ci] = x.data[(ci * n + ni) * t + ti];
            }
        }
    }
    Tensor::new(vec![1, n, t, c], data)
}

fn to_c_nt(x: &Tensor) -> Tensor {
    let (n, t, c) = (x.shape[1], x.shape[2], x.shape[3]);
    let mut data = vec![0.0; c * n * t];
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                data[(ci * n + ni) * t + ti] = x.data[(ni * t + ti) * c + ci];
            }
        }
    }
    Tensor::new(vec![c, n, t], data)
}

/// `ReLU(softmax_rows(E E^T))`.
pub fn build_time_invariant_adjacency(e: &DMatrix<f64>) -> DMatrix<f64> {
    let mut tape = Tape::new();
    let ev = tape.constant(Tensor::from_matrix(e));
    let ee = tape.bmm(ev, ev, false, true);
    let sm = tape.softmax_last(ee);
    let w = tape.relu(sm);
    tape.value(w).to_matrix()
}

/// Row-normalized Gaussian kernel of the generalized Mahalanobis distance
/// between station demand windows (`p_window` is `[N x T]`).
pub fn build_time_varying_adjacency(p_window: &DMatrix<f64>, m: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let (n, t) = p_window.shape();
    let mut tape = Tape::new();
    let mut p = Tensor::from_matrix(p_window);
    p.shape = vec![1, n, t];
    let mv = tape.constant(Tensor::from_matrix(m));
    let d = tape.mahalanobis(&p, mv);
    let logits = tape.scale(d, -1.0 / (2.0 * sigma * sigma));
    let w = tape.softmax_last(logits);
    tape.value(w).to_matrix()
}

/// Pairwise distances `||(P_i - P_j) M||`.
pub fn mahalanobis_distances(p_window: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = p_window.shape();
    let mut tape = Tape::new();
    let mut p = Tensor::from_matrix(p_window);
    p.shape = vec![1, n, t];
    let mv = tape.constant(Tensor::from_matrix(m));
    let d = tape.mahalanobis(&p, mv);
    tape.value(d).to_matrix()
}

/// `(W_TI + W_TV)` symmetrized.
pub fn combine_adjacency(w_ti: &DMatrix<f64>, w_tv: &DMatrix<f64>) -> Result<DMatrix<f64>, ForecastError> {
    if w_ti.shape() != w_tv.shape() || !w_ti.is_square() {
        return Err(ForecastError::Shape("adjacency shapes differ".into()));
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_matrix(w_ti));
    let b = tape.constant(Tensor::from_matrix(w_tv));
    let s = tape.add(a, b);
    let w = tape.symmetrize(s);
    Ok(tape.value(w).to_matrix())
}

/// `2L / lambda_max - I` with `L = I - D^-1/2 W D^-1/2`.
pub fn normalized_laplacian(w: &DMatrix<f64>) -> Result<DMatrix<f64>, ForecastError> {
    if !w.is_square() {
        return Err(ForecastError::Shape("adjacency must be square".into()));
    }
    for (i, row) in w.row_iter().enumerate() {
        if row.sum() <= 0.0 {
            return Err(ForecastError::Shape(format!("zero-degree row {i}")));
        }
    }
    let mut tape = Tape::new();
    let wv = tape.constant(Tensor::from_matrix(w));
    let l = tape.cheb_laplacian(wv);
    Ok(tape.value(l).to_matrix())
}

/// `sum_k T_k(L~) X theta_k` for `x` `[c_in, N, T]` and `theta` `[K_s, c_in, c_out]`.
pub fn chebyshev_conv(x: &Tensor, l_tilde: &DMatrix<f64>, theta: &Tensor) -> Result<Tensor, ForecastError> {
    let (c_in, n) = (x.shape[0], x.shape[1]);
    let (k_s, c_out) = (theta.shape[0], theta.shape[2]);
    if theta.shape[1] != c_in || l_tilde.shape() != (n, n) || k_s == 0 {
        return Err(ForecastError::Shape("chebyshev operand shapes".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(to_nt_c(x));
    let lv = tape.constant(Tensor::from_matrix(l_tilde));
    let mut terms = vec![xv];
    if k_s > 1 {
        terms.push(tape.graph_mix(lv, xv));
    }
    for k in 2..k_s {
        let m = tape.graph_mix(lv, terms[k - 1]);
        let m2 = tape.scale(m, 2.0);
        terms.push(tape.sub(m2, terms[k - 2]));
    }
    let mut stacked = terms[0];
    for &t in &terms[1..] {
        stacked = tape.concat_last(stacked, t);
    }
    let th = tape.constant(Tensor::new(vec![k_s * c_in, c_out], theta.data.clone()));
    let y = tape.matmul_last(stacked, th);
    Ok(to_c_nt(tape.value(y)))
}

/// `(X*B + b) . sigmoid(X*C + c)` along time, plus a residual when widths match.
pub fn gated_temporal_conv(
    x: &Tensor,
    b_kernel: &Tensor,
    b_bias: &[f64],
    c_kernel: &Tensor,
    c_bias: &[f64],
) -> Result<Tensor, ForecastError> {
    let (c_in, t) = (x.shape[0], x.shape[2]);
    let (k_t, c_out) = (b_kernel.shape[0], b_kernel.shape[2]);
    if t < k_t {
        return Err(ForecastError::Shape(format!("time axis {t} shorter than kernel {k_t}")));
    }
    if b_kernel.shape != c_kernel.shape || b_kernel.shape[1] != c_in || b_bias.len() != c_out || c_bias.len() != c_out {
        return Err(ForecastError::Shape("gated conv operand shapes".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(to_nt_c(x));
    let bk = tape.constant(b_kernel.clone());
    let ck = tape.constant(c_kernel.clone());
    let bb = tape.constant(Tensor::new(vec![c_out], b_bias.to_vec()));
    let cb = tape.constant(Tensor::new(vec![c_out], c_bias.to_vec()));
    let a = tape.temporal_conv(xv, bk);
    let a = tape.add_bias(a, bb);
    let g = tape.temporal_conv(xv, ck);
    let g = tape.add_bias(g, cb);
    let g = tape.sigmoid(g);
    let mut h = tape.mul(a, g);
    if c_in == c_out {
        let r = tape.slice_time(xv, k_t - 1, t - k_t + 1);
        h = tape.add(h, r);
    }
    Ok(to_c_nt(tape.value(h)))
}

/// Scaled dot-product attention over the time axis of one `[T x C]` slice.
/// Returns `(weights [T x T], output)`; `wv = None` uses the slice as values.
pub fn temporal_attention(
    x: &DMatrix<f64>,
    wq: &DMatrix<f64>,
    wk: &DMatrix<f64>,
    wv: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), ForecastError> {
    let c = x.ncols();
    if wq.nrows() != c || wk.shape() != wq.shape() || wq.ncols() == 0 {
        return Err(ForecastError::Shape("attention projection shapes".into()));
    }
    let d_k = wq.ncols();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::from_matrix(x));
    let qw = tape.constant(Tensor::from_matrix(wq));
    let kw = tape.constant(Tensor::from_matrix(wk));
    let q = tape.matmul_last(xv, qw);
    let k = tape.matmul_last(xv, kw);
    let s = tape.bmm(q, k, false, true);
    let s = tape.scale(s, 1.0 / (d_k as f64).sqrt());
    let w = tape.softmax_last(s);
    let v = match wv {
        Some(m) => {
            if m.nrows() != c {
                return Err(ForecastError::Shape("value projection shape".into()));
            }
            let vw = tape.constant(Tensor::from_matrix(m));
            tape.matmul_last(xv, vw)
        }
        None => xv,
    };
    let out = tape.bmm(w, v, false, false);
    Ok((tape.value(w).to_matrix(), tape.value(out).to_matrix()))
}

/// `flatten(Z^T X^T X Z)` for node features `x` `[N x z]` and `z_map` `[z x z']`.
pub fn second_order_pool(x: &DMatrix<f64>, z_map: &DMatrix<f64>) -> Result<Vec<f64>, ForecastError> {
    if x.ncols() != z_map.nrows() || z_map.ncols() > z_map.nrows() {
        return Err(ForecastError::Shape("pooling map must be z x z' with z' <= z".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::from_matrix(x));
    let zv = tape.constant(Tensor::from_matrix(z_map));
    let u = tape.matmul_last(xv, zv);
    let g = tape.bmm(u, u, true, false);
    Ok(tape.value(g).data.clone())
}
