use super::{FeatureTensor, ForecastError, ForecastModelParams, Sample, Variant};
use crate::autograd::{Tape, Tensor, Var};

/// Stacked windows ready for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, N, T]` normalized demand.
    pub demand: Tensor,
    /// `[B, N, T, K]` covariates, if any.
    pub covariates: Option<Tensor>,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
    /// `[B * N]` next-slot targets (empty for inference batches).
    pub target: Vec<f64>,
}

impl Batch {
    pub fn from_features(windows: &[&FeatureTensor]) -> Result<Self, ForecastError> {
        let first = windows.first().ok_or_else(|| ForecastError::Shape("empty batch".into()))?;
        let (n, t, k) = (first.n_stations, first.t, first.n_covariates());
        let b = windows.len();
        let mut demand = Vec::with_capacity(b * n * t);
        let mut cov = Vec::with_capacity(b * n * t * k);
        let mut tod = Vec::with_capacity(b * t);
        let mut dow = Vec::with_capacity(b * t);
        for w in windows {
            w.validate()?;
            if w.n_stations != n || w.t != t || w.n_covariates() != k {
                return Err(ForecastError::Shape("windows in a batch differ in shape".into()));
            }
            demand.extend_from_slice(&w.demand);
            cov.extend_from_slice(&w.covariates);
            tod.extend_from_slice(&w.tod);
            dow.extend_from_slice(&w.dow);
        }
        Ok(Self {
            demand: Tensor::new(vec![b, n, t], demand),
            covariates: (k > 0).then(|| Tensor::new(vec![b, n, t, k], cov)),
            tod,
            dow,
            target: Vec::new(),
        })
    }

    pub fn from_samples(samples: &[&Sample]) -> Result<Self, ForecastError> {
        let feats: Vec<&FeatureTensor> = samples.iter().map(|s| &s.features).collect();
        let mut batch = Self::from_features(&feats)?;
        for s in samples {
            if s.target.len() != s.features.n_stations {
                return Err(ForecastError::Shape("target length differs from station count".into()));
            }
            batch.target.extend_from_slice(&s.target);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.demand.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Graph {
    pred: Var,
    params: Vec<Var>,
}

fn check_shapes(params: &ForecastModelParams, batch: &Batch) -> Result<(), ForecastError> {
    let s = &params.spec;
    let sh = &batch.demand.shape;
    let k = batch.covariates.as_ref().map_or(0, |c| c.shape[3]);
    if sh[1] != s.n_stations || sh[2] != s.t || k != s.n_covariates {
        return Err(ForecastError::Shape(format!(
            "model expects {} stations x {} slots with {} covariates, got {} x {} with {k}",
            s.n_stations, s.t, s.n_covariates, sh[1], sh[2]
        )));
    }
    Ok(())
}

fn build(tape: &mut Tape, params: &ForecastModelParams, batch: &Batch) -> Graph {
    let spec = &params.spec;
    let (b, n) = (batch.len(), spec.n_stations);
    let vars: Vec<Var> = params.tensors.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let p = |name: &str| -> Var {
        let i =
            params.tensors.iter().position(|(n, _)| n == name).unwrap_or_else(|| panic!("missing parameter {name}"));
        vars[i]
    };

    tape.set_layer("embedding");
    let mut x = tape.features(
        &batch.demand,
        batch.covariates.as_ref(),
        batch.tod.clone(),
        batch.dow.clone(),
        p("emb.tod"),
        p("emb.dow"),
    );

    tape.set_layer("adjacency");
    let lt = if spec.uses_adaptive_adjacency() {
        let e = p("adj.E");
        let ee = tape.bmm(e, e, false, true);
        let sm = tape.softmax_last(ee);
        let w_ti = tape.relu(sm);
        let sigma = tape.softplus(p("adj.sigma_raw"));
        let s2 = tape.square(sigma);
        let inv = tape.recip(s2);
        let coef = tape.scale(inv, -0.5);
        let d = tape.mahalanobis(&batch.demand, p("adj.M"));
        let logits = tape.mul_scalar(d, coef);
        let w_tv = tape.softmax_last(logits);
        let w = tape.add_batch(w_tv, w_ti);
        let w = tape.symmetrize(w);
        tape.cheb_laplacian(w)
    } else {
        let w = spec.fixed_adjacency.clone().expect("noWA requires a fixed adjacency");
        let wc = tape.constant(Tensor::new(vec![n, n], w));
        let ws = tape.symmetrize(wc);
        tape.cheb_laplacian(ws)
    };

    let mut c_in = spec.input_channels();
    for (l, &c) in spec.channels.iter().enumerate() {
        x = temporal_layer(tape, &p, spec.uses_attention(), spec.k_t, x, &format!("block{l}.t1"), c_in, c);

        tape.set_layer(&format!("block{l}.graph"));
        let mut terms = vec![x];
        if spec.k_s > 1 {
            terms.push(tape.graph_mix(lt, x));
        }
        for k in 2..spec.k_s {
            let m = tape.graph_mix(lt, terms[k - 1]);
            let m2 = tape.scale(m, 2.0);
            terms.push(tape.sub(m2, terms[k - 2]));
        }
        let mut stacked = terms[0];
        for &t in &terms[1..] {
            stacked = tape.concat_last(stacked, t);
        }
        let theta = tape.reshape(p(&format!("block{l}.theta")), &[spec.k_s * c, c]);
        let g = tape.matmul_last(stacked, theta);
        x = tape.relu(g);

        x = temporal_layer(tape, &p, spec.uses_attention(), spec.k_t, x, &format!("block{l}.t2"), c, c);
        c_in = c;
    }

    tape.set_layer("pooling");
    let z = spec.node_features();
    let zz = spec.z_prime * spec.z_prime;
    let h = if spec.variant == Variant::Fc {
        let flat = tape.reshape(x, &[b, n * z]);
        let d = tape.matmul_last(flat, p("head.fc.W"));
        tape.add_bias(d, p("head.fc.b"))
    } else {
        let xn = tape.reshape(x, &[b, n, z]);
        let mut eye = vec![0.0; b * n * n];
        for bi in 0..b {
            for i in 0..n {
                eye[(bi * n + i) * n + i] = 1.0;
            }
        }
        let id = tape.constant(Tensor::new(vec![b, n, n], eye));
        let xi = tape.concat_last(xn, id);
        let u = tape.matmul_last(xi, p("head.Z"));
        let gram = tape.bmm(u, u, true, false);
        tape.reshape(gram, &[b, zz])
    };

    tape.set_layer("mlp");
    let h1 = tape.matmul_last(h, p("mlp.W1"));
    let h1 = tape.add_bias(h1, p("mlp.b1"));
    let h1 = tape.relu(h1);
    let o = tape.matmul_last(h1, p("mlp.W2"));
    let pred = tape.add_bias(o, p("mlp.b2"));
    Graph { pred, params: vars }
}

#[allow(clippy::too_many_arguments)]
fn temporal_layer(
    tape: &mut Tape,
    p: &dyn Fn(&str) -> Var,
    attention: bool,
    k_t: usize,
    x: Var,
    prefix: &str,
    c_in: usize,
    c_out: usize,
) -> Var {
    tape.set_layer(&format!("{prefix}.conv"));
    let t = tape.shape(x)[2];
    let a = tape.temporal_conv(x, p(&format!("{prefix}.B")));
    let a = tape.add_bias(a, p(&format!("{prefix}.b")));
    let g = tape.temporal_conv(x, p(&format!("{prefix}.C")));
    let g = tape.add_bias(g, p(&format!("{prefix}.c")));
    let g = tape.sigmoid(g);
    let mut h = tape.mul(a, g);
    if c_in == c_out {
        let res = tape.slice_time(x, k_t - 1, t - k_t + 1);
        h = tape.add(h, res);
    }
    if attention {
        tape.set_layer(&format!("{prefix}.attention"));
        let d_k = tape.value(p(&format!("{prefix}.Wq"))).shape[1];
        let q = tape.matmul_last(h, p(&format!("{prefix}.Wq")));
        let k = tape.matmul_last(h, p(&format!("{prefix}.Wk")));
        let s = tape.bmm(q, k, false, true);
        let s = tape.scale(s, 1.0 / (d_k as f64).sqrt());
        let w = tape.softmax_last(s);
        let att = tape.bmm(w, h, false, false);
        let sum = tape.add(h, att);
        h = tape.scale(sum, 0.5);
    }
    h
}

/// Unclamped predictions `[B * N]`, as used in training.
pub fn forward_raw(params: &ForecastModelParams, batch: &Batch) -> Result<Vec<f64>, ForecastError> {
    check_shapes(params, batch)?;
    let mut tape = Tape::new();
    let g = build(&mut tape, params, batch);
    tape.check_finite()?;
    Ok(tape.value(g.pred).data.clone())
}

/// Per-station forecast for one window, clamped to `[0, 1]`.
pub fn forward(params: &ForecastModelParams, features: &FeatureTensor) -> Result<Vec<f64>, ForecastError> {
    let batch = Batch::from_features(&[features])?;
    Ok(forward_raw(params, &batch)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Batch loss: mean over samples of the station-summed squared error.
pub fn loss(params: &ForecastModelParams, batch: &Batch) -> Result<f64, ForecastError> {
    let pred = forward_raw(params, batch)?;
    let n = params.spec.n_stations;
    let total: f64 = pred
        .chunks(n)
        .zip(batch.target.chunks(n))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok(total / batch.len() as f64)
}

/// Loss and its gradient, one tensor per parameter in layout order.
pub fn grad(params: &ForecastModelParams, batch: &Batch) -> Result<(f64, Vec<Tensor>), ForecastError> {
    check_shapes(params, batch)?;
    if batch.target.len() != batch.len() * params.spec.n_stations {
        return Err(ForecastError::Shape("batch has no targets".into()));
    }
    let mut tape = Tape::new();
    let g = build(&mut tape, params, batch);
    tape.set_layer("loss");
    let pred = tape.reshape(g.pred, &[batch.len(), params.spec.n_stations]);
    let l = tape.mse_loss(pred, &batch.target);
    tape.check_finite()?;
    let value = tape.value(l).data[0];
    let mut grads = tape.backward(l);
    let out = g
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(&t.shape)))
        .collect();
    Ok((value, out))
}
