use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ForecastError, TrainConfig, Variant, SLOTS_PER_DAY};
use crate::autograd::Tensor;

/// Architecture of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub n_stations: usize,
    pub t: usize,
    pub n_covariates: usize,
    pub n_e: usize,
    pub k_s: usize,
    pub k_t: usize,
    pub channels: Vec<usize>,
    pub d_k: usize,
    pub z_prime: usize,
    pub hidden: usize,
    pub time_embedding: usize,
    /// Fixed similarity adjacency `[N x N]` used by the noWA variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_adjacency: Option<Vec<f64>>,
}

impl ModelSpec {
    pub fn new(
        cfg: &TrainConfig,
        variant: Variant,
        n_stations: usize,
        t: usize,
        n_covariates: usize,
    ) -> Result<Self, ForecastError> {
        cfg.validate()?;
        let spec = Self {
            variant,
            n_stations,
            t,
            n_covariates,
            n_e: cfg.n_e,
            k_s: cfg.k_s,
            k_t: cfg.k_t,
            channels: cfg.channels.clone(),
            d_k: cfg.d_k,
            z_prime: cfg.z_prime,
            hidden: cfg.hidden,
            time_embedding: cfg.time_embedding,
            fixed_adjacency: None,
        };
        if n_stations == 0 {
            return Err(ForecastError::Config("at least one station required".into()));
        }
        let shrink = 2 * (cfg.k_t - 1) * cfg.channels.len();
        if t <= shrink {
            return Err(ForecastError::Config(format!(
                "window of {t} slots leaves no time steps after {} blocks with k_t = {}",
                cfg.channels.len(),
                cfg.k_t
            )));
        }
        Ok(spec)
    }

    /// Attaches the fixed similarity matrix required by [`Variant::NoWA`].
    pub fn with_fixed_adjacency(mut self, w: Vec<f64>) -> Result<Self, ForecastError> {
        let n = self.n_stations;
        if w.len() != n * n {
            return Err(ForecastError::Shape(format!("fixed adjacency needs {} entries", n * n)));
        }
        for i in 0..n {
            if w[i * n..(i + 1) * n].iter().sum::<f64>() <= 0.0 {
                return Err(ForecastError::Config(format!("zero-degree row {i} in fixed adjacency")));
            }
        }
        self.fixed_adjacency = Some(w);
        Ok(self)
    }

    pub fn input_channels(&self) -> usize {
        1 + 2 * self.time_embedding + self.n_covariates
    }

    /// Time steps left after all ST-Conv blocks.
    pub fn t_out(&self) -> usize {
        self.t - 2 * (self.k_t - 1) * self.channels.len()
    }

    pub fn uses_adaptive_adjacency(&self) -> bool {
        self.variant != Variant::NoWA
    }

    pub fn uses_attention(&self) -> bool {
        self.variant != Variant::NoTA
    }

    /// Per-node feature width entering the pooling layer.
    pub fn node_features(&self) -> usize {
        self.t_out() * self.channels.last().copied().unwrap_or(0)
    }

    /// Ordered list of `(name, shape)` for every learnable tensor.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("emb.tod".to_string(), vec![SLOTS_PER_DAY, self.time_embedding]),
            ("emb.dow".to_string(), vec![7, self.time_embedding]),
        ];
        if self.uses_adaptive_adjacency() {
            out.push(("adj.E".into(), vec![self.n_stations, self.n_e]));
            out.push(("adj.M".into(), vec![self.t, self.t]));
            out.push(("adj.sigma_raw".into(), vec![1]));
        }
        let mut c_in = self.input_channels();
        for (l, &c) in self.channels.iter().enumerate() {
            for (layer, ci) in [("t1", c_in), ("t2", c)] {
                let p = format!("block{l}.{layer}");
                out.push((format!("{p}.B"), vec![self.k_t, ci, c]));
                out.push((format!("{p}.b"), vec![c]));
                out.push((format!("{p}.C"), vec![self.k_t, ci, c]));
                out.push((format!("{p}.c"), vec![c]));
                if self.uses_attention() {
                    out.push((format!("{p}.Wq"), vec![c, self.d_k]));
                    out.push((format!("{p}.Wk"), vec![c, self.d_k]));
                }
                if layer == "t1" {
                    out.push((format!("block{l}.theta"), vec![self.k_s, c, c]));
                }
            }
            c_in = c;
        }
        let zz = self.z_prime * self.z_prime;
        if self.variant == Variant::Fc {
            out.push(("head.fc.W".into(), vec![self.n_stations * self.node_features(), zz]));
            out.push(("head.fc.b".into(), vec![zz]));
        } else {
            out.push(("head.Z".into(), vec![self.node_features() + self.n_stations, self.z_prime]));
        }
        out.push(("mlp.W1".into(), vec![zz, self.hidden]));
        out.push(("mlp.b1".into(), vec![self.hidden]));
        out.push(("mlp.W2".into(), vec![self.hidden, self.n_stations]));
        out.push(("mlp.b2".into(), vec![self.n_stations]));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// All learnable tensors of one model, in [`ModelSpec::layout`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModelParams {
    pub spec: ModelSpec,
    pub tensors: Vec<(String, Tensor)>,
}

fn fan_std(name: &str, shape: &[usize], spec: &ModelSpec) -> f64 {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "tod" | "dow" => 0.1,
        "E" => 1.0 / (spec.n_e as f64).sqrt(),
        "Z" => 1.0 / ((shape[0] * spec.n_stations) as f64).sqrt(),
        "B" | "C" => (2.0 / (shape[0] * shape[1] + shape[2]) as f64).sqrt(),
        "theta" => (2.0 / (shape[0] * shape[1] + shape[2]) as f64).sqrt(),
        "W1" => (2.0 / shape[0] as f64).sqrt(),
        _ => (2.0 / (shape[0] + shape[shape.len() - 1]) as f64).sqrt(),
    }
}

impl ForecastModelParams {
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (name, shape) in spec.layout() {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name).to_string();
            let data = match leaf.as_str() {
                "b" | "c" | "b1" | "b2" => vec![0.0; n],
                "sigma_raw" => vec![(1f64.exp() - 1.0).ln()],
                "M" => {
                    let t = shape[0];
                    (0..n).map(|i| if i / t == i % t { 1.0 } else { 0.0 }).collect()
                }
                _ => {
                    let d = Normal::new(0.0, fan_std(&name, &shape, &spec)).unwrap();
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            };
            tensors.push((name, Tensor::new(shape, data)));
        }
        Self { spec, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn shape_audit(&self) -> Vec<ShapeEntry> {
        self.tensors
            .iter()
            .map(|(n, t)| ShapeEntry { name: n.clone(), shape: t.shape.clone(), count: t.len() })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// Checks that stored tensors match the spec's layout.
    pub fn validate(&self) -> Result<(), ForecastError> {
        let layout = self.spec.layout();
        if layout.len() != self.tensors.len() {
            return Err(ForecastError::Shape(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(&self.tensors) {
            if name != n || shape != &t.shape {
                return Err(ForecastError::Shape(format!(
                    "tensor {n} {:?} does not match layout {name} {shape:?}",
                    t.shape
                )));
            }
        }
        if !self.is_finite() {
            return Err(ForecastError::Shape("non-finite parameter".into()));
        }
        Ok(())
    }
}
