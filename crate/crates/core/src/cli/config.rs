use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::forecast::{TrainConfig, Variant};
use crate::pipeline::{SplitRatios, SynthSpec};
use crate::ppf::BasePoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Network JSON; the bundled IEEE 33-bus feeder when absent.
    pub network: Option<PathBuf>,
    /// Station demand scenario JSON; the bundled scenario when absent.
    pub scenario: Option<PathBuf>,
    /// Dataset directory; `<out_dir>/data` when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { network: None, scenario: None, data_dir: None, out_dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineKnobs {
    pub t: usize,
    pub n_f: usize,
    pub ratios: SplitRatios,
    pub min_samples: usize,
    pub k_max: usize,
}

impl Default for PipelineKnobs {
    fn default() -> Self {
        Self { t: 8, n_f: 100, ratios: SplitRatios::default(), min_samples: 30, k_max: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandSource {
    /// Bundled or configured station demand scenario.
    Scenario,
    /// Probabilistic forecast from the trained model and error model.
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridKnobs {
    /// Load multiplier for the forecast source (the scenario carries its own).
    pub load_scale: f64,
    pub v_min: f64,
}

impl Default for GridKnobs {
    fn default() -> Self {
        Self { load_scale: 0.7, v_min: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpfKnobs {
    pub varsigma: f64,
    pub input_cap: usize,
    pub output_cap: usize,
    /// Monte Carlo reference samples; 0 skips the reference.
    pub mc_samples: usize,
    pub base: BasePoint,
    /// Bus whose densities are written as plot data.
    pub plot_bus: usize,
    pub plot_bins: usize,
}

impl Default for PpfKnobs {
    fn default() -> Self {
        Self {
            varsigma: 0.001,
            input_cap: 3,
            output_cap: 16,
            mc_samples: 0,
            base: BasePoint::MeanDemand,
            plot_bus: 18,
            plot_bins: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HcKnobs {
    pub epsilon: f64,
    /// Per-station values overriding `epsilon`, in station order.
    pub epsilons: Option<Vec<f64>>,
    pub segments: usize,
    pub rel_gap: f64,
    pub node_limit: usize,
    pub verify_samples: usize,
    pub solver_tol: f64,
}

impl Default for HcKnobs {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            epsilons: None,
            segments: 20,
            rel_gap: 1e-4,
            node_limit: 100_000,
            verify_samples: 10_000,
            solver_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssessKnobs {
    pub source: DemandSource,
    /// Index into the test split used by the forecast source.
    pub sample: usize,
    pub compare: bool,
}

impl Default for AssessKnobs {
    fn default() -> Self {
        Self { source: DemandSource::Scenario, sample: 0, compare: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub pipeline: PipelineKnobs,
    pub train: TrainConfig,
    /// Extra variants trained next to the full model.
    pub ablation: Vec<String>,
    pub grid: GridKnobs,
    pub ppf: PpfKnobs,
    pub hc: HcKnobs,
    pub assess: AssessKnobs,
}

fn in_open_unit(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} = {x} must lie in (0, 1)")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data_dir.clone().unwrap_or_else(|| self.paths.out_dir.join("data"))
    }

    pub fn variants(&self) -> Result<Vec<Variant>, CliError> {
        self.ablation
            .iter()
            .map(|s| Variant::parse(s).ok_or_else(|| CliError::Config(format!("unknown ablation variant '{s}'"))))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for p in [&self.paths.network, &self.paths.scenario].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Config(format!("path {} does not exist", p.display())));
            }
        }
        self.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pipeline.ratios.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.pipeline.t == 0 {
            return Err(CliError::Config("pipeline.t must be at least 1".into()));
        }
        if self.pipeline.n_f == 0 || self.pipeline.k_max == 0 {
            return Err(CliError::Config("pipeline.n_f and pipeline.k_max must be positive".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.variants()?;
        if !(self.grid.load_scale >= 0.0 && self.grid.load_scale.is_finite()) {
            return Err(CliError::Config(format!("grid.load_scale = {}", self.grid.load_scale)));
        }
        in_open_unit("grid.v_min", self.grid.v_min)?;
        in_open_unit("ppf.varsigma", self.ppf.varsigma)?;
        if self.ppf.input_cap == 0 || self.ppf.output_cap == 0 || self.ppf.plot_bins == 0 {
            return Err(CliError::Config("ppf component caps and plot_bins must be positive".into()));
        }
        in_open_unit("hc.epsilon", self.hc.epsilon)?;
        for &e in self.hc.epsilons.iter().flatten() {
            in_open_unit("hc.epsilons[i]", e)?;
        }
        if self.hc.segments == 0 || self.hc.node_limit == 0 || self.hc.verify_samples == 0 {
            return Err(CliError::Config("hc.segments, node_limit and verify_samples must be positive".into()));
        }
        if !(self.hc.rel_gap >= 0.0) || !(self.hc.solver_tol > 0.0) {
            return Err(CliError::Config("hc.rel_gap must be >= 0 and hc.solver_tol > 0".into()));
        }
        Ok(())
    }
}

/// Sub-seed for one labeled component, derived from the root seed so each
/// component can be reproduced on its own.
pub fn sub_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_knobs() {
        let mut c = RunConfig::default();
        c.ppf.varsigma = 0.0;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = RunConfig::default();
        c.synth.days = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.ablation = vec!["bogus".into()];
        assert!(c.validate().is_err());
    }

    #[test]
    fn sub_seeds_are_labeled() {
        assert_ne!(sub_seed(0, "data"), sub_seed(0, "train"));
        assert_ne!(sub_seed(0, "data"), sub_seed(1, "data"));
        assert_eq!(sub_seed(7, "mc"), sub_seed(7, "mc"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "hc": {"epsilon": 0.1}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.hc.epsilon, 0.1);
        assert_eq!(c.hc.segments, 20);
        assert_eq!(c.pipeline.t, 8);
    }
}
