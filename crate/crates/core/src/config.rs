//! Config-file schemas: a model document describing one MPS queue, and a
//! run document that references a model and sets per-command options.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{QueueModel, RoutingMatrix, ServiceSpec};

/// On-disk model document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub alpha: Vec<f64>,
    pub services: Vec<ServiceSpec>,
    pub routing: RoutingConfig,
    /// Initial job counts per class; defaults to empty.
    #[serde(default)]
    pub initial: Vec<u64>,
    /// Interarrival laws; defaults to exponential at rate alpha_k.
    #[serde(default)]
    pub interarrival: Option<Vec<ServiceSpec>>,
    /// Initial-service laws; defaults to the service laws.
    #[serde(default)]
    pub initial_services: Option<Vec<ServiceSpec>>,
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_theta() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingConfig {
    pub matrix: Vec<Vec<f64>>,
}

impl ModelConfig {
    pub fn into_model(self) -> Result<QueueModel> {
        let k = self.k;
        if self.routing.matrix.len() != k || self.routing.matrix.iter().any(|r| r.len() != k) {
            return Err(Error::Config(format!("routing matrix must be {k} x {k}")));
        }
        let flat: Vec<f64> = self.routing.matrix.iter().flatten().copied().collect();
        let routing = RoutingMatrix::new(DMatrix::from_row_slice(k, k, &flat))?;
        let interarrival: Vec<Option<ServiceSpec>> = match self.interarrival {
            Some(list) => {
                if list.len() != k {
                    return Err(Error::Config(format!(
                        "interarrival list must have {k} entries"
                    )));
                }
                list.into_iter()
                    .zip(&self.alpha)
                    .map(|(spec, &a)| (a > 0.0).then_some(spec))
                    .collect()
            }
            None => self
                .alpha
                .iter()
                .map(|&a| (a > 0.0).then(|| ServiceSpec::exponential(a)))
                .collect(),
        };
        let initial_counts = if self.initial.is_empty() {
            vec![0; k]
        } else if self.initial.len() == k {
            self.initial
        } else {
            return Err(Error::Config(format!("initial counts must have {k} entries")));
        };
        let initial_services = self.initial_services.unwrap_or_else(|| self.services.clone());
        let model = QueueModel {
            k,
            alpha: self.alpha,
            interarrival,
            services: self.services,
            routing,
            initial_counts,
            initial_services,
            theta: self.theta,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Shared numeric grids.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsConfig {
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_x_max")]
    pub x_max: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_h() -> f64 {
    1e-2
}
fn default_x_max() -> f64 {
    50.0
}
fn default_dt() -> f64 {
    1e-3
}

impl Default for GridsConfig {
    fn default() -> Self {
        GridsConfig {
            h: default_h(),
            x_max: default_x_max(),
            dt: default_dt(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub horizon: f64,
    /// Explicit snapshot times; if empty, `n_snapshots` evenly spaced.
    #[serde(default)]
    pub snapshots: Vec<f64>,
    #[serde(default = "default_n_snapshots")]
    pub n_snapshots: usize,
    #[serde(default = "one")]
    pub reps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub descriptors: bool,
}

fn default_n_snapshots() -> usize {
    21
}
fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidInitialConfig {
    /// "zero", "invariant" or "product".
    pub kind: String,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub zbar0: Option<Vec<f64>>,
    #[serde(default)]
    pub nu0: Option<Vec<ServiceSpec>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidRunConfig {
    pub t_max: f64,
    pub initial: FluidInitialConfig,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_diag_points")]
    pub diagnostic_points: usize,
}

fn default_epsilon() -> f64 {
    0.05
}
fn default_diag_points() -> usize {
    9
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbmRunConfig {
    #[serde(default)]
    pub w0: f64,
    pub sigma: f64,
    /// Defaults to the model's Gamma.
    #[serde(default)]
    pub gamma: Option<f64>,
    pub horizon: f64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_paths() -> usize {
    1000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HtRunConfig {
    pub sigma: f64,
    pub r_values: Vec<f64>,
    #[serde(default = "default_reps")]
    pub reps: u64,
    #[serde(default = "default_t_horizon")]
    pub t_horizon: f64,
    #[serde(default = "default_n_snapshots")]
    pub n_snapshots: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_reps() -> u64 {
    200
}
fn default_t_horizon() -> f64 {
    1.0
}

/// Top-level run document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub grids: Option<GridsConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub fluid: Option<FluidRunConfig>,
    #[serde(default)]
    pub rbm: Option<RbmRunConfig>,
    #[serde(default)]
    pub ht: Option<HtRunConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

pub fn load_model(path: &Path) -> Result<QueueModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read model file {}: {e}", path.display())))?;
    let cfg: ModelConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("model parse error: {e}")))?;
    cfg.into_model()
}

/// Run config plus the raw bytes (hashed into the manifest) and the
/// model resolved relative to the config location.
pub struct LoadedRun {
    pub run: RunConfig,
    pub raw: String,
    pub model: QueueModel,
    pub model_path: PathBuf,
}

pub fn load_run(path: &Path) -> Result<LoadedRun> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let run: RunConfig =
        toml::from_str(&raw).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    let model_path = if run.model.is_relative() {
        path.parent().unwrap_or(Path::new(".")).join(&run.model)
    } else {
        run.model.clone()
    };
    let model = load_model(&model_path)?;
    Ok(LoadedRun {
        run,
        raw,
        model,
        model_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL_TOML: &str = r#"
k = 2
alpha = [0.3, 0.4]
initial = [0, 0]

[[services]]
family = "exponential"
rate = 1.0

[[services]]
family = "exponential"
rate = 0.875

[routing]
matrix = [[0.0, 0.3], [0.2, 0.0]]
"#;

    #[test]
    fn parse_model_document() {
        let cfg: ModelConfig = toml::from_str(MODEL_TOML).unwrap();
        let m = cfg.into_model().unwrap();
        assert_eq!(m.k, 2);
        assert!(m.interarrival[0].is_some());
        let dp = crate::model::derived_params(&m).unwrap();
        assert!((dp.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MODEL_TOML}\nbogus = 1\n");
        assert!(toml::from_str::<ModelConfig>(&bad).is_err());
    }

    #[test]
    fn mixed_families_parse() {
        let text = r#"
k = 1
alpha = [0.5]

[[services]]
family = "hyperexponential"
probs = [0.4, 0.6]
rates = [2.0, 0.5]

[[interarrival]]
family = "uniform"
lower = 1.0
upper = 3.0

[routing]
matrix = [[0.0]]
"#;
        let cfg: ModelConfig = toml::from_str(text).unwrap();
        let m = cfg.into_model().unwrap();
        assert_eq!(m.services[0].mean(), 1.4);
        // uniform(1, 3) has mean 2 = 1/alpha
        assert!(m.interarrival[0].is_some());
    }
}
