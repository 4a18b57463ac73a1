//! Experiment configuration: one JSON document, unknown keys rejected.

use crate::experiment::EvalProtocol;
use crate::flow::FlowConfig;
use crate::graph::CausalDag;
use crate::model::ModelConfig;
use crate::scm::{Family, Mechanism, RootProcess, ScmError, ScmSpec};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagSpec {
    pub nodes: usize,
    pub edges: Vec<[usize; 2]>,
}

impl DagSpec {
    pub fn from_dag(dag: &CausalDag) -> Self {
        Self {
            nodes: dag.node_count(),
            edges: dag.edges().into_iter().map(|(p, c)| [p, c]).collect(),
        }
    }

    pub fn build(&self) -> Result<CausalDag, ConfigError> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        CausalDag::new(self.nodes, &edges).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmConfig {
    pub family: Option<Family>,
    pub mechanism: Mechanism,
    pub amplitude: f64,
    pub period: f64,
    pub noise_scale: f64,
    pub burn_in: usize,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            family: Some(Family::Tree),
            mechanism: Mechanism::Additive,
            amplitude: 3.0,
            period: 20.0,
            noise_scale: 1.0,
            burn_in: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub context_len: usize,
    pub total_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            context_len: 90,
            total_len: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Length of the simulated series before the train/test split.
    pub series_len: usize,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            series_len: 2500,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Explicit graph; the family's graph when absent.
    #[serde(default)]
    pub dag: Option<DagSpec>,
    #[serde(default)]
    pub scm: ScmConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
    /// Root of every random stream: coefficients, data, initialization,
    /// training order and evaluation draws.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dag: None,
            scm: ScmConfig::default(),
            window: WindowConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
            seed: 0,
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: Self = serde_json::from_str(text)?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn dag(&self) -> Result<CausalDag, ConfigError> {
        match (&self.dag, self.scm.family) {
            (Some(d), fam) => {
                let dag = d.build()?;
                if let Some(f) = fam {
                    if dag != f.dag() {
                        return Err(ConfigError::Invalid(format!(
                            "dag does not match the {f:?} family graph"
                        )));
                    }
                }
                Ok(dag)
            }
            (None, Some(f)) => Ok(f.dag()),
            (None, None) => Err(ConfigError::Invalid("either dag or scm.family is required".into())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.dag()?;
        let w = &self.window;
        if w.context_len == 0 || w.total_len <= w.context_len {
            return bad(format!(
                "window needs 0 < context_len < total_len, got {} and {}",
                w.context_len, w.total_len
            ));
        }
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        let train_len = (d.series_len as f64 * d.train_fraction).round() as usize;
        if train_len < w.total_len || d.series_len - train_len < w.total_len {
            return bad(format!(
                "series_len {} leaves a split shorter than one window of {}",
                d.series_len, w.total_len
            ));
        }
        let s = &self.scm;
        if !(s.period > 0.0) || !s.amplitude.is_finite() || !(s.noise_scale >= 0.0) {
            return bad("scm amplitude, period and noise_scale must be finite, period positive".into());
        }
        let m = &self.model;
        if m.hidden_dim == 0 || m.width == 0 || m.layers == 0 {
            return bad("model sizes must be positive".into());
        }
        self.flow.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval
            .validate(w.context_len, w.total_len)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Ground-truth mechanisms; coefficients drawn from the seed and checked
    /// for stability over the configured series length.
    pub fn scm_spec(&self) -> Result<ScmSpec, ScmError> {
        let dag = self.dag().map_err(|e| ScmError::Invalid(e.to_string()))?;
        let root = RootProcess {
            amplitude: self.scm.amplitude,
            period: self.scm.period,
        };
        let mut spec = ScmSpec::sample_on(
            dag,
            self.scm.family,
            self.scm.mechanism,
            root,
            self.seed,
            self.data.series_len,
        )?;
        spec.noise_scale = self.scm.noise_scale;
        spec.burn_in = self.scm.burn_in;
        Ok(spec)
    }
}
