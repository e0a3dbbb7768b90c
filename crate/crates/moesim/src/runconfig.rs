//! TOML run configurations for the `run`, `sweep`, and `dump-timeline`
//! subcommands.
//!
//! A run config names exactly one trace source (a file path or inline
//! synthesis parameters), a hardware model, and one or more simulation
//! configs. A sweep config adds parameter grids that are crossed with
//! every simulation row.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{HardwareSpec, SimConfig};
use crate::traces::{
    generate_trace, load_trace, InferenceTrace, ModelSpec, PrecisionBytes, SynthesisConfig,
    TraceError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Flat synthesis parameters: model shape plus generator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeSection {
    pub num_layers: usize,
    pub num_experts: usize,
    pub routing_topk: usize,
    pub high_bytes: u64,
    pub low_bytes: u64,
    #[serde(default)]
    pub attention_bytes_per_layer: u64,
    pub num_prompt_tokens: usize,
    pub num_decode_steps: usize,
    pub skew_alpha: f64,
    pub heavy_hitter_fraction: f64,
    pub predictor_fidelity: f64,
    pub rng_seed: u64,
}

impl SynthesizeSection {
    pub fn model(&self) -> ModelSpec {
        ModelSpec {
            num_layers: self.num_layers,
            num_experts: self.num_experts,
            routing_topk: self.routing_topk,
            expert_bytes: PrecisionBytes {
                high: self.high_bytes,
                low: self.low_bytes,
            },
            attention_bytes_per_layer: self.attention_bytes_per_layer,
        }
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            num_prompt_tokens: self.num_prompt_tokens,
            num_decode_steps: self.num_decode_steps,
            skew_alpha: self.skew_alpha,
            heavy_hitter_fraction: self.heavy_hitter_fraction,
            predictor_fidelity: self.predictor_fidelity,
            rng_seed: self.rng_seed,
        }
    }
}

/// Exactly one of `path` or `synthesize`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesize: Option<SynthesizeSection>,
}

impl TraceSource {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.path, &self.synthesize) {
            (Some(_), Some(_)) => Err(ConfigError::invalid(
                "trace",
                "give either trace.path or trace.synthesize, not both",
            )),
            (None, None) => Err(ConfigError::invalid(
                "trace",
                "one of trace.path or trace.synthesize is required",
            )),
            _ => Ok(()),
        }
    }

    pub fn resolve(&self) -> Result<InferenceTrace, ConfigError> {
        self.validate()?;
        if let Some(path) = &self.path {
            return load_trace(path).map_err(|e| match e {
                TraceError::Io(source) => ConfigError::Io {
                    path: path.clone(),
                    source,
                },
                other => ConfigError::Trace(other),
            });
        }
        let section = self.synthesize.as_ref().unwrap();
        Ok(generate_trace(&section.model(), &section.synthesis())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
    Both,
}

impl ReportFormat {
    pub fn json(self) -> bool {
        matches!(self, ReportFormat::Json | ReportFormat::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, ReportFormat::Csv | ReportFormat::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Default output directory; overridden by --out-dir and the
    /// MOESIM_OUT_DIR environment variable.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: ReportFormat,
    /// Also dump one timeline file per simulation row.
    #[serde(default)]
    pub timeline: bool,
}

/// Top-level config for `moesim run` and `moesim dump-timeline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub trace: TraceSource,
    pub hardware: HardwareSpec,
    #[serde(rename = "simulation")]
    pub simulations: Vec<SimConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trace.validate()?;
        if self.simulations.is_empty() {
            return Err(ConfigError::invalid(
                "simulation",
                "at least one [[simulation]] table is required",
            ));
        }
        Ok(())
    }
}

/// Parameter grids crossed with every simulation row. A missing grid keeps
/// the row's own value; a present-but-empty grid is an error.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub predictor_fidelity: Option<Vec<f64>>,
    /// Expert-cache capacities in bytes (vram_budget is adjusted to
    /// resident_reservation + capacity).
    #[serde(default)]
    pub capacity_bytes: Option<Vec<u64>>,
    #[serde(default)]
    pub t_prefetch: Option<Vec<usize>>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, empty) in [
            ("sweep.lambda", self.lambda.as_ref().is_some_and(Vec::is_empty)),
            (
                "sweep.predictor_fidelity",
                self.predictor_fidelity.as_ref().is_some_and(Vec::is_empty),
            ),
            (
                "sweep.capacity_bytes",
                self.capacity_bytes.as_ref().is_some_and(Vec::is_empty),
            ),
            (
                "sweep.t_prefetch",
                self.t_prefetch.as_ref().is_some_and(Vec::is_empty),
            ),
        ] {
            if empty {
                return Err(ConfigError::invalid(name, "grid must not be empty"));
            }
        }
        if self.lambda.is_none()
            && self.predictor_fidelity.is_none()
            && self.capacity_bytes.is_none()
            && self.t_prefetch.is_none()
        {
            return Err(ConfigError::invalid(
                "sweep",
                "at least one grid (lambda, predictor_fidelity, capacity_bytes, t_prefetch) is required",
            ));
        }
        Ok(())
    }
}

/// Top-level config for `moesim sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: RunConfig,
    pub sweep: SweepGrid,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: SweepConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.base.validate()?;
        config.sweep.validate()?;
        if config.sweep.predictor_fidelity.is_some() && config.base.trace.synthesize.is_none() {
            return Err(ConfigError::invalid(
                "sweep.predictor_fidelity",
                "varying predictor fidelity requires an inline trace.synthesize source",
            ));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// The cross-product of simulation rows and grids, in deterministic
    /// nesting order: simulation, λ, ρ, capacity, t_prefetch.
    pub fn cells(&self) -> Vec<SweepCell> {
        let lambdas = self.sweep.lambda.clone().unwrap_or_default();
        let fidelities = self.sweep.predictor_fidelity.clone().unwrap_or_default();
        let capacities = self.sweep.capacity_bytes.clone().unwrap_or_default();
        let mut cells = Vec::new();
        let fidelity_axis: Vec<Option<f64>> = if fidelities.is_empty() {
            vec![None]
        } else {
            fidelities.iter().map(|&f| Some(f)).collect()
        };
        for sim in &self.base.simulations {
            for &lambda in option_axis(&lambdas, sim.lambda).iter() {
                for &fidelity in fidelity_axis.iter() {
                    for &capacity in
                        option_axis(&capacities, self.base.hardware.cache_capacity()).iter()
                    {
                        let t_axis: Vec<Option<usize>> = match &self.sweep.t_prefetch {
                            Some(ts) => ts.iter().map(|&t| Some(t)).collect(),
                            None => vec![sim.t_prefetch],
                        };
                        for &t_prefetch in &t_axis {
                            let mut config = sim.clone();
                            config.lambda = lambda;
                            config.t_prefetch = t_prefetch;
                            cells.push(SweepCell {
                                config,
                                predictor_fidelity: fidelity,
                                capacity_bytes: capacity,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

fn option_axis<T: Copy>(grid: &[T], fallback: T) -> Vec<T> {
    if grid.is_empty() {
        vec![fallback]
    } else {
        grid.to_vec()
    }
}

/// One fully resolved sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub config: SimConfig,
    /// `None` when fidelity is not varied (e.g. a file-sourced trace).
    pub predictor_fidelity: Option<f64>,
    pub capacity_bytes: u64,
}
