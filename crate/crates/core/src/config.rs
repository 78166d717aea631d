//! Run configuration: one TOML file names the problem, the partition, the
//! networks, and the schedule. Anything omitted falls back to a sensible
//! default, and every knob the file sets is echoed back verbatim by
//! [`RunConfig::echo`] so a run can be reproduced from its log alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{
    cartesian_decompose, polygon_decompose, Decomposition, Domain, Point, SampleCounts, Strategy,
};
use crate::losses::{make_method, LossWeights};
use crate::network::{Activation, ArchitectureSpec};
use crate::pde::ProblemKind;
use crate::real::Precision;
use crate::solver::Hyper;
use crate::{Error, Result};

fn default_scaling() -> f64 {
    10.0
}

fn default_strategy() -> Strategy {
    Strategy::LatinHypercube
}

/// Spatial extent of the problem domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lo: Point,
    pub hi: Point,
}

/// How the domain splits into subdomains: a cartesian `grid = [n_x, n_y]`
/// or a `partition_file` of polygons, exactly one of the two.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_file: Option<PathBuf>,
}

/// Point-cloud sizes and placement, per subdomain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub residual: usize,
    #[serde(default)]
    pub interface_per_edge: usize,
    #[serde(default)]
    pub data_per_edge: usize,
    #[serde(default)]
    pub interior_data: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
}

impl SamplingConfig {
    pub fn counts(&self) -> SampleCounts {
        SampleCounts {
            residual: self.residual,
            interface_per_edge: self.interface_per_edge,
            data_per_edge: self.data_per_edge,
            interior_data: self.interior_data,
        }
    }
}

/// The network every subdomain trains, before per-rank overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Layer widths from input to output, e.g. `[2, 20, 20, 1]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_scaling")]
    pub scaling: f64,
}

/// Optimizer schedule. A missing `lr` falls back to the problem's default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub epochs: u64,
    pub inner_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minibatch: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { lr: None, epochs: 1000, inner_steps: 1, minibatch: None }
    }
}

/// Per-rank deviations from the shared network spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubdomainOverride {
    pub rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<f64>,
}

/// Everything one training run needs, as parsed from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub precision: Precision,
    /// Training method: `pinn`, `cpinn`, or `xpinn`.
    pub method: String,
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemKind,
    pub domain: DomainConfig,
    pub partition: PartitionConfig,
    pub sampling: SamplingConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default, rename = "override", skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<SubdomainOverride>,
}

/// Default learning rate per problem; configs override it with `lr`.
pub fn default_lr(kind: &ProblemKind) -> f64 {
    match kind {
        ProblemKind::Burgers { .. } => 8e-4,
        ProblemKind::NavierStokes { .. } => 6e-4,
        ProblemKind::HeatInverse => 6e-3,
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::validation("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Validation { path: field, msg } => Error::Validation {
                path: format!("{}: {field}", path.display()),
                msg,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        make_method::<f64>(&self.method)?;
        self.problem.validate()?;
        Domain::new(self.domain.lo, self.domain.hi)?;
        match (&self.partition.grid, &self.partition.partition_file) {
            (Some(g), None) => {
                if g[0] == 0 || g[1] == 0 {
                    return Err(Error::validation(
                        "partition.grid",
                        "both grid dimensions must be at least 1",
                    ));
                }
            }
            (None, Some(_)) => {}
            (Some(_), Some(_)) => {
                return Err(Error::validation(
                    "partition",
                    "give either grid or partition_file, not both",
                ));
            }
            (None, None) => {
                return Err(Error::validation(
                    "partition",
                    "give a grid or a partition_file",
                ));
            }
        }
        self.arch().validate()?;
        if self.sampling.residual == 0 {
            return Err(Error::validation(
                "sampling.residual",
                "every subdomain needs at least one residual point",
            ));
        }
        self.hyper().validate()?;
        self.weights.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.overrides {
            if !seen.insert(o.rank) {
                return Err(Error::validation(
                    "override",
                    format!("rank {} is overridden twice", o.rank),
                ));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchitectureSpec {
        ArchitectureSpec::new(
            self.network.widths.clone(),
            self.network.activation,
            self.network.scaling,
        )
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.training.lr.unwrap_or_else(|| default_lr(&self.problem)),
            epochs: self.training.epochs,
            inner_steps: self.training.inner_steps,
            minibatch: self.training.minibatch,
            seed: self.seed,
        }
    }

    /// Builds the decomposition and applies per-rank overrides. Relative
    /// partition-file paths are taken from `base`, the config's directory.
    pub fn decompose(&self, base: &Path) -> Result<Decomposition> {
        let domain = Domain::new(self.domain.lo, self.domain.hi)?;
        let mut d = match (&self.partition.grid, &self.partition.partition_file) {
            (Some(g), None) => {
                cartesian_decompose(&domain, g[0], g[1], &self.arch(), &self.weights)?
            }
            (None, Some(file)) => {
                let path = if file.is_absolute() { file.clone() } else { base.join(file) };
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    Error::validation(
                        "partition.partition_file",
                        format!("cannot read {}: {e}", path.display()),
                    )
                })?;
                polygon_decompose(&domain, &text, &self.arch(), &self.weights)?
            }
            _ => return Err(Error::validation("partition", "give a grid or a partition_file")),
        };
        for o in &self.overrides {
            let n = d.n_subdomains();
            let spec = d.subdomains.get_mut(o.rank as usize).ok_or_else(|| {
                Error::validation(
                    "override.rank",
                    format!("rank {} does not exist in a {n}-subdomain partition", o.rank),
                )
            })?;
            let merged = ArchitectureSpec::new(
                o.widths.clone().unwrap_or_else(|| spec.arch.widths.clone()),
                o.activation.unwrap_or(spec.arch.activation),
                o.scaling.unwrap_or(spec.arch.scaling),
            );
            merged.validate()?;
            spec.arch = merged;
        }
        Ok(d)
    }

    /// The parsed config as TOML again, for run logs.
    pub fn echo(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::validation("config", format!("cannot serialize: {e}")))
    }
}
