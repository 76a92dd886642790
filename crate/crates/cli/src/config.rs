//! Run configuration: TOML file, `--set` overrides, and the resolved form
//! written to every run directory.

use std::path::Path;

use relpot::analysis::SteerGeometry;
use relpot::horizons::HorizonsConfig;
use relpot::sampler::{ExtraPotential, SamplerConfig};
use relpot::sim::{SimConfig, SplitCounts};
use relpot::{ModelConfig, SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Leading states used for the normalization stats.
    pub t_obs: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { train: 2000, val: 50, test: 200, t_obs: 49 }
    }
}

impl DataSection {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts { train: self.train, val: self.val, test: self.test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub horizons: Vec<usize>,
    pub batch_size: usize,
    /// Evaluate at most this many test trajectories.
    pub limit: Option<usize>,
    /// Window; defaults to the training window.
    pub window: Option<SplitSpec>,
    /// Test trajectories drawn with prediction overlays.
    pub plots: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { horizons: vec![1, 10, 20], batch_size: 20, limit: None, window: None, plots: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSection {
    /// Share of trajectories used to fit the threshold.
    pub calibration_fraction: f64,
    pub batch_size: usize,
    pub limit: Option<usize>,
    pub plots: usize,
}

impl Default for OodSection {
    fn default() -> Self {
        OodSection { calibration_fraction: 0.1, batch_size: 20, limit: None, plots: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecombineSection {
    /// Nodes whose mutual edges take the other model's potentials.
    pub swap_nodes: Vec<usize>,
    /// Trajectory index in each dataset.
    pub base_index: usize,
    pub other_index: usize,
    /// Reconstruction window; defaults to the whole trajectory with one
    /// clamped state.
    pub window: Option<SplitSpec>,
}

impl Default for RecombineSection {
    fn default() -> Self {
        RecombineSection { swap_nodes: vec![0, 1], base_index: 0, other_index: 0, window: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerSection {
    pub potentials: Vec<ExtraPotential>,
    pub geometry: SteerGeometry,
    pub batch_size: usize,
    pub limit: Option<usize>,
    pub plots: usize,
}

impl Default for SteerSection {
    fn default() -> Self {
        SteerSection {
            potentials: vec![ExtraPotential::goal(5.0, vec![0.0, 0.0], 5)],
            geometry: SteerGeometry::default(),
            batch_size: 20,
            limit: None,
            plots: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    /// Dataset indices to draw.
    pub indices: Vec<usize>,
    /// Position coordinates drawn on the x and y axes.
    pub coords: [usize; 2],
    /// `svg` or `png`.
    pub format: String,
}

impl Default for PlotSection {
    fn default() -> Self {
        PlotSection { indices: vec![0], coords: [0, 1], format: "svg".into() }
    }
}

/// Every tunable of every command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the data, training and horizons seeds.
    pub seed: Option<u64>,
    pub sim: SimConfig,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub ood: OodSection,
    pub recombine: RecombineSection,
    pub steer: SteerSection,
    pub horizons: HorizonsConfig,
    pub plot: PlotSection,
}

impl RunConfig {
    /// Reads `path` (if any), applies `key.path=value` overrides in order,
    /// then the master seed.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.sim.seed = seed;
            cfg.train.seed = seed;
            cfg.horizons.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: relpot::Error| CliError::Config(e.to_string());
        self.sim.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.sampler.validate().map_err(wrap)?;
        self.horizons.validate().map_err(wrap)?;
        if !matches!(self.plot.format.as_str(), "svg" | "png") {
            return Err(CliError::Config(format!("plot.format must be svg or png, got {:?}", self.plot.format)));
        }
        if !(self.ood.calibration_fraction > 0.0 && self.ood.calibration_fraction < 1.0) {
            return Err(CliError::Config("ood.calibration_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short content hash of the resolved config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..6])
    }
}

/// Sets `a.b.c = value` in `table`; `value` is parsed as TOML and falls back
/// to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
