//! Trajectory datasets and their on-disk format.
//!
//! A dataset directory holds `manifest.json`, `states.f32` (all trajectories,
//! `[count, T, N, D]` little-endian) and `labels.f32` (concatenated label
//! values).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{LabelKind, NormStats, RelationLabels, Trajectory};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const STATES: &str = "states.f32";
const LABELS: &str = "labels.f32";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub kind: String,
    pub seed: u64,
    /// Time between consecutive states in raw units.
    pub dt_unit: f64,
    /// Leading states per train trajectory used for the stats.
    pub stats_steps: usize,
    pub config: serde_json::Value,
    /// Per-trajectory origin tags; empty for simulated data.
    #[serde(default)]
    pub origins: Vec<String>,
}

/// Normalized trajectories with labels, stats and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub labels: Vec<RelationLabels>,
    pub stats: NormStats,
    pub splits: Splits,
    pub meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
    count: usize,
    kind: String,
    label_kind: LabelKind,
    seed: u64,
    dt_unit: f64,
    splits: Splits,
    stats: NormStats,
    stats_steps: usize,
    config: serde_json::Value,
    #[serde(default)]
    origins: Vec<String>,
    files: ManifestFiles,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFiles {
    states: String,
    labels: String,
    dtype: String,
    byte_order: String,
}

impl TrajectoryDataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        labels: Vec<RelationLabels>,
        stats: NormStats,
        splits: Splits,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let ds = TrajectoryDataset { trajectories, labels, stats, splits, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// `(T, N, D)` shared by every trajectory.
    pub fn shape(&self) -> (usize, usize, usize) {
        let t = &self.trajectories[0];
        (t.timesteps(), t.nodes(), t.dim())
    }

    pub fn label_kind(&self) -> LabelKind {
        self.labels.first().map(|l| l.kind).unwrap_or(LabelKind::Unlabeled)
    }

    pub fn split(&self, idx: &[usize]) -> Vec<&Trajectory> {
        idx.iter().map(|&i| &self.trajectories[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Invalid("dataset has no trajectories".into()));
        }
        let (t, n, d) = self.shape();
        for (k, tr) in self.trajectories.iter().enumerate() {
            if (tr.timesteps(), tr.nodes(), tr.dim()) != (t, n, d) {
                return Err(Error::Shape(format!("trajectory {k} differs from [{t}, {n}, {d}]")));
            }
            if tr.is_raw() {
                return Err(Error::Invalid(format!("trajectory {k} is not normalized")));
            }
        }
        if self.labels.len() != self.trajectories.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} trajectories",
                self.labels.len(),
                self.trajectories.len()
            )));
        }
        let kind = self.label_kind();
        for (k, l) in self.labels.iter().enumerate() {
            if l.kind != kind || l.values.len() != RelationLabels::expected_len(kind, n) {
                return Err(Error::Shape(format!("label {k} does not match kind {kind:?} with {n} nodes")));
            }
        }
        if self.stats.dim() != d {
            return Err(Error::Shape(format!("stats have {} dims, data has {d}", self.stats.dim())));
        }
        let mut seen = vec![false; self.len()];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= seen.len() || seen[i] {
                return Err(Error::Invalid(format!("split index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("splits do not cover every trajectory".into()));
        }
        Ok(())
    }
}

fn f32_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Corrupt(format!(
            "{} holds {} bytes, manifest implies {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn save_dataset(ds: &TrajectoryDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, n, d) = ds.shape();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n,
        t,
        d,
        count: ds.len(),
        kind: ds.meta.kind.clone(),
        label_kind: ds.label_kind(),
        seed: ds.meta.seed,
        dt_unit: ds.meta.dt_unit,
        splits: ds.splits.clone(),
        stats: ds.stats.clone(),
        stats_steps: ds.meta.stats_steps,
        config: ds.meta.config.clone(),
        origins: ds.meta.origins.clone(),
        files: ManifestFiles {
            states: STATES.into(),
            labels: LABELS.into(),
            dtype: "float32".into(),
            byte_order: "little".into(),
        },
    };
    let states = f32_bytes(ds.trajectories.iter().flat_map(|tr| tr.states().iter().copied()));
    let labels = f32_bytes(ds.labels.iter().flat_map(|l| l.values.iter().copied()));
    for (name, bytes) in [(STATES, states), (LABELS, labels)] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let dir = dir.as_ref();
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", p.display())))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported dataset version {}", m.version)));
    }
    if m.files.dtype != "float32" || m.files.byte_order != "little" {
        return Err(Error::Corrupt(format!("unsupported encoding {}/{}", m.files.dtype, m.files.byte_order)));
    }
    let per = m.t * m.n * m.d;
    let states = read_f32(&dir.join(&m.files.states), m.count * per)?;
    let lab_len = RelationLabels::expected_len(m.label_kind, m.n);
    let labels = read_f32(&dir.join(&m.files.labels), m.count * lab_len)?;
    let trajectories = states
        .chunks_exact(per.max(1))
        .map(|c| Trajectory::new(m.t, m.n, m.d, c.to_vec(), false))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..m.count)
        .map(|k| RelationLabels { kind: m.label_kind, values: labels[k * lab_len..(k + 1) * lab_len].to_vec() })
        .collect();
    let meta = DatasetMeta {
        kind: m.kind,
        seed: m.seed,
        dt_unit: m.dt_unit,
        stats_steps: m.stats_steps,
        config: m.config,
        origins: m.origins,
    };
    TrajectoryDataset::new(trajectories, labels, m.stats, m.splits, meta)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", dir.display())))
}
