//! Trajectory-level domain types and geometry helpers.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Particle states over time, `[T, N, D]` row-major.
///
/// Position dims occupy `[0, D/2)` and velocity dims `[D/2, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    t: usize,
    n: usize,
    d: usize,
    states: Vec<f32>,
    raw: bool,
}

impl Trajectory {
    pub fn new(t: usize, n: usize, d: usize, states: Vec<f32>, raw: bool) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid(format!("trajectory needs at least two nodes, got {n}")));
        }
        if d != 4 && d != 6 {
            return Err(Error::Invalid(format!("state dimension must be 4 or 6, got {d}")));
        }
        if states.len() != t * n * d {
            return Err(Error::Shape(format!(
                "expected {} values for [{t}, {n}, {d}], got {}",
                t * n * d,
                states.len()
            )));
        }
        if let Some(i) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("trajectory entry {i} is {}", states[i])));
        }
        Ok(Trajectory { t, n, d, states, raw })
    }

    pub fn from_tensor(x: &Tensor, raw: bool) -> Result<Self> {
        let [t, n, d] = x.shape()[..] else {
            return Err(Error::Shape(format!("expected [T, N, D] tensor, got {:?}", x.shape())));
        };
        Trajectory::new(t, n, d, x.to_f32_vec(), raw)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.t, self.n, self.d], &self.states)
    }

    pub fn timesteps(&self) -> usize {
        self.t
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_raw(&self) -> bool {
        self.raw
    }

    pub fn states(&self) -> &[f32] {
        &self.states
    }

    pub fn position_dims(&self) -> Range<usize> {
        0..self.d / 2
    }

    pub fn velocity_dims(&self) -> Range<usize> {
        self.d / 2..self.d
    }

    #[inline]
    pub fn at(&self, t: usize, i: usize, k: usize) -> f32 {
        self.states[(t * self.n + i) * self.d + k]
    }

    /// States `[start, end)` along time; `start == end` gives an empty trajectory.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Trajectory> {
        if start > end || end > self.t {
            return Err(Error::OutOfRange(format!(
                "time slice {start}..{end} of trajectory with {} steps",
                self.t
            )));
        }
        let row = self.n * self.d;
        Trajectory::new(
            end - start,
            self.n,
            self.d,
            self.states[start * row..end * row].to_vec(),
            self.raw,
        )
    }

    /// Relabels nodes so that node `i` of `self` becomes node `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Trajectory {
        assert_eq!(perm.len(), self.n, "permutation length must equal node count");
        let mut out = vec![0.0; self.states.len()];
        for t in 0..self.t {
            for i in 0..self.n {
                let src = (t * self.n + i) * self.d;
                let dst = (t * self.n + perm[i]) * self.d;
                out[dst..dst + self.d].copy_from_slice(&self.states[src..src + self.d]);
            }
        }
        Trajectory { states: out, ..self.clone() }
    }
}

/// How a trajectory is split for encoding, clamping and prediction.
///
/// The encoder sees `[0, t_obs)`. Sampling covers the window
/// `[start, t_total)` where `start` defaults to `t_obs`; the first `t_init`
/// states of the window are clamped to ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub t_obs: usize,
    pub t_init: usize,
    pub t_total: usize,
    #[serde(default)]
    pub start: Option<usize>,
}

impl SplitSpec {
    pub fn new(t_obs: usize, t_init: usize, t_total: usize) -> Result<Self> {
        let s = SplitSpec { t_obs, t_init, t_total, start: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let start = self.window_start();
        if self.t_init < 1 {
            return Err(Error::Invalid("t_init must be at least 1".into()));
        }
        if self.t_obs > self.t_total || self.t_obs == 0 {
            return Err(Error::Invalid(format!(
                "t_obs {} must lie in 1..={}",
                self.t_obs, self.t_total
            )));
        }
        if start + self.t_init > self.t_total {
            return Err(Error::Invalid(format!(
                "window starting at {start} cannot clamp {} of {} states",
                self.t_init, self.t_total
            )));
        }
        Ok(())
    }

    pub fn window_start(&self) -> usize {
        self.start.unwrap_or(self.t_obs)
    }

    /// Sampled window in trajectory time.
    pub fn window(&self) -> Range<usize> {
        self.window_start()..self.t_total
    }

    pub fn window_len(&self) -> usize {
        self.t_total - self.window_start()
    }

    /// Predicted (non-clamped) states in trajectory time.
    pub fn predicted(&self) -> Range<usize> {
        self.window_start() + self.t_init..self.t_total
    }

    pub fn horizon(&self) -> usize {
        self.predicted().len()
    }
}

/// Per-dimension normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(d: usize) -> Self {
        NormStats { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.mean.len() != d || self.std.len() != d {
            return Err(Error::Shape(format!(
                "stats have {}/{} dims, trajectory has {d}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.mean.iter().any(|v| !v.is_finite())
            || self.std.iter().any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::NonFinite("normalization stats must be finite with std > 0".into()));
        }
        Ok(())
    }

    /// Mean and population std per dimension over the first `t_obs` states of
    /// every trajectory.
    pub fn compute<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>, t_obs: usize) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for tr in trajs {
            if sum.is_empty() {
                sum = vec![0.0; tr.d];
                sq = vec![0.0; tr.d];
            }
            let steps = t_obs.min(tr.t);
            for chunk in tr.states[..steps * tr.n * tr.d].chunks_exact(tr.d) {
                for (k, &v) in chunk.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Invalid("cannot compute stats from no data".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(NormStats { mean, std })
    }
}

/// `(x - mean) / std` per dimension.
pub fn normalize(traj: &Trajectory, stats: &NormStats) -> Result<Trajectory> {
    if !traj.raw {
        return Err(Error::Invalid("trajectory is already normalized".into()));
    }
    stats.check(traj.d)?;
    let d = traj.d;
    let states = traj
        .states
        .iter()
        .enumerate()
        .map(|(i, &v)| ((v as f64 - stats.mean[i % d]) / stats.std[i % d]) as f32)
        .collect();
    Trajectory::new(traj.t, traj.n, d, states, false)
}

/// Inverse of [`normalize`].
pub fn denormalize(traj: &Trajectory, stats: &NormStats) -> Result<Trajectory> {
    if traj.raw {
        return Err(Error::Invalid("trajectory is already raw".into()));
    }
    stats.check(traj.d)?;
    let d = traj.d;
    let states = traj
        .states
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 * stats.std[i % d] + stats.mean[i % d]) as f32)
        .collect();
    Trajectory::new(traj.t, traj.n, d, states, true)
}

/// Raw positions obtained by integrating denormalized velocities from `p0`:
/// `p[0] = p0`, `p[t] = p0 + dt * sum_{s < t} v[s]`. Returns `[T, N, D/2]`
/// row-major.
pub fn positions_from_velocities(
    traj: &Trajectory,
    p0: &[f64],
    stats: &NormStats,
    dt_unit: f64,
) -> Result<Vec<f64>> {
    stats.check(traj.d)?;
    let (n, half) = (traj.n, traj.d / 2);
    if p0.len() != n * half {
        return Err(Error::Shape(format!("p0 has {} values, expected {}", p0.len(), n * half)));
    }
    let mut out = Vec::with_capacity(traj.t * n * half);
    let mut cur = p0.to_vec();
    for t in 0..traj.t {
        out.extend_from_slice(&cur);
        for i in 0..n {
            for k in 0..half {
                let dim = half + k;
                let v = if traj.raw {
                    traj.at(t, i, dim) as f64
                } else {
                    traj.at(t, i, dim) as f64 * stats.std[dim] + stats.mean[dim]
                };
                cur[i * half + k] += v * dt_unit;
            }
        }
    }
    Ok(out)
}

/// Directed edges `(sender, receiver)` of the fully connected graph, in
/// row-major order skipping the diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeIndex {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl EdgeIndex {
    pub fn new(n: usize) -> Self {
        let pairs = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        EdgeIndex { n, pairs }
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair(&self, e: usize) -> (usize, usize) {
        self.pairs[e]
    }

    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        if i == j || i >= self.n || j >= self.n {
            return None;
        }
        Some(i * (self.n - 1) + if j > i { j - 1 } else { j })
    }

    pub fn senders(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// `out[e]` is the index of edge `e` after relabeling nodes with `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Vec<usize> {
        self.pairs
            .iter()
            .map(|&(i, j)| self.index_of(perm[i], perm[j]).expect("valid permutation"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// `N * N` symmetric 0/1 spring adjacency.
    SpringsAdjacency,
    /// Per-node charge, `+q` or `-q`.
    Charges,
    /// Per-node force law: 0 = spring, 1 = charged.
    MixedForceType,
    Unlabeled,
}

/// Ground-truth relation labels of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationLabels {
    pub kind: LabelKind,
    pub values: Vec<f32>,
}

impl RelationLabels {
    pub fn unlabeled() -> Self {
        RelationLabels { kind: LabelKind::Unlabeled, values: vec![] }
    }

    /// Number of values a label of this kind has for `n` nodes.
    pub fn expected_len(kind: LabelKind, n: usize) -> usize {
        match kind {
            LabelKind::SpringsAdjacency => n * n,
            LabelKind::Charges | LabelKind::MixedForceType => n,
            LabelKind::Unlabeled => 0,
        }
    }
}
