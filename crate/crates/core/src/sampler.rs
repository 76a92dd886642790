//! Langevin sampling of trajectories from a sum of energy terms.
//!
//! Trajectories live in the model layout `[B, N, T, D]`. The first `t_init`
//! states along `T` are clamped to ground truth; every other entry is moved
//! by `x <- x - (step / 2) * grad E + noise`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Tensor, Var};
use crate::energy::EnergyNet;
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::sim::derive_seed;
use crate::trajectory::NormStats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Langevin steps `M`.
    pub steps: usize,
    /// Step size `lambda`.
    pub step_size: f64,
    /// Standard deviation of the per-step Gaussian noise.
    pub noise: f64,
    /// Optional per-trajectory gradient norm cap.
    pub clip_grad: Option<f64>,
    /// States beyond this magnitude abort sampling.
    pub divergence_limit: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 5, step_size: 0.4, noise: 0.0, clip_grad: None, divergence_limit: 1e6 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Invalid(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Invalid(format!("noise must be >= 0, got {}", self.noise)));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return Err(Error::Invalid(format!("clip_grad must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Scalar energy of a batch `x: [B, N, T, D]`.
pub trait EnergyTerm {
    fn energy(&self, x: &Var) -> Result<Var>;
}

/// A conditioned energy network under a set of edge masks.
pub struct ModelTerm<'a> {
    pub net: &'a EnergyNet,
    pub params: &'a Bound,
    /// `[B, E, L, D_z]`.
    pub latents: Var,
    /// Each `[B, E, L]`.
    pub masks: Vec<Tensor>,
    pub weight: f64,
}

impl EnergyTerm for ModelTerm<'_> {
    fn energy(&self, x: &Var) -> Result<Var> {
        let e = self.net.forward(self.params, x, &self.latents, &self.masks)?.sum();
        Ok(if self.weight == 1.0 { e } else { e.scale(self.weight) })
    }
}

/// `0.5 * |x - c|^2`.
pub struct QuadraticTerm {
    pub center: Tensor,
}

impl EnergyTerm for QuadraticTerm {
    fn energy(&self, x: &Var) -> Result<Var> {
        if x.shape() != self.center.shape() {
            return Err(Error::Shape(format!("center {:?} vs state {:?}", self.center.shape(), x.shape())));
        }
        Ok(x.sub(&Var::constant(self.center.clone())).square().sum().scale(0.5))
    }
}

/// Ground truth and clamp pattern for a batch.
#[derive(Clone, Debug)]
pub struct Clamp {
    pub truth: Tensor,
    pub mask: Arc<Vec<bool>>,
    pub t_init: usize,
}

impl Clamp {
    /// Clamps the first `t_init` time steps of `truth: [B, N, T, D]`.
    pub fn leading(truth: &Tensor, t_init: usize) -> Result<Self> {
        let [_, _, t, d] = truth.shape()[..] else {
            return Err(Error::Shape(format!("expected [B, N, T, D], got {:?}", truth.shape())));
        };
        if t_init > t {
            return Err(Error::Shape(format!("cannot clamp {t_init} of {t} steps")));
        }
        let mask = (0..truth.len()).map(|i| (i / d) % t < t_init).collect();
        Ok(Clamp { truth: truth.clone(), mask: Arc::new(mask), t_init })
    }

    pub fn apply(&self, x: &Var) -> Var {
        Var::select(self.mask.clone(), &Var::constant(self.truth.clone()), x)
    }
}

/// Uniform `[0, 1)` noise outside the clamp, ground truth inside. Item `b`
/// of the batch draws from `derive_seed(seed, b)`.
pub fn init_trajectory(clamp: &Clamp, seed: u64) -> Tensor {
    let seeds: Vec<u64> = (0..clamp.truth.shape()[0] as u64).map(|b| derive_seed(seed, b)).collect();
    init_with_seeds(clamp, &seeds)
}

/// Like [`init_trajectory`] with an explicit seed per batch item.
pub fn init_with_seeds(clamp: &Clamp, seeds: &[u64]) -> Tensor {
    let shape = clamp.truth.shape();
    assert_eq!(seeds.len(), shape[0], "one seed per batch item");
    let per = clamp.truth.len() / shape[0];
    let mut data = Vec::with_capacity(clamp.truth.len());
    for (b, &seed) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..per {
            let idx = b * per + k;
            let u: f64 = rng.random();
            data.push(if clamp.mask[idx] { clamp.truth.data()[idx] } else { u });
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Runs `cfg.steps` Langevin updates from `x0` and returns every iterate,
/// `x0` included.
///
/// With `create_graph` the iterates stay differentiable with respect to
/// whatever the terms depend on.
pub fn langevin(
    terms: &[&dyn EnergyTerm],
    x0: &Tensor,
    clamp: &Clamp,
    cfg: &SamplerConfig,
    create_graph: bool,
    seed: u64,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    if x0.shape() != clamp.truth.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs clamp {:?}", x0.shape(), clamp.truth.shape())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = clamp.apply(&Var::constant(x0.clone())).detach();
    let mut out = vec![x.clone()];
    for m in 1..=cfg.steps {
        let xl = if x.requires_grad() { x.clone() } else { Var::leaf(x.value().clone()) };
        let mut total: Option<Var> = None;
        for term in terms {
            let e = term.energy(&xl)?;
            total = Some(match total {
                None => e,
                Some(acc) => acc.add(&e),
            });
        }
        let Some(total) = total else {
            return Err(Error::Invalid("langevin needs at least one energy term".into()));
        };
        let mut g = grad(&total, &[&xl], create_graph).remove(0);
        if !g.value().is_finite() {
            return Err(Error::NonFinite(format!("energy gradient at step {m}")));
        }
        if let Some(c) = cfg.clip_grad {
            g = clip_per_item(&g, c);
        }
        let mut next = xl.sub(&g.scale(0.5 * cfg.step_size));
        if cfg.noise > 0.0 {
            let noise: Vec<f64> = (0..x0.len()).map(|_| rng.sample::<f64, _>(StandardNormal) * cfg.noise).collect();
            next = next.add(&Var::constant(Tensor::new(x0.shape().to_vec(), noise)));
        }
        let next = clamp.apply(&next);
        if !create_graph {
            x = next.detach();
        } else {
            x = next;
        }
        if x.value().max_abs() > cfg.divergence_limit || !x.value().is_finite() {
            return Err(Error::NonFinite(format!("sampler diverged at step {m}")));
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn clip_per_item(g: &Var, max_norm: f64) -> Var {
    let b = g.shape()[0];
    let per = g.value().len() / b;
    let mut scale = Vec::with_capacity(g.value().len());
    for chunk in g.value().data().chunks(per) {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = if norm > max_norm { max_norm / norm } else { 1.0 };
        scale.extend(std::iter::repeat_n(s, per));
    }
    g.mul(&Var::constant(Tensor::new(g.shape().to_vec(), scale)))
}

/// Sums several conditioned models into one sampling run.
pub fn compose_models(
    models: &[ModelTerm<'_>],
    x0: &Tensor,
    clamp: &Clamp,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Var>> {
    if models.is_empty() {
        return Err(Error::Invalid("compose_models needs at least one model".into()));
    }
    let shape = models[0].latents.shape()[..2].to_vec();
    for m in models {
        if m.latents.shape()[..2] != shape[..] {
            return Err(Error::Shape("composed models disagree on batch or edge count".into()));
        }
    }
    let terms: Vec<&dyn EnergyTerm> = models.iter().map(|m| m as &dyn EnergyTerm).collect();
    langevin(&terms, x0, clamp, cfg, false, seed)
}

/// Hand-crafted test-time potentials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PotentialKind {
    /// Sum of speeds.
    Velocity,
    /// Squared distance of accumulated positions to `goal`.
    Goal { goal: Vec<f64> },
    /// Squared depth-plus-margin of accumulated positions inside a box.
    AvoidArea { min: Vec<f64>, max: Vec<f64>, margin: f64 },
}

/// Unknown keys are ignored here: serde cannot reject them through `flatten`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraPotential {
    #[serde(flatten)]
    pub kind: PotentialKind,
    /// Signed strength `epsilon`.
    pub strength: f64,
    /// Scale `lambda_w`.
    pub weight: f64,
}

impl ExtraPotential {
    pub fn velocity(strength: f64, nodes: usize) -> Self {
        ExtraPotential { kind: PotentialKind::Velocity, strength, weight: 1e-2 / nodes as f64 }
    }

    pub fn goal(strength: f64, goal: Vec<f64>, nodes: usize) -> Self {
        ExtraPotential { kind: PotentialKind::Goal { goal }, strength, weight: 5e-4 / nodes as f64 }
    }

    pub fn avoid_area(strength: f64, min: Vec<f64>, max: Vec<f64>, margin: f64, nodes: usize) -> Self {
        ExtraPotential { kind: PotentialKind::AvoidArea { min, max, margin }, strength, weight: 1e-3 / nodes as f64 }
    }

    pub fn validate(&self, pos_dims: usize) -> Result<()> {
        if !(self.weight > 0.0) || !self.strength.is_finite() {
            return Err(Error::Invalid("potential weight must be > 0 and strength finite".into()));
        }
        match &self.kind {
            PotentialKind::Velocity => Ok(()),
            PotentialKind::Goal { goal } if goal.len() == pos_dims => Ok(()),
            PotentialKind::Goal { goal } => {
                Err(Error::Shape(format!("goal has {} coordinates, positions have {pos_dims}", goal.len())))
            }
            PotentialKind::AvoidArea { min, max, margin } => {
                if min.len() != pos_dims || max.len() != pos_dims {
                    return Err(Error::Shape(format!("area corners must have {pos_dims} coordinates")));
                }
                if min.iter().zip(max).any(|(a, b)| !(a < b)) || !(*margin >= 0.0) {
                    return Err(Error::Invalid("area must satisfy min < max per axis and margin >= 0".into()));
                }
                Ok(())
            }
        }
    }
}

/// What the potentials need to map normalized states to raw geometry.
#[derive(Clone, Debug)]
pub struct PotentialContext {
    /// Raw positions at the first window step, `[B, N, D/2]`.
    pub p0: Tensor,
    pub stats: NormStats,
    pub dt_unit: f64,
    /// Window steps before this index are not scored.
    pub t_init: usize,
}

impl PotentialContext {
    fn raw_velocities(&self, x: &Var) -> Var {
        let d = x.shape()[3];
        let h = d / 2;
        let v = x.narrow(3, h, h);
        let std = Var::constant(Tensor::new(vec![h], self.stats.std[h..].to_vec()));
        let mean = Var::constant(Tensor::new(vec![h], self.stats.mean[h..].to_vec()));
        v.mul(&std).add(&mean)
    }

    /// Accumulated raw positions `[B, N, T, D/2]`:
    /// `p[t] = p0 + dt * sum_{s < t} v[s]`.
    pub fn positions(&self, x: &Var) -> Var {
        let [b, n, t, d] = x.shape()[..] else { panic!("expected [B, N, T, D]") };
        let h = d / 2;
        let v = self.raw_velocities(x).permute(&[2, 0, 1, 3]).reshape(&[t, b * n * h]);
        let mut tri = vec![0.0; t * t];
        for r in 0..t {
            for c in 0..r {
                tri[r * t + c] = self.dt_unit;
            }
        }
        let cum = Var::constant(Tensor::new(vec![t, t], tri))
            .matmul(&v)
            .reshape(&[t, b, n, h])
            .permute(&[1, 2, 0, 3]);
        cum.add(&Var::constant(self.p0.reshape(&[b, n, 1, h])))
    }
}

fn predicted<'a>(x: &'a Var, t_init: usize) -> Var {
    let t = x.shape()[2];
    x.narrow(2, t_init, t - t_init)
}

/// Squared distance from inside points to the nearest face of `[min, max]`
/// plus `margin`; zero outside.
fn avoid_values(p: &Var, min: &[f64], max: &[f64], margin: f64) -> Var {
    let h = min.len();
    let vals = p.value().data();
    let rows = vals.len() / h;
    // Per point: which axis/face is nearest, and whether the point is inside.
    let mut pick = vec![vec![false; rows * h]; 2 * h];
    let mut inside = vec![false; rows * h];
    for r in 0..rows {
        let pt = &vals[r * h..(r + 1) * h];
        if !(0..h).all(|k| pt[k] > min[k] && pt[k] < max[k]) {
            continue;
        }
        let mut best = (f64::INFINITY, 0usize);
        for k in 0..h {
            for (face, dist) in [(2 * k, pt[k] - min[k]), (2 * k + 1, max[k] - pt[k])] {
                if dist < best.0 {
                    best = (dist, face);
                }
            }
        }
        let axis = best.1 / 2;
        pick[best.1][r * h + axis] = true;
        inside[r * h + axis] = true;
    }
    let min_t = Var::constant(Tensor::new(vec![h], min.to_vec()));
    let max_t = Var::constant(Tensor::new(vec![h], max.to_vec()));
    let to_min = p.sub(&min_t);
    let to_max = max_t.sub(p);
    let zero = Var::constant(Tensor::zeros(p.shape()));
    let mut depth = zero.clone();
    for k in 0..h {
        depth = Var::select(Arc::new(pick[2 * k].clone()), &to_min, &depth);
        depth = Var::select(Arc::new(pick[2 * k + 1].clone()), &to_max, &depth);
    }
    let penalty = depth.add_scalar(margin).square();
    Var::select(Arc::new(inside), &penalty, &zero).sum()
}

impl ExtraPotential {
    /// Potential value of the predicted part of `x`.
    pub fn energy(&self, x: &Var, ctx: &PotentialContext) -> Var {
        let scale = self.strength * self.weight;
        let t_init = ctx.t_init.min(x.shape()[2]);
        let raw = match &self.kind {
            PotentialKind::Velocity => {
                let v = predicted(&ctx.raw_velocities(x), t_init);
                let axis = v.shape().len() - 1;
                v.square().sum_axis_keep(axis).add_scalar(1e-12).sqrt().sum()
            }
            PotentialKind::Goal { goal } => {
                let p = predicted(&ctx.positions(x), t_init);
                let g = Var::constant(Tensor::new(vec![goal.len()], goal.clone()));
                p.sub(&g).square().sum()
            }
            PotentialKind::AvoidArea { min, max, margin } => {
                avoid_values(&predicted(&ctx.positions(x), t_init), min, max, *margin)
            }
        };
        raw.scale(scale)
    }
}

/// An [`ExtraPotential`] bound to its geometry.
pub struct PotentialTerm {
    pub potential: ExtraPotential,
    pub ctx: PotentialContext,
}

impl EnergyTerm for PotentialTerm {
    fn energy(&self, x: &Var) -> Result<Var> {
        Ok(self.potential.energy(x, &self.ctx))
    }
}
