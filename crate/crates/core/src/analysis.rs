//! Evaluation: forecasting error, node-level energy scores for
//! out-of-distribution detection, recombination of potentials from two
//! models, and steering with extra potentials.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::encoder::from_model_layout;
use crate::energy::{full_masks, EdgeMask};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sampler::{
    init_with_seeds, langevin, Clamp, EnergyTerm, ExtraPotential, ModelTerm, PotentialContext, PotentialTerm,
    SamplerConfig,
};
use crate::sim::derive_seed;
use crate::train::Batch;
use crate::trajectory::{denormalize, normalize, EdgeIndex, NormStats, SplitSpec, Trajectory};

const NOISE_STREAM: u64 = 0x4E01_5E;

fn check_seeds(trajs: &[&Trajectory], seeds: &[u64]) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if seeds.len() != trajs.len() {
        return Err(Error::Shape(format!("{} seeds for {} trajectories", seeds.len(), trajs.len())));
    }
    Ok(())
}

/// Final Langevin iterate of the sampled window, `[B, N, W, D]`, with the
/// model conditioned on the observed segment under the full mask.
fn sample_window(
    model: &Model,
    trajs: &[&Trajectory],
    split: &SplitSpec,
    extras: &[ExtraPotential],
    potential_geometry: Option<(&NormStats, f64)>,
    sampler: &SamplerConfig,
    seeds: &[u64],
) -> Result<(Tensor, Tensor)> {
    check_seeds(trajs, seeds)?;
    let batch = Batch::new(trajs, split)?;
    let (b, n) = (batch.size(), batch.window.shape()[1]);
    let params = model.params.bind(false);
    let z = model.encoder.forward(&params, &Var::constant(batch.observed.clone()))?;
    let term = ModelTerm {
        net: &model.energy,
        params: &params,
        latents: z,
        masks: vec![full_masks(b, n * (n - 1), model.cfg.latent_slots)],
        weight: 1.0,
    };
    let clamp = Clamp::leading(&batch.window, split.t_init)?;
    let x0 = init_with_seeds(&clamp, seeds);
    let mut extra_terms = Vec::with_capacity(extras.len());
    if !extras.is_empty() {
        let (stats, dt_unit) =
            potential_geometry.ok_or_else(|| Error::Invalid("extra potentials need stats and dt_unit".into()))?;
        let ctx = potential_context(&batch.window, stats, dt_unit, split.t_init)?;
        for p in extras {
            p.validate(batch.window.shape()[3] / 2)?;
            extra_terms.push(PotentialTerm { potential: p.clone(), ctx: ctx.clone() });
        }
    }
    let mut terms: Vec<&dyn EnergyTerm> = vec![&term];
    terms.extend(extra_terms.iter().map(|t| t as &dyn EnergyTerm));
    let xs = langevin(&terms, &x0, &clamp, sampler, false, derive_seed(seeds[0], NOISE_STREAM))?;
    Ok((xs.last().expect("initial iterate").value().clone(), x0))
}

/// Raw positions of the first window state, `[B, N, D/2]`.
fn potential_context(window: &Tensor, stats: &NormStats, dt_unit: f64, t_init: usize) -> Result<PotentialContext> {
    let [b, n, w, d] = window.shape()[..] else { unreachable!("model layout") };
    if stats.dim() != d {
        return Err(Error::Shape(format!("stats have {} dims, states have {d}", stats.dim())));
    }
    let h = d / 2;
    let mut p0 = Vec::with_capacity(b * n * h);
    for bi in 0..b {
        for i in 0..n {
            let base = ((bi * n + i) * w) * d;
            for k in 0..h {
                p0.push(window.data()[base + k] * stats.std[k] + stats.mean[k]);
            }
        }
    }
    Ok(PotentialContext { p0: Tensor::new(vec![b, n, h], p0), stats: stats.clone(), dt_unit, t_init })
}

fn predicted_part(x: &Tensor, split: &SplitSpec, horizon: usize) -> Result<Vec<Trajectory>> {
    (0..x.shape()[0])
        .map(|k| from_model_layout(x, k, false)?.slice_time(split.t_init, split.t_init + horizon))
        .collect()
}

/// Forecasts the predicted segment of each trajectory.
///
/// The encoder sees `[0, t_obs)`, the first `t_init` window states are
/// clamped to the data, and item `k` starts from noise seeded by
/// `seeds[k]`. Returns `split.horizon()` normalized states per trajectory.
pub fn forecast_batch(
    model: &Model,
    trajs: &[&Trajectory],
    split: &SplitSpec,
    sampler: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    let (x, _) = sample_window(model, trajs, split, &[], None, sampler, seeds)?;
    predicted_part(&x, split, split.horizon())
}

/// First `horizon` predicted states of one trajectory.
pub fn forecast(
    model: &Model,
    traj: &Trajectory,
    split: &SplitSpec,
    horizon: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory> {
    split.validate()?;
    let need = split.predicted().start + horizon;
    if traj.timesteps() < need.max(split.t_total) || horizon > split.horizon() {
        return Err(Error::OutOfRange(format!(
            "horizon {horizon} needs {need} steps within a split of {}; trajectory has {}",
            split.t_total,
            traj.timesteps()
        )));
    }
    if horizon == 0 {
        return Trajectory::new(0, traj.nodes(), traj.dim(), vec![], traj.is_raw());
    }
    forecast_batch(model, &[traj], split, sampler, &[seed])?.remove(0).slice_time(0, horizon)
}

/// Repeats the last clamped state over the first `horizon` predicted steps.
pub fn static_baseline(traj: &Trajectory, split: &SplitSpec, horizon: usize) -> Result<Trajectory> {
    split.validate()?;
    let last = split.predicted().start - 1;
    if last >= traj.timesteps() {
        return Err(Error::OutOfRange(format!("state {last} beyond trajectory of {} steps", traj.timesteps())));
    }
    let row = traj.slice_time(last, last + 1)?;
    let states = row.states().repeat(horizon);
    Trajectory::new(horizon, traj.nodes(), traj.dim(), states, traj.is_raw())
}

/// Mean squared error at 1-based horizon indices, averaged over
/// trajectories, nodes and state dimensions.
pub fn mse_at(preds: &[Trajectory], gts: &[Trajectory], horizons: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", preds.len(), gts.len())));
    }
    for (p, g) in preds.iter().zip(gts) {
        if (p.timesteps(), p.nodes(), p.dim()) != (g.timesteps(), g.nodes(), g.dim()) {
            return Err(Error::Shape("prediction and target shapes differ".into()));
        }
    }
    let len = preds[0].timesteps();
    let row = preds[0].nodes() * preds[0].dim();
    let mut out = BTreeMap::new();
    for &h in horizons {
        if h == 0 || h > len {
            return Err(Error::OutOfRange(format!("horizon {h} outside 1..={len}")));
        }
        let span = (h - 1) * row..h * row;
        let mut acc = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            for (a, b) in p.states()[span.clone()].iter().zip(&g.states()[span.clone()]) {
                let e = *a as f64 - *b as f64;
                acc += e * e;
            }
        }
        out.insert(h, acc / (preds.len() * row) as f64);
    }
    Ok(out)
}

fn mean_sq(a: &Trajectory, b: &Trajectory) -> f64 {
    let n = a.states().len().max(1) as f64;
    a.states().iter().zip(b.states()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub count: usize,
    pub mse_at: BTreeMap<usize, f64>,
    pub baseline_mse_at: BTreeMap<usize, f64>,
    /// Mean squared error over the whole predicted segment, per trajectory.
    pub per_trajectory: Vec<f64>,
    pub baseline_per_trajectory: Vec<f64>,
}

/// Forecasts every trajectory in batches and compares against the static
/// baseline. Trajectory `k` uses seed `derive_seed(seed, k)`.
pub fn evaluate_forecast(
    model: &Model,
    trajs: &[&Trajectory],
    split: &SplitSpec,
    sampler: &SamplerConfig,
    horizons: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<ForecastReport> {
    let horizon = split.horizon();
    let seeds: Vec<u64> = (0..trajs.len() as u64).map(|k| derive_seed(seed, k)).collect();
    let mut preds = Vec::with_capacity(trajs.len());
    for (chunk, s) in trajs.chunks(batch_size.max(1)).zip(seeds.chunks(batch_size.max(1))) {
        preds.extend(forecast_batch(model, chunk, split, sampler, s)?);
    }
    let gts: Vec<Trajectory> =
        trajs.iter().map(|t| t.slice_time(split.predicted().start, split.t_total)).collect::<Result<_>>()?;
    let base: Vec<Trajectory> =
        trajs.iter().map(|t| static_baseline(t, split, horizon)).collect::<Result<_>>()?;
    Ok(ForecastReport {
        count: trajs.len(),
        mse_at: mse_at(&preds, &gts, horizons)?,
        baseline_mse_at: mse_at(&base, &gts, horizons)?,
        per_trajectory: preds.iter().zip(&gts).map(|(p, g)| mean_sq(p, g)).collect(),
        baseline_per_trajectory: base.iter().zip(&gts).map(|(p, g)| mean_sq(p, g)).collect(),
    })
}

/// Re-expresses a normalized trajectory under different stats.
pub fn renormalize(traj: &Trajectory, from: &NormStats, to: &NormStats) -> Result<Trajectory> {
    normalize(&denormalize(traj, from)?, to)
}

/// Per-node energies `[B][N]` of the data window under the full mask, with
/// latents encoded from the observed segment of the same trajectory.
pub fn node_energy_scores_batch(model: &Model, trajs: &[&Trajectory], split: &SplitSpec) -> Result<Vec<Vec<f64>>> {
    let batch = Batch::new(trajs, split)?;
    let (b, n) = (batch.size(), batch.window.shape()[1]);
    let params = model.params.bind(false);
    let z = model.encoder.forward(&params, &Var::constant(batch.observed.clone()))?;
    let masks = [full_masks(b, n * (n - 1), model.cfg.latent_slots)];
    let parts = model.energy.forward(&params, &Var::constant(batch.window.clone()), &z, &masks)?;
    let per = parts.per_node().value().clone();
    if !per.is_finite() {
        return Err(Error::NonFinite("node energy".into()));
    }
    Ok(per.data().chunks(n).map(<[f64]>::to_vec).collect())
}

pub fn node_energy_scores(model: &Model, traj: &Trajectory, split: &SplitSpec) -> Result<Vec<f64>> {
    Ok(node_energy_scores_batch(model, &[traj], split)?.remove(0))
}

/// Threshold maximizing accuracy of `score > threshold` on labeled scores;
/// ties go to the smallest threshold.
pub fn fit_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Invalid("calibration set needs both classes".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&l| l).count();
    // threshold below everything: all predicted positive
    let mut correct = positives;
    let mut best = (correct, scores[order[0]] - 1.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            correct = if labels[order[k]] { correct - 1 } else { correct + 1 };
            k += 1;
        }
        let thr = if k < order.len() { 0.5 * (s + scores[order[k]]) } else { s };
        if correct > best.0 {
            best = (correct, thr);
        }
    }
    Ok(best.1)
}

pub fn classify(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

/// Area under the ROC curve, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    // rank-sum with midranks
    let mut all: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < all.len() {
        let mut j = k;
        while j < all.len() && all[j].0 == all[k].0 {
            j += 1;
        }
        let mid = (k + j + 1) as f64 / 2.0;
        rank_sum += mid * all[k..j].iter().filter(|x| x.1).count() as f64;
        k = j;
    }
    let np = pos.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * neg.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    /// Flattened `[trajectory][node]` energies.
    pub node_energy: Vec<f64>,
    /// True for out-of-distribution nodes.
    pub labels: Vec<bool>,
    pub mean_in_distribution: f64,
    pub mean_out_of_distribution: f64,
    pub threshold: f64,
    pub calibration_nodes: usize,
    pub accuracy: f64,
    pub auc: f64,
}

/// Scores every node, fits the threshold on the first `calibration`
/// trajectories and reports accuracy on the rest; AUC covers all nodes.
pub fn ood_report(
    model: &Model,
    trajs: &[&Trajectory],
    node_labels: &[Vec<bool>],
    split: &SplitSpec,
    calibration: usize,
    batch_size: usize,
) -> Result<OodReport> {
    if node_labels.len() != trajs.len() {
        return Err(Error::Shape(format!("{} label rows for {} trajectories", node_labels.len(), trajs.len())));
    }
    if calibration == 0 || calibration >= trajs.len() {
        return Err(Error::Invalid(format!("calibration count {calibration} must lie in 1..{}", trajs.len())));
    }
    let mut energy = Vec::new();
    for chunk in trajs.chunks(batch_size.max(1)) {
        energy.extend(node_energy_scores_batch(model, chunk, split)?.into_iter().flatten());
    }
    let labels: Vec<bool> = node_labels.iter().flatten().copied().collect();
    if labels.len() != energy.len() {
        return Err(Error::Shape("node labels do not match node count".into()));
    }
    let cut = node_labels[..calibration].iter().map(Vec::len).sum::<usize>();
    let threshold = fit_threshold(&energy[..cut], &labels[..cut])?;
    let predicted = classify(&energy[cut..], threshold);
    let hits = predicted.iter().zip(&labels[cut..]).filter(|(p, l)| p == l).count();
    let mean_of = |want: bool| {
        let v: Vec<f64> = energy.iter().zip(&labels).filter(|(_, &l)| l == want).map(|(e, _)| *e).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(OodReport {
        mean_in_distribution: mean_of(false),
        mean_out_of_distribution: mean_of(true),
        threshold,
        calibration_nodes: cut,
        accuracy: hits as f64 / predicted.len().max(1) as f64,
        auc: auc(&energy, &labels)?,
        node_energy: energy,
        labels,
    })
}

/// Edges with both endpoints in `nodes`.
pub fn mutual_edges(edges: &EdgeIndex, nodes: &[usize]) -> Result<Vec<usize>> {
    let n = edges.nodes();
    let mut seen = vec![false; n];
    for &v in nodes {
        if v >= n || seen[v] {
            return Err(Error::OutOfRange(format!("swap node {v} is out of range or repeated (N = {n})")));
        }
        seen[v] = true;
    }
    Ok((0..edges.len()).filter(|&e| {
        let (i, j) = edges.pair(e);
        seen[i] && seen[j]
    }).collect())
}

#[derive(Clone, Debug)]
pub struct Recombination {
    /// Initial iterate of the window, normalized.
    pub initial: Trajectory,
    pub sample: Trajectory,
    /// Potentials kept from the base model.
    pub base_mask: EdgeMask,
    /// Potentials taken from the other model.
    pub swap_mask: EdgeMask,
    pub base_latents: crate::encoder::LatentSet,
    pub swap_latents: crate::encoder::LatentSet,
}

/// Samples the window of `base_traj` from the base model's potentials,
/// except the mutual edges of `swap_nodes`, which come from `other`
/// conditioned on `other_traj`. Initial conditions come from `base_traj`.
#[allow(clippy::too_many_arguments)]
pub fn recombine(
    base: &Model,
    other: &Model,
    base_traj: &Trajectory,
    other_traj: &Trajectory,
    swap_nodes: &[usize],
    split: &SplitSpec,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Recombination> {
    if base.cfg.state_dim != other.cfg.state_dim || base.cfg.latent_slots != other.cfg.latent_slots {
        return Err(Error::Invalid("recombined models must share state size and latent slots".into()));
    }
    if (base_traj.nodes(), base_traj.dim()) != (other_traj.nodes(), other_traj.dim()) {
        return Err(Error::Shape("recombined trajectories must share N and D".into()));
    }
    let n = base_traj.nodes();
    let edges = EdgeIndex::new(n);
    let slots = base.cfg.latent_slots;
    let swap_mask = EdgeMask::from_edges(edges.len(), slots, mutual_edges(&edges, swap_nodes)?);
    let base_mask = swap_mask.complement();

    let base_batch = Batch::new(&[base_traj], split)?;
    let other_batch = Batch::new(&[other_traj], split)?;
    let pb = base.params.bind(false);
    let po = other.params.bind(false);
    let zb = base.encoder.forward(&pb, &Var::constant(base_batch.observed.clone()))?;
    let zo = other.encoder.forward(&po, &Var::constant(other_batch.observed.clone()))?;
    let latent_set = |z: &Var| crate::encoder::LatentSet {
        z: z.value().reshape(&z.shape()[1..]),
        edges: edges.clone(),
    };
    let mut terms = Vec::with_capacity(2);
    if base_mask.count() > 0 {
        terms.push(ModelTerm {
            net: &base.energy,
            params: &pb,
            latents: zb.clone(),
            masks: vec![EdgeMask::stack(&[&base_mask])],
            weight: 1.0,
        });
    }
    if swap_mask.count() > 0 {
        terms.push(ModelTerm {
            net: &other.energy,
            params: &po,
            latents: zo.clone(),
            masks: vec![EdgeMask::stack(&[&swap_mask])],
            weight: 1.0,
        });
    }
    let clamp = Clamp::leading(&base_batch.window, split.t_init)?;
    let x0 = init_with_seeds(&clamp, &[seed]);
    let term_refs: Vec<&dyn EnergyTerm> = terms.iter().map(|t| t as &dyn EnergyTerm).collect();
    let xs = langevin(&term_refs, &x0, &clamp, sampler, false, derive_seed(seed, NOISE_STREAM))?;
    Ok(Recombination {
        initial: from_model_layout(&x0, 0, false)?,
        sample: from_model_layout(xs.last().expect("initial iterate").value(), 0, false)?,
        base_mask,
        swap_mask,
        base_latents: latent_set(&zb),
        swap_latents: latent_set(&zo),
    })
}

/// Full window (clamped states included) sampled from one model; the
/// reference for recombination.
pub fn reconstruct(
    model: &Model,
    traj: &Trajectory,
    split: &SplitSpec,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory> {
    let (x, _) = sample_window(model, &[traj], split, &[], None, sampler, &[seed])?;
    from_model_layout(&x, 0, false)
}

/// Evaluation geometry for steering metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerGeometry {
    pub goal: Vec<f64>,
    pub area_min: Vec<f64>,
    pub area_max: Vec<f64>,
}

impl Default for SteerGeometry {
    fn default() -> Self {
        SteerGeometry { goal: vec![0.0, 0.0], area_min: vec![0.0, -1.0], area_max: vec![1.0, 1.0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SteerMetrics {
    /// Mean squared distance of accumulated positions to the goal.
    pub goal_sq_distance: f64,
    /// Fraction of predicted node positions inside the area.
    pub fraction_in_area: f64,
    /// Mean raw speed.
    pub mean_speed: f64,
    /// Predicted node-steps the means are taken over.
    pub points: usize,
}

/// Metrics over the predicted steps of a sampled window `[B, N, W, D]`.
pub fn steer_metrics(
    window: &Tensor,
    stats: &NormStats,
    dt_unit: f64,
    t_init: usize,
    geometry: &SteerGeometry,
) -> Result<SteerMetrics> {
    let ctx = potential_context(window, stats, dt_unit, t_init)?;
    let [b, n, w, d] = window.shape()[..] else { unreachable!("model layout") };
    let h = d / 2;
    if geometry.goal.len() != h || geometry.area_min.len() != h || geometry.area_max.len() != h {
        return Err(Error::Shape(format!("steering geometry must have {h} coordinates")));
    }
    let pos = ctx.positions(&Var::constant(window.clone())).value().clone();
    let (mut dist, mut inside, mut speed, mut count) = (0.0, 0usize, 0.0, 0usize);
    for bi in 0..b {
        for i in 0..n {
            for t in t_init..w {
                let p = &pos.data()[((bi * n + i) * w + t) * h..((bi * n + i) * w + t + 1) * h];
                dist += p.iter().zip(&geometry.goal).map(|(a, g)| (a - g).powi(2)).sum::<f64>();
                if (0..h).all(|k| p[k] > geometry.area_min[k] && p[k] < geometry.area_max[k]) {
                    inside += 1;
                }
                let s = &window.data()[((bi * n + i) * w + t) * d..((bi * n + i) * w + t + 1) * d];
                speed += (0..h).map(|k| (s[h + k] * stats.std[h + k] + stats.mean[h + k]).powi(2)).sum::<f64>().sqrt();
                count += 1;
            }
        }
    }
    let c = count.max(1) as f64;
    Ok(SteerMetrics { goal_sq_distance: dist / c, fraction_in_area: inside as f64 / c, mean_speed: speed / c, points: count })
}

#[derive(Clone, Debug)]
pub struct SteerOutput {
    /// Sampled windows, normalized.
    pub samples: Vec<Trajectory>,
    pub metrics: SteerMetrics,
}

/// Forecasts with the model plus `extras`, then measures the result.
/// Trajectory `k` uses seed `derive_seed(seed, k)`.
#[allow(clippy::too_many_arguments)]
pub fn steer(
    model: &Model,
    trajs: &[&Trajectory],
    split: &SplitSpec,
    extras: &[ExtraPotential],
    sampler: &SamplerConfig,
    stats: &NormStats,
    dt_unit: f64,
    geometry: &SteerGeometry,
    batch_size: usize,
    seed: u64,
) -> Result<SteerOutput> {
    let seeds: Vec<u64> = (0..trajs.len() as u64).map(|k| derive_seed(seed, k)).collect();
    let mut samples = Vec::with_capacity(trajs.len());
    let mut total = SteerMetrics::default();
    for (chunk, s) in trajs.chunks(batch_size.max(1)).zip(seeds.chunks(batch_size.max(1))) {
        let (x, _) = sample_window(model, chunk, split, extras, Some((stats, dt_unit)), sampler, s)?;
        let m = steer_metrics(&x, stats, dt_unit, split.t_init, geometry)?;
        let p = m.points as f64;
        total.goal_sq_distance += m.goal_sq_distance * p;
        total.fraction_in_area += m.fraction_in_area * p;
        total.mean_speed += m.mean_speed * p;
        total.points += m.points;
        for k in 0..chunk.len() {
            samples.push(from_model_layout(&x, k, false)?);
        }
    }
    let c = total.points.max(1) as f64;
    total.goal_sq_distance /= c;
    total.fraction_in_area /= c;
    total.mean_speed /= c;
    Ok(SteerOutput { samples, metrics: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sim::{make_dataset, SimConfig, SplitCounts};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> Model {
        Model::new(
            ModelConfig { state_dim: 4, encoder_hidden: 8, energy_hidden: 8, latent_slots: 2, latent_dim: 4 },
            seed,
        )
        .unwrap()
    }

    fn traj(t: usize, n: usize, f: impl Fn(usize, usize, usize) -> f32) -> Trajectory {
        let mut s = Vec::with_capacity(t * n * 4);
        for ti in 0..t {
            for i in 0..n {
                for k in 0..4 {
                    s.push(f(ti, i, k));
                }
            }
        }
        Trajectory::new(t, n, 4, s, false).unwrap()
    }

    fn random_trajs(count: usize, t: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Trajectory::new(t, 3, 4, (0..t * 12).map(|_| rng.random_range(-1.0..1.0)).collect(), false).unwrap())
            .collect()
    }

    // window of 10 states starting inside the observed segment
    const SPLIT: SplitSpec = SplitSpec { t_obs: 8, t_init: 1, t_total: 14, start: Some(4) };

    #[test]
    fn mse_at_matches_loop_oracle() {
        let p = random_trajs(4, 20, 1);
        let g = random_trajs(4, 20, 2);
        let got = mse_at(&p, &g, &[1, 10, 20]).unwrap();
        for h in [1usize, 10, 20] {
            let mut acc = 0.0;
            for k in 0..4 {
                for i in 0..3 {
                    for d in 0..4 {
                        let e = p[k].at(h - 1, i, d) as f64 - g[k].at(h - 1, i, d) as f64;
                        acc += e * e;
                    }
                }
            }
            assert_eq!(got[&h], acc / 48.0);
        }
        assert!(mse_at(&p, &g, &[21]).is_err());
        assert!(mse_at(&p, &g, &[0]).is_err());
    }

    #[test]
    fn mse_at_trivial_cases() {
        let g = random_trajs(2, 20, 3);
        assert!(mse_at(&g, &g, &[1, 10, 20]).unwrap().values().all(|&v| v == 0.0));
        let shifted: Vec<Trajectory> = g
            .iter()
            .map(|t| Trajectory::new(20, 3, 4, t.states().iter().map(|v| v + 0.1).collect(), false).unwrap())
            .collect();
        for v in mse_at(&shifted, &g, &[1, 10, 20]).unwrap().values() {
            assert!((v - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn static_baseline_copies_last_clamped_state() {
        let split = SplitSpec { t_obs: 2, t_init: 1, t_total: 4, start: None };
        let t = traj(4, 2, |t, i, k| (t * 100 + i * 10 + k) as f32);
        let b = static_baseline(&t, &split, 2).unwrap();
        for s in 0..2 {
            for i in 0..2 {
                for k in 0..4 {
                    assert_eq!(b.at(s, i, k), t.at(2, i, k));
                }
            }
        }
        let constant = traj(30, 3, |_, i, k| (i + k) as f32);
        let sp = SplitSpec::new(10, 1, 30).unwrap();
        let gt = constant.slice_time(11, 30).unwrap();
        let pred = static_baseline(&constant, &sp, 19).unwrap();
        assert_eq!(mse_at(&[pred], &[gt], &[1, 19]).unwrap().values().sum::<f64>(), 0.0);
        let linear = traj(30, 3, |t, _, _| 0.1 * t as f32);
        let gt = linear.slice_time(11, 30).unwrap();
        let pred = static_baseline(&linear, &sp, 19).unwrap();
        let m = mse_at(&[pred], &[gt], &(1..=19).collect::<Vec<_>>()).unwrap();
        assert!(m.values().zip(m.values().skip(1)).all(|(a, b)| a < b));
    }

    #[test]
    fn forecast_shapes_and_errors() {
        let model = tiny_model(1);
        let t = &random_trajs(1, 14, 4)[0];
        let sampler = SamplerConfig { steps: 2, ..SamplerConfig::default() };
        assert_eq!(forecast(&model, t, &SPLIT, 0, &sampler, 0).unwrap().timesteps(), 0);
        let f = forecast(&model, t, &SPLIT, 5, &sampler, 0).unwrap();
        assert_eq!((f.timesteps(), f.nodes(), f.dim()), (5, 3, 4));
        assert!(forecast(&model, t, &SPLIT, 10, &sampler, 0).is_err());
        let short = t.slice_time(0, 12).unwrap();
        assert!(forecast(&model, &short, &SPLIT, 2, &sampler, 0).is_err());
        let again = forecast(&model, t, &SPLIT, 5, &sampler, 0).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn evaluate_forecast_reports_nonnegative_errors() {
        let model = tiny_model(2);
        let trajs = random_trajs(3, 14, 5);
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let sampler = SamplerConfig { steps: 2, ..SamplerConfig::default() };
        let r = evaluate_forecast(&model, &refs, &SPLIT, &sampler, &[1, 5], 2, 0).unwrap();
        assert_eq!(r.count, 3);
        assert!(r.mse_at.values().chain(r.baseline_mse_at.values()).all(|v| *v >= 0.0 && v.is_finite()));
        assert_eq!(r.per_trajectory.len(), 3);
    }

    #[test]
    fn node_scores_permute_with_nodes() {
        let model = tiny_model(3);
        let t = &random_trajs(1, 14, 6)[0];
        let perm = [2, 0, 1];
        let a = node_energy_scores(&model, t, &SPLIT).unwrap();
        let b = node_energy_scores(&model, &t.permute_nodes(&perm), &SPLIT).unwrap();
        for i in 0..3 {
            assert!((a[i] - b[perm[i]]).abs() < 1e-5);
        }
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn threshold_separates_clean_scores() {
        let scores = [0.1, 0.2, 0.3, 1.0, 1.1, 1.2];
        let labels = [false, false, false, true, true, true];
        let thr = fit_threshold(&scores, &labels).unwrap();
        assert_eq!(classify(&scores, thr), labels);
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        assert!(fit_threshold(&scores, &[true; 6]).is_err());
    }

    #[test]
    fn identical_distributions_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..2000).map(|k| k % 2 == 0).collect();
        let thr = fit_threshold(&scores[..1000], &labels[..1000]).unwrap();
        let pred = classify(&scores[1000..], thr);
        let acc = pred.iter().zip(&labels[1000..]).filter(|(p, l)| p == l).count() as f64 / 1000.0;
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
        assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(scores in prop::collection::vec(0u8..6, 4..30), flips in prop::collection::vec(any::<bool>(), 30)) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let mut l: Vec<bool> = flips[..s.len()].to_vec();
            l[0] = true;
            l[1] = false;
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if l[i] && !l[j] {
                        pairs += 1.0;
                        wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            prop_assert!((auc(&s, &l).unwrap() - wins / pairs).abs() < 1e-12);
        }

        #[test]
        fn fitted_threshold_is_optimal(scores in prop::collection::vec(-3.0f64..3.0, 2..25), flips in prop::collection::vec(any::<bool>(), 25)) {
            let mut l: Vec<bool> = flips[..scores.len()].to_vec();
            l[0] = true;
            l[1] = false;
            let acc = |thr: f64| classify(&scores, thr).iter().zip(&l).filter(|(p, q)| p == q).count();
            let best = acc(fit_threshold(&scores, &l).unwrap());
            for &s in &scores {
                prop_assert!(acc(s) <= best);
                prop_assert!(acc(s - 1e-9) <= best);
            }
        }
    }

    #[test]
    fn mutual_edges_need_both_endpoints() {
        let e = EdgeIndex::new(4);
        let m = mutual_edges(&e, &[1, 3]).unwrap();
        assert_eq!(m, vec![e.index_of(1, 3).unwrap(), e.index_of(3, 1).unwrap()]);
        assert!(mutual_edges(&e, &[]).unwrap().is_empty());
        assert!(mutual_edges(&e, &[4]).is_err());
        assert!(mutual_edges(&e, &[1, 1]).is_err());
    }

    #[test]
    fn recombination_with_itself_and_no_swap_is_reconstruction() {
        let model = tiny_model(4);
        let t = &random_trajs(1, 14, 8)[0];
        let split = SplitSpec { t_obs: 14, t_init: 1, t_total: 14, start: Some(0) };
        let sampler = SamplerConfig { steps: 3, ..SamplerConfig::default() };
        let r = recombine(&model, &model, t, t, &[], &split, &sampler, 5).unwrap();
        let plain = reconstruct(&model, t, &split, &sampler, 5).unwrap();
        assert_eq!(r.sample, plain);
        assert_eq!(r.swap_mask.count(), 0);
        // a swapped set with the same model splits the sum without changing it
        let r2 = recombine(&model, &model, t, t, &[0, 2], &split, &sampler, 5).unwrap();
        for (a, b) in r2.sample.states().iter().zip(plain.states()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn full_swap_is_the_other_model() {
        let a = tiny_model(5);
        let b = tiny_model(6);
        let t = &random_trajs(1, 14, 9)[0];
        let split = SplitSpec { t_obs: 14, t_init: 1, t_total: 14, start: Some(0) };
        let sampler = SamplerConfig { steps: 3, ..SamplerConfig::default() };
        let r = recombine(&a, &b, t, t, &[0, 1, 2], &split, &sampler, 5).unwrap();
        assert_eq!(r.base_mask.count(), 0);
        assert_eq!(r.sample, reconstruct(&b, t, &split, &sampler, 5).unwrap());
    }

    #[test]
    fn steering_without_extras_is_forecasting() {
        let cfg = SimConfig { n_particles: 3, n_steps: 14, seed: 2, ..SimConfig::default() };
        let ds = make_dataset(&cfg, SplitCounts { train: 2, val: 1, test: 1 }, 8).unwrap();
        let model = tiny_model(7);
        let trajs = ds.split(&[0, 1]);
        let sampler = SamplerConfig { steps: 2, ..SamplerConfig::default() };
        let out = steer(&model, &trajs, &SPLIT, &[], &sampler, &ds.stats, ds.meta.dt_unit, &SteerGeometry::default(), 2, 3)
            .unwrap();
        let seeds: Vec<u64> = (0..2).map(|k| derive_seed(3, k)).collect();
        let f = forecast_batch(&model, &trajs, &SPLIT, &sampler, &seeds).unwrap();
        for (s, p) in out.samples.iter().zip(&f) {
            assert_eq!(&s.slice_time(1, 10).unwrap(), p);
        }
        assert!(out.metrics.mean_speed > 0.0);
        let strong_goal = [ExtraPotential::goal(1e4, vec![0.0, 0.0], 3)];
        let pulled = steer(&model, &trajs, &SPLIT, &strong_goal, &sampler, &ds.stats, ds.meta.dt_unit, &SteerGeometry::default(), 2, 3)
            .unwrap();
        assert!(pulled.metrics.goal_sq_distance < out.metrics.goal_sq_distance);
    }

    #[test]
    fn steer_metrics_on_a_hand_built_window() {
        // one node moving right at speed 1 from (0.5, 0): inside the area at
        // t = 1 (x = 0.6), outside after x reaches 1
        let stats = NormStats::identity(4);
        let w = 8;
        let mut data = Vec::new();
        for t in 0..w {
            data.extend([if t == 0 { 0.5 } else { 0.0 }, 0.0, 1.0, 0.0]);
        }
        // second node parked far away
        for _ in 0..w {
            data.extend([5.0, 5.0, 0.0, 0.0]);
        }
        let x = Tensor::new(vec![1, 2, w, 4], data);
        let m = steer_metrics(&x, &stats, 0.1, 1, &SteerGeometry::default()).unwrap();
        assert_eq!(m.points, 14);
        // node 0 positions at t = 1..7: 0.6 .. 1.2; inside while < 1
        assert!((m.fraction_in_area - 4.0 / 14.0).abs() < 1e-12);
        assert!((m.mean_speed - 0.5).abs() < 1e-12);
        let mut expect = 0.0;
        for t in 1..w {
            expect += (0.5 + 0.1 * t as f64).powi(2) + 50.0;
        }
        assert!((m.goal_sq_distance - expect / 14.0).abs() < 1e-9);
    }
}
