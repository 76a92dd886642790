//! Training: encode, sample with gradients flowing through every Langevin
//! step, and fit the sampled trajectory to the data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{forecast_batch, mse_at};
use crate::autodiff::{grad, Tensor, Var};
use crate::dataset::TrajectoryDataset;
use crate::encoder::{to_model_layout, LatentSet};
use crate::energy::EdgeMask;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Bound, ParamSet};
use crate::sampler::{init_with_seeds, langevin, Clamp, ModelTerm, SamplerConfig};
use crate::sim::derive_seed;
use crate::trajectory::{EdgeIndex, NormStats, SplitSpec, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Each `(edge, slot)` joins one of two groups with probability 0.5.
    Random,
    /// Edges are grouped by whether their receiver is in a random node set.
    ByNode,
    /// One group holding every edge.
    None,
}

/// Two disjoint masks whose union covers every `(edge, slot)`.
pub fn split_edges(edges: &EdgeIndex, slots: usize, strategy: SplitStrategy, seed: u64) -> (EdgeMask, EdgeMask) {
    let e = edges.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = match strategy {
        SplitStrategy::None => EdgeMask::full(e, slots),
        SplitStrategy::Random => {
            let bits = (0..e * slots).map(|_| rng.random_bool(0.5)).collect();
            EdgeMask::from_bits(e, slots, bits).expect("sized above")
        }
        SplitStrategy::ByNode => {
            let chosen: Vec<bool> = (0..edges.nodes()).map(|_| rng.random_bool(0.5)).collect();
            EdgeMask::from_edges(e, slots, (0..e).filter(|&k| chosen[edges.pair(k).1]))
        }
    };
    let second = first.complement();
    (first, second)
}

/// Splits the potentials of one latent set.
pub fn potential_split(latents: &LatentSet, strategy: SplitStrategy, seed: u64) -> (EdgeMask, EdgeMask) {
    split_edges(&latents.edges, latents.slots(), strategy, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub reg_weight: f64,
    pub steps_start: usize,
    pub steps_end: usize,
    /// Iterations over which the step count ramps from start to end.
    pub steps_ramp: usize,
    pub step_size: f64,
    pub noise: f64,
    pub multi_step: bool,
    pub multi_step_base: f64,
    pub split: SplitStrategy,
    /// Global parameter-gradient norm cap.
    pub grad_clip: Option<f64>,
    pub window: SplitSpec,
    pub validate_every: usize,
    /// Validation trajectories used per check.
    pub val_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            lr: 3e-4,
            lr_decay: 0.5,
            lr_decay_every: 100_000,
            reg_weight: 1e-4,
            steps_start: 3,
            steps_end: 5,
            steps_ramp: 1000,
            step_size: 0.4,
            noise: 0.0,
            multi_step: true,
            multi_step_base: 0.5,
            split: SplitStrategy::Random,
            grad_clip: None,
            window: SplitSpec { t_obs: 49, t_init: 1, t_total: 70, start: None },
            validate_every: 200,
            val_limit: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.reg_weight >= 0.0) {
            return bad("reg_weight must be >= 0");
        }
        if self.steps_end < self.steps_start {
            return bad("steps_end must be >= steps_start");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be > 0");
        }
        if !(self.multi_step_base > 0.0) {
            return bad("multi_step_base must be > 0");
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("lr_decay must be > 0 and lr_decay_every >= 1");
        }
        Ok(())
    }

    /// Langevin steps used at `iteration`.
    pub fn steps_at(&self, iteration: usize) -> usize {
        if self.steps_ramp == 0 || iteration >= self.steps_ramp {
            return self.steps_end;
        }
        let span = (self.steps_end - self.steps_start) as f64;
        self.steps_start + (span * iteration as f64 / self.steps_ramp as f64).floor() as usize
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.lr_decay.powi((iteration / self.lr_decay_every) as i32)
    }

    /// Sampler used for evaluation with this configuration.
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.steps_end, step_size: self.step_size, noise: self.noise, ..SamplerConfig::default() }
    }

    /// Normalized weights of intermediate samples `1..=steps`.
    pub fn step_weights(&self, steps: usize) -> Vec<f64> {
        if !self.multi_step {
            let mut w = vec![0.0; steps];
            if let Some(last) = w.last_mut() {
                *last = 1.0;
            }
            return w;
        }
        let raw: Vec<f64> = (1..=steps).map(|m| self.multi_step_base.powi((steps - m) as i32)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|w| w / s).collect()
    }
}

/// Encoder input and sampling target for a batch, in model layout.
#[derive(Clone, Debug)]
pub struct Batch {
    pub observed: Tensor,
    pub window: Tensor,
}

impl Batch {
    pub fn new(trajs: &[&Trajectory], split: &SplitSpec) -> Result<Self> {
        split.validate()?;
        let mut obs = Vec::with_capacity(trajs.len());
        let mut win = Vec::with_capacity(trajs.len());
        for tr in trajs {
            if tr.timesteps() < split.t_total {
                return Err(Error::Shape(format!(
                    "trajectory has {} steps, split needs {}",
                    tr.timesteps(),
                    split.t_total
                )));
            }
            obs.push(tr.slice_time(0, split.t_obs)?);
            win.push(tr.slice_time(split.window_start(), split.t_total)?);
        }
        Ok(Batch {
            observed: to_model_layout(&obs.iter().collect::<Vec<_>>()),
            window: to_model_layout(&win.iter().collect::<Vec<_>>()),
        })
    }

    pub fn size(&self) -> usize {
        self.observed.shape()[0]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMetrics {
    pub loss: f64,
    pub mse: f64,
    pub mse_last: f64,
    pub contrastive: f64,
    pub energy_sq: f64,
    pub energy_real: f64,
    pub energy_sample: f64,
    pub steps: usize,
}

pub struct LossOutput {
    pub loss: Var,
    pub metrics: LossMetrics,
}

/// Training objective for one batch.
///
/// `mse` is taken over the non-clamped window entries; with multi-step
/// supervision each intermediate sample contributes with its weight. The
/// contrastive term compares real data against the detached final sample.
pub fn loss(
    model: &Model,
    params: &Bound,
    batch: &Batch,
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<LossOutput> {
    let b = batch.size();
    let n = batch.window.shape()[1];
    let edges = EdgeIndex::new(n);
    let slots = model.cfg.latent_slots;
    let z = model.encoder.forward(params, &Var::constant(batch.observed.clone()))?;

    let mut first = Vec::with_capacity(b);
    let mut second = Vec::with_capacity(b);
    for k in 0..b {
        let (m1, m2) = split_edges(&edges, slots, cfg.split, derive_seed(seed ^ 0x5EED_0F_5A11, k as u64));
        first.push(m1);
        second.push(m2);
    }
    let mut masks = Vec::new();
    for group in [&first, &second] {
        if group.iter().any(|m| m.count() > 0) {
            masks.push(EdgeMask::stack(&group.iter().collect::<Vec<_>>()));
        }
    }

    let t_init = cfg.window.t_init;
    let clamp = Clamp::leading(&batch.window, t_init)?;
    let seeds: Vec<u64> = (0..b).map(|k| derive_seed(seed, k as u64)).collect();
    let x0 = init_with_seeds(&clamp, &seeds);
    let term = ModelTerm { net: &model.energy, params, latents: z.clone(), masks: masks.clone(), weight: 1.0 };
    let sampler = SamplerConfig { steps, step_size: cfg.step_size, noise: cfg.noise, ..SamplerConfig::default() };
    let xs = langevin(&[&term], &x0, &clamp, &sampler, true, derive_seed(seed, u64::MAX))?;

    let [_, _, w, d] = batch.window.shape()[..] else { unreachable!() };
    let supervised = (b * n * (w - t_init) * d).max(1) as f64;
    let target = Var::constant(batch.window.clone());
    let weights = cfg.step_weights(steps);
    let mut mse: Option<Var> = None;
    let mut mse_last = 0.0;
    for (m, wm) in weights.iter().enumerate() {
        if *wm == 0.0 {
            continue;
        }
        let err = xs[m + 1].sub(&target).square().sum().scale(1.0 / supervised);
        if m + 1 == steps {
            mse_last = err.item();
        }
        let term = err.scale(*wm);
        mse = Some(match mse {
            None => term,
            Some(acc) => acc.add(&term),
        });
    }
    let mse = match mse {
        Some(v) => v,
        None => xs[0].sub(&target).square().sum().scale(1.0 / supervised),
    };
    let mut metrics = LossMetrics { mse: mse.item(), mse_last, steps, ..LossMetrics::default() };
    let total = if cfg.reg_weight > 0.0 {
        let real = model.energy.forward(params, &target, &z, &masks)?.per_trajectory();
        let fake = model.energy.forward(params, &xs[steps].detach(), &z, &masks)?.per_trajectory();
        let cd = real.mean().sub(&fake.mean());
        let esq = real.square().mean().add(&fake.square().mean());
        metrics.contrastive = cd.item();
        metrics.energy_sq = esq.item();
        metrics.energy_real = real.value().sum() / b as f64;
        metrics.energy_sample = fake.value().sum() / b as f64;
        mse.add(&cd.add(&esq).scale(cfg.reg_weight))
    } else {
        mse
    };
    metrics.loss = total.item();
    if !metrics.loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {} ({metrics:?})", metrics.loss)));
    }
    Ok(LossOutput { loss: total, metrics })
}

/// Adam with bias correction; state kept at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let names: Vec<String> = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let g = grads[i].data();
            let m: Vec<f64> = self.m[i].data().iter().zip(g).map(|(m, g)| b1 * m + (1.0 - b1) * g).collect();
            let v: Vec<f64> = self.v[i].data().iter().zip(g).map(|(v, g)| b2 * v + (1.0 - b2) * g * g).collect();
            let p = params.values()[i].data();
            let next: Vec<f64> = p
                .iter()
                .zip(m.iter().zip(&v))
                .map(|(p, (m, v))| p - lr * (m / c1) / ((v / c2).sqrt() + self.eps))
                .collect();
            let shape = grads[i].shape().to_vec();
            self.m[i] = Tensor::new(shape.clone(), m.iter().map(|&x| x as f32 as f64).collect());
            self.v[i] = Tensor::new(shape.clone(), v.iter().map(|&x| x as f32 as f64).collect());
            let id = params.id_of(name).expect("own name");
            params.set(id, Tensor::new(shape, next))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub metrics: LossMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iteration: usize,
    pub mse_mean: f64,
    pub mse_at: BTreeMap<usize, f64>,
}

/// Everything needed to resume or evaluate a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    pub train_cfg: TrainConfig,
    pub iteration: usize,
    pub stats: NormStats,
    pub dt_unit: f64,
    pub best_val: Option<f64>,
    pub history: Vec<IterRecord>,
    pub validation: Vec<ValRecord>,
}

impl Checkpoint {
    pub fn fresh(model: Model, train_cfg: TrainConfig, stats: NormStats, dt_unit: f64) -> Self {
        let optimizer = Adam::new(&model.params);
        Checkpoint {
            model,
            optimizer,
            train_cfg,
            iteration: 0,
            stats,
            dt_unit,
            best_val: None,
            history: vec![],
            validation: vec![],
        }
    }
}

/// Global L2 norm of a gradient list.
fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// One optimizer step on `batch`; returns the iteration record.
pub fn train_step(ckpt: &mut Checkpoint, batch: &Batch, seed: u64) -> Result<IterRecord> {
    let cfg = ckpt.train_cfg.clone();
    let it = ckpt.iteration;
    let steps = cfg.steps_at(it);
    let params = ckpt.model.params.bind(true);
    let out = loss(&ckpt.model, &params, batch, &cfg, steps, seed)?;
    let wrt: Vec<&Var> = params.vars().iter().collect();
    let mut grads: Vec<Tensor> = grad(&out.loss, &wrt, false).into_iter().map(|g| g.value().clone()).collect();
    let norm = global_norm(&grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("parameter gradient at iteration {it}")));
    }
    if let Some(c) = cfg.grad_clip {
        if norm > c {
            grads = grads.iter().map(|g| g.scale(c / norm)).collect();
        }
    }
    let lr = cfg.lr_at(it);
    ckpt.optimizer.update(&mut ckpt.model.params, &grads, lr)?;
    ckpt.iteration += 1;
    let rec = IterRecord { iteration: it, lr, grad_norm: norm, metrics: out.metrics };
    ckpt.history.push(rec.clone());
    Ok(rec)
}

/// Mean squared error of forecasts on the validation split, per horizon and
/// averaged over the predicted segment.
pub fn validate(model: &Model, ds: &TrajectoryDataset, cfg: &TrainConfig, iteration: usize) -> Result<ValRecord> {
    let idx: Vec<usize> = ds.splits.val.iter().copied().take(cfg.val_limit.max(1)).collect();
    let trajs = ds.split(&idx);
    let seeds: Vec<u64> = idx.iter().map(|&i| derive_seed(cfg.seed ^ 0x7A1, i as u64)).collect();
    let mut preds = Vec::with_capacity(trajs.len());
    for (chunk, s) in trajs.chunks(cfg.batch_size.max(1)).zip(seeds.chunks(cfg.batch_size.max(1))) {
        preds.extend(forecast_batch(model, chunk, &cfg.window, &cfg.sampler(), s)?);
    }
    let horizon = cfg.window.horizon();
    let gts: Vec<Trajectory> =
        trajs.iter().map(|t| t.slice_time(cfg.window.predicted().start, cfg.window.t_total)).collect::<Result<_>>()?;
    let hs: Vec<usize> = [1, 10, 20].into_iter().filter(|&h| h <= horizon).collect();
    let per = mse_at(&preds, &gts, &(1..=horizon).collect::<Vec<_>>())?;
    let mse_mean = per.values().sum::<f64>() / per.len().max(1) as f64;
    let mse_at = hs.iter().map(|h| (*h, per[h])).collect();
    Ok(ValRecord { iteration, mse_mean, mse_at })
}

/// Runs `cfg.iterations` optimizer steps over the train split, validating
/// periodically and keeping the parameters with the best validation error.
pub fn train(
    ds: &TrajectoryDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&IterRecord, Option<&ValRecord>),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if ds.splits.train.is_empty() {
        return Err(Error::Invalid("dataset has no training trajectories".into()));
    }
    let (t, _, d) = ds.shape();
    if t < cfg.window.t_total {
        return Err(Error::Shape(format!("dataset has {t} steps, window needs {}", cfg.window.t_total)));
    }
    if d != model_cfg.state_dim {
        return Err(Error::Shape(format!("dataset has D={d}, model expects {}", model_cfg.state_dim)));
    }
    let model = Model::new(model_cfg.clone(), derive_seed(cfg.seed, 0xA11CE))?;
    let mut ckpt = Checkpoint::fresh(model, cfg.clone(), ds.stats.clone(), ds.meta.dt_unit);
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xDA7A));
    let mut order: Vec<usize> = Vec::new();
    while ckpt.iteration < cfg.iterations {
        if order.len() < cfg.batch_size {
            let mut epoch = ds.splits.train.clone();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let batch = Batch::new(&ds.split(&picked), &cfg.window)?;
        let step_seed = derive_seed(cfg.seed, ckpt.iteration as u64 + 1);
        let rec = train_step(&mut ckpt, &batch, step_seed)?;
        let val = if cfg.validate_every > 0
            && !ds.splits.val.is_empty()
            && (ckpt.iteration % cfg.validate_every == 0 || ckpt.iteration == cfg.iterations)
        {
            let v = validate(&ckpt.model, ds, cfg, ckpt.iteration)?;
            if best.as_ref().is_none_or(|(b, _)| v.mse_mean < *b) {
                best = Some((v.mse_mean, ckpt.model.params.values().to_vec()));
            }
            ckpt.validation.push(v.clone());
            Some(v)
        } else {
            None
        };
        observer(&rec, val.as_ref());
    }
    if let Some((score, values)) = best {
        ckpt.model = ckpt.model.with_values(&values)?;
        ckpt.best_val = Some(score);
    }
    Ok(ckpt)
}

const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptManifest {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    iteration: usize,
    stats: NormStats,
    dt_unit: f64,
    best_val: Option<f64>,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn write_blob(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let bytes: Vec<u8> =
        tensors.iter().flat_map(|t| t.data().iter()).flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, entries: &[TensorEntry]) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::Corrupt(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), total * 4)));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            if e.offset + n > vals.len() {
                return Err(Error::Corrupt(format!("tensor {} overruns the blob", e.name)));
            }
            Ok(Tensor::new(e.shape.clone(), vals[e.offset..e.offset + n].to_vec()))
        })
        .collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ps = &ckpt.model.params;
    let mut offset = 0;
    let tensors = ps
        .names()
        .iter()
        .zip(ps.values())
        .map(|(name, v)| {
            let e = TensorEntry { name: name.clone(), shape: v.shape().to_vec(), offset };
            offset += v.len();
            e
        })
        .collect();
    let manifest = CkptManifest {
        version: CKPT_VERSION,
        model: ckpt.model.cfg.clone(),
        train: ckpt.train_cfg.clone(),
        iteration: ckpt.iteration,
        stats: ckpt.stats.clone(),
        dt_unit: ckpt.dt_unit,
        best_val: ckpt.best_val,
        adam_step: ckpt.optimizer.step,
        tensors,
    };
    write_blob(&dir.join("params.f32"), ps.values())?;
    write_blob(&dir.join("adam_m.f32"), &ckpt.optimizer.m)?;
    write_blob(&dir.join("adam_v.f32"), &ckpt.optimizer.v)?;
    let hist = serde_json::json!({ "train": ckpt.history, "validation": ckpt.validation });
    let p = dir.join("history.json");
    fs::write(&p, serde_json::to_string(&hist)?).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: CkptManifest =
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", p.display())))?;
    if m.version != CKPT_VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint version {}", m.version)));
    }
    let mut model = Model::new(m.model.clone(), 0)?;
    let values = read_blob(&dir.join("params.f32"), &m.tensors)?;
    let entries: BTreeMap<String, Tensor> = m.tensors.iter().map(|e| e.name.clone()).zip(values).collect();
    model.params.load_from(&entries)?;
    // optimizer moments follow the parameter order of the model
    let ordered: Vec<TensorEntry> = model
        .params
        .names()
        .iter()
        .map(|n| {
            m.tensors
                .iter()
                .find(|e| &e.name == n)
                .map(|e| TensorEntry { name: e.name.clone(), shape: e.shape.clone(), offset: e.offset })
                .expect("validated by load_from")
        })
        .collect();
    let adam_m = read_blob(&dir.join("adam_m.f32"), &ordered)?;
    let adam_v = read_blob(&dir.join("adam_v.f32"), &ordered)?;
    let mut optimizer = Adam::new(&model.params);
    optimizer.step = m.adam_step;
    optimizer.m = adam_m;
    optimizer.v = adam_v;
    let (history, validation) = match fs::read_to_string(dir.join("history.json")) {
        Ok(text) => {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("history.json: {e}")))?;
            (
                serde_json::from_value(v["train"].clone()).unwrap_or_default(),
                serde_json::from_value(v["validation"].clone()).unwrap_or_default(),
            )
        }
        Err(_) => (vec![], vec![]),
    };
    Ok(Checkpoint {
        model,
        optimizer,
        train_cfg: m.train,
        iteration: m.iteration,
        stats: m.stats,
        dt_unit: m.dt_unit,
        best_val: m.best_val,
        history,
        validation,
    })
}
