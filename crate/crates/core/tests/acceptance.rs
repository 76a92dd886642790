//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.
//!
//! Criteria 5-8 share one desk-scale springs model. Training it takes on the
//! order of an hour on one CPU core, so the checkpoint is kept under the
//! cargo target directory, keyed by a hash of the data and training
//! configuration. Set `RELPOT_ACCEPTANCE_RETRAIN=1` to ignore the cache, or
//! `RELPOT_ACCEPTANCE_ONLY=1,2,9` to run a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relpot::analysis::{evaluate_forecast, forecast_batch, ood_report, reconstruct, recombine, renormalize, steer, SteerGeometry};
use relpot::autodiff::{Tensor, Var};
use relpot::horizons::{build_horizons_dataset, parse_vectors, EphemerisClient, FixtureTransport, HorizonsConfig};
use relpot::nn::ParamSet;
use relpot::sampler::{langevin, Clamp, EnergyTerm, ExtraPotential, QuadraticTerm, SamplerConfig};
use relpot::sim::{derive_seed, integrate, make_dataset, momentum, pair_force, spring_energy, ForceLaw, InitialDraw, SimConfig, SimKind, SplitCounts};
use relpot::train::train;
use relpot::{
    load_checkpoint, save_checkpoint, save_dataset, Checkpoint, EdgeIndex, EdgeMask, EnergyConfig, EnergyNet, LabelKind, LatentSet,
    ModelConfig, SplitSpec, TrainConfig, Trajectory, TrajectoryDataset,
};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_traj(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Trajectory {
    Trajectory::new(t, n, 4, (0..t * n * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect(), false).unwrap()
}

fn random_latents(rng: &mut ChaCha8Rng, n: usize, l: usize, dz: usize) -> LatentSet {
    let e = n * (n - 1);
    LatentSet { z: Tensor::new(vec![e, l, dz], (0..e * l * dz).map(|_| rng.random_range(-1.0..1.0)).collect()), edges: EdgeIndex::new(n) }
}

fn random_net(seed: u64, hidden: usize, dz: usize) -> (ParamSet, EnergyNet) {
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = EnergyNet::new(EnergyConfig { state_dim: 4, hidden, latent_dim: dz }, &mut ps, &mut rng);
    (ps, net)
}

/// Analytic state gradient against central differences of the energy, the
/// latter evaluated on float32 trajectories.
fn c1_gradient() -> Outcome {
    let t0 = Instant::now();
    let (n, t, l, dz) = (3, 16, 2, 8);
    let h = 4e-3f32;
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let (ps, net) = random_net(inst, 16, dz);
        let x = random_traj(&mut rng, t, n);
        let z = random_latents(&mut rng, n, l, dz);
        let mask = EdgeMask::full(n * (n - 1), l);
        let g = net.grad_states(&ps, &x, &z, &mask).map_err(|e| e.to_string())?;
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let energy_at = |idx: usize, delta: f32| {
            let mut s = x.states().to_vec();
            s[idx] += delta;
            let xp = Trajectory::new(t, n, 4, s, false).unwrap();
            net.evaluate(&ps, &xp, &z, &mask).unwrap().total
        };
        for idx in 0..x.states().len() {
            // the realized float32 step, not the nominal one
            let up = x.states()[idx] + h;
            let dn = x.states()[idx] - h;
            let span = (up - dn) as f64;
            let fd = (energy_at(idx, h) - energy_at(idx, -h)) / span;
            let rel = (fd - g[idx]).abs() / g[idx].abs().max(1e-2 * gmax).max(1e-12);
            worst = worst.max(rel);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(worst <= 1e-2 && secs < 60.0, format!("max relative error {worst:.2e} over 20 instances in {secs:.1}s"))
}

/// Langevin on `0.5 |x - c|^2` against its closed form.
fn c2_langevin() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = vec![2, 3, 12, 4];
    let len: usize = shape.iter().product();
    let c = Tensor::new(shape.clone(), (0..len).map(|_| rng.random_range(-2.0..2.0)).collect());
    let x0 = Tensor::new(shape.clone(), (0..len).map(|_| rng.random_range(-2.0..2.0)).collect());
    let clamp = Clamp::leading(&x0, 0).map_err(|e| e.to_string())?;
    let term = QuadraticTerm { center: c.clone() };
    let mut worst = 0.0f64;
    for lambda in [0.1, 0.4, 1.0] {
        let cfg = SamplerConfig { steps: 10, step_size: lambda, noise: 0.0, ..SamplerConfig::default() };
        let xs = langevin(&[&term as &dyn EnergyTerm], &x0, &clamp, &cfg, false, 0).map_err(|e| e.to_string())?;
        for (m, x) in xs.iter().enumerate() {
            let f = (1.0 - lambda / 2.0).powi(m as i32);
            for ((v, ci), x0i) in x.value().data().iter().zip(c.data()).zip(x0.data()) {
                worst = worst.max((v - (ci + f * (x0i - ci))).abs());
            }
        }
    }
    check(worst < 1e-5, format!("max deviation from closed form {worst:.2e}"))
}

/// Momentum and energy conservation without walls; exact action-reaction.
fn c3_simulator() -> Outcome {
    let cfg = SimConfig { walls: false, ..SimConfig::default() };
    let (mut p_drift, mut e_drift) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let draw = InitialDraw::sample(&cfg, derive_seed(77, seed));
        let states = integrate(&cfg, &draw).map_err(|e| e.to_string())?;
        if states.len() != 70 {
            return Err(format!("expected 70 emitted states, got {}", states.len()));
        }
        let (p0, e0) = (momentum(&states[0]), spring_energy(&cfg, &draw, &states[0]));
        for s in &states {
            let p = momentum(s);
            p_drift = p_drift.max((p[0] - p0[0]).abs().max((p[1] - p0[1]).abs()));
            e_drift = e_drift.max(((spring_energy(&cfg, &draw, s) - e0) / e0).abs());
        }
    }
    let mut asym = 0usize;
    for k in 0..100u64 {
        let kind = if k % 2 == 0 { SimKind::Springs } else { SimKind::Charged };
        let law = if k % 2 == 0 { ForceLaw::Spring } else { ForceLaw::Charged };
        let c = SimConfig { kind, ..cfg.clone() };
        let draw = InitialDraw::sample(&c, derive_seed(91, k));
        for i in 0..c.n_particles {
            for j in 0..c.n_particles {
                if i != j {
                    let fij = pair_force(law, &c, &draw, draw.positions[i], draw.positions[j], i, j);
                    let fji = pair_force(law, &c, &draw, draw.positions[j], draw.positions[i], j, i);
                    if fij[0] != -fji[0] || fij[1] != -fji[1] {
                        asym += 1;
                    }
                }
            }
        }
    }
    check(
        p_drift < 1e-8 && e_drift < 1e-3 && asym == 0,
        format!("momentum drift {p_drift:.2e}, relative energy drift {e_drift:.2e}, asymmetric pairs {asym}"),
    )
}

/// Masked-out latents are inert, parts add up, node energies follow node
/// permutations.
fn c4_masking() -> Outcome {
    let (n, l, dz) = (4, 2, 8);
    let e = n * (n - 1);
    let mut changed = 0usize;
    let mut split_mismatch = 0usize;
    let mut perm_err = 0.0f64;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + inst);
        let (ps, net) = random_net(100 + inst, 16, dz);
        let x = random_traj(&mut rng, 16, n);
        let z = random_latents(&mut rng, n, l, dz);
        let mask = EdgeMask::from_bits(e, l, (0..e * l).map(|_| rng.random_bool(0.4)).collect()).unwrap();
        let base = net.evaluate(&ps, &x, &z, &mask).map_err(|e| e.to_string())?;
        let mut zd = z.z.to_vec();
        for ei in 0..e {
            for s in 0..l {
                if !mask.get(ei, s) {
                    for k in 0..dz {
                        zd[(ei * l + s) * dz + k] = rng.random_range(-5.0..5.0);
                    }
                }
            }
        }
        let zp = LatentSet { z: Tensor::new(z.z.shape().to_vec(), zd), edges: z.edges.clone() };
        if net.evaluate(&ps, &x, &zp, &mask).map_err(|e| e.to_string())? != base {
            changed += 1;
        }

        let xv = Var::constant(x.to_tensor().reshape(&[1, x.timesteps(), n, 4]).permute(&[0, 2, 1, 3]));
        let zv = Var::constant(LatentSet::stack(&[&z]));
        let parts = net.forward(&ps.bind(false), &xv, &zv, &[EdgeMask::stack(&[&mask])]).map_err(|e| e.to_string())?;
        let lt = parts.long.value().sum();
        let st = parts.short.value().sum();
        if base.total != lt + st || base.long != lt || base.short != st {
            split_mismatch += 1;
        }

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let map = z.edges.permuted(&perm);
        let mut zq = vec![0.0; z.z.len()];
        let mut bits = vec![false; e * l];
        for (ei, &pe) in map.iter().enumerate() {
            for s in 0..l {
                zq[(pe * l + s) * dz..(pe * l + s + 1) * dz].copy_from_slice(z.code(ei, s));
                bits[pe * l + s] = mask.get(ei, s);
            }
        }
        let zq = LatentSet { z: Tensor::new(z.z.shape().to_vec(), zq), edges: z.edges.clone() };
        let pm = EdgeMask::from_bits(e, l, bits).unwrap();
        let b = net.evaluate(&ps, &x.permute_nodes(&perm), &zq, &pm).map_err(|e| e.to_string())?;
        for i in 0..n {
            perm_err = perm_err.max((base.per_node[i] - b.per_node[perm[i]]).abs());
        }
    }
    check(
        changed == 0 && split_mismatch == 0 && perm_err <= 1e-5,
        format!("masked-latent changes {changed}, long+short mismatches {split_mismatch}, permutation error {perm_err:.2e}"),
    )
}

const DESK_ITERATIONS: usize = 4000;

fn desk_data() -> TrajectoryDataset {
    make_dataset(&SimConfig::default(), SplitCounts { train: 2000, val: 50, test: 200 }, 49).unwrap()
}

fn desk_configs() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig { encoder_hidden: 32, energy_hidden: 32, latent_dim: 16, ..ModelConfig::default() };
    let train = TrainConfig {
        iterations: DESK_ITERATIONS,
        lr: 1e-3,
        steps_ramp: DESK_ITERATIONS / 2,
        validate_every: 250,
        val_limit: 50,
        ..TrainConfig::default()
    };
    (model, train)
}

fn desk_model(ds: &TrajectoryDataset) -> Result<Checkpoint, String> {
    let (mcfg, tcfg) = desk_configs();
    let key = serde_json::to_string(&(&mcfg, &tcfg, &ds.meta)).unwrap();
    let hash = hex::encode(&Sha256::digest(key.as_bytes())[..8]);
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-desk-{hash}"));
    let retrain = std::env::var("RELPOT_ACCEPTANCE_RETRAIN").is_ok_and(|v| v == "1");
    if dir.join("manifest.json").exists() && !retrain {
        return load_checkpoint(&dir).map_err(|e| e.to_string());
    }
    eprintln!("training desk model ({DESK_ITERATIONS} iterations), cached at {}", dir.display());
    let t0 = Instant::now();
    let ckpt = train(ds, &mcfg, &tcfg, &mut |r, v| {
        if let Some(v) = v {
            eprintln!("  iter {:5} {:6.0}s val mse {:.4}", r.iteration, t0.elapsed().as_secs_f64(), v.mse_mean);
        }
    })
    .map_err(|e| e.to_string())?;
    save_checkpoint(&ckpt, &dir).map_err(|e| e.to_string())?;
    Ok(ckpt)
}

fn c5_forecasting(ds: &TrajectoryDataset, ckpt: &Checkpoint) -> Outcome {
    let test = ds.split(&ds.splits.test);
    let window = ckpt.train_cfg.window;
    let r = evaluate_forecast(&ckpt.model, &test, &window, &ckpt.train_cfg.sampler(), &[1, 10, 20], 20, 5)
        .map_err(|e| e.to_string())?;
    let ratio = r.mse_at[&20] / r.baseline_mse_at[&20];
    check(
        r.count == 200 && ratio <= 0.2,
        format!("MSE@20 {:.4e} vs static {:.4e}, ratio {ratio:.3} on {} trajectories", r.mse_at[&20], r.baseline_mse_at[&20], r.count),
    )
}

fn c6_ood(ckpt: &Checkpoint) -> Outcome {
    let cfg = SimConfig { kind: SimKind::Mixed, spring_strength: 0.1, charge_strength: 0.5, seed: 6, ..SimConfig::default() };
    let mixed = make_dataset(&cfg, SplitCounts { train: 400, val: 50, test: 50 }, 49).map_err(|e| e.to_string())?;
    if mixed.label_kind() != LabelKind::MixedForceType {
        return Err(format!("unexpected labels {:?}", mixed.label_kind()));
    }
    let trajs: Vec<Trajectory> =
        mixed.trajectories.iter().map(|t| renormalize(t, &mixed.stats, &ckpt.stats).unwrap()).collect();
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let labels: Vec<Vec<bool>> = mixed.labels.iter().map(|l| l.values.iter().map(|&v| v > 0.5).collect()).collect();
    let r = ood_report(&ckpt.model, &refs, &labels, &ckpt.train_cfg.window, 50, 25).map_err(|e| e.to_string())?;
    check(
        r.mean_out_of_distribution > r.mean_in_distribution && r.auc >= 0.8,
        format!(
            "mean energy charged {:.4e} vs springs {:.4e}, AUC {:.3}, held-out accuracy {:.3}",
            r.mean_out_of_distribution, r.mean_in_distribution, r.auc, r.accuracy
        ),
    )
}

/// At most one increase, and that one below 5% of the preceding value.
fn non_increasing(values: &[f64]) -> bool {
    let ups: Vec<f64> = values.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[1] - w[0]) / w[0].abs().max(1e-12)).collect();
    ups.len() <= 1 && ups.iter().all(|&r| r < 0.05)
}

fn c7_steering(ds: &TrajectoryDataset, ckpt: &Checkpoint) -> Outcome {
    let test = ds.split(&ds.splits.test);
    let geometry = SteerGeometry::default();
    let sampler = ckpt.train_cfg.sampler();
    let n = ds.shape().1;
    let run = |p: ExtraPotential| {
        steer(&ckpt.model, &test, &ckpt.train_cfg.window, &[p], &sampler, &ckpt.stats, ckpt.dt_unit, &geometry, 20, 7)
            .map(|o| o.metrics)
            .map_err(|e| e.to_string())
    };
    let mut goal = Vec::new();
    for eps in [0.0, 1.0, 5.0, 10.0] {
        goal.push(run(ExtraPotential::goal(eps, geometry.goal.clone(), n))?.goal_sq_distance);
    }
    let mut area = Vec::new();
    for eps in [0.0, 1.0, 5e1, 5e2] {
        area.push(run(ExtraPotential::avoid_area(eps, geometry.area_min.clone(), geometry.area_max.clone(), 0.1, n))?.fraction_in_area);
    }
    check(
        non_increasing(&goal) && non_increasing(&area),
        format!("goal squared distance {goal:.4?}, area occupancy {area:.4?}"),
    )
}

fn c8_recombination(ds: &TrajectoryDataset, ckpt: &Checkpoint) -> Outcome {
    let test = ds.split(&ds.splits.test);
    let window = ckpt.train_cfg.window;
    let sampler = ckpt.train_cfg.sampler();
    let model = &ckpt.model;
    let mut identical = 0usize;
    for k in 0..10 {
        let r = recombine(model, model, test[k], test[k], &[], &window, &sampler, 80 + k as u64).map_err(|e| e.to_string())?;
        let plain = reconstruct(model, test[k], &window, &sampler, 80 + k as u64).map_err(|e| e.to_string())?;
        identical += (r.sample == plain) as usize;
    }
    let other = load_checkpoint_copy(ckpt)?;
    let mut lowered = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = ds.shape().1;
    for trial in 0..100 {
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let base_traj = test[trial % test.len()];
        let other_traj = test[(trial + 100) % test.len()];
        let r = recombine(model, &other.model, base_traj, other_traj, &[a, b], &window, &sampler, 800 + trial as u64)
            .map_err(|e| e.to_string())?;
        let energy = |x: &Trajectory| other.model.energy.evaluate(&other.model.params, x, &r.swap_latents, &r.swap_mask).map(|v| v.total);
        let before = energy(&r.initial).map_err(|e| e.to_string())?;
        let after = energy(&r.sample).map_err(|e| e.to_string())?;
        lowered += (after < before) as usize;
    }
    check(
        identical == 10 && lowered >= 80,
        format!("bit-exact self-recombinations {identical}/10, targeted energy lowered in {lowered}/100 trials"),
    )
}

/// The second model of a recombination: the same checkpoint reloaded from
/// disk, so the two potentials share nothing in memory.
fn load_checkpoint_copy(ckpt: &Checkpoint) -> Result<Checkpoint, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_checkpoint(ckpt, dir.path()).map_err(|e| e.to_string())?;
    load_checkpoint(dir.path()).map_err(|e| e.to_string())
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SimConfig { kind: SimKind::Charged, seed: 9, ..SimConfig::default() };
    let counts = SplitCounts { train: 20, val: 5, test: 5 };
    let mut dumps = Vec::new();
    for run in 0..2 {
        let ds = make_dataset(&cfg, counts, 49).map_err(|e| e.to_string())?;
        let dir = tmp.path().join(format!("run{run}"));
        save_dataset(&ds, &dir).map_err(|e| e.to_string())?;
        dumps.push(dir_bytes(&dir));
    }
    let data_same = dumps[0] == dumps[1];

    let ds = make_dataset(&cfg, counts, 49).map_err(|e| e.to_string())?;
    let split = SplitSpec { t_obs: 49, t_init: 1, t_total: 70, start: None };
    let mcfg = ModelConfig { encoder_hidden: 16, energy_hidden: 16, latent_dim: 8, ..ModelConfig::default() };
    let trajs = ds.split(&ds.splits.test);
    let seeds: Vec<u64> = (0..trajs.len() as u64).collect();
    let mut samples = Vec::new();
    for _ in 0..2 {
        let model = relpot::Model::new(mcfg.clone(), 3).map_err(|e| e.to_string())?;
        samples.push(forecast_batch(&model, &trajs, &split, &SamplerConfig::default(), &seeds).map_err(|e| e.to_string())?);
    }
    let bits = |v: &[Trajectory]| v.iter().flat_map(|t| t.states().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
    let sample_same = bits(&samples[0]) == bits(&samples[1]);
    check(data_same && sample_same, format!("datasets identical: {data_same}, samples identical: {sample_same}"))
}

fn c10_horizons() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/horizons");
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = HorizonsConfig { origins: vec!["0".into()], stop: "1805-11-12".into(), workers: 2, ..HorizonsConfig::default() };
    let client = EphemerisClient::new(FixtureTransport::new(&fixtures), Some(cache.path().to_path_buf()));
    let ds = build_horizons_dataset(&cfg, &client).map_err(|e| e.to_string())?;
    let shape = ds.shape();
    let fetched = client.transport.calls();

    let mut spacing_ok = (ds.meta.dt_unit - 10.0).abs() < 1e-12;
    let mut cache_same = true;
    for b in &cfg.targets {
        let q = cfg.query(&b.id, "0");
        let original = fs::read(fixtures.join(FixtureTransport::file_name(&q))).map_err(|e| e.to_string())?;
        let cached = fs::read(client.cache_path(&q).unwrap()).map_err(|e| e.to_string())?;
        cache_same &= cached == original;
        let rows = parse_vectors(&String::from_utf8_lossy(&original)).map_err(|e| e.to_string())?;
        spacing_ok &= rows.windows(2).all(|w| (w[1].jd - w[0].jd - 10.0).abs() < 1e-9);
    }
    // a second client must be served from the cache alone
    let empty = tempfile::tempdir().map_err(|e| e.to_string())?;
    let replay = EphemerisClient::new(FixtureTransport::new(empty.path()), Some(cache.path().to_path_buf()));
    let again = build_horizons_dataset(&cfg, &replay).map_err(|e| e.to_string())?;
    let replay_same = again.trajectories == ds.trajectories && replay.transport.calls() == 0;
    check(
        shape == (43, 12, 6) && fetched == 12 && spacing_ok && cache_same && replay_same,
        format!(
            "shape (T, N, D) {shape:?}, {} trajectories, 10-day spacing {spacing_ok}, cache bytes identical {cache_same}, cached replay identical {replay_same}",
            ds.len()
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("RELPOT_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |k: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let t0 = Instant::now();
        let out = f();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {k:2} {name}: {detail} [{secs:.1}s]");
        results.push((k, name, out));
    };
    record(1, "gradient correctness", &mut c1_gradient);
    record(2, "Langevin oracle", &mut c2_langevin);
    record(3, "simulator conservation", &mut c3_simulator);
    record(4, "masking contract", &mut c4_masking);
    let ds = desk_data();
    match if (5..=8).any(wanted) { desk_model(&ds) } else { Err("not requested".into()) } {
        Ok(ckpt) => {
            record(5, "desk forecasting", &mut || c5_forecasting(&ds, &ckpt));
            record(6, "OOD ordering", &mut || c6_ood(&ckpt));
            record(7, "steering trends", &mut || c7_steering(&ds, &ckpt));
            record(8, "recombination consistency", &mut || c8_recombination(&ds, &ckpt));
        }
        Err(e) => {
            for (k, name) in [(5, "desk forecasting"), (6, "OOD ordering"), (7, "steering trends"), (8, "recombination consistency")] {
                record(k, name, &mut || Err(format!("desk model unavailable: {e}")));
            }
        }
    }
    record(9, "determinism", &mut c9_determinism);
    record(10, "Horizons ingestion", &mut c10_horizons);
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
