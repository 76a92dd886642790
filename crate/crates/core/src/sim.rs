//! Particle simulators: springs, charged, and mixed-law systems in a 2-D box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, Splits, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::trajectory::{normalize, LabelKind, NormStats, RelationLabels, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    Springs,
    Charged,
    Mixed,
}

/// Force law acting on one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForceLaw {
    Spring,
    Charged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub kind: SimKind,
    pub n_particles: usize,
    /// Emitted states per trajectory.
    pub n_steps: usize,
    pub spring_strength: f64,
    /// Charges are drawn from `{+q, -q}` with this `q`.
    pub charge_strength: f64,
    pub connection_prob: f64,
    pub charge_prob: f64,
    /// Probability that a mixed-system node follows the charged law.
    pub charged_node_prob: f64,
    /// Reflecting walls at `±box_half_width`.
    pub walls: bool,
    pub box_half_width: f64,
    pub integrator_dt: f64,
    pub subsample: usize,
    pub softening: f64,
    pub loc_std: f64,
    pub vel_norm: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            kind: SimKind::Springs,
            n_particles: 5,
            n_steps: 70,
            spring_strength: 0.1,
            charge_strength: 1.0,
            connection_prob: 0.5,
            charge_prob: 0.5,
            charged_node_prob: 0.5,
            walls: true,
            box_half_width: 5.0,
            integrator_dt: 1e-3,
            subsample: 100,
            softening: 0.01,
            loc_std: 0.5,
            vel_norm: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_particles < 2 {
            return bad(format!("n_particles must be >= 2, got {}", self.n_particles));
        }
        if self.n_steps < 2 {
            return bad(format!("n_steps must be >= 2, got {}", self.n_steps));
        }
        for (name, p) in [
            ("connection_prob", self.connection_prob),
            ("charge_prob", self.charge_prob),
            ("charged_node_prob", self.charged_node_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.integrator_dt > 0.0) {
            return bad(format!("integrator_dt must be > 0, got {}", self.integrator_dt));
        }
        if self.subsample < 1 {
            return bad("subsample must be >= 1".into());
        }
        if !(self.softening >= 0.0) {
            return bad(format!("softening must be >= 0, got {}", self.softening));
        }
        if self.walls && !(self.box_half_width > 0.0) {
            return bad(format!("box_half_width must be > 0, got {}", self.box_half_width));
        }
        Ok(())
    }

    /// Time between emitted states.
    pub fn dt_unit(&self) -> f64 {
        self.integrator_dt * self.subsample as f64
    }
}

/// Random quantities of one system, drawn in a fixed order so that every
/// simulator kind consumes the same stream.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialDraw {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    /// Symmetric 0/1 adjacency, zero diagonal, `N * N`.
    pub adjacency: Vec<f64>,
    pub charges: Vec<f64>,
    pub laws: Vec<ForceLaw>,
}

impl InitialDraw {
    pub fn sample(cfg: &SimConfig, seed: u64) -> Self {
        let n = cfg.n_particles;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let positions = (0..n).map(|_| [normal() * cfg.loc_std, normal() * cfg.loc_std]).collect();
        let velocities = (0..n)
            .map(|_| {
                let v = [normal(), normal()];
                let norm = (v[0] * v[0] + v[1] * v[1]).sqrt().max(1e-12);
                [v[0] * cfg.vel_norm / norm, v[1] * cfg.vel_norm / norm]
            })
            .collect();
        let mut adjacency = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(cfg.connection_prob) {
                    adjacency[i * n + j] = 1.0;
                    adjacency[j * n + i] = 1.0;
                }
            }
        }
        let charges = (0..n)
            .map(|_| if rng.random_bool(cfg.charge_prob) { cfg.charge_strength } else { -cfg.charge_strength })
            .collect();
        let mixed: Vec<ForceLaw> = (0..n)
            .map(|_| if rng.random_bool(cfg.charged_node_prob) { ForceLaw::Charged } else { ForceLaw::Spring })
            .collect();
        let laws = match cfg.kind {
            SimKind::Springs => vec![ForceLaw::Spring; n],
            SimKind::Charged => vec![ForceLaw::Charged; n],
            SimKind::Mixed => mixed,
        };
        InitialDraw { positions, velocities, adjacency, charges, laws }
    }
}

/// Force on particle `i` from particle `j` under `law`.
pub fn pair_force(
    law: ForceLaw,
    cfg: &SimConfig,
    draw: &InitialDraw,
    pi: [f64; 2],
    pj: [f64; 2],
    i: usize,
    j: usize,
) -> [f64; 2] {
    let n = cfg.n_particles;
    let d = [pi[0] - pj[0], pi[1] - pj[1]];
    match law {
        ForceLaw::Spring => {
            let c = -cfg.spring_strength * draw.adjacency[i * n + j];
            [c * d[0], c * d[1]]
        }
        ForceLaw::Charged => {
            let r2 = d[0] * d[0] + d[1] * d[1] + cfg.softening;
            let c = draw.charges[i] * draw.charges[j] / (r2 * r2.sqrt());
            [c * d[0], c * d[1]]
        }
    }
}

fn accelerations(cfg: &SimConfig, draw: &InitialDraw, pos: &[[f64; 2]], out: &mut [[f64; 2]]) {
    let n = pos.len();
    for i in 0..n {
        let mut a = [0.0, 0.0];
        for j in 0..n {
            if j != i {
                let f = pair_force(draw.laws[i], cfg, draw, pos[i], pos[j], i, j);
                a[0] += f[0];
                a[1] += f[1];
            }
        }
        out[i] = a;
    }
}

fn reflect(p: &mut f64, v: &mut f64, half: f64) {
    if *p > half {
        *p = 2.0 * half - *p;
        *v = -*v;
    } else if *p < -half {
        *p = -2.0 * half - *p;
        *v = -*v;
    }
}

/// Positions and velocities of every particle at one emitted step.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

/// Integrates `draw` with velocity Verlet at full precision, emitting the
/// initial state and then every `subsample`-th substep.
pub fn integrate(cfg: &SimConfig, draw: &InitialDraw) -> Result<Vec<SystemState>> {
    cfg.validate()?;
    let n = cfg.n_particles;
    if draw.positions.len() != n || draw.velocities.len() != n || draw.laws.len() != n {
        return Err(Error::Shape(format!("initial draw does not describe {n} particles")));
    }
    let dt = cfg.integrator_dt;
    let mut pos = draw.positions.clone();
    let mut vel = draw.velocities.clone();
    let mut acc = vec![[0.0; 2]; n];
    accelerations(cfg, draw, &pos, &mut acc);
    let mut out = Vec::with_capacity(cfg.n_steps);
    out.push(SystemState { positions: pos.clone(), velocities: vel.clone() });
    for _ in 1..cfg.n_steps {
        for _ in 0..cfg.subsample {
            for i in 0..n {
                for k in 0..2 {
                    vel[i][k] += 0.5 * dt * acc[i][k];
                    pos[i][k] += dt * vel[i][k];
                }
                if cfg.walls {
                    for k in 0..2 {
                        reflect(&mut pos[i][k], &mut vel[i][k], cfg.box_half_width);
                    }
                }
            }
            accelerations(cfg, draw, &pos, &mut acc);
            for i in 0..n {
                for k in 0..2 {
                    vel[i][k] += 0.5 * dt * acc[i][k];
                }
            }
        }
        if pos.iter().chain(&vel).any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::NonFinite(format!("simulation diverged after {} states", out.len())));
        }
        out.push(SystemState { positions: pos.clone(), velocities: vel.clone() });
    }
    Ok(out)
}

/// Raw `[n_steps, N, 4]` trajectory of `draw`.
pub fn simulate_draw(cfg: &SimConfig, draw: &InitialDraw) -> Result<Trajectory> {
    let states = integrate(cfg, draw)?;
    let mut flat = Vec::with_capacity(cfg.n_steps * cfg.n_particles * 4);
    for s in &states {
        for (p, v) in s.positions.iter().zip(&s.velocities) {
            flat.extend([p[0], p[1], v[0], v[1]].map(|x| x as f32));
        }
    }
    Trajectory::new(cfg.n_steps, cfg.n_particles, 4, flat, true)
}

/// Total momentum (unit masses).
pub fn momentum(state: &SystemState) -> [f64; 2] {
    state.velocities.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]])
}

/// Kinetic plus spring potential energy `1/2 k sum_{i<j} A_ij |p_i - p_j|^2`.
pub fn spring_energy(cfg: &SimConfig, draw: &InitialDraw, state: &SystemState) -> f64 {
    let n = state.positions.len();
    let (pos, vel) = (&state.positions, &state.velocities);
    let mut e = 0.0;
    for i in 0..n {
        e += 0.5 * (vel[i][0].powi(2) + vel[i][1].powi(2));
        for j in i + 1..n {
            let d2 = (pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2);
            e += 0.5 * cfg.spring_strength * draw.adjacency[i * n + j] * d2;
        }
    }
    e
}

fn labels_for(cfg: &SimConfig, draw: &InitialDraw) -> RelationLabels {
    match cfg.kind {
        SimKind::Springs => RelationLabels {
            kind: LabelKind::SpringsAdjacency,
            values: draw.adjacency.iter().map(|&v| v as f32).collect(),
        },
        SimKind::Charged => RelationLabels {
            kind: LabelKind::Charges,
            values: draw.charges.iter().map(|&v| v as f32).collect(),
        },
        SimKind::Mixed => RelationLabels {
            kind: LabelKind::MixedForceType,
            values: draw
                .laws
                .iter()
                .map(|l| match l {
                    ForceLaw::Spring => 0.0,
                    ForceLaw::Charged => 1.0,
                })
                .collect(),
        },
    }
}

fn expect_kind(cfg: &SimConfig, kind: SimKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Invalid(format!("config kind is {:?}, expected {kind:?}", cfg.kind)));
    }
    Ok(())
}

/// Simulates the system selected by `cfg.kind` with seed `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<(Trajectory, RelationLabels)> {
    cfg.validate()?;
    let draw = InitialDraw::sample(cfg, cfg.seed);
    Ok((simulate_draw(cfg, &draw)?, labels_for(cfg, &draw)))
}

pub fn simulate_springs(cfg: &SimConfig) -> Result<(Trajectory, RelationLabels)> {
    expect_kind(cfg, SimKind::Springs)?;
    simulate(cfg)
}

pub fn simulate_charged(cfg: &SimConfig) -> Result<(Trajectory, RelationLabels)> {
    expect_kind(cfg, SimKind::Charged)?;
    simulate(cfg)
}

pub fn simulate_mixed(cfg: &SimConfig) -> Result<(Trajectory, RelationLabels)> {
    expect_kind(cfg, SimKind::Mixed)?;
    simulate(cfg)
}

/// Per-trajectory seed derived from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Generates `train + val + test` trajectories, normalizes them with stats
/// from the first `t_obs` states of the train split, and records splits in
/// generation order.
pub fn make_dataset(cfg: &SimConfig, counts: SplitCounts, t_obs: usize) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::Invalid(format!("every split needs at least one trajectory, got {counts:?}")));
    }
    if t_obs == 0 || t_obs > cfg.n_steps {
        return Err(Error::Invalid(format!("t_obs {t_obs} must lie in 1..={}", cfg.n_steps)));
    }
    let total = counts.train + counts.val + counts.test;
    let mut raw = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for k in 0..total {
        let c = SimConfig { seed: derive_seed(cfg.seed, k as u64), ..cfg.clone() };
        let (tr, lab) = simulate(&c)?;
        raw.push(tr);
        labels.push(lab);
    }
    let stats = NormStats::compute(raw[..counts.train].iter(), t_obs)?;
    let trajectories = raw.iter().map(|t| normalize(t, &stats)).collect::<Result<Vec<_>>>()?;
    let splits = Splits {
        train: (0..counts.train).collect(),
        val: (counts.train..counts.train + counts.val).collect(),
        test: (counts.train + counts.val..total).collect(),
    };
    let meta = DatasetMeta {
        kind: format!("{:?}", cfg.kind).to_lowercase(),
        seed: cfg.seed,
        dt_unit: cfg.dt_unit(),
        stats_steps: t_obs,
        config: serde_json::to_value(cfg)?,
        origins: vec![],
    };
    TrajectoryDataset::new(trajectories, labels, stats, splits, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: SimKind) -> SimConfig {
        SimConfig { kind, seed: 42, ..SimConfig::default() }
    }

    #[test]
    fn free_motion_is_straight_with_speed_preserving_bounces() {
        let c = SimConfig { spring_strength: 0.0, vel_norm: 3.0, n_steps: 60, ..cfg(SimKind::Springs) };
        let (tr, _) = simulate_springs(&c).unwrap();
        for i in 0..c.n_particles {
            let s0 = (tr.at(0, i, 2).powi(2) + tr.at(0, i, 3).powi(2)).sqrt();
            for t in 0..tr.timesteps() {
                let s = (tr.at(t, i, 2).powi(2) + tr.at(t, i, 3).powi(2)).sqrt();
                assert!((s - s0).abs() < 1e-5);
                assert!(tr.at(t, i, 0).abs() <= 5.0 && tr.at(t, i, 1).abs() <= 5.0);
            }
        }
    }

    #[test]
    fn springs_conserve_momentum_and_energy_without_walls() {
        let c = SimConfig { n_particles: 2, connection_prob: 1.0, walls: false, ..cfg(SimKind::Springs) };
        let draw = InitialDraw::sample(&c, 7);
        let states = integrate(&c, &draw).unwrap();
        assert_eq!(states.len(), 70);
        let p0 = momentum(&states[0]);
        let e0 = spring_energy(&c, &draw, &states[0]);
        for s in &states {
            let p = momentum(s);
            assert!((p[0] - p0[0]).abs() < 1e-8 && (p[1] - p0[1]).abs() < 1e-8);
            let e = spring_energy(&c, &draw, s);
            assert!(((e - e0) / e0).abs() < 1e-3);
        }
    }

    #[test]
    fn charged_signs() {
        for (q1, q2, attract) in [(1.0, -1.0, true), (1.0, 1.0, false), (-1.0, -1.0, false)] {
            let c = SimConfig { n_particles: 2, walls: false, n_steps: 5, ..cfg(SimKind::Charged) };
            let draw = InitialDraw {
                positions: vec![[-0.5, 0.0], [0.5, 0.0]],
                velocities: vec![[0.0, 0.0], [0.0, 0.0]],
                adjacency: vec![0.0; 4],
                charges: vec![q1, q2],
                laws: vec![ForceLaw::Charged; 2],
            };
            let tr = simulate_draw(&c, &draw).unwrap();
            let dist = |t: usize| (tr.at(t, 0, 0) - tr.at(t, 1, 0)).abs();
            for t in 1..5 {
                if attract {
                    assert!(dist(t) < dist(t - 1));
                } else {
                    assert!(dist(t) > dist(t - 1));
                }
            }
        }
    }

    #[test]
    fn charged_pair_conserves_momentum() {
        let c = SimConfig { n_particles: 2, walls: false, ..cfg(SimKind::Charged) };
        let draw = InitialDraw::sample(&c, 3);
        let states = integrate(&c, &draw).unwrap();
        let p0 = momentum(&states[0]);
        for s in &states {
            let p = momentum(s);
            assert!((p[0] - p0[0]).abs() < 1e-8 && (p[1] - p0[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let a = simulate_springs(&cfg(SimKind::Springs)).unwrap();
        let b = simulate_springs(&cfg(SimKind::Springs)).unwrap();
        assert_eq!(a, b);
        let m = simulate(&cfg(SimKind::Mixed)).unwrap();
        assert_eq!(m.0.states().len(), 70 * 5 * 4);
    }

    #[test]
    fn mixed_degenerates_to_pure_laws() {
        let base = cfg(SimKind::Mixed);
        let mut draw = InitialDraw::sample(&base, base.seed);
        draw.laws = vec![ForceLaw::Spring; 5];
        let springs = simulate_springs(&cfg(SimKind::Springs)).unwrap().0;
        assert_eq!(simulate_draw(&base, &draw).unwrap(), springs);
        draw.laws = vec![ForceLaw::Charged; 5];
        let charged = simulate_charged(&cfg(SimKind::Charged)).unwrap().0;
        assert_eq!(simulate_draw(&base, &draw).unwrap(), charged);
    }

    #[test]
    fn mixed_first_step_matches_two_law_oracle() {
        let c = SimConfig { walls: false, ..cfg(SimKind::Mixed) };
        let draw = InitialDraw::sample(&c, 99);
        let n = c.n_particles;
        let mut acc = vec![[0.0; 2]; n];
        accelerations(&c, &draw, &draw.positions, &mut acc);
        for i in 0..n {
            let mut want = [0.0, 0.0];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = draw.positions[i][0] - draw.positions[j][0];
                let dy = draw.positions[i][1] - draw.positions[j][1];
                let (fx, fy) = match draw.laws[i] {
                    ForceLaw::Spring => {
                        let a = draw.adjacency[i * n + j];
                        (-c.spring_strength * a * dx, -c.spring_strength * a * dy)
                    }
                    ForceLaw::Charged => {
                        let r = (dx * dx + dy * dy + c.softening).powf(1.5);
                        let qq = draw.charges[i] * draw.charges[j];
                        (qq * dx / r, qq * dy / r)
                    }
                };
                want[0] += fx;
                want[1] += fy;
            }
            assert!((acc[i][0] - want[0]).abs() < 1e-12 && (acc[i][1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SimConfig { n_particles: 1, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { connection_prob: 1.5, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { subsample: 0, ..SimConfig::default() }.validate().is_err());
        assert!(simulate_charged(&SimConfig::default()).is_err());
    }

    #[test]
    fn small_dataset_has_disjoint_splits() {
        let c = SimConfig { n_steps: 20, ..cfg(SimKind::Springs) };
        let ds = make_dataset(&c, SplitCounts { train: 2, val: 1, test: 1 }, 10).unwrap();
        assert_eq!(ds.trajectories.len(), 4);
        assert_eq!(ds.splits.train, vec![0, 1]);
        assert_eq!(ds.splits.val, vec![2]);
        assert_eq!(ds.splits.test, vec![3]);
    }

    #[test]
    fn train_stats_standardize_observed_segment() {
        let c = SimConfig { n_steps: 30, ..cfg(SimKind::Springs) };
        let ds = make_dataset(&c, SplitCounts { train: 40, val: 1, test: 1 }, 20).unwrap();
        let recomputed = NormStats::compute(ds.splits.train.iter().map(|&i| &ds.trajectories[i]), 20).unwrap();
        for k in 0..4 {
            assert!(recomputed.mean[k].abs() < 0.05);
            assert!((0.9..=1.1).contains(&recomputed.std[k]));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn third_law_holds(seed in any::<u64>(), charged in any::<bool>()) {
            let kind = if charged { SimKind::Charged } else { SimKind::Springs };
            let c = SimConfig { kind, ..SimConfig::default() };
            let draw = InitialDraw::sample(&c, seed);
            let law = if charged { ForceLaw::Charged } else { ForceLaw::Spring };
            for i in 0..c.n_particles {
                for j in 0..c.n_particles {
                    if i == j { continue; }
                    let fij = pair_force(law, &c, &draw, draw.positions[i], draw.positions[j], i, j);
                    let fji = pair_force(law, &c, &draw, draw.positions[j], draw.positions[i], j, i);
                    prop_assert_eq!(fij[0], -fji[0]);
                    prop_assert_eq!(fij[1], -fji[1]);
                }
            }
        }

        #[test]
        fn reflection_preserves_speed(p in -5.5f64..5.5, v in -3.0f64..3.0) {
            let (mut p2, mut v2) = (p, v);
            reflect(&mut p2, &mut v2, 5.0);
            prop_assert_eq!(v2.abs(), v.abs());
            prop_assert!(p2.abs() <= 5.0);
        }
    }
}
