//! Latent-conditioned trajectory energies.
//!
//! Two graph networks score a trajectory: a long-term net that convolves
//! each edge's joint history and pools over time, and a short-term net that
//! scores 5-step windows. Each edge stream is modulated by its latent code
//! through FiLM. Latent slots are evaluated as independent graphs whose
//! node energies are summed. Masks zero edge features right before the
//! edge-to-node sum.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, NoGradGuard, Tensor, Var};
use crate::encoder::{to_model_layout, LatentSet};
use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::nn::{film, Bound, Conv1d, FilmGenerator, Linear, ParamSet};
use crate::trajectory::{EdgeIndex, Trajectory};

const WINDOW: usize = 5;
const COND_LAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub state_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
}

/// Which `(edge, slot)` pairs contribute, `[E, L]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    edges: usize,
    slots: usize,
    bits: Vec<bool>,
}

impl EdgeMask {
    pub fn full(edges: usize, slots: usize) -> Self {
        EdgeMask { edges, slots, bits: vec![true; edges * slots] }
    }

    pub fn empty(edges: usize, slots: usize) -> Self {
        EdgeMask { edges, slots, bits: vec![false; edges * slots] }
    }

    pub fn from_bits(edges: usize, slots: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != edges * slots {
            return Err(Error::Shape(format!("mask has {} bits, expected {}", bits.len(), edges * slots)));
        }
        Ok(EdgeMask { edges, slots, bits })
    }

    pub fn one_hot(edges: usize, slots: usize, edge: usize, slot: usize) -> Result<Self> {
        if edge >= edges || slot >= slots {
            return Err(Error::OutOfRange(format!("edge {edge} slot {slot} of {edges}x{slots}")));
        }
        let mut m = EdgeMask::empty(edges, slots);
        m.bits[edge * slots + slot] = true;
        Ok(m)
    }

    /// Every slot of the listed edges.
    pub fn from_edges(edges: usize, slots: usize, active: impl IntoIterator<Item = usize>) -> Self {
        let mut m = EdgeMask::empty(edges, slots);
        for e in active {
            m.bits[e * slots..(e + 1) * slots].fill(true);
        }
        m
    }

    pub fn edges(&self) -> usize {
        self.edges
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, edge: usize, slot: usize) -> bool {
        self.bits[edge * self.slots + slot]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        EdgeMask { bits: self.bits.iter().map(|b| !b).collect(), ..self.clone() }
    }

    pub fn intersects(&self, other: &EdgeMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    pub fn union(&self, other: &EdgeMask) -> Self {
        EdgeMask { bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(), ..self.clone() }
    }

    /// Stacks per-trajectory masks into a `[B, E, L]` 0/1 tensor.
    pub fn stack(masks: &[&EdgeMask]) -> Tensor {
        let (e, l) = (masks[0].edges, masks[0].slots);
        let data = masks
            .iter()
            .flat_map(|m| {
                assert_eq!((m.edges, m.slots), (e, l), "mask shapes must agree");
                m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 })
            })
            .collect();
        Tensor::new(vec![masks.len(), e, l], data)
    }
}

/// Energy of one trajectory under one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyValue {
    pub total: f64,
    pub long: f64,
    pub short: f64,
    pub per_node: Vec<f64>,
}

/// Per-node long- and short-term energies, each `[B, N]`.
#[derive(Clone, Debug)]
pub struct EnergyParts {
    pub long: Var,
    pub short: Var,
}

impl EnergyParts {
    pub fn per_node(&self) -> Var {
        self.long.add(&self.short)
    }

    /// Per-trajectory energies `[B]`.
    pub fn per_trajectory(&self) -> Var {
        let b = self.long.shape()[0];
        self.per_node().sum_to(&[b, 1]).reshape(&[b])
    }

    pub fn sum(&self) -> Var {
        self.long.sum().add(&self.short.sum())
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    convs: [Conv1d; 2],
}

impl DownBlock {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        DownBlock {
            convs: [
                Conv1d::new(ps, &format!("{name}.0"), cin, h, 5, 2, rng),
                Conv1d::new(ps, &format!("{name}.1"), h, h, 5, 1, rng),
            ],
        }
    }

    fn out_len(&self, t: usize) -> usize {
        self.convs.iter().fold(t, |t, c| c.out_len(t).unwrap_or(0))
    }

    fn forward(&self, p: &Bound, x: &Var) -> Var {
        self.convs.iter().fold(x.clone(), |h, c| c.forward(p, &h).swish())
    }
}

#[derive(Clone, Debug)]
struct LongTerm {
    down: DownBlock,
    cond: Vec<(Conv1d, FilmGenerator)>,
    mlp: Linear,
    head: Linear,
}

#[derive(Clone, Debug)]
struct ShortTerm {
    down: DownBlock,
    dense: Linear,
    cond: Vec<(Linear, FilmGenerator)>,
    mlp: [Linear; 2],
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct EnergyNet {
    pub cfg: EnergyConfig,
    long: LongTerm,
    short: ShortTerm,
}

/// `[B*E, T, H]` edge features repeated for each latent slot as
/// `[B*E*L, T, H]`.
fn expand_slots(h: &Var, slots: usize) -> Var {
    let s = h.shape();
    let (rows, t, w) = (s[0], s[1], s[2]);
    h.reshape(&[rows, 1, t, w]).broadcast_to(&[rows, slots, t, w]).reshape(&[rows * slots, t, w])
}

impl EnergyNet {
    pub fn new(cfg: EnergyConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let (h, dz, cin) = (cfg.hidden, cfg.latent_dim, 2 * cfg.state_dim);
        let long = LongTerm {
            down: DownBlock::new(ps, "energy.long.down", cin, h, rng),
            cond: (0..COND_LAYERS)
                .map(|i| {
                    (
                        Conv1d::new(ps, &format!("energy.long.cond{i}"), h, h, 5, 1, rng),
                        FilmGenerator::new(ps, &format!("energy.long.film{i}"), dz, h, rng),
                    )
                })
                .collect(),
            mlp: Linear::new(ps, "energy.long.mlp", h, h, rng),
            head: Linear::new(ps, "energy.long.head", h, 1, rng),
        };
        let short = ShortTerm {
            down: DownBlock::new(ps, "energy.short.down", cin, h, rng),
            dense: Linear::new(ps, "energy.short.dense", WINDOW * h, h, rng),
            cond: (0..COND_LAYERS)
                .map(|i| {
                    (
                        Linear::new(ps, &format!("energy.short.cond{i}"), h, h, rng),
                        FilmGenerator::new(ps, &format!("energy.short.film{i}"), dz, h, rng),
                    )
                })
                .collect(),
            mlp: [
                Linear::new(ps, "energy.short.mlp.0", h, h, rng),
                Linear::new(ps, "energy.short.mlp.1", h, h, rng),
            ],
            head: Linear::new(ps, "energy.short.head", h, 1, rng),
        };
        EnergyNet { cfg, long, short }
    }

    /// Shortest trajectory both nets accept.
    pub fn min_length(&self) -> usize {
        (1..).find(|&t| self.short.down.out_len(t) >= WINDOW).unwrap()
    }

    /// Number of short-term windows scored for a trajectory of length `t`.
    pub fn window_count(&self, t: usize) -> usize {
        (self.short.down.out_len(t) + 1).saturating_sub(WINDOW)
    }

    /// Energies of `x: [B, N, T, D]` given latents `z: [B, E, L, D_z]`.
    ///
    /// Each mask in `masks` is a `[B, E, L]` 0/1 tensor; the returned energy
    /// is the sum of the evaluations under every mask. Edge features are
    /// shared between masks.
    pub fn forward(&self, p: &Bound, x: &Var, z: &Var, masks: &[Tensor]) -> Result<EnergyParts> {
        let [b, n, t, d] = x.shape()[..] else {
            return Err(Error::Shape(format!("energy expects [B, N, T, D], got {:?}", x.shape())));
        };
        if d != self.cfg.state_dim {
            return Err(Error::Shape(format!("energy built for D={}, got {d}", self.cfg.state_dim)));
        }
        let edges = n * (n - 1);
        let [zb, ze, slots, dz] = z.shape()[..] else {
            return Err(Error::Shape(format!("latents must be [B, E, L, D_z], got {:?}", z.shape())));
        };
        if zb != b || ze != edges || dz != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "latents {:?} do not match batch {b}, {edges} edges, D_z {}",
                z.shape(),
                self.cfg.latent_dim
            )));
        }
        if t < self.min_length() {
            return Err(Error::Invalid(format!(
                "trajectory has {t} steps, energy needs at least {}",
                self.min_length()
            )));
        }
        if masks.is_empty() {
            return Err(Error::Invalid("at least one edge mask is required".into()));
        }
        for m in masks {
            if m.shape() != [b, edges, slots] {
                return Err(Error::Shape(format!(
                    "mask {:?} does not match [{b}, {edges}, {slots}]",
                    m.shape()
                )));
            }
        }
        let g = GraphBatch::new(b, &EdgeIndex::new(n));
        let edge_in = g.node_to_edge(&x.reshape(&[b * n, t, d]));
        let zr = z.reshape(&[b * edges * slots, 1, dz]);
        let hidden = self.cfg.hidden;
        let rows = b * edges * slots;

        // long-term edge features [B*E*L, H]
        let mut h = expand_slots(&self.long.down.forward(p, &edge_in), slots);
        for (conv, gen) in &self.long.cond {
            let (gamma, beta) = gen.forward(p, &zr);
            h = film(&conv.forward(p, &h), &gamma, &beta).swish();
        }
        let steps = h.shape()[1];
        let long_edges = h.sum_axis_keep(1).scale(1.0 / steps as f64).reshape(&[rows, hidden]);

        // short-term edge features [B*E*L, W, H]
        let s = self.short.down.forward(p, &edge_in).unfold(WINDOW, 1, 0);
        let mut s = expand_slots(&self.short.dense.forward(p, &s).swish(), slots);
        for (lin, gen) in &self.short.cond {
            let (gamma, beta) = gen.forward(p, &zr);
            s = film(&lin.forward(p, &s), &gamma, &beta).swish();
        }
        let windows = s.shape()[1];

        let mut long_nodes: Option<Var> = None;
        let mut short_nodes: Option<Var> = None;
        for m in masks {
            let mv = Var::constant(m.reshape(&[rows, 1]));
            let agg = g.edge_to_node(&long_edges.mul(&mv), slots);
            let e_long = self.long.head.forward(p, &self.long.mlp.forward(p, &agg).swish());
            let e_long = e_long.reshape(&[b, n, slots]).sum_to(&[b, n, 1]).reshape(&[b, n]);

            let mv = Var::constant(m.reshape(&[rows, 1, 1]));
            let agg = g.edge_to_node(&s.mul(&mv), slots);
            let hs = self.short.mlp[1]
                .forward(p, &self.short.mlp[0].forward(p, &agg).swish())
                .swish();
            let e_short = self.short.head.forward(p, &hs);
            let e_short = e_short.reshape(&[b, n, slots * windows]).sum_to(&[b, n, 1]).reshape(&[b, n]);

            long_nodes = Some(match long_nodes {
                None => e_long,
                Some(acc) => acc.add(&e_long),
            });
            short_nodes = Some(match short_nodes {
                None => e_short,
                Some(acc) => acc.add(&e_short),
            });
        }
        Ok(EnergyParts { long: long_nodes.unwrap(), short: short_nodes.unwrap() })
    }

    /// Energy of a single trajectory under one mask.
    pub fn evaluate(&self, ps: &ParamSet, x: &Trajectory, z: &LatentSet, mask: &EdgeMask) -> Result<EnergyValue> {
        let _ng = NoGradGuard::new();
        let (xv, zv) = single_inputs(x, z)?;
        check_mask(z, mask)?;
        let parts = self.forward(&ps.bind(false), &xv, &zv, &[EdgeMask::stack(&[mask])])?;
        Ok(energy_value(&parts))
    }

    /// Energy of edge `(i, j)` in latent slot `slot` alone: the one-hot mask
    /// evaluation.
    pub fn per_edge_energy(
        &self,
        ps: &ParamSet,
        x: &Trajectory,
        z: &LatentSet,
        edge: (usize, usize),
        slot: usize,
    ) -> Result<f64> {
        let e = z
            .edges
            .index_of(edge.0, edge.1)
            .ok_or_else(|| Error::OutOfRange(format!("edge {edge:?} of {} nodes", z.edges.nodes())))?;
        let mask = EdgeMask::one_hot(z.edges.len(), z.slots(), e, slot)?;
        Ok(self.evaluate(ps, x, z, &mask)?.total)
    }

    /// Gradient of the total energy with respect to the states, `[T, N, D]`.
    pub fn grad_states(&self, ps: &ParamSet, x: &Trajectory, z: &LatentSet, mask: &EdgeMask) -> Result<Vec<f64>> {
        let (xv, zv) = single_inputs(x, z)?;
        check_mask(z, mask)?;
        let xl = Var::leaf(xv.value().clone());
        let parts = self.forward(&ps.bind(false), &xl, &zv, &[EdgeMask::stack(&[mask])])?;
        let g = grad(&parts.sum(), &[&xl], false).remove(0);
        let (n, t, d) = (x.nodes(), x.timesteps(), x.dim());
        let mut out = vec![0.0; t * n * d];
        for i in 0..n {
            for s in 0..t {
                for k in 0..d {
                    out[(s * n + i) * d + k] = g.value().data()[(i * t + s) * d + k];
                }
            }
        }
        Ok(out)
    }
}

fn single_inputs(x: &Trajectory, z: &LatentSet) -> Result<(Var, Var)> {
    if z.edges.nodes() != x.nodes() {
        return Err(Error::Shape(format!(
            "latents cover {} nodes, trajectory has {}",
            z.edges.nodes(),
            x.nodes()
        )));
    }
    Ok((Var::constant(to_model_layout(&[x])), Var::constant(LatentSet::stack(&[z]))))
}

fn check_mask(z: &LatentSet, mask: &EdgeMask) -> Result<()> {
    if mask.edges() != z.edges.len() || mask.slots() != z.slots() {
        return Err(Error::Shape(format!(
            "mask is {}x{}, latents are {}x{}",
            mask.edges(),
            mask.slots(),
            z.edges.len(),
            z.slots()
        )));
    }
    Ok(())
}

fn energy_value(parts: &EnergyParts) -> EnergyValue {
    let long_nodes = parts.long.value().data();
    let short_nodes = parts.short.value().data();
    let long: f64 = long_nodes.iter().sum();
    let short: f64 = short_nodes.iter().sum();
    EnergyValue {
        total: long + short,
        long,
        short,
        per_node: long_nodes.iter().zip(short_nodes).map(|(a, b)| a + b).collect(),
    }
}

/// Shared indices for building masks over many trajectories.
pub fn full_masks(batch: usize, edges: usize, slots: usize) -> Tensor {
    Tensor::full(&[batch, edges, slots], 1.0)
}
