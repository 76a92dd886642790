//! Trajectory encoder producing `L` latent codes per directed edge.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::nn::{layer_norm, Bound, Conv1d, Linear, ParamSet};
use crate::trajectory::{EdgeIndex, Trajectory};

/// Shortest observed segment the three stride-2 convolutions accept.
pub const MIN_OBSERVED: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub state_dim: usize,
    pub hidden: usize,
    pub latent_slots: usize,
    pub latent_dim: usize,
}

/// Latent codes `[E, L, D_z]` for one trajectory, plus the edge order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub z: Tensor,
    pub edges: EdgeIndex,
}

impl LatentSet {
    pub fn slots(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[2]
    }

    /// Code of edge `e`, slot `l`.
    pub fn code(&self, e: usize, l: usize) -> &[f64] {
        let (s, d) = (self.slots(), self.dim());
        &self.z.data()[(e * s + l) * d..(e * s + l + 1) * d]
    }

    /// Stacks several latent sets into `[B, E, L, D_z]`.
    pub fn stack(sets: &[&LatentSet]) -> Tensor {
        let shape = sets[0].z.shape();
        let mut data = Vec::with_capacity(sets.len() * sets[0].z.len());
        for s in sets {
            assert_eq!(s.z.shape(), shape, "latent shapes must agree");
            data.extend_from_slice(s.z.data());
        }
        Tensor::new([&[sets.len()][..], shape].concat(), data)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    convs: Vec<Conv1d>,
    edge_mlp: [Linear; 2],
    node_mlp: [Linear; 2],
    edge_mlp2: [Linear; 2],
    out: Linear,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let convs = (0..3)
            .map(|i| {
                let cin = if i == 0 { 2 * cfg.state_dim } else { h };
                Conv1d::new(ps, &format!("encoder.conv{i}"), cin, h, 5, 2, rng)
            })
            .collect();
        let edge_mlp = [
            Linear::new(ps, "encoder.edge_mlp.0", h, h, rng),
            Linear::new(ps, "encoder.edge_mlp.1", h, h, rng),
        ];
        let node_mlp = [
            Linear::new(ps, "encoder.node_mlp.0", h, h, rng),
            Linear::new(ps, "encoder.node_mlp.1", h, h, rng),
        ];
        let edge_mlp2 = [
            Linear::new(ps, "encoder.edge_mlp2.0", 2 * h, h, rng),
            Linear::new(ps, "encoder.edge_mlp2.1", h, h, rng),
        ];
        let out = Linear::new(ps, "encoder.out", h, cfg.latent_slots * cfg.latent_dim, rng);
        Encoder { cfg, convs, edge_mlp, node_mlp, edge_mlp2, out }
    }

    /// `x: [B, N, T', D]` to latents `[B, E, L, D_z]`.
    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let [b, n, t, d] = x.shape()[..] else {
            return Err(Error::Shape(format!("encoder expects [B, N, T, D], got {:?}", x.shape())));
        };
        if d != self.cfg.state_dim {
            return Err(Error::Shape(format!("encoder built for D={}, got {d}", self.cfg.state_dim)));
        }
        if t < MIN_OBSERVED {
            return Err(Error::Invalid(format!(
                "observed segment has {t} steps, encoder needs at least {MIN_OBSERVED}"
            )));
        }
        if !x.value().is_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let g = GraphBatch::new(b, &EdgeIndex::new(n));
        let mut h = g.node_to_edge(&x.reshape(&[b * n, t, d]));
        for conv in &self.convs {
            h = conv.forward(p, &h).elu();
        }
        let steps = h.shape()[1];
        let hidden = self.cfg.hidden;
        h = h.sum_axis_keep(1).scale(1.0 / steps as f64).reshape(&[b * g.edges, hidden]);
        h = mlp(p, &self.edge_mlp, &h);
        let nodes = mlp(p, &self.node_mlp, &g.edge_to_node(&h, 1));
        let e = mlp(p, &self.edge_mlp2, &g.node_to_edge(&nodes));
        let (l, dz) = (self.cfg.latent_slots, self.cfg.latent_dim);
        let z = self.out.forward(p, &e).reshape(&[b, g.edges, l, dz]);
        Ok(layer_norm(&z, 1e-5))
    }

    /// Encodes one observed segment `[T', N, D]`.
    pub fn encode(&self, ps: &ParamSet, obs: &Trajectory) -> Result<LatentSet> {
        let _ng = crate::autodiff::NoGradGuard::new();
        let x = Var::constant(to_model_layout(&[obs]));
        let z = self.forward(&ps.bind(false), &x)?;
        let shape = z.shape()[1..].to_vec();
        Ok(LatentSet { z: z.value().reshape(&shape), edges: EdgeIndex::new(obs.nodes()) })
    }
}

fn mlp(p: &Bound, layers: &[Linear; 2], x: &Var) -> Var {
    layers[1].forward(p, &layers[0].forward(p, x).elu()).elu()
}

/// Stacks trajectories `[T, N, D]` into the model layout `[B, N, T, D]`.
pub fn to_model_layout(trajs: &[&Trajectory]) -> Tensor {
    let (t, n, d) = (trajs[0].timesteps(), trajs[0].nodes(), trajs[0].dim());
    let mut data = Vec::with_capacity(trajs.len() * t * n * d);
    for tr in trajs {
        assert_eq!((tr.timesteps(), tr.nodes(), tr.dim()), (t, n, d), "batch shapes must agree");
        for i in 0..n {
            for s in 0..t {
                for k in 0..d {
                    data.push(tr.at(s, i, k) as f64);
                }
            }
        }
    }
    Tensor::new(vec![trajs.len(), n, t, d], data)
}

/// Inverse of [`to_model_layout`] for one batch entry.
pub fn from_model_layout(x: &Tensor, index: usize, raw: bool) -> Result<Trajectory> {
    let [_, n, t, d] = x.shape()[..] else {
        return Err(Error::Shape(format!("expected [B, N, T, D], got {:?}", x.shape())));
    };
    let src = &x.data()[index * n * t * d..(index + 1) * n * t * d];
    let mut out = vec![0f32; t * n * d];
    for i in 0..n {
        for s in 0..t {
            for k in 0..d {
                out[(s * n + i) * d + k] = src[(i * t + s) * d + k] as f32;
            }
        }
    }
    Trajectory::new(t, n, d, out, raw)
}
