//! Parameter storage and the small set of layers the networks are built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
///
/// Values are kept at `f32` precision so that checkpoints round-trip exactly.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(round_f32(&value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = round_f32(&value);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Fresh graph leaves for one forward pass.
    pub fn bind(&self, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| if trainable { Var::leaf(v.clone()) } else { Var::constant(v.clone()) })
                .collect(),
        )
    }

    /// Replaces every value whose name is present in `entries`; all names must
    /// exist and all shapes must match.
    pub fn load_from(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let v = entries
                .get(name)
                .ok_or_else(|| Error::Corrupt(format!("missing parameter {name}")))?;
            if v.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.values[i].shape(),
                    v.shape()
                )));
            }
            self.values[i] = round_f32(v);
        }
        if entries.len() != self.names.len() {
            let extra: Vec<_> =
                entries.keys().filter(|k| !self.names.contains(k)).cloned().collect();
            return Err(Error::Corrupt(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Graph leaves for a [`ParamSet`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binds values directly, without rounding.
    pub fn from_values(values: &[Tensor], trainable: bool) -> Self {
        Bound(values.iter().map(|v| if trainable { Var::leaf(v.clone()) } else { Var::constant(v.clone()) }).collect())
    }

    pub fn get(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        let bias = ps.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let shape = x.shape();
        let last = *shape.last().expect("linear input must have rank >= 1");
        assert_eq!(last, self.in_dim, "linear input width");
        let rows = x.value().len() / last;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = self.out_dim;
        x.reshape(&[rows, last])
            .matmul(p.get(self.weight))
            .add(p.get(self.bias))
            .reshape(&out_shape)
    }
}

/// Temporal convolution over `[B, T, C]` inputs.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let lin = Linear::new(ps, name, kernel * in_ch, out_ch, rng);
        Conv1d { lin, kernel, stride, pad: kernel / 2 }
    }

    pub fn out_len(&self, t: usize) -> Option<usize> {
        crate::autodiff::unfold_len(t, self.kernel, self.stride, self.pad)
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        self.lin.forward(p, &x.unfold(self.kernel, self.stride, self.pad))
    }
}

/// Normalizes the last axis to zero mean and unit variance.
pub fn layer_norm(x: &Var, eps: f64) -> Var {
    let axis = x.shape().len() - 1;
    let width = x.shape()[axis] as f64;
    let mean = x.sum_axis_keep(axis).scale(1.0 / width);
    let centered = x.sub(&mean);
    let var = centered.square().sum_axis_keep(axis).scale(1.0 / width);
    centered.mul(&var.add_scalar(eps).powf(-0.5))
}

/// Feature-wise modulation `gamma * h + beta`; `gamma`/`beta` broadcast
/// against `h`.
pub fn film(h: &Var, gamma: &Var, beta: &Var) -> Var {
    h.mul(gamma).add(beta)
}

/// Maps a latent code to one `(gamma, beta)` pair.
#[derive(Clone, Debug)]
pub struct FilmGenerator {
    pub lin: Linear,
    pub width: usize,
}

impl FilmGenerator {
    /// Weights start small and the bias at `gamma = 1, beta = 0`, so the
    /// modulation starts near the identity.
    pub fn new(ps: &mut ParamSet, name: &str, latent: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 0.1 / (latent as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), uniform(rng, &[latent, 2 * width], bound));
        let mut b = vec![0.0; 2 * width];
        b[..width].fill(1.0);
        let bias = ps.add(format!("{name}.bias"), Tensor::new(vec![2 * width], b));
        FilmGenerator { lin: Linear { weight, bias, in_dim: latent, out_dim: 2 * width }, width }
    }

    /// `z: [..., latent]` to `(gamma, beta)`, each `[..., width]`.
    pub fn forward(&self, p: &Bound, z: &Var) -> (Var, Var) {
        let gb = self.lin.forward(p, z);
        let axis = gb.shape().len() - 1;
        (gb.narrow(axis, 0, self.width), gb.narrow(axis, self.width, self.width))
    }
}
