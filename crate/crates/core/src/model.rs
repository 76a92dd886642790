//! Encoder plus energy network sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::{Encoder, EncoderConfig, LatentSet};
use crate::energy::{EnergyConfig, EnergyNet};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub encoder_hidden: usize,
    pub energy_hidden: usize,
    /// Latent codes per edge, `L`.
    pub latent_slots: usize,
    /// Width of each code, `D_z`.
    pub latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { state_dim: 4, encoder_hidden: 256, energy_hidden: 256, latent_slots: 2, latent_dim: 64 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim != 4 && self.state_dim != 6 {
            return Err(Error::Invalid(format!("state_dim must be 4 or 6, got {}", self.state_dim)));
        }
        if self.encoder_hidden == 0 || self.energy_hidden == 0 || self.latent_slots == 0 || self.latent_dim < 2 {
            return Err(Error::Invalid("model widths must be positive and latent_dim >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub energy: EnergyNet,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(
            EncoderConfig {
                state_dim: cfg.state_dim,
                hidden: cfg.encoder_hidden,
                latent_slots: cfg.latent_slots,
                latent_dim: cfg.latent_dim,
            },
            &mut params,
            &mut rng,
        );
        let energy = EnergyNet::new(
            EnergyConfig { state_dim: cfg.state_dim, hidden: cfg.energy_hidden, latent_dim: cfg.latent_dim },
            &mut params,
            &mut rng,
        );
        Ok(Model { cfg, params, encoder, energy })
    }

    pub fn encode(&self, obs: &Trajectory) -> Result<LatentSet> {
        self.encoder.encode(&self.params, obs)
    }

    /// Replaces all parameter values, keeping the architecture.
    pub fn with_values(&self, values: &[Tensor]) -> Result<Model> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!("{} tensors for {} parameters", values.len(), self.params.len())));
        }
        let mut m = self.clone();
        let ids: Vec<_> = m.params.names().iter().map(|n| m.params.id_of(n).unwrap()).collect();
        for (id, v) in ids.into_iter().zip(values) {
            m.params.set(id, v.clone())?;
        }
        Ok(m)
    }
}
