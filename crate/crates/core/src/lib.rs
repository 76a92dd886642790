pub mod analysis;
pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod energy;
pub mod error;
mod graph;
pub mod horizons;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod sim;
pub mod train;
pub mod trajectory;

pub use encoder::{Encoder, EncoderConfig, LatentSet};
pub use energy::{EdgeMask, EnergyConfig, EnergyNet, EnergyValue};
pub use error::{Error, Result};
pub use trajectory::{
    denormalize, normalize, positions_from_velocities, EdgeIndex, LabelKind, NormStats,
    RelationLabels, SplitSpec, Trajectory,
};
pub use dataset::{load_dataset, save_dataset, DatasetMeta, Splits, TrajectoryDataset};
pub use model::{Model, ModelConfig};
pub use train::{load_checkpoint, save_checkpoint, Checkpoint, SplitStrategy, TrainConfig};
