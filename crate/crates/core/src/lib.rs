pub mod assignment;
pub mod attention;
pub mod checkpoint;
mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod featrep;
pub mod geometry;
pub mod keypoints;
pub mod model;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod visibility;

pub use error::{Error, Result};
pub use geometry::{GroundTruth, Homography};
pub use keypoints::{ImageSize, KeypointSet};
pub use model::{MatchPrediction, Model, ModelConfig};
pub use synth::{SynthConfig, SyntheticPair};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainState};
