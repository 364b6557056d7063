//! Dynamic multi-valued mapping: a generator conditioned on codes from a
//! learned codebook, a fixed simplex-ETF probability head over the codes,
//! and the tooling to train, predict and evaluate it.

pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod error;
pub mod etf;
pub mod image;
pub mod infer;
mod io;
pub mod losses;
pub mod metrics;
pub mod ndcore;
pub mod networks;
pub mod optim;
pub mod synthdata;
pub mod train;

pub use checkpoint::Checkpoint;
pub use codebook::Codebook;
pub use config::RunConfig;
pub use error::{DmmError, Result};
pub use etf::EtfClassifier;
pub use image::{Image, Mask};
pub use infer::{predict, Prediction};
pub use losses::LossWeights;
pub use metrics::{ged_squared, iou, mode_stats, WeightedMaskSet};
pub use networks::{Dims, DmmModel};
pub use synthdata::{DmmDataset, DmmEntry, Task};
pub use train::{train, EpochTelemetry, TrainConfig, Trainer};
