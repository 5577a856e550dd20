//! Synthetic multi-person dense pose data and a sim/real batch-mixture
//! training toolkit: uv atlas transfer, rigged humanoids, label
//! rasterization, a small differentiable network and evaluation metrics.

pub mod error;
pub mod experiment;
pub mod mesh;
pub mod metrics;
pub mod mixer;
pub mod net;
pub mod preview;
pub mod raster;
pub mod rig;
pub mod toy;
pub mod train;
pub mod uv;

pub use error::{Error, ErrorKind, Result};

pub use experiment::ExperimentConfig;
pub use mesh::PartMesh;
pub use metrics::MetricReport;
pub use mixer::{SampleBatch, TrainingSample};
pub use raster::LabelFrame;
pub use rig::SkinnedFigure;
