//! Semantic fields fitted from posed multi-camera images with volumetric
//! rendering, and their evaluation as voxel scene completion.

pub mod camera;
pub mod config;
pub mod diff;
pub mod experiments;
pub mod field;
pub mod grid;
pub mod image;
pub mod losses;
pub mod render;
pub mod rng;
pub mod scene;
pub mod train;

pub use camera::{Camera, Intrinsics, Pose, Ray, Vec3};
pub use config::{Precision, RunConfig};
pub use diff::{Scalar, Tensor};
pub use field::{EncoderKind, Field, FieldConfig, ModelField, SemanticFieldModel};
pub use grid::{EvalReport, GridSpec, RangeMetrics, VoxelGrid};
pub use losses::LossWeights;
pub use render::RenderConfig;
pub use scene::{CameraId, DatasetConfig, Frame, Sequence, VoxelWorld};
pub use train::{FitOptions, TrainConfig};
