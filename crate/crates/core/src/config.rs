//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::PosEncConfig;
use crate::diff::AdamConfig;
use crate::field::{EncoderKind, FieldConfig};
use crate::grid::{EvalRange, GridSpec, VoxelizeConfig};
use crate::losses::LossWeights;
use crate::render::RenderConfig;
use crate::scene::{DatasetConfig, LabelNoise, RigConfig, SceneConfig, TrajectoryConfig};
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Float32,
    Float64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub seed: u64,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub num_classes: usize,
    pub texture: f64,
    pub trajectory: TrajectoryConfig,
    pub noise: LabelNoise,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            seed: s.seed,
            dims: s.dims,
            voxel_size: s.voxel_size,
            num_classes: s.num_classes,
            texture: s.texture,
            trajectory: TrajectoryConfig::default(),
            noise: LabelNoise::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Timestep of the input frame used for evaluation.
    pub input_timestep: usize,
    /// Grid length ahead of the camera, in voxels.
    pub forward: usize,
    /// Grid half-width either side of the camera, in voxels.
    pub half_width: usize,
    pub street_z: usize,
    /// Crops in metres; when empty, a quarter, half and all of the grid in
    /// x and y with the full height.
    pub ranges: Vec<[f64; 3]>,
    /// Future timesteps at which rendered segmentation is scored.
    pub seg_offsets: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            input_timestep: 0,
            forward: 64,
            half_width: 32,
            street_z: 7,
            ranges: Vec::new(),
            seg_offsets: vec![0, 5, 10, 15],
        }
    }
}

impl EvalConfig {
    pub fn ranges_for(&self, spec: &GridSpec) -> Vec<EvalRange> {
        if !self.ranges.is_empty() {
            return self.ranges.iter().map(|&extent| EvalRange { extent }).collect();
        }
        let e = spec.extent();
        [0.25, 0.5, 1.0].map(|f| EvalRange { extent: [e[0] * f, e[1] * f, e[2]] }).to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub rig: RigConfig,
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub voxelize: VoxelizeConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
    pub mode: Precision,
}

pub const REFERENCE_JSON: &str = include_str!("../../../configs/reference.json");

impl RunConfig {
    /// Desk-scale settings for the 64x64x16 reference world: a short depth
    /// range, a small field and a learning rate suited to a few thousand steps.
    pub fn reference() -> Self {
        Self {
            field: FieldConfig {
                encoder: EncoderKind::PerImage,
                feature_dim: 16,
                hidden: vec![32, 32],
                posenc: PosEncConfig {
                    num_frequencies: 4,
                    distance_range: (0.5, 14.0),
                },
                ..Default::default()
            },
            render: RenderConfig {
                samples: 32,
                z_near: 0.5,
                z_far: 14.0,
                stochastic: true,
                ..Default::default()
            },
            train: TrainConfig {
                side_offset_range: (10, 38),
                patches_per_image: 4,
                batch_size: 1,
                optimizer: AdamConfig {
                    learning_rate: 5e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            voxelize: VoxelizeConfig {
                max_depth: 14.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        let s = &self.scene;
        DatasetConfig {
            scene: SceneConfig {
                seed: s.seed,
                dims: s.dims,
                voxel_size: s.voxel_size,
                num_classes: s.num_classes,
                texture: s.texture,
            },
            rig: self.rig.clone(),
            trajectory: s.trajectory.clone(),
            noise: s.noise.clone(),
        }
    }

    /// Field config with image size and class count taken from the scene.
    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            num_classes: self.scene.num_classes,
            image_width: self.rig.width,
            image_height: self.rig.height,
            ..self.field.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: String| ConfigError::Invalid(e);
        self.field_config().validate().map_err(|e| bad(e.to_string()))?;
        self.render.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        if self.voxelize.subdivisions == 0 {
            return Err(bad("voxelize.subdivisions must be >= 1".into()));
        }
        if self.eval.street_z > self.scene.dims[2] {
            return Err(bad(format!("eval.street_z {} exceeds the grid height {}", self.eval.street_z, self.scene.dims[2])));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Overrides one key by dotted path, e.g. `train.steps=10`. The value is
    /// parsed as JSON and taken as a string when that fails.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("expected key=value, got {assignment:?}")))?;
        let value: serde_json::Value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut node = &mut doc;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| ConfigError::Invalid(format!("unknown key {path:?}")))?;
        }
        *node = value;
        let cfg: Self = serde_json::from_value(doc)?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}
