//! The semantic field: a pixel-aligned feature map plus two MLP heads that
//! decode density and class logits at 3D points inside the input frustum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera, PosEncConfig, Vec3};
use crate::diff::{DiffError, ParamStore, Scalar, Tape, Tensor, Var};
use crate::image::RgbImage;
use crate::rng;
use crate::scene::VoxelWorld;

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("invalid field config: {0}")]
    Config(String),
    #[error("image is {got:?}, model expects {expected:?}")]
    ImageSize { expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// A directly learnable feature map (single-scene fitting).
    PerImage,
    /// Three stride-2 conv blocks and a mirrored decoder with skips.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub encoder: EncoderKind,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub posenc: PosEncConfig,
    pub image_width: usize,
    pub image_height: usize,
    /// Density produced by the untrained model, in 1/m.
    pub initial_density: f64,
    /// Half-width of the uniform init of the per-image feature map.
    pub feature_init: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::PerImage,
            feature_dim: 64,
            hidden: vec![64, 64],
            num_classes: 6,
            posenc: PosEncConfig::default(),
            image_width: 96,
            image_height: 48,
            initial_density: 0.05,
            feature_init: 0.1,
        }
    }
}

impl FieldConfig {
    /// Features plus encodings of distance and both pixel coordinates.
    pub fn input_width(&self) -> usize {
        self.feature_dim + self.posenc.width(3)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::Config(m.to_string()));
        if self.feature_dim == 0 || self.num_classes < 2 || self.hidden.iter().any(|&h| h == 0) {
            return bad("feature_dim, hidden widths must be positive and num_classes >= 2");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        if self.encoder == EncoderKind::Conv && (self.image_width % 8 != 0 || self.image_height % 8 != 0) {
            return bad("conv encoder needs image sides divisible by 8");
        }
        let (lo, hi) = self.posenc.distance_range;
        if !(hi > lo) {
            return bad("posenc distance range must be increasing");
        }
        if !(self.initial_density > 0.0) {
            return bad("initial_density must be positive");
        }
        Ok(())
    }
}

/// A pixel-aligned `[H, W, C]` feature map for one input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    pub values: Tensor<T>,
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub logits: Vec<f64>,
    pub valid: bool,
}

/// Structure-of-arrays query result.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldBatch {
    pub sigma: Vec<f64>,
    /// `N x c`, row-major.
    pub logits: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FieldBatch {
    pub fn sample(&self, i: usize, c: usize) -> FieldSample {
        FieldSample {
            sigma: self.sigma[i],
            logits: self.logits[i * c..(i + 1) * c].to_vec(),
            valid: self.valid[i],
        }
    }
}

/// Anything that maps world points to density and class logits.
pub trait Field: Sync {
    fn num_classes(&self) -> usize;
    fn query_points(&self, points: &[Vec3]) -> Result<FieldBatch, FieldError>;
}

/// Tape handles for a model's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Tape-level query output for `N` points.
#[derive(Clone, Debug)]
pub struct QueryVars {
    /// `[N]`
    pub sigma: Var,
    /// `[N, c]`; absent for density-only queries.
    pub logits: Option<Var>,
    pub valid: Vec<bool>,
}

struct Layer {
    w: usize,
    b: usize,
}

pub struct SemanticFieldModel<T: Scalar> {
    pub config: FieldConfig,
    pub params: ParamStore<T>,
    density: Vec<Layer>,
    semantic: Vec<Layer>,
    features: Option<usize>,
    conv: Vec<Layer>,
}

impl<T: Scalar> Clone for SemanticFieldModel<T> {
    fn clone(&self) -> Self {
        Self::with_params(self.config.clone(), self.params.clone()).expect("cloned model is consistent")
    }
}

const CONV_BLOCKS: [&str; 6] = ["e1", "e2", "e3", "d2", "d1", "out"];

fn conv_shapes(c: usize) -> [[usize; 4]; 6] {
    [
        [16, 3, 3, 3],
        [32, 16, 3, 3],
        [64, 32, 3, 3],
        [32, 64 + 32, 3, 3],
        [16, 32 + 16, 3, 3],
        [c, 16 + 3, 3, 3],
    ]
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound))).with_grad()
}

impl<T: Scalar> SemanticFieldModel<T> {
    /// Fresh model. Weights are fan-in scaled uniform; the density head's
    /// output bias is set so the initial density is `initial_density`.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self, FieldError> {
        config.validate()?;
        let mut rng = rng::stream(seed, "field-init", 0);
        let mut params = ParamStore::new();
        match config.encoder {
            EncoderKind::PerImage => {
                let shape = vec![config.image_height, config.image_width, config.feature_dim];
                params.insert("features", uniform(&mut rng, shape, config.feature_init));
            }
            EncoderKind::Conv => {
                for (name, s) in CONV_BLOCKS.iter().zip(conv_shapes(config.feature_dim)) {
                    let fan_in = (s[1] * s[2] * s[3]) as f64;
                    params.insert(format!("encoder.{name}.weight"), uniform(&mut rng, s.to_vec(), (6.0 / fan_in).sqrt()));
                    params.insert(format!("encoder.{name}.bias"), Tensor::zeros(vec![s[0], 1, 1]).with_grad());
                }
            }
        }
        let inp = config.input_width();
        for (head, out) in [("density", 1), ("semantic", config.num_classes)] {
            let mut width = inp;
            let widths: Vec<usize> = config.hidden.iter().copied().chain([out]).collect();
            let last = widths.len() - 1;
            for (i, &wout) in widths.iter().enumerate() {
                let bound = if i == last { (1.0 / width as f64).sqrt() } else { (6.0 / width as f64).sqrt() };
                params.insert(format!("{head}.{i}.weight"), uniform(&mut rng, vec![width, wout], bound));
                let mut b = Tensor::zeros(vec![wout]);
                if head == "density" && i == last {
                    // softplus^-1
                    let s0 = config.initial_density;
                    b.data_mut()[0] = T::from_f64(s0.exp_m1().ln());
                }
                params.insert(format!("{head}.{i}.bias"), b.with_grad());
                width = wout;
            }
        }
        Self::with_params(config, params)
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn with_params(config: FieldConfig, params: ParamStore<T>) -> Result<Self, FieldError> {
        config.validate()?;
        let find = |name: &str, shape: &[usize]| -> Result<usize, FieldError> {
            let i = params
                .index_of(name)
                .ok_or_else(|| FieldError::Config(format!("missing parameter {name}")))?;
            if params.tensor(i).shape() != shape {
                return Err(FieldError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.tensor(i).shape()
                )));
            }
            Ok(i)
        };
        let mut features = None;
        let mut conv = Vec::new();
        match config.encoder {
            EncoderKind::PerImage => {
                features = Some(find("features", &[config.image_height, config.image_width, config.feature_dim])?);
            }
            EncoderKind::Conv => {
                for (name, s) in CONV_BLOCKS.iter().zip(conv_shapes(config.feature_dim)) {
                    conv.push(Layer {
                        w: find(&format!("encoder.{name}.weight"), &s)?,
                        b: find(&format!("encoder.{name}.bias"), &[s[0], 1, 1])?,
                    });
                }
            }
        }
        let mut heads = Vec::new();
        for (head, out) in [("density", 1), ("semantic", config.num_classes)] {
            let mut layers = Vec::new();
            let mut width = config.input_width();
            for (i, &wout) in config.hidden.iter().chain([&out]).enumerate() {
                layers.push(Layer {
                    w: find(&format!("{head}.{i}.weight"), &[width, wout])?,
                    b: find(&format!("{head}.{i}.bias"), &[wout])?,
                });
                width = wout;
            }
            heads.push(layers);
        }
        let semantic = heads.pop().unwrap();
        let density = heads.pop().unwrap();
        Ok(Self {
            config,
            params,
            density,
            semantic,
            features,
            conv,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Binds every parameter on the tape; with `trainable = false` they are
    /// recorded as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = (0..self.params.len())
            .map(|i| {
                if trainable {
                    tape.param(&self.params, i)
                } else {
                    tape.constant(self.params.tensor(i).detached())
                }
            })
            .collect();
        Bound { vars }
    }

    fn check_image(&self, image: &RgbImage) -> Result<(), FieldError> {
        let expected = (self.config.image_width, self.config.image_height);
        if (image.width, image.height) != expected {
            return Err(FieldError::ImageSize {
                expected,
                got: (image.width, image.height),
            });
        }
        Ok(())
    }

    /// Feature map `[H, W, C]` for `image`.
    pub fn encode(&self, tape: &mut Tape<T>, bound: &Bound, image: &RgbImage) -> Result<Var, FieldError> {
        self.check_image(image)?;
        if let Some(f) = self.features {
            return Ok(bound.vars[f]);
        }
        let (h, w) = (image.height, image.width);
        let mut chw = vec![T::ZERO; 3 * h * w];
        for (p, px) in image.data.chunks(3).enumerate() {
            for ch in 0..3 {
                chw[ch * h * w + p] = T::from_f64(px[ch] as f64);
            }
        }
        let x = tape.constant(Tensor::new(vec![1, 3, h, w], chw)?);
        let l = &self.conv;
        let block = |tape: &mut Tape<T>, x: Var, layer: &Layer, stride: usize, relu: bool| -> Result<Var, DiffError> {
            let y = tape.conv2d(x, bound.vars[layer.w], stride, 1)?;
            let y = tape.add(y, bound.vars[layer.b])?;
            if relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        };
        let e1 = block(tape, x, &l[0], 2, true)?;
        let e2 = block(tape, e1, &l[1], 2, true)?;
        let e3 = block(tape, e2, &l[2], 2, true)?;
        let u3 = tape.upsample2x(e3)?;
        let c2 = tape.concat(&[u3, e2], 1)?;
        let d2 = block(tape, c2, &l[3], 1, true)?;
        let u2 = tape.upsample2x(d2)?;
        let c1 = tape.concat(&[u2, e1], 1)?;
        let d1 = block(tape, c1, &l[4], 1, true)?;
        let u1 = tape.upsample2x(d1)?;
        let c0 = tape.concat(&[u1, x], 1)?;
        let out = block(tape, c0, &l[5], 1, false)?;
        let c = self.config.feature_dim;
        let flat = tape.reshape(out, &[c, h * w])?;
        let hwc = tape.transpose(flat)?;
        Ok(tape.reshape(hwc, &[h, w, c])?)
    }

    /// Evaluated feature map, without gradients.
    pub fn feature_map(&self, image: &RgbImage, source: usize) -> Result<FeatureMap<T>, FieldError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = self.encode(&mut tape, &bound, image)?;
        Ok(FeatureMap {
            values: tape.value(f).detached(),
            source,
        })
    }

    fn mlp(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, layers: &[Layer]) -> Result<Var, DiffError> {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            h = tape.linear(h, bound.vars[l.w], bound.vars[l.b])?;
            if i + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Density and logits for `points` on the tape. Points outside the input
    /// frustum get zero density and zero logits and carry no gradient.
    pub fn query_vars(&self, tape: &mut Tape<T>, bound: &Bound, fmap: Var, cam: &Camera, points: &[Vec3]) -> Result<QueryVars, FieldError> {
        self.query_impl(tape, bound, fmap, cam, points, true)
    }

    /// As [`Self::query_vars`] without evaluating the semantic head.
    pub fn query_density_vars(&self, tape: &mut Tape<T>, bound: &Bound, fmap: Var, cam: &Camera, points: &[Vec3]) -> Result<QueryVars, FieldError> {
        self.query_impl(tape, bound, fmap, cam, points, false)
    }

    fn query_impl(&self, tape: &mut Tape<T>, bound: &Bound, fmap: Var, cam: &Camera, points: &[Vec3], semantics: bool) -> Result<QueryVars, FieldError> {
        let n = points.len();
        let c = self.config.num_classes;
        let pe = &self.config.posenc;
        let l = pe.num_frequencies;
        let mut rows = Vec::new();
        let mut coords = Vec::new();
        let mut enc = Vec::new();
        let mut valid = vec![false; n];
        let mut scratch = Vec::with_capacity(6 * l);
        for (i, &x) in points.iter().enumerate() {
            let p = camera::project(&cam.intrinsics, &cam.pose, x);
            if !p.in_view {
                continue;
            }
            valid[i] = true;
            rows.push(i);
            coords.push(T::from_f64(p.pixel[0]));
            coords.push(T::from_f64(p.pixel[1]));
            let d = camera::norm(camera::sub(x, cam.pose.center()));
            let u = camera::normalize_pixel(&cam.intrinsics, p.pixel);
            scratch.clear();
            camera::posenc_into(pe.normalize_distance(d), l, &mut scratch);
            camera::posenc_into(u[0], l, &mut scratch);
            camera::posenc_into(u[1], l, &mut scratch);
            enc.extend(scratch.iter().map(|&v| T::from_f64(v)));
        }
        if rows.is_empty() {
            return Ok(QueryVars {
                sigma: tape.constant(Tensor::zeros(vec![n])),
                logits: semantics.then(|| tape.constant(Tensor::zeros(vec![n, c]))),
                valid,
            });
        }
        let k = rows.len();
        let coords = tape.constant(Tensor::new(vec![k, 2], coords)?);
        let feats = tape.bilinear_sample(fmap, coords)?;
        let enc = tape.constant(Tensor::new(vec![k, 6 * l], enc)?);
        let input = tape.concat(&[feats, enc], 1)?;
        let raw = self.mlp(tape, bound, input, &self.density)?;
        let sigma = tape.softplus(raw)?;
        let sigma = tape.reshape(sigma, &[k])?;
        let mut logits = if semantics { Some(self.mlp(tape, bound, input, &self.semantic)?) } else { None };
        let mut sigma = sigma;
        if k != n {
            sigma = tape.scatter_rows(sigma, &rows, n)?;
            if let Some(l) = logits {
                logits = Some(tape.scatter_rows(l, &rows, n)?);
            }
        }
        Ok(QueryVars { sigma, logits, valid })
    }

    pub fn query_batch(&self, fmap: &FeatureMap<T>, cam: &Camera, points: &[Vec3]) -> Result<FieldBatch, FieldError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = tape.constant(fmap.values.detached());
        let q = self.query_vars(&mut tape, &bound, f, cam, points)?;
        Ok(FieldBatch {
            sigma: tape.value(q.sigma).to_f64_vec(),
            logits: tape.value(q.logits.expect("semantic query")).to_f64_vec(),
            valid: q.valid,
        })
    }

    pub fn query(&self, fmap: &FeatureMap<T>, cam: &Camera, x: Vec3) -> Result<FieldSample, FieldError> {
        Ok(self.query_batch(fmap, cam, &[x])?.sample(0, self.config.num_classes))
    }
}

/// A fitted model bound to one input frame, usable wherever a [`Field`] is.
pub struct ModelField<'a, T: Scalar> {
    pub model: &'a SemanticFieldModel<T>,
    pub fmap: FeatureMap<T>,
    pub camera: Camera,
    pub chunk: usize,
}

impl<'a, T: Scalar> ModelField<'a, T> {
    pub fn new(model: &'a SemanticFieldModel<T>, image: &RgbImage, camera: Camera) -> Result<Self, FieldError> {
        Ok(Self {
            model,
            fmap: model.feature_map(image, 0)?,
            camera,
            chunk: 8192,
        })
    }
}

impl<T: Scalar> Field for ModelField<'_, T> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn query_points(&self, points: &[Vec3]) -> Result<FieldBatch, FieldError> {
        let mut out = FieldBatch::default();
        for chunk in points.chunks(self.chunk.max(1)) {
            let b = self.model.query_batch(&self.fmap, &self.camera, chunk)?;
            out.sigma.extend(b.sigma);
            out.logits.extend(b.logits);
            out.valid.extend(b.valid);
        }
        Ok(out)
    }
}

/// The exact indicator of a voxel world: constant density inside occupied
/// voxels, zero elsewhere, and one-hot logits of the voxel class.
#[derive(Clone, Copy, Debug)]
pub struct IndicatorField<'a> {
    pub world: &'a VoxelWorld,
    pub density: f64,
}

impl<'a> IndicatorField<'a> {
    /// Density `10 / voxel_size`.
    pub fn new(world: &'a VoxelWorld) -> Self {
        Self {
            world,
            density: 10.0 / world.voxel_size,
        }
    }
}

impl Field for IndicatorField<'_> {
    fn num_classes(&self) -> usize {
        self.world.num_classes()
    }

    fn query_points(&self, points: &[Vec3]) -> Result<FieldBatch, FieldError> {
        let c = self.num_classes();
        let mut out = FieldBatch {
            sigma: vec![0.0; points.len()],
            logits: vec![0.0; points.len() * c],
            valid: vec![true; points.len()],
        };
        for (i, &p) in points.iter().enumerate() {
            let l = self.world.label_at(p) as usize;
            if l != 0 {
                out.sigma[i] = self.density;
                out.logits[i * c + l] = 1.0;
            }
        }
        Ok(out)
    }
}
