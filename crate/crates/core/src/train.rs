//! Self-supervised fitting: frame selection, patch sampling, loss assembly,
//! optimisation and checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{grad_check, read_checkpoint, CheckReport, GradCheckConfig, write_checkpoint, AdamConfig, Checkpoint, DiffError, OptimizerState, Scalar, Tape, Tensor};
use crate::field::{Bound, EncoderKind, FieldConfig, FieldError, SemanticFieldModel};
use crate::losses::{self, LossError, LossParts, LossSum, LossWeights};
use crate::render::{self, ColorSource, PatchRect, RenderConfig, RenderError};
use crate::rng;
use crate::scene::{CameraId, Frame, Sequence, BACKGROUND};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("sequence too short: need timestep {needed}, have {len}")]
    SequenceTooShort { needed: usize, len: usize },
    #[error("non-finite value in {op} at step {step}, frame t={timestep} {camera}, patches {patches:?}")]
    NonFinite {
        op: String,
        step: u64,
        timestep: usize,
        camera: &'static str,
        patches: Vec<PatchRect>,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which training frames contribute pseudo-labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelViews {
    InputOnly,
    FrontOnly,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// 2 (stereo pair), 4 (plus a later stereo pair) or 8 (plus side views).
    pub n_frames: usize,
    /// Inclusive range of side-view offsets in timesteps.
    pub side_offset_range: (usize, usize),
    /// When set, every side offset equals this value.
    pub fixed_side_offset: Option<usize>,
    /// Offset of the second forward stereo pair.
    pub forward_offset: usize,
    pub patches_per_image: usize,
    pub patch_size: usize,
    /// Samples whose gradients are summed before one optimiser step.
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub use_semantic: bool,
    pub use_photometric: bool,
    pub label_views: LabelViews,
    /// Input timestep for single-scene fitting; drawn at random when unset.
    pub input_timestep: Option<usize>,
    pub optimizer: AdamConfig,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_frames: 8,
            side_offset_range: (10, 40),
            fixed_side_offset: None,
            forward_offset: 5,
            patches_per_image: 32,
            patch_size: 8,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            use_semantic: true,
            use_photometric: true,
            label_views: LabelViews::All,
            input_timestep: Some(0),
            optimizer: AdamConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if ![2, 4, 8].contains(&self.n_frames) {
            return bad(format!("n_frames must be 2, 4 or 8, got {}", self.n_frames));
        }
        let (lo, hi) = self.side_offset_range;
        if lo == 0 || lo > hi {
            return bad(format!("bad side offset range {lo}..={hi}"));
        }
        if self.patch_size < 2 || self.batch_size == 0 {
            return bad("patch_size must be >= 2 and batch_size >= 1".into());
        }
        if !self.use_semantic && !self.use_photometric {
            return bad("at least one of the semantic and photometric losses must be on".into());
        }
        Ok(())
    }

    /// Largest timestep offset a sample can reach from its input frame.
    pub fn max_reach(&self) -> usize {
        match self.n_frames {
            2 => 0,
            4 => self.forward_offset,
            _ => {
                let side = self.fixed_side_offset.unwrap_or(self.side_offset_range.1);
                self.forward_offset.max(side + 1)
            }
        }
    }
}

/// One frame of a training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub timestep: usize,
    pub camera: CameraId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub sequence: usize,
    /// `frames[0]` is the input frame.
    pub frames: Vec<FrameRef>,
}

/// Input and stereo frame at `t0`, a second stereo pair at `t0 + k`, and for
/// each side camera the views at `t0 + o` and `t0 + o + 1`, with `o` drawn
/// independently per side.
pub fn sample_training_frames<R: Rng + ?Sized>(seq_len: usize, t0: usize, cfg: &TrainConfig, rng: &mut R) -> Result<TrainingSample, TrainError> {
    let needed = t0 + cfg.max_reach();
    if needed >= seq_len {
        return Err(TrainError::SequenceTooShort { needed, len: seq_len });
    }
    let f = |timestep, camera| FrameRef { timestep, camera };
    let mut frames = vec![f(t0, CameraId::FrontLeft), f(t0, CameraId::FrontRight)];
    if cfg.n_frames >= 4 {
        frames.push(f(t0 + cfg.forward_offset, CameraId::FrontLeft));
        frames.push(f(t0 + cfg.forward_offset, CameraId::FrontRight));
    }
    if cfg.n_frames >= 8 {
        for cam in [CameraId::SideLeft, CameraId::SideRight] {
            let o = match cfg.fixed_side_offset {
                Some(o) => o,
                None => rng.gen_range(cfg.side_offset_range.0..=cfg.side_offset_range.1),
            };
            frames.push(f(t0 + o, cam));
            frames.push(f(t0 + o + 1, cam));
        }
    }
    Ok(TrainingSample { sequence: 0, frames })
}

/// Uniform top-left corners of `count` patches of `size x size`.
pub fn sample_patches<R: Rng + ?Sized>(width: usize, height: usize, count: usize, size: usize, rng: &mut R) -> Vec<PatchRect> {
    (0..count)
        .map(|_| PatchRect {
            x: rng.gen_range(0..=width - size),
            y: rng.gen_range(0..=height - size),
            width: size,
            height: size,
        })
        .collect()
}

/// Frames that colour the rays of `sample.frames[target]`: every other frame
/// of the sample.
pub fn source_frames(sample: &TrainingSample, target: usize) -> Vec<FrameRef> {
    sample.frames.iter().enumerate().filter(|&(k, _)| k != target).map(|(_, f)| *f).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub sem: f64,
    pub ph: f64,
    pub eas: f64,
    pub total: f64,
}

fn labels_used(cfg: &TrainConfig, index: usize, frame: &FrameRef) -> bool {
    cfg.use_semantic
        && match cfg.label_views {
            LabelViews::InputOnly => index == 0,
            LabelViews::FrontOnly => frame.camera.is_front(),
            LabelViews::All => true,
        }
}

/// `[B, 3, S, S]` colours of the given patches.
fn patch_colors<T: Scalar>(frame: &Frame, patches: &[PatchRect]) -> Result<Tensor<T>, DiffError> {
    let s = patches.first().map_or(0, |p| p.width);
    let mut out = vec![T::ZERO; patches.len() * 3 * s * s];
    for (b, p) in patches.iter().enumerate() {
        for (i, (x, y)) in p.pixels().enumerate() {
            let c = frame.image.get(x, y);
            for ch in 0..3 {
                out[(b * 3 + ch) * s * s + i] = T::from_f64(c[ch] as f64);
            }
        }
    }
    Tensor::new(vec![patches.len(), 3, s, s], out)
}

fn patch_labels(frame: &Frame, patches: &[PatchRect]) -> Vec<u8> {
    let w = frame.width();
    patches.iter().flat_map(|p| p.pixels().map(move |(x, y)| frame.seg[y * w + x])).collect()
}

struct SampleLosses {
    sem: Option<LossSum>,
    ph: Option<LossSum>,
    eas: Vec<crate::diff::Var>,
}

fn nonfinite(err: TrainError, step: u64, frame: &Frame, patches: &[PatchRect]) -> TrainError {
    let op = match &err {
        TrainError::Render(RenderError::Diff(DiffError::NonFinite(op)))
        | TrainError::Render(RenderError::Field(FieldError::Diff(DiffError::NonFinite(op))))
        | TrainError::Loss(LossError::Diff(DiffError::NonFinite(op)))
        | TrainError::Diff(DiffError::NonFinite(op)) => op.clone(),
        _ => return err,
    };
    log::error!(
        "non-finite {op} at step {step}: frame t={} {} patches {patches:?}",
        frame.timestep,
        frame.camera_id.name()
    );
    TrainError::NonFinite {
        op,
        step,
        timestep: frame.timestep,
        camera: frame.camera_id.name(),
        patches: patches.to_vec(),
    }
}

/// Builds the loss graph for one sample and returns the scalar total.
#[allow(clippy::too_many_arguments)]
fn sample_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &SemanticFieldModel<T>,
    bound: &Bound,
    seq: &Sequence,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    render_cfg: &RenderConfig,
    weights: &LossWeights,
    step: u64,
    rng: &mut R,
) -> Result<(crate::diff::Var, [f64; 3]), TrainError> {
    let input_ref = sample.frames[0];
    let input = seq.frame(input_ref.timestep, input_ref.camera);
    let fmap = model.encode(tape, bound, &input.image)?;
    let frames: Vec<&Frame> = sample.frames.iter().map(|f| seq.frame(f.timestep, f.camera)).collect();
    let s = cfg.patch_size;
    let mut acc = SampleLosses {
        sem: None,
        ph: None,
        eas: Vec::new(),
    };
    let merge = |tape: &mut Tape<T>, slot: &mut Option<LossSum>, new: LossSum| -> Result<(), DiffError> {
        *slot = Some(match slot.take() {
            None => new,
            Some(old) => LossSum {
                sum: tape.add(old.sum, new.sum)?,
                count: old.count + new.count,
            },
        });
        Ok(())
    };

    for (fi, frame) in frames.iter().enumerate() {
        if frame.width() < s || frame.height() < s {
            return Err(TrainError::Config(format!("patch size {s} exceeds the image")));
        }
        if cfg.use_photometric {
            let patches = sample_patches(frame.width(), frame.height(), cfg.patches_per_image, s, rng);
            let sources: Vec<ColorSource> = source_frames(sample, fi)
                .iter()
                .map(|r| {
                    let f = seq.frame(r.timestep, r.camera);
                    ColorSource {
                        image: &f.image,
                        camera: f.camera,
                    }
                })
                .collect();
            let res: Result<(), TrainError> = (|| {
                let rays: Vec<_> = patches.iter().flat_map(|p| render::pixel_rays(&frame.camera, p)).collect();
                let out = render::render_rays_tape(tape, model, bound, fmap, &input.camera, &rays, render_cfg, &sources, false, Some(&mut *rng))?;
                let b = patches.len();
                let target = tape.constant(patch_colors(frame, &patches)?);
                let mut recons = Vec::with_capacity(out.colors.len());
                for (rgb, valid) in out.colors {
                    let r = tape.reshape(rgb, &[b, s * s, 3])?;
                    let r = tape.permute(r, &[0, 2, 1])?;
                    recons.push((tape.reshape(r, &[b, 3, s, s])?, valid));
                }
                let labels = patch_labels(frame, &patches);
                let mask: Vec<bool> = labels.iter().map(|&l| l != BACKGROUND).collect();
                let ph = losses::photometric_loss_sum(tape, target, &recons, Some(&mask), weights)?;
                merge(tape, &mut acc.ph, ph)?;
                let depth = tape.clamp(out.depth, Some(1e-3), None)?;
                let depth = tape.reshape(depth, &[b, 1, s, s])?;
                let colors = tape.value(target).clone();
                acc.eas.push(losses::eas_loss(tape, depth, &colors)?);
                Ok(())
            })();
            res.map_err(|e| nonfinite(e, step, frame, &patches))?;
        }
        if labels_used(cfg, fi, &sample.frames[fi]) {
            let patches = sample_patches(frame.width(), frame.height(), cfg.patches_per_image, s, rng);
            let res: Result<(), TrainError> = (|| {
                let rays: Vec<_> = patches.iter().flat_map(|p| render::pixel_rays(&frame.camera, p)).collect();
                let out = render::render_rays_tape(tape, model, bound, fmap, &input.camera, &rays, render_cfg, &[], true, Some(&mut *rng))?;
                let sem = losses::semantic_loss_sum(tape, out.sem.expect("semantic render"), &patch_labels(frame, &patches), weights)?;
                merge(tape, &mut acc.sem, sem)?;
                Ok(())
            })();
            res.map_err(|e| nonfinite(e, step, frame, &patches))?;
        }
    }

    let mut parts = LossParts::default();
    let mut values = [0.0; 3];
    if let Some(sem) = acc.sem {
        let v = sem.mean(tape)?;
        values[0] = tape.value(v).data()[0].to_f64();
        parts.sem = Some(v);
    }
    if let Some(ph) = acc.ph {
        let v = ph.mean(tape)?;
        values[1] = tape.value(v).data()[0].to_f64();
        parts.ph = Some(v);
    }
    if !acc.eas.is_empty() {
        let n = acc.eas.len();
        let mut e = acc.eas[0];
        for &x in &acc.eas[1..] {
            e = tape.add(e, x)?;
        }
        let e = tape.scale(e, 1.0 / n as f64)?;
        values[2] = tape.value(e).data()[0].to_f64();
        parts.eas = Some(e);
    }
    let total = losses::total_loss(tape, &parts, weights)?;
    Ok((total, values))
}

/// One optimiser step over `samples`: gradients of the mean total loss are
/// accumulated sample by sample, then Adam is applied.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut SemanticFieldModel<T>,
    dataset: &[Sequence],
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    render_cfg: &RenderConfig,
    weights: &LossWeights,
    opt: &mut OptimizerState<T>,
    step: u64,
    rng: &mut R,
) -> Result<LossBreakdown, TrainError> {
    accumulate_gradients(model, dataset, samples, cfg, render_cfg, weights, step, rng).and_then(|lb| {
        model.params.ensure_grads();
        opt.step(&mut model.params)?;
        Ok(lb)
    })
}

/// Forward and backward passes without the optimiser update; gradients are
/// left on `model.params`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradients<T: Scalar, R: Rng + ?Sized>(
    model: &mut SemanticFieldModel<T>,
    dataset: &[Sequence],
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    render_cfg: &RenderConfig,
    weights: &LossWeights,
    step: u64,
    rng: &mut R,
) -> Result<LossBreakdown, TrainError> {
    let mut lb = LossBreakdown {
        step,
        ..Default::default()
    };
    let scale = 1.0 / samples.len().max(1) as f64;
    for sample in samples {
        let mut tape = Tape::new();
        let seq = &dataset[sample.sequence];
        let bound = model.bind(&mut tape, true);
        let (total, parts) = sample_loss(&mut tape, model, &bound, seq, sample, cfg, render_cfg, weights, step, rng)?;
        let scaled = tape.scale(total, scale)?;
        let t = tape.value(total).data()[0].to_f64();
        if !t.is_finite() {
            return Err(TrainError::NonFinite {
                op: "total".into(),
                step,
                timestep: sample.frames[0].timestep,
                camera: sample.frames[0].camera.name(),
                patches: Vec::new(),
            });
        }
        if tape.requires_grad(scaled) {
            tape.backward(scaled)?;
            tape.accumulate_into(&mut model.params)?;
        }
        lb.sem += scale * parts[0];
        lb.ph += scale * parts[1];
        lb.eas += scale * parts[2];
        lb.total += scale * t;
    }
    Ok(lb)
}

/// Samples for one step, drawn from the step's own random stream.
pub fn draw_samples<R: Rng + ?Sized>(dataset: &[Sequence], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<TrainingSample>, TrainError> {
    (0..cfg.batch_size)
        .map(|_| {
            let si = rng.gen_range(0..dataset.len());
            let len = dataset[si].len();
            let t0 = match cfg.input_timestep {
                Some(t) => t,
                None => {
                    let reach = cfg.max_reach();
                    if reach >= len {
                        return Err(TrainError::SequenceTooShort { needed: reach, len });
                    }
                    rng.gen_range(0..len - reach)
                }
            };
            let mut s = sample_training_frames(len, t0, cfg, rng)?;
            s.sequence = si;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for checkpoints and the loss CSV; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this step even if `steps` is larger (for interrupted runs).
    pub stop_after: Option<u64>,
}

pub struct FitResult<T: Scalar> {
    pub model: SemanticFieldModel<T>,
    pub optimizer: OptimizerState<T>,
    pub losses: Vec<LossBreakdown>,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

pub const LOSS_CSV_HEADER: &str = "step,sem,ph,eas,total";

pub fn checkpoint_of<T: Scalar>(model: &SemanticFieldModel<T>, opt: &OptimizerState<T>) -> Checkpoint {
    let mut ck = Checkpoint::from_params(&model.params);
    for i in 0..model.params.len() {
        let name = model.params.name(i);
        let shape = model.params.tensor(i).shape().to_vec();
        ck.push_exact(format!("adam.m.{name}"), &Tensor::new(shape.clone(), opt.first[i].clone()).expect("moment shape"));
        ck.push_exact(format!("adam.v.{name}"), &Tensor::new(shape, opt.second[i].clone()).expect("moment shape"));
    }
    ck.push("adam.step", &Tensor::<f64>::scalar(opt.step as f64));
    ck
}

/// Restores parameters and, when present, optimiser moments.
pub fn restore<T: Scalar>(ck: &Checkpoint, model: &mut SemanticFieldModel<T>, opt: &mut OptimizerState<T>) -> Result<(), TrainError> {
    ck.load_into(&mut model.params)?;
    for i in 0..model.params.len() {
        let name = model.params.name(i).to_string();
        if let (Some((_, m)), Some((_, v))) = (ck.get_exact(&format!("adam.m.{name}")), ck.get_exact(&format!("adam.v.{name}"))) {
            opt.first[i] = m.into_iter().map(T::from_f64).collect();
            opt.second[i] = v.into_iter().map(T::from_f64).collect();
        }
    }
    if let Some(s) = ck.get("adam.step") {
        opt.step = s.data()[0] as u64;
    }
    Ok(())
}

fn csv_row(l: &LossBreakdown) -> String {
    format!("{},{:e},{:e},{:e},{:e}", l.step, l.sem, l.ph, l.eas, l.total)
}

fn prepare_csv(path: &Path, keep_through: u64) -> Result<fs::File, TrainError> {
    let mut kept = vec![LOSS_CSV_HEADER.to_string()];
    if keep_through > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                if step <= keep_through {
                    kept.push(line.to_string());
                }
            }
        }
    }
    let mut f = fs::File::create(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

/// Runs `cfg.steps` optimiser steps. Step `s` (1-based) draws from a random
/// stream keyed by `(seed, s)`, so a resumed run sees the same samples.
pub fn fit<T: Scalar>(
    dataset: &[Sequence],
    field_cfg: &FieldConfig,
    cfg: &TrainConfig,
    render_cfg: &RenderConfig,
    weights: &LossWeights,
    opts: &FitOptions,
) -> Result<FitResult<T>, TrainError> {
    cfg.validate()?;
    render_cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    if field_cfg.encoder == EncoderKind::PerImage && (dataset.len() != 1 || cfg.input_timestep.is_none()) {
        return Err(TrainError::Config("per-image features need one sequence and a fixed input timestep".into()));
    }
    let mut model = SemanticFieldModel::<T>::new(field_cfg.clone(), rng::derive_seed(cfg.seed, "model", 0))?;
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut start = 0u64;
    if let Some(path) = &opts.resume {
        restore(&read_checkpoint(path)?, &mut model, &mut opt)?;
        start = opt.step;
    }
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(prepare_csv(&dir.join("loss.csv"), start)?)
        }
        None => None,
    };
    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut losses = Vec::new();
    let save = |model: &SemanticFieldModel<T>, opt: &OptimizerState<T>, name: String| -> Result<Option<PathBuf>, TrainError> {
        match &opts.out_dir {
            Some(dir) => {
                let path = dir.join(name);
                write_checkpoint(&path, &checkpoint_of(model, opt))?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    };
    for step in start + 1..=end {
        let mut rng = rng::stream(cfg.seed, "train-step", step);
        let samples = draw_samples(dataset, cfg, &mut rng)?;
        model.params.zero_grads();
        let lb = train_step(&mut model, dataset, &samples, cfg, render_cfg, weights, &mut opt, step, &mut rng)?;
        if let Some(f) = &mut csv {
            writeln!(f, "{}", csv_row(&lb))?;
        }
        log::debug!("step {step}: {lb:?}");
        losses.push(lb);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save(&model, &opt, format!("step_{step:06}.s4cp"))?;
        }
    }
    let checkpoint = save(&model, &opt, "final.s4cp".to_string())?;
    Ok(FitResult {
        model,
        optimizer: opt,
        losses,
        checkpoint,
        loss_csv: opts.out_dir.as_ref().map(|d| d.join("loss.csv")),
    })
}

/// Rebuilds a model from a checkpoint written by [`fit`].
pub fn load_model<T: Scalar>(field_cfg: &FieldConfig, path: &Path) -> Result<SemanticFieldModel<T>, TrainError> {
    let mut model = SemanticFieldModel::<T>::new(field_cfg.clone(), 0)?;
    read_checkpoint(path)?.load_into(&mut model.params)?;
    Ok(model)
}

/// One gradient check of [`gradient_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteEntry {
    pub term: String,
    pub report: CheckReport,
}

/// Checks gradients of each loss term and of the weighted total through the
/// full pipeline (encoder, field, rendering, losses) against central
/// differences, in 64-bit arithmetic with 2x2 patches and 4 samples per ray.
pub fn gradient_suite(seq: &Sequence, encoder: EncoderKind, seed: u64, tol: f64) -> Result<Vec<GradSuiteEntry>, TrainError> {
    let first = &seq.frames[0];
    let field_cfg = FieldConfig {
        encoder,
        feature_dim: 4,
        hidden: vec![8, 8],
        num_classes: seq.world.num_classes(),
        image_width: first.width(),
        image_height: first.height(),
        // dense enough that rays carry weight inside a few samples
        initial_density: 0.5,
        ..Default::default()
    };
    let mut model = SemanticFieldModel::<f64>::new(field_cfg, seed)?;
    // Zero biases put ReLU inputs exactly on the kink wherever a layer's
    // input vanishes; move to a generic point.
    let mut jitter = rng::stream(seed, "gradcheck-bias", 0);
    for i in 0..model.params.len() {
        if model.params.name(i).ends_with(".bias") {
            for b in model.params.tensor_mut(i).data_mut() {
                *b += jitter.gen_range(-0.1..0.1);
            }
        }
    }
    let cfg = TrainConfig {
        n_frames: 4,
        patches_per_image: 1,
        patch_size: 2,
        batch_size: 1,
        input_timestep: Some(0),
        ..Default::default()
    };
    let render_cfg = RenderConfig {
        samples: 4,
        z_near: 1.0,
        z_far: 12.0,
        stochastic: true,
        ..Default::default()
    };
    let sample = sample_training_frames(seq.len(), 0, &cfg, &mut rng::stream(seed, "gradcheck-frames", 0))?;
    let base = LossWeights::default();
    let terms = [
        ("semantic", LossWeights { lambda_seg: 1.0, lambda_ph: 0.0, lambda_eas: 0.0, ..base.clone() }),
        ("photometric", LossWeights { lambda_seg: 0.0, lambda_ph: 1.0, lambda_eas: 0.0, ..base.clone() }),
        ("smoothness", LossWeights { lambda_seg: 0.0, lambda_ph: 0.0, lambda_eas: 1.0, ..base.clone() }),
        ("total", base.clone()),
    ];
    let gc = GradCheckConfig {
        h: 1e-6,
        tol,
        max_coords: 16,
        seed,
    };
    let mut out = Vec::new();
    for (term, weights) in terms {
        let report = grad_check(
            |tape, vars| {
                let bound = Bound { vars: vars.to_vec() };
                let mut r = rng::stream(seed, "gradcheck-step", 0);
                sample_loss(tape, &model, &bound, seq, &sample, &cfg, &render_cfg, &weights, 0, &mut r)
                    .map(|(v, _)| v)
                    .map_err(|e| match e {
                        TrainError::Diff(d) => d,
                        other => DiffError::Shape(other.to_string()),
                    })
            },
            &model.params,
            &gc,
        )?;
        out.push(GradSuiteEntry {
            term: term.to_string(),
            report,
        });
    }
    Ok(out)
}
