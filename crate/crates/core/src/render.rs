//! Volume rendering along rays: depth sampling, alpha compositing, per-point
//! softmax semantics, expected depth and image-based colour.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera, Ray, Vec3};
use crate::diff::{Scalar, Tape, Tensor, Var};
use crate::field::{Bound, Field, FieldError, SemanticFieldModel};
use crate::image::RgbImage;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("no colour sources")]
    NoSources,
    #[error("patch {0:?} outside a {1}x{2} image")]
    Patch(PatchRect, usize, usize),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    /// Bins uniform in 1/z.
    InverseDepth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples: usize,
    pub z_near: f64,
    pub z_far: f64,
    pub spacing: Spacing,
    /// Jitter within bins instead of taking midpoints.
    pub stochastic: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            z_near: 3.0,
            z_far: 80.0,
            spacing: Spacing::InverseDepth,
            stochastic: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.samples == 0 {
            return Err(RenderError::Config("samples must be >= 1".into()));
        }
        if !(self.z_near > 0.0 && self.z_near < self.z_far) {
            return Err(RenderError::Config(format!(
                "need 0 < z_near < z_far, got {} and {}",
                self.z_near, self.z_far
            )));
        }
        Ok(())
    }

    /// Bin edges along the ray, nearest first.
    pub fn bin_edges(&self) -> Vec<f64> {
        let m = self.samples;
        (0..=m)
            .map(|i| {
                let s = i as f64 / m as f64;
                match self.spacing {
                    Spacing::Linear => self.z_near + s * (self.z_far - self.z_near),
                    Spacing::InverseDepth => {
                        let (a, b) = (1.0 / self.z_near, 1.0 / self.z_far);
                        1.0 / (a + s * (b - a))
                    }
                }
            })
            .collect()
    }
}

/// Sample distances and their segment lengths. Each sample stands for its
/// bin, so `delta_i` is the bin width and the deltas tile `[z_near, z_far]`.
/// Jitter is drawn only when `cfg.stochastic` and an rng is given.
pub fn sample_depths<R: Rng + ?Sized>(cfg: &RenderConfig, rng: Option<&mut R>) -> (Vec<f64>, Vec<f64>) {
    let edges = cfg.bin_edges();
    let m = cfg.samples;
    let mut depths = Vec::with_capacity(m);
    let mut deltas = Vec::with_capacity(m);
    let mut rng = rng.filter(|_| cfg.stochastic);
    for i in 0..m {
        let s = match rng.as_deref_mut() {
            Some(r) => r.gen_range(0.0..1.0),
            None => 0.5,
        };
        let d = match cfg.spacing {
            Spacing::Linear => edges[i] + s * (edges[i + 1] - edges[i]),
            Spacing::InverseDepth => {
                let (a, b) = (1.0 / edges[i], 1.0 / edges[i + 1]);
                1.0 / (a + s * (b - a))
            }
        };
        depths.push(d);
        deltas.push(edges[i + 1] - edges[i]);
    }
    (depths, deltas)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayComposite {
    pub alphas: Vec<f64>,
    pub transmittances: Vec<f64>,
    pub weights: Vec<f64>,
    pub deltas: Vec<f64>,
    pub depths: Vec<f64>,
}

impl RayComposite {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Probability that the ray passes every sample.
    pub fn residual(&self) -> f64 {
        match (self.transmittances.last(), self.alphas.last()) {
            (Some(t), Some(a)) => t * (1.0 - a),
            _ => 1.0,
        }
    }
}

pub fn composite(sigmas: &[f64], deltas: &[f64], depths: &[f64]) -> RayComposite {
    let m = sigmas.len();
    let mut alphas = Vec::with_capacity(m);
    let mut trans = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut acc = 0.0;
    for i in 0..m {
        let tau = sigmas[i] * deltas[i];
        let t = (-acc).exp();
        let a = -(-tau).exp_m1();
        alphas.push(a);
        trans.push(t);
        weights.push(t * a);
        acc += tau;
    }
    RayComposite {
        alphas,
        transmittances: trans,
        weights,
        deltas: deltas.to_vec(),
        depths: depths.to_vec(),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `sum_i w_i softmax(l_i)`; the softmax is taken per point.
pub fn render_semantics(comp: &RayComposite, logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (i, w) in comp.weights.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(softmax(&logits[i * c..(i + 1) * c])) {
            *o += w * p;
        }
    }
    out
}

/// Expected termination depth; `None` when no weight lands on the ray.
pub fn render_depth(comp: &RayComposite) -> Option<f64> {
    if comp.weight_sum() <= 0.0 {
        return None;
    }
    Some(comp.weights.iter().zip(&comp.depths).map(|(w, d)| w * d).sum())
}

/// A posed image that colours can be borrowed from.
#[derive(Clone, Copy, Debug)]
pub struct ColorSource<'a> {
    pub image: &'a RgbImage,
    pub camera: Camera,
}

/// Minimum share of the ray's weight that must project into a source for
/// its colour to count.
pub const VALID_WEIGHT_SHARE: f64 = 0.99;

/// Colour of each sample in a source, or `None` when it projects outside.
fn sample_source(src: &ColorSource, x: Vec3) -> Option<[f64; 3]> {
    let p = camera::project(&src.camera.intrinsics, &src.camera.pose, x);
    p.in_view.then(|| src.image.sample(p.pixel[0], p.pixel[1]))
}

pub fn render_color(comp: &RayComposite, points: &[Vec3], sources: &[ColorSource]) -> Result<Vec<([f64; 3], bool)>, RenderError> {
    if sources.is_empty() {
        return Err(RenderError::NoSources);
    }
    let total = comp.weight_sum();
    Ok(sources
        .iter()
        .map(|src| {
            let mut rgb = [0.0; 3];
            let mut inside = 0.0;
            for (x, w) in points.iter().zip(&comp.weights) {
                if let Some(c) = sample_source(src, *x) {
                    inside += w;
                    for ch in 0..3 {
                        rgb[ch] += w * c[ch];
                    }
                }
            }
            (rgb, total > 0.0 && inside >= VALID_WEIGHT_SHARE * total)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PatchRect {
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y..self.y + self.height).flat_map(move |y| (self.x..self.x + self.width).map(move |x| (x, y)))
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.width <= width && self.y + self.height <= height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelRender {
    pub sem_dist: Vec<f64>,
    /// Expected depth; meaningful only when `has_surface`.
    pub depth: f64,
    pub has_surface: bool,
    pub colors: Vec<([f64; 3], bool)>,
    pub residual: f64,
}

pub fn pixel_rays(cam: &Camera, rect: &PatchRect) -> Vec<Ray> {
    rect.pixels()
        .map(|(x, y)| camera::ray_unchecked(&cam.intrinsics, &cam.pose, [x as f64 + 0.5, y as f64 + 0.5]))
        .collect()
}

/// Renders every ray with any [`Field`]. Colour is produced only when
/// `sources` is non-empty.
pub fn render_rays<R: Rng + ?Sized>(
    field: &dyn Field,
    rays: &[Ray],
    cfg: &RenderConfig,
    sources: &[ColorSource],
    mut rng: Option<&mut R>,
) -> Result<Vec<PixelRender>, RenderError> {
    cfg.validate()?;
    let m = cfg.samples;
    let c = field.num_classes();
    let mut samples = Vec::with_capacity(rays.len());
    let mut points = Vec::with_capacity(rays.len() * m);
    for ray in rays {
        let (d, delta) = sample_depths(cfg, rng.as_deref_mut());
        points.extend(d.iter().map(|&t| ray.point_at(t)));
        samples.push((d, delta));
    }
    let q = field.query_points(&points)?;
    let mut out = Vec::with_capacity(rays.len());
    for (r, (d, delta)) in samples.iter().enumerate() {
        let comp = composite(&q.sigma[r * m..(r + 1) * m], delta, d);
        let depth = render_depth(&comp);
        let colors = if sources.is_empty() {
            Vec::new()
        } else {
            render_color(&comp, &points[r * m..(r + 1) * m], sources)?
        };
        out.push(PixelRender {
            sem_dist: render_semantics(&comp, &q.logits[r * m * c..(r + 1) * m * c], c),
            depth: depth.unwrap_or(0.0),
            has_surface: depth.is_some(),
            colors,
            residual: comp.residual(),
        });
    }
    Ok(out)
}

pub fn render_patch<R: Rng + ?Sized>(
    field: &dyn Field,
    target: &Camera,
    rect: &PatchRect,
    cfg: &RenderConfig,
    sources: &[ColorSource],
    rng: Option<&mut R>,
) -> Result<Vec<PixelRender>, RenderError> {
    if !rect.fits(target.intrinsics.width, target.intrinsics.height) {
        return Err(RenderError::Patch(*rect, target.intrinsics.width, target.intrinsics.height));
    }
    render_rays(field, &pixel_rays(target, rect), cfg, sources, rng)
}

/// Full-frame maps rendered deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub has_surface: Vec<bool>,
    /// Argmax of the rendered distribution.
    pub segmentation: Vec<u8>,
    /// Colour from the first valid source, when sources were given.
    pub color: Option<RgbImage>,
}

pub fn render_view(field: &dyn Field, target: &Camera, cfg: &RenderConfig, sources: &[ColorSource]) -> Result<RenderedView, RenderError> {
    let (w, h) = (target.intrinsics.width, target.intrinsics.height);
    let det = RenderConfig {
        stochastic: false,
        ..cfg.clone()
    };
    let mut view = RenderedView {
        width: w,
        height: h,
        depth: Vec::with_capacity(w * h),
        has_surface: Vec::with_capacity(w * h),
        segmentation: Vec::with_capacity(w * h),
        color: (!sources.is_empty()).then(|| RgbImage::new(w, h)),
    };
    for y in 0..h {
        let rect = PatchRect {
            x: 0,
            y,
            width: w,
            height: 1,
        };
        let px = render_patch::<rand_chacha::ChaCha8Rng>(field, target, &rect, &det, sources, None)?;
        for (x, p) in px.into_iter().enumerate() {
            view.depth.push(p.depth);
            view.has_surface.push(p.has_surface);
            view.segmentation.push(argmax(&p.sem_dist) as u8);
            if let Some(img) = &mut view.color {
                // first valid source, else the first one
                let pick = p.colors.iter().find(|c| c.1).unwrap_or(&p.colors[0]).0;
                img.set(x, y, [pick[0] as f32, pick[1] as f32, pick[2] as f32]);
            }
        }
    }
    Ok(view)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Tape-level render of a ray batch for training.
pub struct RayBatchVars {
    /// `[R, m]`
    pub weights: Var,
    /// `[R, c]`, when semantics were requested.
    pub sem: Option<Var>,
    /// `[R]`
    pub depth: Var,
    /// Per source: `[R, 3]` colours and per-ray validity.
    pub colors: Vec<(Var, Vec<bool>)>,
    pub weight_sum: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn render_rays_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &SemanticFieldModel<T>,
    bound: &Bound,
    fmap: Var,
    input_cam: &Camera,
    rays: &[Ray],
    cfg: &RenderConfig,
    sources: &[ColorSource],
    semantics: bool,
    mut rng: Option<&mut R>,
) -> Result<RayBatchVars, RenderError> {
    cfg.validate()?;
    let m = cfg.samples;
    let n = rays.len();
    let c = model.num_classes();
    let mut points = Vec::with_capacity(n * m);
    let mut depths = Vec::with_capacity(n * m);
    let mut deltas = Vec::with_capacity(n * m);
    for ray in rays {
        let (d, delta) = sample_depths(cfg, rng.as_deref_mut());
        points.extend(d.iter().map(|&t| ray.point_at(t)));
        depths.extend(d.iter().map(|&v| T::from_f64(v)));
        deltas.extend(delta.iter().map(|&v| T::from_f64(v)));
    }
    let q = if semantics {
        model.query_vars(tape, bound, fmap, input_cam, &points)?
    } else {
        model.query_density_vars(tape, bound, fmap, input_cam, &points)?
    };
    let sigma = tape.reshape(q.sigma, &[n, m])?;
    let delta = tape.constant(Tensor::new(vec![n, m], deltas)?);
    let weights = tape.ray_weights(sigma, delta)?;
    let sem = match q.logits {
        Some(logits) => {
            let probs = tape.softmax(logits)?;
            let probs = tape.reshape(probs, &[n, m, c])?;
            Some(tape.weighted_sum(weights, probs)?)
        }
        None => None,
    };
    let dv = tape.constant(Tensor::new(vec![n, m, 1], depths)?);
    let depth = tape.weighted_sum(weights, dv)?;
    let depth = tape.reshape(depth, &[n])?;

    let w = tape.value(weights).to_f64_vec();
    let weight_sum: Vec<f64> = w.chunks(m).map(|r| r.iter().sum()).collect();
    let mut colors = Vec::with_capacity(sources.len());
    for src in sources {
        let mut col = vec![T::ZERO; n * m * 3];
        let mut valid = vec![false; n];
        for r in 0..n {
            let mut inside = 0.0;
            for i in 0..m {
                if let Some(rgb) = sample_source(src, points[r * m + i]) {
                    inside += w[r * m + i];
                    for ch in 0..3 {
                        col[(r * m + i) * 3 + ch] = T::from_f64(rgb[ch]);
                    }
                }
            }
            valid[r] = weight_sum[r] > 0.0 && inside >= VALID_WEIGHT_SHARE * weight_sum[r];
        }
        let cv = tape.constant(Tensor::new(vec![n, m, 3], col)?);
        colors.push((tape.weighted_sum(weights, cv)?, valid));
    }
    Ok(RayBatchVars {
        weights,
        sem,
        depth,
        colors,
        weight_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(m: usize, spacing: Spacing) -> RenderConfig {
        RenderConfig {
            samples: m,
            z_near: 1.0,
            z_far: 3.0,
            spacing,
            stochastic: false,
        }
    }

    #[test]
    fn depth_sampling_examples() {
        let (d, delta) = sample_depths::<ChaCha8Rng>(&cfg(2, Spacing::Linear), None);
        assert_eq!(d, vec![1.5, 2.5]);
        assert_eq!(delta, vec![1.0, 1.0]);
        let (d, _) = sample_depths::<ChaCha8Rng>(&cfg(2, Spacing::InverseDepth), None);
        assert!((d[0] - 1.2).abs() < 1e-12 && (d[1] - 2.0).abs() < 1e-12);
        let mut c = cfg(16, Spacing::InverseDepth);
        c.stochastic = true;
        let a = sample_depths(&c, Some(&mut ChaCha8Rng::seed_from_u64(3))).0;
        let b = sample_depths(&c, Some(&mut ChaCha8Rng::seed_from_u64(3))).0;
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&x| (1.0..=3.0).contains(&x)));
    }

    #[test]
    fn compositing_examples() {
        let c = composite(&[0.0; 3], &[1.0; 3], &[1.0, 2.0, 3.0]);
        assert_eq!(c.weight_sum(), 0.0);
        assert!(c.transmittances.iter().all(|&t| t == 1.0));
        assert!(render_depth(&c).is_none());
        let c = composite(&[std::f64::consts::LN_2, 0.0], &[1.0, 1.0], &[1.0, 2.0]);
        assert!((c.alphas[0] - 0.5).abs() < 1e-15);
        assert!((c.transmittances[1] - 0.5).abs() < 1e-15);
        let c = composite(&[1e6, 3.0, 3.0], &[1.0; 3], &[1.0, 2.0, 3.0]);
        assert_eq!(c.weights[0], 1.0);
        assert!(c.weights[1] < 1e-300 && c.weights[2] < 1e-300);
    }

    #[test]
    fn semantics_softmax_per_point() {
        let one = RayComposite {
            alphas: vec![1.0],
            transmittances: vec![1.0],
            weights: vec![1.0],
            deltas: vec![1.0],
            depths: vec![5.0],
        };
        assert_eq!(render_semantics(&one, &[0.0, 0.0], 2), vec![0.5, 0.5]);
        assert_eq!(render_depth(&one), Some(5.0));
        let two = RayComposite {
            weights: vec![0.9, 0.1],
            depths: vec![2.0, 4.0],
            ..one.clone()
        };
        let h = render_semantics(&two, &[0.0, 10.0, 10.0, 0.0], 2);
        let p = softmax(&[0.0, 10.0]);
        assert_eq!(h, vec![0.9 * p[0] + 0.1 * p[1], 0.9 * p[1] + 0.1 * p[0]]);
        assert!((h[0] - 0.1).abs() < 1e-3 && (h[1] - 0.9).abs() < 1e-3);
        let quarter = RayComposite {
            weights: vec![0.25, 0.75],
            ..two
        };
        assert_eq!(render_depth(&quarter), Some(3.5));
    }
}
