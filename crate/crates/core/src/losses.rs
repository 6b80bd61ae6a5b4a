//! Training objective on the tape: cross-entropy against rendered
//! distributions, min-over-sources photometric error with SSIM, edge-aware
//! smoothness of inverse depth, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Scalar, Tape, Tensor, Var};
use crate::scene::BACKGROUND;

pub const SEM_EPS: f64 = 1e-6;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Added to the cost of invalid sources so the minimum never picks them.
const INVALID_COST: f64 = 1e3;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("label {0} out of range for {1} classes")]
    Label(u8, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("depth must be positive, found {0}")]
    Depth(f64),
    #[error("no reconstructions given")]
    NoSources,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_ph: f64,
    pub lambda_eas: f64,
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 0.02,
            lambda_ph: 1.0,
            lambda_eas: 0.001,
            lambda_l1: 0.15,
            lambda_ssim: 0.85,
            class_weights: None,
        }
    }
}

/// A summed loss and the number of terms it averages over.
#[derive(Clone, Copy, Debug)]
pub struct LossSum {
    pub sum: Var,
    pub count: usize,
}

impl LossSum {
    pub fn mean<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var, DiffError> {
        tape.scale(self.sum, 1.0 / self.count.max(1) as f64)
    }
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::ZERO))
}

/// `sum_p -w_{S_p} log(max(h_p[S_p], eps))` over pixels with a label.
/// `pred` is `[N, c]`; background pixels are skipped.
pub fn semantic_loss_sum<T: Scalar>(tape: &mut Tape<T>, pred: Var, targets: &[u8], weights: &LossWeights) -> Result<LossSum, LossError> {
    let shape = tape.shape(pred).to_vec();
    let [n, c] = shape[..] else {
        return Err(LossError::Shape(format!("prediction {shape:?}")));
    };
    if targets.len() != n {
        return Err(LossError::Shape(format!("{} targets for {n} predictions", targets.len())));
    }
    let mut onehot = vec![T::ZERO; n * c];
    let mut pw = vec![T::ZERO; n];
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == BACKGROUND {
            continue;
        }
        if t as usize >= c {
            return Err(LossError::Label(t, c));
        }
        onehot[i * c + t as usize] = T::ONE;
        let w = weights.class_weights.as_ref().and_then(|cw| cw.get(t as usize)).copied().unwrap_or(1.0);
        pw[i] = T::from_f64(w);
        count += 1;
    }
    if count == 0 {
        return Ok(LossSum { sum: zero(tape), count });
    }
    let oh = tape.constant(Tensor::new(vec![n, c], onehot)?);
    let picked = tape.mul(pred, oh)?;
    let picked = tape.sum_last(picked)?;
    let picked = tape.clamp(picked, Some(SEM_EPS), None)?;
    let logp = tape.log(picked)?;
    let pw = tape.constant(Tensor::new(vec![n], pw)?);
    let wl = tape.mul(logp, pw)?;
    let s = tape.sum(wl)?;
    Ok(LossSum {
        sum: tape.scale(s, -1.0)?,
        count,
    })
}

pub fn semantic_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, targets: &[u8], weights: &LossWeights) -> Result<Var, LossError> {
    Ok(semantic_loss_sum(tape, pred, targets, weights)?.mean(tape)?)
}

fn check_nchw<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<[usize; 4], LossError> {
    match *tape.shape(v) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(LossError::Shape(format!("{what} must be NCHW, got {s:?}"))),
    }
}

/// Per-pixel `(1 - SSIM) / 2` over a reflect-padded 3x3 window, averaged
/// over channels. Inputs `[B, C, H, W]`, output `[B, H, W]`.
pub fn ssim<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, LossError> {
    let [bn, c, h, w] = check_nchw(tape, a, "ssim input")?;
    if tape.shape(b) != tape.shape(a) {
        return Err(LossError::Shape(format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    if h < 2 || w < 2 {
        return Err(LossError::Shape(format!("patch {h}x{w} smaller than the padded window")));
    }
    let planes = [bn * c, 1, h, w];
    let a = tape.reshape(a, &planes)?;
    let b = tape.reshape(b, &planes)?;
    let a = tape.reflect_pad(a, 1)?;
    let b = tape.reflect_pad(b, 1)?;
    let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], T::from_f64(1.0 / 9.0)));
    let pool = |tape: &mut Tape<T>, x: Var| tape.conv2d(x, k, 1, 0);
    let mu_a = pool(tape, a)?;
    let mu_b = pool(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = pool(tape, aa)?;
    let e_bb = pool(tape, bb)?;
    let e_ab = pool(tape, ab)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let n1 = tape.scale(mu_ab, 2.0)?;
    let n1 = tape.offset(n1, SSIM_C1)?;
    let n2 = tape.scale(cov, 2.0)?;
    let n2 = tape.offset(n2, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;
    let d1 = tape.add(mu_aa, mu_bb)?;
    let d1 = tape.offset(d1, SSIM_C1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.offset(d2, SSIM_C2)?;
    let den = tape.mul(d1, d2)?;
    let s = tape.div(num, den)?;
    let s = tape.scale(s, -0.5)?;
    let s = tape.offset(s, 0.5)?;
    let s = tape.clamp(s, Some(0.0), Some(1.0))?;
    channel_mean(tape, s, [bn, c, h, w])
}

/// `[B*C, 1, H, W]` or `[B, C, H, W]` to the channel mean `[B, H, W]`.
fn channel_mean<T: Scalar>(tape: &mut Tape<T>, x: Var, [b, c, h, w]: [usize; 4]) -> Result<Var, LossError> {
    let x = tape.reshape(x, &[b, c, h * w])?;
    let x = tape.permute(x, &[0, 2, 1])?;
    let x = tape.sum_last(x)?;
    let x = tape.scale(x, 1.0 / c as f64)?;
    Ok(tape.reshape(x, &[b, h, w])?)
}

/// Per-pixel `lambda_l1 * mean_c |P - Q| + lambda_ssim * ssim(P, Q)`, `[B, H, W]`.
pub fn photometric_cost<T: Scalar>(tape: &mut Tape<T>, target: Var, recon: Var, weights: &LossWeights) -> Result<Var, LossError> {
    let dims = check_nchw(tape, target, "target")?;
    let diff = tape.sub(target, recon)?;
    let l1 = tape.abs(diff)?;
    let l1 = channel_mean(tape, l1, dims)?;
    let l1 = tape.scale(l1, weights.lambda_l1)?;
    let s = ssim(tape, target, recon)?;
    let s = tape.scale(s, weights.lambda_ssim)?;
    Ok(tape.add(l1, s)?)
}

/// Sum over pixels of the minimum cost across valid reconstructions.
/// `recons` pairs a `[B, 3, H, W]` image with per-pixel validity (`B*H*W`,
/// row-major); `mask` drops pixels from the loss altogether.
pub fn photometric_loss_sum<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    recons: &[(Var, Vec<bool>)],
    mask: Option<&[bool]>,
    weights: &LossWeights,
) -> Result<LossSum, LossError> {
    if recons.is_empty() {
        return Err(LossError::NoSources);
    }
    let [b, _, h, w] = check_nchw(tape, target, "target")?;
    let n = b * h * w;
    let mut rows = Vec::with_capacity(recons.len());
    let mut keep = vec![false; n];
    for (recon, valid) in recons {
        if valid.len() != n {
            return Err(LossError::Shape(format!("{} validity flags for {n} pixels", valid.len())));
        }
        let cost = photometric_cost(tape, target, *recon, weights)?;
        let cost = tape.reshape(cost, &[1, n])?;
        let penalty: Vec<T> = valid.iter().map(|&v| T::from_f64(if v { 0.0 } else { INVALID_COST })).collect();
        let penalty = tape.constant(Tensor::new(vec![1, n], penalty)?);
        rows.push(tape.add(cost, penalty)?);
        for (k, &v) in keep.iter_mut().zip(valid) {
            *k |= v;
        }
    }
    if let Some(m) = mask {
        for (k, &v) in keep.iter_mut().zip(m) {
            *k &= v;
        }
    }
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        log::warn!("photometric loss: no pixel has a valid reconstruction");
        return Ok(LossSum { sum: zero(tape), count });
    }
    let stacked = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    let best = tape.min_axis(stacked, 0)?;
    let best = tape.reshape(best, &[n])?;
    let keep: Vec<T> = keep.iter().map(|&k| if k { T::ONE } else { T::ZERO }).collect();
    let keep = tape.constant(Tensor::new(vec![n], keep)?);
    let masked = tape.mul(best, keep)?;
    Ok(LossSum {
        sum: tape.sum(masked)?,
        count,
    })
}

pub fn photometric_loss<T: Scalar>(tape: &mut Tape<T>, target: Var, recons: &[(Var, Vec<bool>)], weights: &LossWeights) -> Result<Var, LossError> {
    Ok(photometric_loss_sum(tape, target, recons, None, weights)?.mean(tape)?)
}

/// Edge-aware smoothness of mean-normalised inverse depth. `depth` is
/// `[B, 1, H, W]` and must be positive; `color` is a `[B, 3, H, W]` tensor
/// (no gradient). Returns the mean over x-differences plus the mean over
/// y-differences.
pub fn eas_loss<T: Scalar>(tape: &mut Tape<T>, depth: Var, color: &Tensor<T>) -> Result<Var, LossError> {
    let [b, one, h, w] = check_nchw(tape, depth, "depth")?;
    if one != 1 || color.shape() != [b, 3, h, w] {
        return Err(LossError::Shape(format!("depth {:?} vs colour {:?}", tape.shape(depth), color.shape())));
    }
    if h < 2 || w < 2 {
        return Err(LossError::Shape("eas needs at least a 2x2 patch".into()));
    }
    if let Some(bad) = tape.value(depth).data().iter().find(|d| !(d.to_f64() > 0.0)) {
        return Err(LossError::Depth(bad.to_f64()));
    }
    let one_t = tape.constant(Tensor::scalar(T::ONE));
    let inv = tape.div(one_t, depth)?;
    let flat = tape.reshape(inv, &[b, h * w])?;
    let mean = tape.sum_last(flat)?;
    let mean = tape.scale(mean, 1.0 / (h * w) as f64)?;
    let mean = tape.reshape(mean, &[b, 1, 1, 1])?;
    let dn = tape.div(inv, mean)?;

    let c = color.data();
    let at = |bi: usize, ch: usize, y: usize, x: usize| c[((bi * 3 + ch) * h + y) * w + x].to_f64();
    let mut ex = Vec::with_capacity(b * h * (w - 1));
    let mut ey = Vec::with_capacity(b * (h - 1) * w);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w - 1 {
                let g: f64 = (0..3).map(|ch| (at(bi, ch, y, x + 1) - at(bi, ch, y, x)).abs()).sum::<f64>() / 3.0;
                ex.push(T::from_f64((-g).exp()));
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                let g: f64 = (0..3).map(|ch| (at(bi, ch, y + 1, x) - at(bi, ch, y, x)).abs()).sum::<f64>() / 3.0;
                ey.push(T::from_f64((-g).exp()));
            }
        }
    }
    let kx = tape.constant(Tensor::from_f64(vec![1, 1, 1, 2], &[-1.0, 1.0])?);
    let ky = tape.constant(Tensor::from_f64(vec![1, 1, 2, 1], &[-1.0, 1.0])?);
    let dx = tape.conv2d(dn, kx, 1, 0)?;
    let dy = tape.conv2d(dn, ky, 1, 0)?;
    let dx = tape.abs(dx)?;
    let dy = tape.abs(dy)?;
    let ex = tape.constant(Tensor::new(vec![b, 1, h, w - 1], ex)?);
    let ey = tape.constant(Tensor::new(vec![b, 1, h - 1, w], ey)?);
    let tx = tape.mul(dx, ex)?;
    let ty = tape.mul(dy, ey)?;
    let mx = tape.mean(tx)?;
    let my = tape.mean(ty)?;
    Ok(tape.add(mx, my)?)
}

/// Optional loss parts; missing parts contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub sem: Option<Var>,
    pub ph: Option<Var>,
    pub eas: Option<Var>,
}

/// `lambda_seg L_sem + lambda_ph L_ph + lambda_eas L_eas`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, parts: &LossParts, weights: &LossWeights) -> Result<Var, LossError> {
    let mut total = zero(tape);
    for (part, lambda) in [
        (parts.sem, weights.lambda_seg),
        (parts.ph, weights.lambda_ph),
        (parts.eas, weights.lambda_eas),
    ] {
        if let Some(p) = part {
            let s = tape.scale(p, lambda)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}
