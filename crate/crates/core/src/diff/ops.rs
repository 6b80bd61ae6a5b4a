//! Built-in kernels and the [`Tape`] methods that apply them.

use std::sync::Arc;

use super::scalar::{gemm, Layout};
use super::tensor::numel;
use super::{DiffError, Kernel, Scalar, Tape, Tensor, Var};

fn shape_err(op: &str, detail: impl std::fmt::Display) -> DiffError {
    DiffError::Shape(format!("{op}: {detail}"))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// True when `b` (leading ones dropped) equals the trailing dims of `a`, so
/// broadcasting `b` is a cyclic repeat.
fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    let lead = b.iter().take_while(|&&d| d == 1).count();
    let b = &b[lead..];
    !b.is_empty() && b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// For every linear index of `out`, the linear index into a tensor of
/// shape `inp` broadcast to `out`.
fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..inp.len()).rev() {
        let o = i + rank - inp.len();
        strides[o] = if inp[i] == 1 { 0 } else { acc };
        acc *= inp[i];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut lin = 0usize;
    for _ in 0..n {
        map.push(lin);
        for d in (0..rank).rev() {
            idx[d] += 1;
            lin += strides[d];
            if idx[d] < out[d] {
                break;
            }
            lin -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary(BinaryOp);

impl Binary {
    fn apply<T: Scalar>(&self, a: T, b: T) -> T {
        match self.0 {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    /// Partial derivatives with respect to (a, b).
    fn partials<T: Scalar>(&self, a: T, b: T) -> (T, T) {
        match self.0 {
            BinaryOp::Add => (T::ONE, T::ONE),
            BinaryOp::Sub => (T::ONE, -T::ONE),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (T::ONE / b, -a / (b * b)),
        }
    }
}

impl<T: Scalar> Kernel<T> for Binary {
    fn name(&self) -> &str {
        match self.0 {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| self.apply(x, y)).collect();
            return Tensor::new(a.shape(), data);
        }
        if is_suffix(a.shape(), b.shape()) {
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks_exact(b.len()) {
                data.extend(row.iter().zip(b.data()).map(|(&x, &y)| self.apply(x, y)));
            }
            return Tensor::new(a.shape(), data);
        }
        let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            shape_err(Kernel::<T>::name(self), format!("{:?} vs {:?}", a.shape(), b.shape()))
        })?;
        let ma = index_map(&out, a.shape());
        let mb = index_map(&out, b.shape());
        let data = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| self.apply(a.data()[i], b.data()[j]))
            .collect();
        Tensor::new(out, data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let mut ga = needs[0].then(|| vec![T::ZERO; a.len()]);
        let mut gb = needs[1].then(|| vec![T::ZERO; b.len()]);
        if a.shape() == b.shape() {
            for i in 0..g.len() {
                let (da, db) = self.partials(a.data()[i], b.data()[i]);
                if let Some(ga) = &mut ga {
                    ga[i] += g[i] * da;
                }
                if let Some(gb) = &mut gb {
                    gb[i] += g[i] * db;
                }
            }
        } else if is_suffix(a.shape(), b.shape()) {
            let k = b.len();
            for (r, (gr, ar)) in g.chunks_exact(k).zip(a.data().chunks_exact(k)).enumerate() {
                for j in 0..k {
                    let (da, db) = self.partials(ar[j], b.data()[j]);
                    if let Some(ga) = &mut ga {
                        ga[r * k + j] += gr[j] * da;
                    }
                    if let Some(gb) = &mut gb {
                        gb[j] += gr[j] * db;
                    }
                }
            }
        } else {
            let out = broadcast_shape(a.shape(), b.shape()).expect("checked in forward");
            let ma = index_map(&out, a.shape());
            let mb = index_map(&out, b.shape());
            for i in 0..g.len() {
                let (da, db) = self.partials(a.data()[ma[i]], b.data()[mb[i]]);
                if let Some(ga) = &mut ga {
                    ga[ma[i]] += g[i] * da;
                }
                if let Some(gb) = &mut gb {
                    gb[mb[i]] += g[i] * db;
                }
            }
        }
        vec![ga, gb]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Relu,
    Softplus,
    Abs,
    Scale(f64),
    Offset(f64),
}

struct Unary(UnaryOp);

impl<T: Scalar> Kernel<T> for Unary {
    fn name(&self) -> &str {
        match self.0 {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Relu => "relu",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Abs => "abs",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Offset(_) => "offset",
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        let f: Box<dyn Fn(T) -> T> = match self.0 {
            UnaryOp::Exp => Box::new(|v: T| v.exp()),
            UnaryOp::Log => Box::new(|v: T| v.ln()),
            UnaryOp::Relu => Box::new(|v: T| v.maxv(T::ZERO)),
            UnaryOp::Softplus => Box::new(|v: T| v.maxv(T::ZERO) + (-v.abs()).exp().ln_1p()),
            UnaryOp::Abs => Box::new(|v: T| v.abs()),
            UnaryOp::Scale(c) => {
                let c = T::from_f64(c);
                Box::new(move |v: T| v * c)
            }
            UnaryOp::Offset(c) => {
                let c = T::from_f64(c);
                Box::new(move |v: T| v + c)
            }
        };
        Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let y = output.data();
        let map = |f: &dyn Fn(usize) -> T| -> Vec<T> { (0..g.len()).map(|i| g[i] * f(i)).collect() };
        let gx: Vec<T> = match self.0 {
            UnaryOp::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
            UnaryOp::Log => g.iter().zip(x).map(|(&g, &x)| g / x).collect(),
            UnaryOp::Relu => g.iter().zip(x).map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO }).collect(),
            UnaryOp::Softplus => map(&|i| {
                if x[i] >= T::ZERO {
                    T::ONE / (T::ONE + (-x[i]).exp())
                } else {
                    let e = x[i].exp();
                    e / (T::ONE + e)
                }
            }),
            UnaryOp::Abs => map(&|i| {
                if x[i] > T::ZERO {
                    T::ONE
                } else if x[i] < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            }),
            UnaryOp::Scale(c) => {
                let c = T::from_f64(c);
                g.iter().map(|&g| g * c).collect()
            }
            UnaryOp::Offset(_) => g.to_vec(),
        };
        vec![Some(gx)]
    }
}

struct Clamp {
    lo: Option<f64>,
    hi: Option<f64>,
}

impl<T: Scalar> Kernel<T> for Clamp {
    fn name(&self) -> &str {
        "clamp"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        let lo = self.lo.map(T::from_f64);
        let hi = self.hi.map(T::from_f64);
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let v = lo.map_or(v, |l| v.maxv(l));
                hi.map_or(v, |h| v.minv(h))
            })
            .collect();
        Tensor::new(x.shape(), data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let lo = self.lo.map(T::from_f64);
        let hi = self.hi.map(T::from_f64);
        let gx = inputs[0]
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &gi)| {
                let inside = lo.is_none_or(|l| v >= l) && hi.is_none_or(|h| v <= h);
                if inside {
                    gi
                } else {
                    T::ZERO
                }
            })
            .collect();
        vec![Some(gx)]
    }
}

/// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
struct MatMul;

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Some((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if k == k2 && ba == bb => Some((*ba, *m, *k, *n)),
        _ => None,
    }
}

impl<T: Scalar> Kernel<T> for MatMul {
    fn name(&self) -> &str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let (a, b) = (inputs[0], inputs[1]);
        let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())
            .ok_or_else(|| shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())))?;
        let mut out = vec![T::ZERO; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &b.data()[i * k * n..(i + 1) * k * n],
                Layout::Normal,
                false,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Tensor::new(shape, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (batch, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("checked in forward");
        let mut ga = needs[0].then(|| vec![T::ZERO; a.len()]);
        let mut gb = needs[1].then(|| vec![T::ZERO; b.len()]);
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            if let Some(ga) = &mut ga {
                // dA = dC . B^T
                gemm(
                    m,
                    n,
                    k,
                    gi,
                    Layout::Normal,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    Layout::Transposed,
                    false,
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
            }
            if let Some(gb) = &mut gb {
                // dB = A^T . dC
                gemm(
                    k,
                    m,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    Layout::Transposed,
                    gi,
                    Layout::Normal,
                    false,
                    &mut gb[i * k * n..(i + 1) * k * n],
                );
            }
        }
        vec![ga, gb]
    }
}

/// 2D convolution, NCHW input, `[out, in, kh, kw]` weights, zero padding.
struct Conv2d {
    stride: usize,
    padding: usize,
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    fn geom(&self, x: &[usize], k: &[usize]) -> Result<ConvGeom, DiffError> {
        let ([n, ci, h, w], [co, ci2, kh, kw]) = (x, k) else {
            return Err(shape_err("conv2d", format!("input {x:?}, kernel {k:?}")));
        };
        if ci != ci2 {
            return Err(shape_err("conv2d", format!("channel mismatch {ci} vs {ci2}")));
        }
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < *kh || wp < *kw || self.stride == 0 {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        Ok(ConvGeom {
            n: *n,
            ci: *ci,
            h: *h,
            w: *w,
            co: *co,
            kh: *kh,
            kw: *kw,
            ho: (hp - kh) / self.stride + 1,
            wo: (wp - kw) / self.stride + 1,
        })
    }

    /// Visits (col_row, col_col, input_offset) for every in-bounds tap of
    /// batch element `b`.
    fn for_taps(&self, g: &ConvGeom, b: usize, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..g.ci {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    for oy in 0..g.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let off = ((b * g.ci + c) * g.h + iy as usize) * g.w + ix as usize;
                            f(row, oy * g.wo + ox, off);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, g: &ConvGeom, x: &[T], b: usize) -> Vec<T> {
        let cols = g.ho * g.wo;
        let mut col = vec![T::ZERO; g.ci * g.kh * g.kw * cols];
        self.for_taps(g, b, |r, c, off| col[r * cols + c] = x[off]);
        col
    }
}

impl<T: Scalar> Kernel<T> for Conv2d {
    fn name(&self) -> &str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let (x, k) = (inputs[0], inputs[1]);
        let g = self.geom(x.shape(), k.shape())?;
        let kk = g.ci * g.kh * g.kw;
        let cols = g.ho * g.wo;
        let mut out = vec![T::ZERO; g.n * g.co * cols];
        for b in 0..g.n {
            let col = self.im2col(&g, x.data(), b);
            gemm(
                g.co,
                kk,
                cols,
                k.data(),
                Layout::Normal,
                &col,
                Layout::Normal,
                false,
                &mut out[b * g.co * cols..(b + 1) * g.co * cols],
            );
        }
        Tensor::new(vec![g.n, g.co, g.ho, g.wo], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (x, k) = (inputs[0], inputs[1]);
        let g = self.geom(x.shape(), k.shape()).expect("checked in forward");
        let kk = g.ci * g.kh * g.kw;
        let cols = g.ho * g.wo;
        let mut gx = needs[0].then(|| vec![T::ZERO; x.len()]);
        let mut gk = needs[1].then(|| vec![T::ZERO; k.len()]);
        for b in 0..g.n {
            let go = &grad[b * g.co * cols..(b + 1) * g.co * cols];
            if let Some(gk) = &mut gk {
                let col = self.im2col(&g, x.data(), b);
                gemm(g.co, cols, kk, go, Layout::Normal, &col, Layout::Transposed, true, gk);
            }
            if let Some(gx) = &mut gx {
                let mut dcol = vec![T::ZERO; kk * cols];
                gemm(kk, g.co, cols, k.data(), Layout::Transposed, go, Layout::Normal, false, &mut dcol);
                self.for_taps(&g, b, |r, c, off| gx[off] += dcol[r * cols + c]);
            }
        }
        vec![gx, gk]
    }
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
struct Upsample2x;

impl<T: Scalar> Kernel<T> for Upsample2x {
    fn name(&self) -> &str {
        "upsample2x"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        let [n, c, h, w] = *x.shape() else {
            return Err(shape_err("upsample2x", format!("expected NCHW, got {:?}", x.shape())));
        };
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = x.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        Tensor::new(vec![n, c, h2, w2], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let [n, c, h, w] = *x.shape() else { unreachable!() };
        let (h2, w2) = (2 * h, 2 * w);
        let mut gx = vec![T::ZERO; x.len()];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    gx[(p * h + y / 2) * w + xx / 2] += g[(p * h2 + y) * w2 + xx];
                }
            }
        }
        vec![Some(gx)]
    }
}

fn last_axis<T: Scalar>(op: &str, x: &Tensor<T>) -> Result<usize, DiffError> {
    match x.shape().last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(shape_err(op, format!("needs a non-empty last axis, got {:?}", x.shape()))),
    }
}

/// Softmax over the last axis.
struct Softmax;

impl<T: Scalar> Kernel<T> for Softmax {
    fn name(&self) -> &str {
        "softmax"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        let k = last_axis("softmax", x)?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let mx = row.iter().fold(row[0], |m, &v| m.maxv(v));
            let mut s = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Tensor::new(x.shape(), out)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let k = *output.shape().last().expect("checked in forward");
        let mut gx = vec![T::ZERO; g.len()];
        for ((y, gr), out) in output.data().chunks(k).zip(g.chunks(k)).zip(gx.chunks_mut(k)) {
            let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for i in 0..k {
                out[i] = y[i] * (gr[i] - dot);
            }
        }
        vec![Some(gx)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    SumAll,
    MeanAll,
    SumLast,
}

struct Reduction(Reduce);

impl<T: Scalar> Kernel<T> for Reduction {
    fn name(&self) -> &str {
        match self.0 {
            Reduce::SumAll => "sum",
            Reduce::MeanAll => "mean",
            Reduce::SumLast => "sum_last",
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        match self.0 {
            Reduce::SumAll => Ok(Tensor::scalar(x.data().iter().copied().sum())),
            Reduce::MeanAll => {
                if x.is_empty() {
                    return Err(shape_err("mean", "empty tensor"));
                }
                let s: T = x.data().iter().copied().sum();
                Ok(Tensor::scalar(s / T::from_f64(x.len() as f64)))
            }
            Reduce::SumLast => {
                let k = last_axis("sum_last", x)?;
                let data = x.data().chunks(k).map(|r| r.iter().copied().sum()).collect();
                Tensor::new(&x.shape()[..x.rank() - 1], data)
            }
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let gx = match self.0 {
            Reduce::SumAll => vec![g[0]; x.len()],
            Reduce::MeanAll => vec![g[0] / T::from_f64(x.len() as f64); x.len()],
            Reduce::SumLast => {
                let k = *x.shape().last().expect("checked in forward");
                g.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect()
            }
        };
        vec![Some(gx)]
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Minimum over one axis; the gradient flows to the first minimal entry.
struct MinAxis {
    axis: usize,
}

impl MinAxis {
    fn argmins<T: Scalar>(&self, x: &Tensor<T>) -> Vec<usize> {
        let (outer, len, inner) = split_axis(x.shape(), self.axis);
        let d = x.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for l in 1..len {
                    let idx = base + l * inner;
                    if d[idx] < d[best] {
                        best = idx;
                    }
                }
                out.push(best);
            }
        }
        out
    }
}

impl<T: Scalar> Kernel<T> for MinAxis {
    fn name(&self) -> &str {
        "min"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        if self.axis >= x.rank() || x.shape()[self.axis] == 0 {
            return Err(shape_err("min", format!("axis {} of {:?}", self.axis, x.shape())));
        }
        let data = self.argmins(x).into_iter().map(|i| x.data()[i]).collect();
        let mut shape = x.shape().to_vec();
        shape.remove(self.axis);
        Tensor::new(shape, data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let mut gx = vec![T::ZERO; x.len()];
        for (j, i) in self.argmins(x).into_iter().enumerate() {
            gx[i] += g[j];
        }
        vec![Some(gx)]
    }
}

struct Concat {
    axis: usize,
}

impl<T: Scalar> Kernel<T> for Concat {
    fn name(&self) -> &str {
        "concat"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        if self.axis >= first.rank() {
            return Err(shape_err("concat", format!("axis {} of {:?}", self.axis, first.shape())));
        }
        let mut shape = first.shape().to_vec();
        shape[self.axis] = 0;
        for t in inputs {
            let s = t.shape();
            let same = s.len() == first.rank()
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == self.axis || a == b);
            if !same {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, first.shape())));
            }
            shape[self.axis] += s[self.axis];
        }
        let (outer, _, inner) = split_axis(first.shape(), self.axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for t in inputs {
                let chunk = t.shape()[self.axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (outer, _, inner) = split_axis(inputs[0].shape(), self.axis);
        let mut grads: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (t, gr) in inputs.iter().zip(grads.iter_mut()) {
                let chunk = t.shape()[self.axis] * inner;
                gr.extend_from_slice(&g[pos..pos + chunk]);
                pos += chunk;
            }
        }
        grads
            .into_iter()
            .zip(needs)
            .map(|(g, &n)| n.then_some(g))
            .collect()
    }
}

/// Bilinear lookup in an `[H, W, C]` map at continuous pixel coordinates
/// `[N, 2]` (column, row; pixel centres at +0.5), border-clamped.
struct BilinearSample;

struct Tap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    wx: f64,
    wy: f64,
    dx_live: bool,
    dy_live: bool,
}

fn bilinear_tap(h: usize, w: usize, u: f64, v: f64) -> Tap {
    let fx = u - 0.5;
    let fy = v - 0.5;
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let cx = fx.clamp(0.0, max_x);
    let cy = fy.clamp(0.0, max_y);
    let x0 = (cx.floor() as usize).min(w - 1);
    let y0 = (cy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Tap {
        i00: y0 * w + x0,
        i01: y0 * w + x1,
        i10: y1 * w + x0,
        i11: y1 * w + x1,
        wx: cx - x0 as f64,
        wy: cy - y0 as f64,
        dx_live: fx > 0.0 && fx < max_x,
        dy_live: fy > 0.0 && fy < max_y,
    }
}

/// Border-clamped bilinear sample of an interleaved `[H, W, C]` buffer.
pub fn bilinear_lookup<T: Scalar>(map: &[T], h: usize, w: usize, c: usize, u: f64, v: f64, out: &mut [T]) {
    let t = bilinear_tap(h, w, u, v);
    let (wx, wy) = (T::from_f64(t.wx), T::from_f64(t.wy));
    let (ox, oy) = (T::ONE - wx, T::ONE - wy);
    for ch in 0..c {
        out[ch] = oy * (ox * map[t.i00 * c + ch] + wx * map[t.i01 * c + ch])
            + wy * (ox * map[t.i10 * c + ch] + wx * map[t.i11 * c + ch]);
    }
}

impl<T: Scalar> Kernel<T> for BilinearSample {
    fn name(&self) -> &str {
        "bilinear_sample"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let (map, coords) = (inputs[0], inputs[1]);
        let [h, w, c] = *map.shape() else {
            return Err(shape_err("bilinear_sample", format!("map must be HWC, got {:?}", map.shape())));
        };
        let [n, 2] = *coords.shape() else {
            return Err(shape_err(
                "bilinear_sample",
                format!("coordinates must be [N, 2], got {:?}", coords.shape()),
            ));
        };
        if h == 0 || w == 0 {
            return Err(shape_err("bilinear_sample", "empty map"));
        }
        let mut out = vec![T::ZERO; n * c];
        for (p, o) in out.chunks_mut(c.max(1)).enumerate().take(n) {
            let u = coords.data()[2 * p].to_f64();
            let v = coords.data()[2 * p + 1].to_f64();
            bilinear_lookup(map.data(), h, w, c, u, v, o);
        }
        Tensor::new(vec![n, c], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (map, coords) = (inputs[0], inputs[1]);
        let [h, w, c] = *map.shape() else { unreachable!() };
        let n = coords.shape()[0];
        let mut gm = needs[0].then(|| vec![T::ZERO; map.len()]);
        let mut gc = needs[1].then(|| vec![T::ZERO; coords.len()]);
        let m = map.data();
        for p in 0..n {
            let t = bilinear_tap(h, w, coords.data()[2 * p].to_f64(), coords.data()[2 * p + 1].to_f64());
            let (wx, wy) = (T::from_f64(t.wx), T::from_f64(t.wy));
            let (ox, oy) = (T::ONE - wx, T::ONE - wy);
            let gp = &g[p * c..(p + 1) * c];
            if let Some(gm) = &mut gm {
                for ch in 0..c {
                    gm[t.i00 * c + ch] += gp[ch] * oy * ox;
                    gm[t.i01 * c + ch] += gp[ch] * oy * wx;
                    gm[t.i10 * c + ch] += gp[ch] * wy * ox;
                    gm[t.i11 * c + ch] += gp[ch] * wy * wx;
                }
            }
            if let Some(gc) = &mut gc {
                let mut du = T::ZERO;
                let mut dv = T::ZERO;
                for ch in 0..c {
                    let (a, b, cc, d) = (
                        m[t.i00 * c + ch],
                        m[t.i01 * c + ch],
                        m[t.i10 * c + ch],
                        m[t.i11 * c + ch],
                    );
                    du += gp[ch] * (oy * (b - a) + wy * (d - cc));
                    dv += gp[ch] * (ox * (cc - a) + wx * (d - b));
                }
                if t.dx_live {
                    gc[2 * p] = du;
                }
                if t.dy_live {
                    gc[2 * p + 1] = dv;
                }
            }
        }
        vec![gm, gc]
    }
}

struct Reshape {
    shape: Vec<usize>,
}

impl<T: Scalar> Kernel<T> for Reshape {
    fn name(&self) -> &str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        inputs[0].reshaped(self.shape.clone())
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct Transpose;

fn transpose<T: Scalar>(d: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

impl<T: Scalar> Kernel<T> for Transpose {
    fn name(&self) -> &str {
        "transpose"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        let [r, c] = *x.shape() else {
            return Err(shape_err("transpose", format!("expected rank 2, got {:?}", x.shape())));
        };
        Tensor::new(vec![c, r], transpose(x.data(), r, c))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let [r, c] = *inputs[0].shape() else { unreachable!() };
        vec![Some(transpose(g, c, r))]
    }
}

/// Reflection padding of an NCHW tensor.
struct ReflectPad {
    pad: usize,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

impl ReflectPad {
    fn source_map(&self, shape: &[usize]) -> Vec<usize> {
        let [n, c, h, w] = *shape else { unreachable!() };
        let p = self.pad as isize;
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let mut map = Vec::with_capacity(n * c * hp * wp);
        for plane in 0..n * c {
            for y in 0..hp {
                let sy = reflect(y as isize - p, h);
                for x in 0..wp {
                    let sx = reflect(x as isize - p, w);
                    map.push((plane * h + sy) * w + sx);
                }
            }
        }
        map
    }
}

impl<T: Scalar> Kernel<T> for ReflectPad {
    fn name(&self) -> &str {
        "reflect_pad"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        let [n, c, h, w] = *x.shape() else {
            return Err(shape_err("reflect_pad", format!("expected NCHW, got {:?}", x.shape())));
        };
        if h <= self.pad || w <= self.pad {
            return Err(shape_err("reflect_pad", "padding exceeds input extent"));
        }
        let data = self.source_map(x.shape()).into_iter().map(|i| x.data()[i]).collect();
        Tensor::new(vec![n, c, h + 2 * self.pad, w + 2 * self.pad], data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let mut gx = vec![T::ZERO; x.len()];
        for (o, i) in self.source_map(x.shape()).into_iter().enumerate() {
            gx[i] += g[o];
        }
        vec![Some(gx)]
    }
}

/// Alpha-compositing weights `w_i = T_i (1 - exp(-sigma_i delta_i))` with
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`, per row of `[rays, samples]`.
struct RayWeights;

impl<T: Scalar> Kernel<T> for RayWeights {
    fn name(&self) -> &str {
        "ray_weights"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let (s, d) = (inputs[0], inputs[1]);
        if s.shape() != d.shape() || s.rank() != 2 {
            return Err(shape_err("ray_weights", format!("{:?} vs {:?}", s.shape(), d.shape())));
        }
        let m = s.shape()[1];
        let mut out = vec![T::ZERO; s.len()];
        for r in 0..s.shape()[0] {
            let mut acc = T::ZERO;
            for i in 0..m {
                let tau = s.data()[r * m + i] * d.data()[r * m + i];
                let trans = (-acc).exp();
                out[r * m + i] = trans * (T::ONE - (-tau).exp());
                acc += tau;
            }
        }
        Tensor::new(s.shape(), out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (s, d) = (inputs[0], inputs[1]);
        let m = s.shape()[1];
        let w = output.data();
        let mut gs = needs[0].then(|| vec![T::ZERO; s.len()]);
        let mut gd = needs[1].then(|| vec![T::ZERO; d.len()]);
        for r in 0..s.shape()[0] {
            let base = r * m;
            // d w_i / d tau_k = -w_i (i > k), T_{k+1} (i = k)
            let mut suffix = T::ZERO;
            let mut acc_all = T::ZERO;
            for i in 0..m {
                acc_all += s.data()[base + i] * d.data()[base + i];
            }
            let mut acc = acc_all;
            for k in (0..m).rev() {
                let tau = s.data()[base + k] * d.data()[base + k];
                // acc currently = sum_{j<=k} tau_j
                let t_next = (-acc).exp();
                let gtau = g[base + k] * t_next - suffix;
                suffix += g[base + k] * w[base + k];
                acc -= tau;
                if let Some(gs) = &mut gs {
                    gs[base + k] = gtau * d.data()[base + k];
                }
                if let Some(gd) = &mut gd {
                    gd[base + k] = gtau * s.data()[base + k];
                }
            }
        }
        vec![gs, gd]
    }
}

/// `out[r, j] = sum_i w[r, i] * v[r, i, j]` for `w: [R, M]`, `v: [R, M, K]`.
struct WeightedSum;

impl<T: Scalar> Kernel<T> for WeightedSum {
    fn name(&self) -> &str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let (w, v) = (inputs[0], inputs[1]);
        let ok = w.rank() == 2 && v.rank() == 3 && v.shape()[..2] == *w.shape();
        if !ok {
            return Err(shape_err("weighted_sum", format!("{:?} vs {:?}", w.shape(), v.shape())));
        }
        let (r, m, k) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = vec![T::ZERO; r * k];
        for ray in 0..r {
            let o = &mut out[ray * k..(ray + 1) * k];
            for i in 0..m {
                let wi = w.data()[ray * m + i];
                let vi = &v.data()[(ray * m + i) * k..(ray * m + i + 1) * k];
                for j in 0..k {
                    o[j] += wi * vi[j];
                }
            }
        }
        Tensor::new(vec![r, k], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (w, v) = (inputs[0], inputs[1]);
        let (r, m, k) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut gw = needs[0].then(|| vec![T::ZERO; w.len()]);
        let mut gv = needs[1].then(|| vec![T::ZERO; v.len()]);
        for ray in 0..r {
            let go = &g[ray * k..(ray + 1) * k];
            for i in 0..m {
                let base = (ray * m + i) * k;
                if let Some(gw) = &mut gw {
                    let mut acc = T::ZERO;
                    for j in 0..k {
                        acc += go[j] * v.data()[base + j];
                    }
                    gw[ray * m + i] = acc;
                }
                if let Some(gv) = &mut gv {
                    let wi = w.data()[ray * m + i];
                    for j in 0..k {
                        gv[base + j] = wi * go[j];
                    }
                }
            }
        }
        vec![gw, gv]
    }
}

/// General axis permutation; output axis `i` is input axis `axes[i]`.
struct Permute {
    axes: Vec<usize>,
}

impl Permute {
    /// Input linear index for every output linear index.
    fn source_map(&self, shape: &[usize]) -> Vec<usize> {
        let rank = shape.len();
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = self.axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = self.axes.iter().map(|&a| in_strides[a]).collect();
        let n = numel(shape);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut lin = 0usize;
        for _ in 0..n {
            map.push(lin);
            for d in (0..rank).rev() {
                idx[d] += 1;
                lin += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                lin -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        map
    }
}

impl<T: Scalar> Kernel<T> for Permute {
    fn name(&self) -> &str {
        "permute"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        let mut seen = vec![false; x.rank()];
        if self.axes.len() != x.rank() || self.axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {:?} for shape {:?}", self.axes, x.shape())));
        }
        let shape: Vec<usize> = self.axes.iter().map(|&a| x.shape()[a]).collect();
        let data = self.source_map(x.shape()).into_iter().map(|i| x.data()[i]).collect();
        Tensor::new(shape, data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let mut gx = vec![T::ZERO; x.len()];
        for (o, i) in self.source_map(x.shape()).into_iter().enumerate() {
            gx[i] = g[o];
        }
        vec![Some(gx)]
    }
}

/// Places row `i` of `x` at row `rows[i]` of an otherwise zero tensor with
/// `n` rows.
struct ScatterRows {
    rows: Vec<usize>,
    n: usize,
}

impl<T: Scalar> Kernel<T> for ScatterRows {
    fn name(&self) -> &str {
        "scatter_rows"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
        let x = inputs[0];
        if x.rank() == 0 || x.shape()[0] != self.rows.len() || self.rows.iter().any(|&r| r >= self.n) {
            return Err(shape_err("scatter_rows", format!("{:?} into {} rows", x.shape(), self.n)));
        }
        let width = numel(&x.shape()[1..]);
        let mut shape = x.shape().to_vec();
        shape[0] = self.n;
        let mut out = vec![T::ZERO; self.n * width];
        for (i, &r) in self.rows.iter().enumerate() {
            out[r * width..(r + 1) * width].copy_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        Tensor::new(shape, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let width = numel(&inputs[0].shape()[1..]);
        let mut gx = Vec::with_capacity(inputs[0].len());
        for &r in &self.rows {
            gx.extend_from_slice(&g[r * width..(r + 1) * width]);
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Tape<T> {
    fn op(&mut self, k: impl Kernel<T> + 'static, inputs: &[Var]) -> Result<Var, DiffError> {
        self.apply(Arc::new(k), inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.op(Binary(BinaryOp::Add), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.op(Binary(BinaryOp::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.op(Binary(BinaryOp::Mul), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.op(Binary(BinaryOp::Div), &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.op(Unary(UnaryOp::Exp), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.op(Unary(UnaryOp::Log), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.op(Unary(UnaryOp::Relu), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        self.op(Unary(UnaryOp::Softplus), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        self.op(Unary(UnaryOp::Abs), &[a])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.op(Unary(UnaryOp::Scale(c)), &[a])
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.op(Unary(UnaryOp::Offset(c)), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: Option<f64>, hi: Option<f64>) -> Result<Var, DiffError> {
        self.op(Clamp { lo, hi }, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.op(MatMul, &[a, b])
    }

    /// `x . w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, DiffError> {
        self.op(Conv2d { stride, padding }, &[x, kernel])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, DiffError> {
        self.op(Upsample2x, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        self.op(Softmax, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        self.op(Reduction(Reduce::SumAll), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        self.op(Reduction(Reduce::MeanAll), &[x])
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var, DiffError> {
        self.op(Reduction(Reduce::SumLast), &[x])
    }

    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.op(MinAxis { axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, DiffError> {
        self.op(Concat { axis }, xs)
    }

    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var, DiffError> {
        self.op(BilinearSample, &[map, coords])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        self.op(Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        self.op(Transpose, &[x])
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var, DiffError> {
        self.op(ReflectPad { pad }, &[x])
    }

    pub fn ray_weights(&mut self, sigmas: Var, deltas: Var) -> Result<Var, DiffError> {
        self.op(RayWeights, &[sigmas, deltas])
    }

    pub fn weighted_sum(&mut self, w: Var, v: Var) -> Result<Var, DiffError> {
        self.op(WeightedSum, &[w, v])
    }

    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], n: usize) -> Result<Var, DiffError> {
        self.op(
            ScatterRows {
                rows: rows.to_vec(),
                n,
            },
            &[x],
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, DiffError> {
        self.op(Permute { axes: axes.to_vec() }, &[x])
    }
}
