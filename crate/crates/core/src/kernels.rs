//! Forward and backward CPU kernels. These are plain functions over
//! [`Tensor`]s; the tape in [`crate::autodiff`] wires them together.

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Shape, Tensor};

/// Argmax positions recorded by [`max_pool_2x2`].
///
/// `offsets[i]` is the flat offset `y * W + x` inside the input plane of the
/// pooled element `i`, where `W` is the width of the pre-pool map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    shape: Shape,
    offsets: Vec<u32>,
}

impl PoolIndices {
    /// Shape of the pooled output these indices belong to.
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Shape of the pre-pool input (and of any unpool output).
    pub fn input_shape(&self) -> Shape {
        Shape::new(self.shape.n, self.shape.c, self.shape.h * 2, self.shape.w * 2)
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    /// Builds indices from raw offsets, validating that each one lies inside
    /// its own 2x2 window.
    pub fn from_offsets(shape: Shape, offsets: Vec<u32>) -> Result<Self> {
        if offsets.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: shape.numel(),
                actual: offsets.len(),
            });
        }
        let indices = Self { shape, offsets };
        if !indices.windows_valid() {
            return Err(TensorError::invalid("pool_indices", "offset outside its 2x2 window"));
        }
        Ok(indices)
    }

    /// True when every offset addresses a location in its own window.
    pub fn windows_valid(&self) -> bool {
        let (ph, pw) = (self.shape.h, self.shape.w);
        let iw = pw * 2;
        let plane = ph * pw;
        self.offsets.iter().enumerate().all(|(i, &off)| {
            let p = i % plane;
            let (oy, ox) = (p / pw, p % pw);
            let (y, x) = (off as usize / iw, off as usize % iw);
            y / 2 == oy && x / 2 == ox && y < ph * 2
        })
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, lhs: a, rhs: b })
    }
}

// ---------------------------------------------------------------------------
// convolution

/// Output spatial size of a stride-1 cross-correlation.
pub fn conv_output_hw(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Option<(usize, usize)> {
    let ho = (h + 2 * pad).checked_sub(kh)? + 1;
    let wo = (w + 2 * pad).checked_sub(kw)? + 1;
    Some((ho, wo))
}

pub(crate) fn check_conv(input: Shape, kernel: Shape, bias: Shape, pad: usize) -> Result<Shape> {
    if kernel.c != input.c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input,
            rhs: kernel,
        });
    }
    if bias.numel() != kernel.n {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d bias",
            lhs: kernel,
            rhs: bias,
        });
    }
    let (ho, wo) = conv_output_hw(input.h, input.w, kernel.h, kernel.w, pad).ok_or(TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: input,
        rhs: kernel,
    })?;
    Ok(Shape::new(input.n, kernel.n, ho, wo))
}

/// Unfolds one `C x H x W` sample into a `(C*kh*kw) x (Ho*Wo)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (x0, x1) = valid_span(kj, pad, w, wo);
                for oy in 0..ho {
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    if x1 > x0 {
                        let ix0 = x0 + kj - pad;
                        out[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
}

/// Accumulates a column matrix back into a `C x H x W` sample.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (x0, x1) = valid_span(kj, pad, w, wo);
                if x1 <= x0 {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ix0 = x0 + kj - pad;
                    let dst_row = &mut plane[iy as usize * w + ix0..iy as usize * w + ix0 + (x1 - x0)];
                    for (d, &s) in dst_row.iter_mut().zip(&src[oy * wo + x0..oy * wo + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Range of output columns `[x0, x1)` whose input column `ox + kj - pad`
/// falls inside `0..w`.
fn valid_span(kj: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let x0 = pad.saturating_sub(kj).min(wo);
    let x1 = (w + pad).saturating_sub(kj).min(wo).max(x0);
    (x0, x1)
}

fn is_pointwise(kernel: Shape, pad: usize) -> bool {
    kernel.h == 1 && kernel.w == 1 && pad == 0
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (xs, ks) = (input.shape(), kernel.shape());
    let out_shape = check_conv(xs, ks, bias.shape(), pad)?;
    let p = out_shape.plane();
    let ckk = ks.c * ks.h * ks.w;
    let mut out = Tensor::zeros(out_shape);
    let mut cols = if is_pointwise(ks, pad) {
        Vec::new()
    } else {
        vec![T::zero(); ckk * p]
    };
    let out_len = ks.n * p;
    for n in 0..xs.n {
        let sample = input.sample(n);
        let rhs: &[T] = if is_pointwise(ks, pad) {
            sample
        } else {
            im2col(
                sample,
                xs.c,
                xs.h,
                xs.w,
                ks.h,
                ks.w,
                pad,
                out_shape.h,
                out_shape.w,
                &mut cols,
            );
            &cols
        };
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        for (k, &b) in bias.data().iter().enumerate() {
            dst[k * p..(k + 1) * p].fill(b);
        }
        T::gemm(ks.n, ckk, p, T::one(), kernel.data(), false, rhs, false, T::one(), dst);
    }
    Ok(out)
}

/// Gradients of a convolution. Each returned gradient is `Some` only when
/// requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: usize,
    want: [bool; 3],
) -> ConvGrads<T> {
    let (xs, ks, gs) = (input.shape(), kernel.shape(), grad_out.shape());
    let p = gs.plane();
    let ckk = ks.c * ks.h * ks.w;
    let pointwise = is_pointwise(ks, pad);
    let mut dx = want[0].then(|| Tensor::zeros(xs));
    let mut dk = want[1].then(|| Tensor::zeros(ks));
    let mut db = want[2].then(|| Tensor::zeros(Shape::vector(ks.n)));
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * p]
    };
    let g_len = ks.n * p;
    let x_len = xs.c * xs.plane();
    for n in 0..xs.n {
        let g = &grad_out.data()[n * g_len..(n + 1) * g_len];
        if let Some(db) = db.as_mut() {
            for (k, slot) in db.data_mut().iter_mut().enumerate() {
                *slot += g[k * p..(k + 1) * p].iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            let rhs: &[T] = if pointwise {
                input.sample(n)
            } else {
                im2col(
                    input.sample(n),
                    xs.c,
                    xs.h,
                    xs.w,
                    ks.h,
                    ks.w,
                    pad,
                    gs.h,
                    gs.w,
                    &mut cols,
                );
                &cols
            };
            T::gemm(ks.n, p, ckk, T::one(), g, false, rhs, true, T::one(), dk.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[n * x_len..(n + 1) * x_len];
            if pointwise {
                T::gemm(ckk, ks.n, p, T::one(), kernel.data(), true, g, false, T::zero(), dst);
            } else {
                T::gemm(
                    ckk,
                    ks.n,
                    p,
                    T::one(),
                    kernel.data(),
                    true,
                    g,
                    false,
                    T::zero(),
                    &mut cols,
                );
                col2im(&cols, xs.c, xs.h, xs.w, ks.h, ks.w, pad, gs.h, gs.w, dst);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

// ---------------------------------------------------------------------------
// pooling

pub fn max_pool_2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(TensorError::invalid(
            "max_pool_2x2",
            format!("spatial dims of {s} must be even"),
        ));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut offsets = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let base = 2 * oy * s.w + 2 * ox;
                    let mut best = base;
                    // Row-major scan with strict comparison: lowest offset wins ties.
                    for cand in [base + 1, base + s.w, base + s.w + 1] {
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    out.push(plane[best]);
                    offsets.push(best as u32);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(out_shape, out)?,
        PoolIndices {
            shape: out_shape,
            offsets,
        },
    ))
}

/// Routes each pooled gradient back to its argmax position.
pub fn max_pool_2x2_backward<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Tensor<T> {
    scatter(grad_out, indices)
}

fn scatter<T: Scalar>(src: &Tensor<T>, indices: &PoolIndices) -> Tensor<T> {
    let out_shape = indices.input_shape();
    let mut out = Tensor::zeros(out_shape);
    let (ip, op) = (out_shape.plane(), indices.shape.plane());
    let dst = out.data_mut();
    for (plane_idx, (vals, offs)) in src
        .data()
        .chunks_exact(op)
        .zip(indices.offsets.chunks_exact(op))
        .enumerate()
    {
        let base = plane_idx * ip;
        for (&v, &off) in vals.iter().zip(offs) {
            dst[base + off as usize] = v;
        }
    }
    out
}

fn gather<T: Scalar>(src: &Tensor<T>, indices: &PoolIndices) -> Tensor<T> {
    let (ip, op) = (indices.input_shape().plane(), indices.shape.plane());
    let mut out = Vec::with_capacity(indices.shape.numel());
    for (plane_idx, offs) in indices.offsets.chunks_exact(op).enumerate() {
        let plane = &src.data()[plane_idx * ip..(plane_idx + 1) * ip];
        out.extend(offs.iter().map(|&off| plane[off as usize]));
    }
    Tensor::from_vec(indices.shape, out).expect("gather preserves pooled shape")
}

pub fn max_unpool_2x2_forward<T: Scalar>(
    input: &Tensor<T>,
    indices: &PoolIndices,
    output_shape: Shape,
) -> Result<Tensor<T>> {
    same_shape("max_unpool_2x2", input.shape(), indices.shape)?;
    same_shape("max_unpool_2x2 output", output_shape, indices.input_shape())?;
    Ok(scatter(input, indices))
}

pub fn max_unpool_2x2_backward<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Tensor<T> {
    gather(grad_out, indices)
}

// ---------------------------------------------------------------------------
// batch normalization

/// Per-channel statistics saved by the forward pass for backward.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance (train mode only).
    pub batch_var_unbiased: Vec<T>,
}

/// Normalizes with either batch statistics (`stats = None`) or the given
/// `(mean, var)` pair, then applies `gamma`, `beta`.
pub fn batch_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let s = input.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: s,
            rhs: Shape::vector(gamma.len()),
        });
    }
    let count = s.n * s.plane();
    if stats.is_none() && count < 2 {
        return Err(TensorError::invalid(
            "batch_norm",
            format!("batch statistics undefined for N*H*W = {count}"),
        ));
    }
    let p = s.plane();
    let mut mean = vec![T::zero(); s.c];
    let mut var_unbiased = vec![T::zero(); s.c];
    let mut inv_std = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (m, v) = match stats {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => {
                let cnt = T::from_usize(count).unwrap();
                let m = (0..s.n)
                    .map(|n| input.plane(n, c).iter().copied().sum::<T>())
                    .sum::<T>()
                    / cnt;
                let ss = (0..s.n)
                    .map(|n| input.plane(n, c).iter().map(|&x| (x - m) * (x - m)).sum::<T>())
                    .sum::<T>();
                var_unbiased[c] = ss / (cnt - T::one());
                (m, ss / cnt)
            }
        };
        mean[c] = m;
        inv_std[c] = T::one() / (v + eps).sqrt();
    }
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    {
        let nd = normalized.data_mut();
        let od = out.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * p;
                let src = input.plane(n, c);
                for i in 0..p {
                    let xh = (src[i] - mean[c]) * inv_std[c];
                    nd[off + i] = xh;
                    od[off + i] = gamma[c] * xh + beta[c];
                }
            }
        }
    }
    Ok((
        out,
        BatchNormSaved {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`. `batch_stats` selects the train-mode
/// rule, where the statistics themselves depend on the input.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    gamma: &[T],
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = grad_out.shape();
    let p = s.plane();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let xh = saved.normalized.plane(n, c);
            for i in 0..p {
                dbeta[c] += g[i];
                dgamma[c] += g[i] * xh[i];
            }
        }
    }
    let count = T::from_usize(s.n * p).unwrap();
    let mut dx = Tensor::zeros(s);
    let dxd = dx.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * p;
            let g = grad_out.plane(n, c);
            let xh = saved.normalized.plane(n, c);
            let scale = gamma[c] * saved.inv_std[c];
            if batch_stats {
                let mb = dbeta[c] / count;
                let mg = dgamma[c] / count;
                for i in 0..p {
                    dxd[off + i] = scale * (g[i] - mb - xh[i] * mg);
                }
            } else {
                for i in 0..p {
                    dxd[off + i] = scale * g[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// softmax over channels

pub fn softmax_channels_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    let od = out.data_mut();
    let mut buf = vec![T::zero(); s.c];
    for n in 0..s.n {
        let x = input.sample(n);
        let base = n * s.c * p;
        for i in 0..p {
            let mut max = T::neg_infinity();
            for c in 0..s.c {
                max = max.max(x[c * p + i]);
            }
            let mut sum = T::zero();
            for c in 0..s.c {
                let e = (x[c * p + i] - max).exp();
                buf[c] = e;
                sum += e;
            }
            for c in 0..s.c {
                od[base + c * p + i] = buf[c] / sum;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let s = output.shape();
    let p = s.plane();
    let mut dx = Tensor::zeros(s);
    let dd = dx.data_mut();
    for n in 0..s.n {
        let y = output.sample(n);
        let g = grad_out.sample(n);
        let base = n * s.c * p;
        for i in 0..p {
            let mut dot = T::zero();
            for c in 0..s.c {
                dot += g[c * p + i] * y[c * p + i];
            }
            for c in 0..s.c {
                dd[base + c * p + i] = y[c * p + i] * (g[c * p + i] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// channel concatenation

pub fn concat_channels_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::invalid("concat_channels", "no inputs"))?
        .shape();
    if inputs.iter().any(|t| {
        let s = t.shape();
        s.n != first.n || s.h != first.h || s.w != first.w
    }) {
        return Err(TensorError::IncompatibleShapes {
            op: "concat_channels",
            shapes: inputs.iter().map(|t| t.shape()).collect(),
        });
    }
    let c_total = inputs.iter().map(|t| t.shape().c).sum();
    let out_shape = Shape::new(first.n, c_total, first.h, first.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in inputs {
            out.extend_from_slice(t.sample(n));
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Splits a gradient back into per-input channel ranges.
pub fn concat_channels_backward<T: Scalar>(grad_out: &Tensor<T>, parts: &[Shape]) -> Vec<Tensor<T>> {
    let s = grad_out.shape();
    let p = s.plane();
    let mut outs: Vec<Vec<T>> = parts.iter().map(|sh| Vec::with_capacity(sh.numel())).collect();
    for n in 0..s.n {
        let g = grad_out.sample(n);
        let mut c0 = 0;
        for (part, out) in parts.iter().zip(outs.iter_mut()) {
            out.extend_from_slice(&g[c0 * p..(c0 + part.c) * p]);
            c0 += part.c;
        }
    }
    parts
        .iter()
        .zip(outs)
        .map(|(&sh, data)| Tensor::from_vec(sh, data).expect("split matches part shape"))
        .collect()
}

// ---------------------------------------------------------------------------
// generalized dice loss

/// Weighted overlap sums of the generalized Dice loss.
#[derive(Debug, Clone, Copy)]
pub struct DiceSums<T> {
    pub intersection: T,
    pub denominator: T,
}

pub fn gdl_forward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, weights: &[T], eps: T) -> Result<(T, DiceSums<T>)> {
    same_shape("gdl_loss", pred.shape(), target.shape())?;
    let s = pred.shape();
    if weights.len() != s.c {
        return Err(TensorError::ShapeMismatch {
            op: "gdl_loss weights",
            lhs: s,
            rhs: Shape::vector(weights.len()),
        });
    }
    let mut inter = T::zero();
    let mut denom = T::zero();
    for n in 0..s.n {
        for (c, &w) in weights.iter().enumerate() {
            let (mut pg, mut sum) = (T::zero(), T::zero());
            for (&pv, &gv) in pred.plane(n, c).iter().zip(target.plane(n, c)) {
                pg += pv * gv;
                sum += pv + gv;
            }
            inter += w * pg;
            denom += w * sum;
        }
    }
    let denom = denom + eps;
    let two = T::one() + T::one();
    Ok((
        T::one() - two * inter / denom,
        DiceSums {
            intersection: inter,
            denominator: denom,
        },
    ))
}

/// Gradient of the loss with respect to the predicted probabilities.
pub fn gdl_backward<T: Scalar>(grad_loss: T, target: &Tensor<T>, weights: &[T], sums: DiceSums<T>) -> Tensor<T> {
    let s = target.shape();
    let two = T::one() + T::one();
    let d = sums.denominator;
    let coef = -two * grad_loss / (d * d);
    let mut out = Tensor::zeros(s);
    let od = out.data_mut();
    let p = s.plane();
    for n in 0..s.n {
        for (c, &w) in weights.iter().enumerate() {
            let off = (n * s.c + c) * p;
            for (i, &g) in target.plane(n, c).iter().enumerate() {
                od[off + i] = coef * w * (g * d - sums.intersection);
            }
        }
    }
    out
}
