//! Forward and backward kernels for the differentiable operations.
//!
//! Every reduction here runs in a fixed order that does not depend on the
//! number of worker threads: parallel work is split into fixed-size chunks
//! and the per-chunk partials are summed sequentially.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows per parallel work item for row-wise kernels.
const ROW_CHUNK: usize = 2048;

pub const BN_EPS: f32 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f32 = 0.9;

const LANES: usize = 8;

/// `sum(a * b)` with eight interleaved accumulators combined in lane order.
#[inline]
fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in ar.iter().zip(br).enumerate() {
        acc[l] += x * y;
    }
    acc.iter().sum()
}

/// `sum(a)` with the same lane structure as [`lane_dot`].
#[inline]
fn lane_sum(a: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let ac = a.chunks_exact(LANES);
    let ar = ac.remainder();
    for x in ac {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    for (l, x) in ar.iter().enumerate() {
        acc[l] += x;
    }
    acc.iter().sum()
}

/// `(sum(g), sum(g * h))` accumulated in `f64` lanes.
fn lane_sums_f64(g: &[f32], h: &[f32]) -> (f64, f64) {
    let mut a = [0.0f64; LANES];
    let mut b = [0.0f64; LANES];
    let (gc, hc) = (g.chunks_exact(LANES), h.chunks_exact(LANES));
    let (gr, hr) = (gc.remainder(), hc.remainder());
    for (x, y) in gc.zip(hc) {
        for l in 0..LANES {
            a[l] += x[l] as f64;
            b[l] += (x[l] * y[l]) as f64;
        }
    }
    for (l, (x, y)) in gr.iter().zip(hr).enumerate() {
        a[l] += *x as f64;
        b[l] += (x * y) as f64;
    }
    (a.iter().sum(), b.iter().sum())
}

/// Sums per-chunk partial vectors of width `width` in chunk order.
fn chunked_reduce<F>(rows: usize, width: usize, f: F) -> Vec<f32>
where
    F: Fn(std::ops::Range<usize>, &mut [f32]) + Sync,
{
    let chunks = rows.div_ceil(ROW_CHUNK).max(1);
    let partials: Vec<Vec<f32>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0f32; width];
            let lo = c * ROW_CHUNK;
            f(lo..rows.min(lo + ROW_CHUNK), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0f32; width];
    for p in &partials {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

// ---------------------------------------------------------------- conv2d

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {is:?}")));
    }
    if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [C_out,C_in,3,3], got {ks:?}"),
        ));
    }
    if ks[1] != is[1] {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {} input channels, input has {}", ks[1], is[1]),
        ));
    }
    if bias.shape() != [ks[0]] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{}], got {:?}", ks[0], bias.shape()),
        ));
    }
    Ok((is[0], is[1], ks[0], is[2], is[3]))
}

/// Copies `planes` planes of `h x w` into `(h + 2) x (w + 2)` planes with a
/// zero border.
fn pad_planes(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let pw = w + 2;
    let pp = (h + 2) * pw;
    let mut out = vec![0.0f32; planes * pp];
    for (src, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(pp)) {
        for (sr, dr) in src.chunks_exact(w).zip(dst[pw..].chunks_exact_mut(pw)) {
            dr[1..=w].copy_from_slice(sr);
        }
    }
    out
}

/// Layout shared by the padded convolution kernels. Output position `(y, x)`
/// lives at `y * pw + x`; the tap `(ky, kx)` reads the padded input at that
/// index plus `ky * pw + kx`. Only the first `span` positions are computed,
/// which covers every valid output and keeps all tap reads in bounds.
struct PaddedGeom {
    pw: usize,
    padded: usize,
    span: usize,
}

impl PaddedGeom {
    fn new(h: usize, w: usize) -> Self {
        let pw = w + 2;
        PaddedGeom {
            pw,
            padded: (h + 2) * pw,
            span: h * pw - 2,
        }
    }

    fn tap(&self, ky: usize, kx: usize) -> usize {
        ky * self.pw + kx
    }
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, ci, co, h, w) = conv_dims(input, kernel, bias)?;
    let (x, k, b) = (input.data(), kernel.data(), bias.data());
    let plane = h * w;
    let geo = PaddedGeom::new(h, w);
    let mut out = vec![0.0f32; n * co * plane];
    out.par_chunks_mut(co * plane).enumerate().for_each(|(img, out_img)| {
        let xp = pad_planes(&x[img * ci * plane..(img + 1) * ci * plane], ci, h, w);
        let mut acc = vec![0.0f32; geo.span];
        for o in 0..co {
            acc.fill(b[o]);
            for c in 0..ci {
                let src = &xp[c * geo.padded..(c + 1) * geo.padded];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = k[((o * ci + c) * 3 + ky) * 3 + kx];
                        let off = geo.tap(ky, kx);
                        for (d, s) in acc.iter_mut().zip(&src[off..off + geo.span]) {
                            *d += wv * s;
                        }
                    }
                }
            }
            for (y, dr) in out_img[o * plane..(o + 1) * plane].chunks_exact_mut(w).enumerate() {
                dr.copy_from_slice(&acc[y * geo.pw..y * geo.pw + w]);
            }
        }
    });
    Tensor::new(vec![n, co, h, w], out)
}

pub(crate) struct ConvGrads {
    pub input: Vec<f32>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &[f32]) -> ConvGrads {
    let s = input.shape();
    let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
    let co = kernel.shape()[0];
    let plane = h * w;
    let geo = PaddedGeom::new(h, w);
    let (x, k) = (input.data(), kernel.data());

    let mut gin = vec![0.0f32; n * ci * plane];
    // Per-image kernel/bias partials, reduced afterwards in image order.
    let per_image: Vec<(Vec<f32>, Vec<f32>)> = gin
        .par_chunks_mut(ci * plane)
        .enumerate()
        .map(|(img, gin_img)| {
            let xp = pad_planes(&x[img * ci * plane..(img + 1) * ci * plane], ci, h, w);
            // Output gradient on the padded row stride; the two extra
            // columns per row stay zero.
            let mut gp = vec![0.0f32; co * geo.span];
            for (o, dst) in gp.chunks_exact_mut(geo.span).enumerate() {
                let g = &grad_out[(img * co + o) * plane..(img * co + o + 1) * plane];
                for (y, gr) in g.chunks_exact(w).enumerate() {
                    dst[y * geo.pw..y * geo.pw + w].copy_from_slice(gr);
                }
            }
            let mut gxp = vec![0.0f32; ci * geo.padded];
            let mut gk = vec![0.0f32; co * ci * 9];
            let mut gb = vec![0.0f32; co];
            for o in 0..co {
                let g = &gp[o * geo.span..(o + 1) * geo.span];
                gb[o] = lane_sum(g);
                for c in 0..ci {
                    let src = &xp[c * geo.padded..(c + 1) * geo.padded];
                    let gsrc = &mut gxp[c * geo.padded..(c + 1) * geo.padded];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let widx = ((o * ci + c) * 3 + ky) * 3 + kx;
                            let off = geo.tap(ky, kx);
                            gk[widx] = lane_dot(g, &src[off..off + geo.span]);
                            let wv = k[widx];
                            for (gi, gv) in gsrc[off..off + geo.span].iter_mut().zip(g) {
                                *gi += wv * gv;
                            }
                        }
                    }
                }
            }
            for (src, dst) in gxp.chunks_exact(geo.padded).zip(gin_img.chunks_exact_mut(plane)) {
                for (y, dr) in dst.chunks_exact_mut(w).enumerate() {
                    let start = (y + 1) * geo.pw + 1;
                    dr.copy_from_slice(&src[start..start + w]);
                }
            }
            (gk, gb)
        })
        .collect();

    let mut gk = vec![0.0f32; co * ci * 9];
    let mut gb = vec![0.0f32; co];
    for (pk, pb) in &per_image {
        gk.iter_mut().zip(pk).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    ConvGrads {
        input: gin,
        kernel: gk,
        bias: gb,
    }
}

// ------------------------------------------------------------ batch norm

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance.
    pub var: Vec<f32>,
    pub count: usize,
}

pub(crate) struct BnForward {
    pub output: Vec<f32>,
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub stats: Option<BatchStats>,
}

/// (N, C, S) for an input laid out as [N, C, ...].
pub(crate) fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            "batch_norm",
            format!("input must be [N,C,...], got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Rounds `t` (|t| < 2^51) to the nearest integer using the FPU's own
/// rounding of a large offset.
#[inline(always)]
fn to_fixed(t: f64) -> i64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    (t + MAGIC).to_bits() as i64 - MAGIC.to_bits() as i64
}

/// Term of an exact channel sum: `x - center`, squared when `square`.
#[inline(always)]
fn centered(v: f32, center: f64, square: bool) -> f64 {
    let d = v as f64 - center;
    if square {
        d * d
    } else {
        d
    }
}

/// Runs `$f::<C>` when the layout is a plain `[rows, C]` matrix with one of
/// the channel counts of the CP module, `$fallback` otherwise.
macro_rules! by_row_width {
    ($c:expr, $s:expr, $f:ident ($($arg:expr),*), $fallback:expr) => {
        match ($s, $c) {
            (1, 4) => $f::<4>($($arg),*),
            (1, 8) => $f::<8>($($arg),*),
            (1, 16) => $f::<16>($($arg),*),
            _ => $fallback,
        }
    };
}

fn row_bounds<const C: usize>(x: &[f32]) -> Vec<f32> {
    let mut m = [0.0f32; C];
    for r in x.chunks_exact(C) {
        for ch in 0..C {
            let a = r[ch].abs();
            m[ch] = if a > m[ch] { a } else { m[ch] };
        }
    }
    m.to_vec()
}

fn row_fixed_sums<const C: usize>(x: &[f32], center: &[f64], up: &[f64], square: bool) -> Vec<i64> {
    let center: [f64; C] = center.try_into().expect("width");
    let up: [f64; C] = up.try_into().expect("width");
    let mut acc = [0i64; C];
    for r in x.chunks_exact(C) {
        for ch in 0..C {
            acc[ch] += to_fixed(centered(r[ch], center[ch], square) * up[ch]);
        }
    }
    acc.to_vec()
}

/// Per-channel sums of `(x - center)` (or its square) over an `[N, C, S]`
/// layout.
///
/// Terms are rounded to fixed point and added as integers, so the result is
/// independent of summation order: permuting rows, or the members of any
/// subset of rows, cannot change it. `bound[ch]` must be at least every
/// term's magnitude in that channel.
fn exact_channel_sums(x: &[f32], c: usize, s: usize, bound: &[f64], center: &[f64], square: bool) -> Vec<f64> {
    let count = x.len() / c.max(1);
    // Headroom so that `count` terms below 2^head cannot overflow, capped
    // where `to_fixed` stops being exact.
    let head = (62 - (usize::BITS - count.max(1).leading_zeros()) as i32).min(50);
    let ups: Vec<i32> = bound
        .iter()
        .map(|&b| {
            // Smallest e with b < 2^e.
            let e = if b > 0.0 {
                ((b.to_bits() >> 52) & 0x7ff) as i32 - 1022
            } else {
                0
            };
            (head - e).clamp(-1000, 1000)
        })
        .collect();
    let up: Vec<f64> = ups.iter().map(|&u| 2f64.powi(u)).collect();
    let acc = by_row_width!(c, s, row_fixed_sums(x, center, &up, square), {
        let mut acc = vec![0i64; c];
        for row in x.chunks_exact(c * s) {
            for (ch, a) in acc.iter_mut().enumerate() {
                let (mu, u) = (center[ch], up[ch]);
                *a += row[ch * s..(ch + 1) * s]
                    .iter()
                    .map(|&v| to_fixed(centered(v, mu, square) * u))
                    .sum::<i64>();
            }
        }
        acc
    });
    acc.iter().zip(&ups).map(|(&a, &u)| a as f64 * 2f64.powi(-u)).collect()
}

/// Largest `|v|` of a slice.
fn max_abs(v: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let chunks = v.chunks_exact(LANES);
    for &r in chunks.remainder() {
        acc[0] = acc[0].max(r.abs());
    }
    for ch in chunks {
        for l in 0..LANES {
            let a = ch[l].abs();
            acc[l] = if a > acc[l] { a } else { acc[l] };
        }
    }
    acc.iter().fold(0.0, |m, &a| m.max(a))
}

fn channel_stats(x: &[f32], n: usize, c: usize, s: usize) -> BatchStats {
    let count = n * s;
    let bound = by_row_width!(c, s, row_bounds(x), {
        let mut bound = vec![0.0f32; c];
        for row in x.chunks_exact(c * s) {
            for (ch, m) in bound.iter_mut().enumerate() {
                *m = m.max(max_abs(&row[ch * s..(ch + 1) * s]));
            }
        }
        bound
    });
    let bound: Vec<f64> = bound.iter().map(|&m| m as f64).collect();
    let sums = exact_channel_sums(x, c, s, &bound, &vec![0.0; c], false);
    let mean: Vec<f64> = sums.iter().map(|&t| t / count as f64).collect();
    let dev_bound: Vec<f64> = bound.iter().zip(&mean).map(|(m, mu)| (m + mu.abs()).powi(2)).collect();
    let m2 = exact_channel_sums(x, c, s, &dev_bound, &mean, true);
    BatchStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        var: m2.iter().map(|&v| (v / count as f64) as f32).collect(),
        count,
    }
}

/// Per-channel affine maps applied by a batch norm pass: `(shift, scale,
/// gamma, beta)` for the forward pass, `(mean_dy, mean_dy_xhat, scale, _)`
/// for the backward pass.
type Coeffs<'a> = (&'a [f32], &'a [f32], &'a [f32], &'a [f32]);

fn row_normalize<const C: usize>(
    x: &[f32],
    (mean, inv_std, gamma, beta): Coeffs<'_>,
    xhat: &mut [f32],
    out: &mut [f32],
) {
    let arr = |v: &[f32]| -> [f32; C] { v.try_into().expect("width") };
    let (mean, inv_std, gamma, beta) = (arr(mean), arr(inv_std), arr(gamma), arr(beta));
    for ((xr, hr), or) in x
        .chunks_exact(C)
        .zip(xhat.chunks_exact_mut(C))
        .zip(out.chunks_exact_mut(C))
    {
        for ch in 0..C {
            let xh = (xr[ch] - mean[ch]) * inv_std[ch];
            hr[ch] = xh;
            or[ch] = gamma[ch] * xh + beta[ch];
        }
    }
}

pub(crate) fn batch_norm_forward(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    mode: BnMode,
) -> Result<BnForward> {
    let (n, c, s) = bn_layout(input.shape())?;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("per-channel parameters must have {c} entries"),
        ));
    }
    let x = input.data();
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            if n * s < 2 {
                return Err(Error::invalid(format!(
                    "batch_norm: train mode needs a population of at least 2, got {}",
                    n * s
                )));
            }
            let st = channel_stats(x, n, c, s);
            (st.mean.clone(), st.var.clone(), Some(st))
        }
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
    };
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0f32; x.len()];
    let mut output = vec![0.0f32; x.len()];
    let coeffs = (&mean[..], &inv_std[..], gamma, beta);
    by_row_width!(c, s, row_normalize(x, coeffs, &mut xhat, &mut output), {
        let rows = x
            .chunks_exact(c * s)
            .zip(xhat.chunks_exact_mut(c * s))
            .zip(output.chunks_exact_mut(c * s));
        for ((xr, hr), or) in rows {
            for ch in 0..c {
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                let span = ch * s..(ch + 1) * s;
                for ((&xv, h), o) in xr[span.clone()].iter().zip(&mut hr[span.clone()]).zip(&mut or[span]) {
                    let xh = (xv - mu) * is;
                    *h = xh;
                    *o = g * xh + b;
                }
            }
        }
    });
    Ok(BnForward {
        output,
        xhat,
        inv_std,
        stats,
    })
}

pub(crate) struct BnGrads {
    pub input: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

fn row_grad_sums<const C: usize>(grad_out: &[f32], xhat: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let mut sum_dy = [0.0f64; C];
    let mut sum_dy_xhat = [0.0f64; C];
    for (gr, hr) in grad_out.chunks_exact(C).zip(xhat.chunks_exact(C)) {
        for ch in 0..C {
            sum_dy[ch] += gr[ch] as f64;
            sum_dy_xhat[ch] += (gr[ch] * hr[ch]) as f64;
        }
    }
    (sum_dy.to_vec(), sum_dy_xhat.to_vec())
}

fn row_input_grad<const C: usize>(grad_out: &[f32], xhat: &[f32], (md, mdx, scale, _): Coeffs<'_>, gin: &mut [f32]) {
    let arr = |v: &[f32]| -> [f32; C] { v.try_into().expect("width") };
    let (md, mdx, scale) = (arr(md), arr(mdx), arr(scale));
    for ((dst, gr), hr) in gin
        .chunks_exact_mut(C)
        .zip(grad_out.chunks_exact(C))
        .zip(xhat.chunks_exact(C))
    {
        for ch in 0..C {
            dst[ch] = scale[ch] * (gr[ch] - md[ch] - hr[ch] * mdx[ch]);
        }
    }
}

pub(crate) fn batch_norm_backward(
    shape: &[usize],
    grad_out: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    mode: BnMode,
) -> BnGrads {
    let (n, c, s) = bn_layout(shape).expect("validated in forward");
    let count = (n * s) as f64;
    let (sum_dy, sum_dy_xhat) = by_row_width!(c, s, row_grad_sums(grad_out, xhat), {
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (gr, hr) in grad_out.chunks_exact(c * s).zip(xhat.chunks_exact(c * s)) {
            for ch in 0..c {
                let span = ch * s..(ch + 1) * s;
                let (a, b) = lane_sums_f64(&gr[span.clone()], &hr[span]);
                sum_dy[ch] += a;
                sum_dy_xhat[ch] += b;
            }
        }
        (sum_dy, sum_dy_xhat)
    });
    let scale: Vec<f32> = gamma.iter().zip(inv_std).map(|(g, i)| g * i).collect();
    let (mean_dy, mean_dy_xhat): (Vec<f32>, Vec<f32>) = match mode {
        BnMode::Train => (
            sum_dy.iter().map(|&v| (v / count) as f32).collect(),
            sum_dy_xhat.iter().map(|&v| (v / count) as f32).collect(),
        ),
        BnMode::Eval => (vec![0.0; c], vec![0.0; c]),
    };
    let mut gin = vec![0.0f32; grad_out.len()];
    let coeffs = (&mean_dy[..], &mean_dy_xhat[..], &scale[..], &scale[..]);
    by_row_width!(c, s, row_input_grad(grad_out, xhat, coeffs, &mut gin), {
        let rows = gin
            .chunks_exact_mut(c * s)
            .zip(grad_out.chunks_exact(c * s))
            .zip(xhat.chunks_exact(c * s));
        for ((dst, gr), hr) in rows {
            for ch in 0..c {
                let (sc, md, mdx) = (scale[ch], mean_dy[ch], mean_dy_xhat[ch]);
                let span = ch * s..(ch + 1) * s;
                for ((d, &g), &h) in dst[span.clone()].iter_mut().zip(&gr[span.clone()]).zip(&hr[span]) {
                    *d = sc * (g - md - h * mdx);
                }
            }
        }
    });
    BnGrads {
        input: gin,
        gamma: sum_dy_xhat.iter().map(|&v| v as f32).collect(),
        beta: sum_dy.iter().map(|&v| v as f32).collect(),
    }
}

/// Folds batch statistics into running statistics.
pub fn update_running_stats(running_mean: &mut [f32], running_var: &mut [f32], stats: &BatchStats) {
    let unbias = if stats.count > 1 {
        stats.count as f32 / (stats.count - 1) as f32
    } else {
        1.0
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = BN_MOMENTUM * running_mean[ch] + (1.0 - BN_MOMENTUM) * stats.mean[ch];
        running_var[ch] = BN_MOMENTUM * running_var[ch] + (1.0 - BN_MOMENTUM) * stats.var[ch] * unbias;
    }
}

// ---------------------------------------------------------------- linear

/// Calls `$fixed::<DIN, DOUT>` for the widths used by the CP module and
/// `$dynamic` otherwise. Both evaluate the same expressions in the same
/// order.
macro_rules! dispatch_widths {
    ($din:expr, $dout:expr, $fixed:ident, ($($arg:expr),*), $dynamic:ident) => {
        match ($din, $dout) {
            (3, 4) => $fixed::<3, 4>($($arg),*),
            (4, 8) => $fixed::<4, 8>($($arg),*),
            (8, 16) => $fixed::<8, 16>($($arg),*),
            (16, 4) => $fixed::<16, 4>($($arg),*),
            _ => $dynamic($din, $dout, $($arg),*),
        }
    };
}

fn linear_rows<const I: usize, const O: usize>(x: &[f32], wt: &[f32], b: Option<&[f32]>, out: &mut [f32]) {
    let wt: Vec<[f32; O]> = wt.chunks_exact(O).map(|r| r.try_into().expect("width")).collect();
    for (xr, orow) in x.chunks_exact(I).zip(out.chunks_exact_mut(O)) {
        let mut acc = [0.0f32; O];
        for (&xv, wr) in xr.iter().zip(&wt) {
            for o in 0..O {
                acc[o] += xv * wr[o];
            }
        }
        if let Some(b) = b {
            for o in 0..O {
                acc[o] += b[o];
            }
        }
        orow.copy_from_slice(&acc);
    }
}

fn linear_rows_dyn(din: usize, dout: usize, x: &[f32], wt: &[f32], b: Option<&[f32]>, out: &mut [f32]) {
    for (xr, orow) in x.chunks_exact(din).zip(out.chunks_exact_mut(dout)) {
        for (&xv, wr) in xr.iter().zip(wt.chunks_exact(dout)) {
            for (o, &wv) in orow.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
        if let Some(b) = b {
            for (o, &bv) in orow.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
}

fn linear_input_grad<const I: usize, const O: usize>(gy: &[f32], w: &[f32], gin: &mut [f32]) {
    let w: Vec<[f32; I]> = w.chunks_exact(I).map(|r| r.try_into().expect("width")).collect();
    for (gr, dst) in gy.chunks_exact(O).zip(gin.chunks_exact_mut(I)) {
        let mut acc = [0.0f32; I];
        for (&g, wr) in gr.iter().zip(&w) {
            for i in 0..I {
                acc[i] += g * wr[i];
            }
        }
        dst.copy_from_slice(&acc);
    }
}

fn linear_input_grad_dyn(din: usize, dout: usize, gy: &[f32], w: &[f32], gin: &mut [f32]) {
    for (gr, dst) in gy.chunks_exact(dout).zip(gin.chunks_exact_mut(din)) {
        for (&g, wr) in gr.iter().zip(w.chunks_exact(din)) {
            for (d, &wv) in dst.iter_mut().zip(wr) {
                *d += g * wv;
            }
        }
    }
}

/// Adds `x^T gy` (as `[in, out]`) then the column sums of `gy` into `acc`.
fn linear_weight_grad<const I: usize, const O: usize>(x: &[f32], gy: &[f32], acc: &mut [f32]) {
    let mut gwt = [[0.0f32; O]; I];
    let mut gb = [0.0f32; O];
    for (xr, gr) in x.chunks_exact(I).zip(gy.chunks_exact(O)) {
        for o in 0..O {
            gb[o] += gr[o];
        }
        for i in 0..I {
            for o in 0..O {
                gwt[i][o] += gr[o] * xr[i];
            }
        }
    }
    for (dst, src) in acc.iter_mut().zip(gwt.iter().flatten().chain(&gb)) {
        *dst += src;
    }
}

fn linear_weight_grad_dyn(din: usize, dout: usize, x: &[f32], gy: &[f32], acc: &mut [f32]) {
    let (gwt, gb) = acc.split_at_mut(din * dout);
    for (xr, gr) in x.chunks_exact(din).zip(gy.chunks_exact(dout)) {
        for (b, &g) in gb.iter_mut().zip(gr) {
            *b += g;
        }
        for (&xv, grow) in xr.iter().zip(gwt.chunks_exact_mut(dout)) {
            for (a, &g) in grow.iter_mut().zip(gr) {
                *a += g * xv;
            }
        }
    }
}

pub(crate) fn linear_dims(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 2 || ws.len() != 2 {
        return Err(Error::shape(
            "linear",
            format!("expected [P,in] input and [out,in] weight, got {is:?} and {ws:?}"),
        ));
    }
    if is[1] != ws[1] {
        return Err(Error::shape(
            "linear",
            format!("input width {} does not match weight width {}", is[1], ws[1]),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("bias must be [{}], got {:?}", ws[0], b.shape()),
            ));
        }
    }
    Ok((is[0], ws[1], ws[0]))
}

/// `x W^T + b` for `x: [P,in]`, `W: [out,in]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (p, din, dout) = linear_dims(input, weight, bias)?;
    let (x, w) = (input.data(), weight.data());
    let b = bias.map(|b| b.data());
    // [in, out] copy of the weight so the inner loop runs over outputs.
    let wt: Vec<f32> = (0..din * dout).map(|t| w[(t % dout) * din + t / dout]).collect();
    let mut out = vec![0.0f32; p * dout];
    out.par_chunks_mut(ROW_CHUNK * dout)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let rows = &x[chunk * ROW_CHUNK * din..][..dst.len() / dout * din];
            dispatch_widths!(din, dout, linear_rows, (rows, &wt, b, dst), linear_rows_dyn);
        });
    Tensor::new(vec![p, dout], out)
}

pub(crate) struct LinearGrads {
    pub input: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &[f32]) -> LinearGrads {
    let (p, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[0];
    let (x, w) = (input.data(), weight.data());

    let mut gin = vec![0.0f32; p * din];
    gin.par_chunks_mut(ROW_CHUNK * din)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let gy = &grad_out[chunk * ROW_CHUNK * dout..][..dst.len() / din * dout];
            dispatch_widths!(din, dout, linear_input_grad, (gy, w, dst), linear_input_grad_dyn);
        });

    // Accumulated as [in, out] so the inner loop runs over outputs.
    let gwb = chunked_reduce(p, din * dout + dout, |rows, acc| {
        let xs = &x[rows.start * din..rows.end * din];
        let gy = &grad_out[rows.start * dout..rows.end * dout];
        dispatch_widths!(din, dout, linear_weight_grad, (xs, gy, acc), linear_weight_grad_dyn);
    });
    let (gwt, gb) = gwb.split_at(din * dout);
    let gw: Vec<f32> = (0..dout * din).map(|t| gwt[(t % din) * dout + t / din]).collect();
    LinearGrads {
        input: gin,
        weight: gw,
        bias: gb.to_vec(),
    }
}

// ------------------------------------------------------- misc elementwise

/// Rectifier with subgradient 0 at 0.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Mean over every axis after the first two: [N,C,...] -> [N,C].
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() < 3 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected [N,C,...], got {s:?}"),
        ));
    }
    let (n, c, sp) = (s[0], s[1], s[2..].iter().product::<usize>());
    let data = input
        .data()
        .chunks(sp)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / sp as f64) as f32)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Mean softmax cross-entropy over the batch, plus the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {s:?} do not match {} labels", labels.len()),
        ));
    }
    let classes = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let mut probs = vec![0.0f32; logits.numel()];
    let mut total = 0.0f64;
    for (i, (row, prow)) in logits.data().chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (((v - m) as f64).exp() / z) as f32;
        }
        total += z.ln() - (row[labels[i]] - m) as f64;
    }
    Ok(((total / labels.len() as f64) as f32, probs))
}

// ------------------------------------------------------------- set ops

/// `out[r, j, :] = source[indices[r*k + j], :]` for `indices` of shape [rows, k].
pub fn gather_rows(source: &Tensor, indices: &[usize], k: usize) -> Result<Tensor> {
    let s = source.shape();
    if s.len() != 2 {
        return Err(Error::shape("gather_rows", format!("source must be [M,C], got {s:?}")));
    }
    if k == 0 || !indices.len().is_multiple_of(k) {
        return Err(Error::shape(
            "gather_rows",
            format!("{} indices do not form rows of k = {k}", indices.len()),
        ));
    }
    let (m, c) = (s[0], s[1]);
    if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
        return Err(Error::IndexOutOfRange {
            op: "gather_rows",
            index: bad,
            len: m,
        });
    }
    let src = source.data();
    let mut out = vec![0.0f32; indices.len() * c];
    out.par_chunks_mut(ROW_CHUNK * c).enumerate().for_each(|(chunk, dst)| {
        for (r, drow) in dst.chunks_mut(c).enumerate() {
            let i = indices[chunk * ROW_CHUNK + r];
            drow.copy_from_slice(&src[i * c..(i + 1) * c]);
        }
    });
    Tensor::new(vec![indices.len() / k, k, c], out)
}

pub(crate) fn gather_rows_backward(m: usize, c: usize, indices: &[usize], grad_out: &[f32]) -> Vec<f32> {
    let mut g = vec![0.0f32; m * c];
    for (r, &i) in indices.iter().enumerate() {
        let dst = &mut g[i * c..(i + 1) * c];
        dst.iter_mut()
            .zip(&grad_out[r * c..(r + 1) * c])
            .for_each(|(a, b)| *a += b);
    }
    g
}

/// Element-wise max over the set axis of [M,k,C], ties to the smallest slot.
///
/// Returns the pooled [M,C] tensor and the winning slot per (row, channel).
pub fn max_over_set(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::shape("max_over_set", format!("expected [M,k,C], got {s:?}")));
    }
    let (m, k, c) = (s[0], s[1], s[2]);
    let x = input.data();
    let mut out = vec![0.0f32; m * c];
    let mut arg = vec![0u32; m * c];
    for i in 0..m {
        let set = &x[i * k * c..(i + 1) * k * c];
        let (orow, arow) = (&mut out[i * c..(i + 1) * c], &mut arg[i * c..(i + 1) * c]);
        orow.copy_from_slice(&set[..c]);
        for j in 1..k {
            for (ch, &v) in set[j * c..(j + 1) * c].iter().enumerate() {
                if v > orow[ch] {
                    orow[ch] = v;
                    arow[ch] = j as u32;
                }
            }
        }
    }
    Ok((Tensor::new(vec![m, c], out)?, arg))
}

pub(crate) fn max_over_set_backward(shape: &[usize], argmax: &[u32], grad_out: &[f32]) -> Vec<f32> {
    let (m, k, c) = (shape[0], shape[1], shape[2]);
    let mut g = vec![0.0f32; m * k * c];
    for i in 0..m {
        for ch in 0..c {
            let j = argmax[i * c + ch] as usize;
            g[(i * k + j) * c + ch] = grad_out[i * c + ch];
        }
    }
    g
}

// ------------------------------------------------------------ permute

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(input: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let s = input.shape();
    let mut seen = vec![false; s.len()];
    if axes.len() != s.len()
        || axes
            .iter()
            .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::shape(
            "permute",
            format!("{axes:?} is not a permutation of rank {}", s.len()),
        ));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let in_strides = strides(s);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = idx[..rank - 1].iter().zip(&src_strides).map(|(i, st)| i * st).sum();
        out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        // increment the outer multi-index
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
