//! Slice-level forward and backward kernels used by the tape.
//!
//! Everything here is single-threaded and visits elements in a fixed order, so
//! results are bit-reproducible for identical inputs.

use super::tensor::{gemm, Element};

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if input.len() != 4 || weight.len() != 4 || stride == 0 {
            return None;
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

// Output columns `lo..hi` whose input column `ox * stride + k - pad` is in bounds.
fn valid_cols(g: &ConvGeom, k: usize) -> (usize, usize) {
    let lo = if g.pad > k {
        (g.pad - k).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.w + g.pad > k {
        ((g.w + g.pad - k - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&srow[first..first + hi - lo]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = srow[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in drow[first..first + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            drow[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation via im2col + gemm. `out` is `[n, o, ho, wo]`.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    out: &mut [T],
) {
    let in_item = g.c * g.h * g.w;
    let out_item = g.o * g.out_plane();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * g.out_plane()]
    };
    for n in 0..g.n {
        let xn = &x[n * in_item..(n + 1) * in_item];
        let yn = &mut out[n * out_item..(n + 1) * out_item];
        let lhs: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(
            g.o,
            g.patch(),
            g.out_plane(),
            weight,
            false,
            lhs,
            false,
            yn,
            false,
        );
        if let Some(b) = bias {
            for (oc, chunk) in yn.chunks_mut(g.out_plane()).enumerate() {
                let bv = b[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Accumulates gradients of a convolution into whichever buffers are given.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_item = g.c * g.h * g.w;
    let plane = g.out_plane();
    let out_item = g.o * plane;
    let mut cols = vec![
        T::zero();
        if g.is_pointwise() {
            0
        } else {
            g.patch() * plane
        }
    ];
    let mut dcols = vec![T::zero(); if dx.is_some() { g.patch() * plane } else { 0 }];
    for n in 0..g.n {
        let dyn_ = &dy[n * out_item..(n + 1) * out_item];
        if let Some(db) = db.as_deref_mut() {
            for (oc, chunk) in dyn_.chunks(plane).enumerate() {
                let mut s = T::zero();
                for &v in chunk {
                    s += v;
                }
                db[oc] += s;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * in_item..(n + 1) * in_item];
            let rhs: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(g.o, plane, g.patch(), dyn_, false, rhs, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_item..(n + 1) * in_item];
            if g.is_pointwise() {
                gemm(g.patch(), g.o, plane, weight, true, dyn_, false, dxn, true);
            } else {
                gemm(
                    g.patch(),
                    g.o,
                    plane,
                    weight,
                    true,
                    dyn_,
                    false,
                    &mut dcols,
                    false,
                );
                col2im_add(&dcols, g, dxn);
            }
        }
    }
}

/// Per-(item, group) statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization over `[n, c, spatial]` with per-channel affine.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    out: &mut [T],
) -> GroupNormStats<T> {
    let cg = c / groups;
    let m = cg * spatial;
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cg) * spatial;
            let xs = &x[start..start + m];
            let mu = xs.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
            let var = xs
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            let mu_t = T::from_f64_lossy(mu);
            let rs_t = T::from_f64_lossy(rs);
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let (ga, be) = (gamma[ch], beta[ch]);
                let off = start + cc * spatial;
                for s in 0..spatial {
                    out[off + s] = (x[off + s] - mu_t) * rs_t * ga + be;
                }
            }
            mean.push(mu_t);
            rstd.push(rs_t);
        }
    }
    GroupNormStats { mean, rstd }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Element>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    stats: &GroupNormStats<T>,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let cg = c / groups;
    let m = (cg * spatial) as f64;
    for b in 0..n {
        for gi in 0..groups {
            let k = b * groups + gi;
            let (mu, rs) = (stats.mean[k], stats.rstd[k]);
            let start = (b * c + gi * cg) * spatial;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let off = start + cc * spatial;
                let mut dg = 0.0f64;
                let mut dbt = 0.0f64;
                for s in 0..spatial {
                    let xhat = ((x[off + s] - mu) * rs).as_f64();
                    let g = dy[off + s].as_f64();
                    dg += g * xhat;
                    dbt += g;
                    let dxhat = g * gamma[ch].as_f64();
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if let Some(d) = dgamma.as_deref_mut() {
                    d[ch] += T::from_f64_lossy(dg);
                }
                if let Some(d) = dbeta.as_deref_mut() {
                    d[ch] += T::from_f64_lossy(dbt);
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let rs64 = rs.as_f64();
                for cc in 0..cg {
                    let ch = gi * cg + cc;
                    let off = start + cc * spatial;
                    let ga = gamma[ch].as_f64();
                    for s in 0..spatial {
                        let xhat = ((x[off + s] - mu) * rs).as_f64();
                        let dxhat = dy[off + s].as_f64() * ga;
                        let v = rs64 / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        dx[off + s] += T::from_f64_lossy(v);
                    }
                }
            }
        }
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise softmax over the last axis of length `cols`.
pub fn softmax_rows<T: Element>(x: &[T], cols: usize, out: &mut [T]) {
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
}

pub fn upsample_nearest<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    out: &mut [T],
) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / f) * w + ox / f];
            }
        }
    }
}

pub fn upsample_nearest_backward<T: Element>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    dx: &mut [T],
) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / f) * w + ox / f] += src[oy * ow + ox];
            }
        }
    }
}

/// Non-overlapping `k×k` average pooling; `h` and `w` must be multiples of `k`.
pub fn avg_pool<T: Element>(x: &[T], planes: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_f64_lossy((k * k) as f64);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = s * inv;
            }
        }
    }
}

pub fn avg_pool_backward<T: Element>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    dx: &mut [T],
) {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_f64_lossy((k * k) as f64);
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * inv;
                for ddy in 0..k {
                    for ddx in 0..k {
                        dst[(oy * k + ddy) * w + ox * k + ddx] += g;
                    }
                }
            }
        }
    }
}

/// Interleaved sinusoidal embedding `[sin(t·f0), cos(t·f0), sin(t·f1), ...]`
/// with geometric frequencies `f_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}
