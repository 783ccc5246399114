//! Affine-invariant depth metrics, tile coherence and panorama point export.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::engine::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Disparity floor used when inverting aligned disparity to depth.
pub const DISPARITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
    pub n_valid: usize,
    pub n_solves: usize,
    /// `(scale, shift)` of every non-degenerate solve.
    pub solves: Vec<(f64, f64)>,
}

impl DepthAlignment {
    pub fn apply(&self, pred: &Tensor<f32>) -> Tensor<f32> {
        pred.map(|p| (self.scale * p as f64 + self.shift) as f32)
    }
}

fn valid_indices(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: &Tensor<f32>) -> Result<Vec<usize>> {
    pred.expect_same_shape(gt, "alignment")?;
    pred.expect_same_shape(valid, "alignment")?;
    Ok((0..pred.numel())
        .filter(|&i| {
            valid.data()[i] > 0.5 && pred.data()[i].is_finite() && gt.data()[i].is_finite()
        })
        .collect())
}

/// Least-squares `(s, t)` minimizing `Σ (s·p + t − g)²` over `idx`; `None` when
/// the predictions are (numerically) constant.
fn solve(pred: &[f32], gt: &[f32], idx: impl Iterator<Item = usize>) -> Option<(f64, f64)> {
    let (mut n, mut sp, mut spp, mut sg, mut spg) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for i in idx {
        let (p, g) = (pred[i] as f64, gt[i] as f64);
        n += 1.0;
        sp += p;
        spp += p * p;
        sg += g;
        spg += p * g;
    }
    let det = n * spp - sp * sp;
    if n < 2.0 || det <= 1e-12 * n * spp.max(f64::MIN_POSITIVE) {
        return None;
    }
    let s = (n * spg - sp * sg) / det;
    let t = (sg - s * sp) / n;
    Some((s, t))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Scale and shift aligning `pred_disp` to `gt_disp`: `n_solves` least-squares
/// fits on random `subset_frac` subsets of the valid pixels, combined by a
/// coordinate-wise median. Pixels count as valid where `valid > 0.5`, the
/// ground truth is positive and both values are finite.
pub fn align_scale_shift<R: Rng + ?Sized>(
    pred_disp: &Tensor<f32>,
    gt_disp: &Tensor<f32>,
    valid: &Tensor<f32>,
    n_solves: usize,
    subset_frac: f64,
    rng: &mut R,
) -> Result<DepthAlignment> {
    if n_solves == 0 || !(subset_frac > 0.0 && subset_frac <= 1.0) {
        return Err(invalid!("need n_solves >= 1 and subset_frac in (0, 1]"));
    }
    let idx: Vec<usize> = valid_indices(pred_disp, gt_disp, valid)?
        .into_iter()
        .filter(|&i| gt_disp.data()[i] > 0.0)
        .collect();
    if idx.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} valid pixels, need at least 2",
            idx.len()
        )));
    }
    let k = ((subset_frac * idx.len() as f64).round() as usize).clamp(2, idx.len());
    let mut solves = Vec::with_capacity(n_solves);
    for _ in 0..n_solves {
        let picked: Box<dyn Iterator<Item = usize>> = if k == idx.len() {
            Box::new(idx.iter().copied())
        } else {
            Box::new(index::sample(rng, idx.len(), k).into_iter().map(|j| idx[j]))
        };
        if let Some(st) = solve(pred_disp.data(), gt_disp.data(), picked) {
            solves.push(st);
        }
    }
    if solves.is_empty() {
        return Err(Error::Degenerate(
            "every alignment solve was degenerate (constant prediction)".into(),
        ));
    }
    let mut s: Vec<f64> = solves.iter().map(|p| p.0).collect();
    let mut t: Vec<f64> = solves.iter().map(|p| p.1).collect();
    Ok(DepthAlignment {
        scale: median(&mut s),
        shift: median(&mut t),
        n_valid: idx.len(),
        n_solves,
        solves,
    })
}

/// `1 / max(d, floor)` per pixel.
pub fn disparity_to_depth(disp: &Tensor<f32>) -> Tensor<f32> {
    disp.map(|d| (1.0 / (d as f64).max(DISPARITY_FLOOR)) as f32)
}

fn masked_mean(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    valid: &Tensor<f32>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<f64> {
    let idx = valid_indices(pred, gt, valid)?;
    if idx.is_empty() {
        return Err(Error::Degenerate("no valid pixels".into()));
    }
    let sum: f64 = idx
        .iter()
        .map(|&i| f(pred.data()[i] as f64, gt.data()[i] as f64))
        .sum();
    Ok(sum / idx.len() as f64)
}

/// `mean(|pred − gt| / gt)` over valid pixels, in depth units.
pub fn abs_rel(
    pred_depth: &Tensor<f32>,
    gt_depth: &Tensor<f32>,
    valid: &Tensor<f32>,
) -> Result<f64> {
    masked_mean(pred_depth, gt_depth, valid, |p, g| (p - g).abs() / g)
}

/// `sqrt(mean((pred − gt)²))` over valid pixels, in disparity units.
pub fn rmse_disparity(
    pred_disp: &Tensor<f32>,
    gt_disp: &Tensor<f32>,
    valid: &Tensor<f32>,
) -> Result<f64> {
    masked_mean(pred_disp, gt_disp, valid, |p, g| (p - g).powi(2)).map(f64::sqrt)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub alignment: DepthAlignment,
}

/// Aligns a predicted disparity map to `1 / gt_depth` and scores it.
pub fn evaluate_depth<R: Rng + ?Sized>(
    pred_disp: &Tensor<f32>,
    gt_depth: &Tensor<f32>,
    valid: &Tensor<f32>,
    rng: &mut R,
) -> Result<DepthReport> {
    let gt_disp = gt_depth.map(|d| if d > 0.0 { 1.0 / d } else { 0.0 });
    let alignment = align_scale_shift(pred_disp, &gt_disp, valid, 8, 0.1, rng)?;
    let aligned = alignment.apply(pred_disp);
    let valid = valid.zip_map(gt_depth, |v, d| if v > 0.5 && d > 0.0 { 1.0 } else { 0.0 })?;
    Ok(DepthReport {
        abs_rel: abs_rel(&disparity_to_depth(&aligned), gt_depth, &valid)?,
        rmse: rmse_disparity(&aligned, &gt_disp, &valid)?,
        alignment,
    })
}

pub const HIST_BINS: usize = 8;
const POOL: usize = 8;

fn luminance(img: &Tensor<f32>, i: usize) -> f64 {
    let s = img.shape();
    let plane = s[1] * s[2];
    if s[0] == 3 {
        0.299 * img.data()[i] as f64
            + 0.587 * img.data()[plane + i] as f64
            + 0.114 * img.data()[2 * plane + i] as f64
    } else {
        img.data()[i] as f64
    }
}

/// Triangular soft assignment of `x` (clamped to [-1, 1]) to bins centred at
/// `-1 + (2i + 1) / HIST_BINS`.
pub fn soft_bin(x: f64, hist: &mut [f64; HIST_BINS], weight: f64) {
    let width = 2.0 / HIST_BINS as f64;
    let p = ((x.clamp(-1.0, 1.0) + 1.0) / width - 0.5).clamp(0.0, (HIST_BINS - 1) as f64);
    let lo = p.floor() as usize;
    let frac = p - lo as f64;
    hist[lo] += weight * (1.0 - frac);
    if lo + 1 < HIST_BINS {
        hist[lo + 1] += weight * frac;
    }
}

/// Per-tile features: channel means, channel stds, and the soft histogram of
/// the 8×8 block-averaged luminance relative to `lum_center`.
pub fn tile_features(pano: &Tensor<f32>, x0: usize, width: usize, lum_center: f64) -> Vec<f64> {
    let s = pano.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let n = (h * width) as f64;
    let mut feats = Vec::with_capacity(2 * c + HIST_BINS);
    let mut stds = Vec::with_capacity(c);
    for ch in 0..c {
        let vals = (0..h).flat_map(|r| (x0..x0 + width).map(move |col| r * w + col));
        let mean = vals
            .clone()
            .map(|i| pano.data()[ch * plane + i] as f64)
            .sum::<f64>()
            / n;
        let var = vals
            .map(|i| (pano.data()[ch * plane + i] as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        feats.push(mean);
        stds.push(var.sqrt());
    }
    feats.extend(stds);
    let (ph, pw) = (POOL.min(h), POOL.min(width));
    let mut pooled = vec![0.0f64; ph * pw];
    let mut counts = vec![0.0f64; ph * pw];
    for r in 0..h {
        for col in 0..width {
            let b = (r * ph / h) * pw + col * pw / width;
            pooled[b] += luminance(pano, r * w + x0 + col);
            counts[b] += 1.0;
        }
    }
    let mut hist = [0.0; HIST_BINS];
    let wgt = 1.0 / pooled.len() as f64;
    for (p, k) in pooled.iter().zip(&counts) {
        soft_bin(p / k - lum_center, &mut hist, wgt);
    }
    feats.extend_from_slice(&hist);
    feats
}

/// Mean pairwise L2 distance between the features of `n_tiles` equal-width
/// vertical strips of `pano` (`[c, h, w]`, `c` of 1 or 3). Lower is more coherent.
pub fn tile_coherence(pano: &Tensor<f32>, n_tiles: usize) -> Result<f64> {
    let s = pano.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(shape_err!("panorama must be [1|3, h, w], got {s:?}"));
    }
    if n_tiles < 2 || !s[2].is_multiple_of(n_tiles) {
        return Err(invalid!(
            "width {} not divisible into {n_tiles} tiles",
            s[2]
        ));
    }
    let plane = s[1] * s[2];
    let center = (0..plane).map(|i| luminance(pano, i)).sum::<f64>() / plane as f64;
    let tw = s[2] / n_tiles;
    let feats: Vec<Vec<f64>> = (0..n_tiles)
        .map(|k| tile_features(pano, k * tw, tw, center))
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..n_tiles {
        for b in a + 1..n_tiles {
            total += feats[a]
                .iter()
                .zip(&feats[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rgb: [u8; 3],
}

/// Cylindrical back-projection: column `u` is azimuth `(u/W − 0.5)·fov`,
/// radius is the depth, and height grows linearly with the row offset from
/// the horizon at the same angular pitch. Pixels with depth ≤ 0 are skipped.
pub fn panorama_to_points(
    rgb: &Tensor<f32>,
    depth: &Tensor<f32>,
    h_fov_degrees: f64,
) -> Result<Vec<Point>> {
    let (ds, cs) = (depth.shape(), rgb.shape());
    if ds.len() != 3 || ds[0] != 1 || cs != [3, ds[1], ds[2]] {
        return Err(shape_err!("rgb {cs:?} / depth {ds:?} mismatch"));
    }
    let (h, w) = (ds[1], ds[2]);
    let fov = h_fov_degrees.to_radians();
    let pitch = fov / w as f64;
    let plane = h * w;
    let mut out = Vec::with_capacity(plane);
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let d = depth.data()[i] as f64;
            if !(d > 0.0) {
                continue;
            }
            let theta = (u as f64 / w as f64 - 0.5) * fov;
            let q = |c: usize| {
                ((rgb.data()[c * plane + i].clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
            };
            out.push(Point {
                x: d * theta.sin(),
                y: d * (h as f64 / 2.0 - v as f64) * pitch,
                z: d * theta.cos(),
                rgb: [q(0), q(1), q(2)],
            });
        }
    }
    Ok(out)
}

/// Inverse of [`panorama_to_points`] for one point: `(u, v, depth)`.
pub fn point_to_pixel(
    p: &Point,
    width: usize,
    height: usize,
    h_fov_degrees: f64,
) -> (f64, f64, f64) {
    let fov = h_fov_degrees.to_radians();
    let d = (p.x * p.x + p.z * p.z).sqrt();
    let theta = p.x.atan2(p.z);
    let u = (theta / fov + 0.5) * width as f64;
    let v = height as f64 / 2.0 - p.y / (d * fov / width as f64);
    (u, v, d)
}

/// Maps normalized disparity in [-1, 1] to metric depth in `[near, far]`.
pub fn denormalize_disparity(disp: &Tensor<f32>, near: f64, far: f64) -> Tensor<f32> {
    let (lo, hi) = (1.0 / far, 1.0 / near);
    disp.map(|d| {
        let inv = lo + (d.clamp(-1.0, 1.0) as f64 + 1.0) * 0.5 * (hi - lo);
        (1.0 / inv) as f32
    })
}

pub fn ply_string(points: &[Point]) -> String {
    let mut s = String::with_capacity(64 + points.len() * 40);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for p in points {
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {} {} {}",
            p.x, p.y, p.z, p.rgb[0], p.rgb[1], p.rgb[2]
        );
    }
    s
}

pub fn write_ply(points: &[Point], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, ply_string(points).as_bytes())
}
