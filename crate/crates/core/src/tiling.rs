//! Tiled denoising over canvases larger than the model's native size.
//!
//! Each step crops native-size tiles (wrapping horizontally on panoramas),
//! runs one DDIM update per tile and averages the updated `x_{t-1}` with
//! per-pixel weights.

use rand::Rng;

use crate::diffusion::{
    cfg_predict, corrupt, ddim_update, predict_x0, DiffusionState, JointModel, MaskedInput,
    NoiseSchedule,
};
use crate::engine::Tensor;
use crate::error::{invalid, shape_err, Error, Result};
use crate::inpaint::repaint_blend;

pub const WHOLE_IMAGE_WEIGHT: f64 = 5.0;
/// Leading share of the sampling steps in which the whole-image tile is used.
pub const WHOLE_IMAGE_FRACTION: f64 = 0.4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Borders {
    pub left: bool,
    pub right: bool,
    pub top: bool,
    pub bottom: bool,
}

/// Top-left corner of a square tile; `x` may run past the right edge on panoramas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub borders: Borders,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileLayout {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub stride: usize,
    pub offset: (usize, usize),
    pub panoramic: bool,
    pub tiles: Vec<Tile>,
}

impl TileLayout {
    pub fn is_single_canvas_tile(&self) -> bool {
        self.width == self.tile && self.height == self.tile
    }
}

/// Origins along one axis with each origin's (low, high) border flags.
fn axis_positions(
    len: usize,
    tile: usize,
    stride: usize,
    offset: usize,
    wrap: bool,
) -> Vec<(usize, bool, bool)> {
    if len == tile {
        return vec![(0, true, true)];
    }
    if wrap {
        let mut p: Vec<usize> = (0..len / stride)
            .map(|k| (k * stride + len - offset) % len)
            .collect();
        p.sort_unstable();
        return p.into_iter().map(|x| (x, false, false)).collect();
    }
    let last = len - tile;
    let n = (last + offset).div_ceil(stride);
    let mut out: Vec<(usize, bool, bool)> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let p = (k * stride).saturating_sub(offset).min(last);
        if out.last().map(|l| l.0) != Some(p) {
            out.push((p, p == 0, p == last));
        }
    }
    out
}

pub fn make_layout_with_offset(
    width: usize,
    height: usize,
    tile: usize,
    stride: usize,
    offset: (usize, usize),
    panoramic: bool,
) -> Result<TileLayout> {
    if stride == 0 || stride > tile {
        return Err(invalid!(
            "stride {stride} must be in 1..={tile} or tiles leave gaps"
        ));
    }
    if width < tile || height < tile {
        return Err(invalid!("canvas {width}x{height} smaller than tile {tile}"));
    }
    if offset.0 >= stride || offset.1 >= stride {
        return Err(invalid!("offset {offset:?} outside [0, {stride})"));
    }
    if panoramic && width != tile && !width.is_multiple_of(stride) {
        return Err(invalid!(
            "panorama width {width} is not a multiple of stride {stride}"
        ));
    }
    let xs = axis_positions(width, tile, stride, offset.0, panoramic);
    let ys = axis_positions(height, tile, stride, offset.1, false);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &(y, top, bottom) in &ys {
        for &(x, left, right) in &xs {
            tiles.push(Tile {
                x,
                y,
                borders: Borders {
                    left,
                    right,
                    top,
                    bottom,
                },
            });
        }
    }
    Ok(TileLayout {
        width,
        height,
        tile,
        stride,
        offset,
        panoramic,
        tiles,
    })
}

/// Layout with a fresh offset drawn uniformly from `[0, stride)²`.
pub fn make_layout<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    tile: usize,
    stride: usize,
    panoramic: bool,
    rng: &mut R,
) -> Result<TileLayout> {
    if stride == 0 {
        return Err(invalid!("stride must be positive"));
    }
    let offset = (rng.gen_range(0..stride), rng.gen_range(0..stride));
    make_layout_with_offset(width, height, tile, stride, offset, panoramic)
}

fn decay_profile(tile: usize, width: usize, low_border: bool, high_border: bool) -> Vec<f64> {
    let d = width.max(1) as f64;
    (0..tile)
        .map(|i| {
            let lo = if low_border { 1.0 } else { i as f64 / d };
            let hi = if high_border {
                1.0
            } else {
                (tile - 1 - i) as f64 / d
            };
            lo.min(hi).min(1.0)
        })
        .collect()
}

/// Row-major `tile × tile` weights: zero on every side that is not a canvas
/// border, rising linearly to 1 over `stride / 2` pixels. All ones without decay.
pub fn tile_weights(tile: usize, stride: usize, borders: Borders, decay: bool) -> Vec<f64> {
    if !decay {
        return vec![1.0; tile * tile];
    }
    let wx = decay_profile(tile, stride / 2, borders.left, borders.right);
    let wy = decay_profile(tile, stride / 2, borders.top, borders.bottom);
    wy.iter()
        .flat_map(|a| wx.iter().map(move |b| a * b))
        .collect()
}

/// `[n, c, tile, tile]` window at `(x, y)`, columns taken modulo the width.
pub fn crop(canvas: &Tensor<f32>, x: usize, y: usize, tile: usize) -> Result<Tensor<f32>> {
    let s = canvas.shape();
    if s.len() != 4 || y + tile > s[2] || tile > s[3] {
        return Err(shape_err!(
            "cannot crop {tile}x{tile} at ({x}, {y}) from {s:?}"
        ));
    }
    let (h, w) = (s[2], s[3]);
    Ok(Tensor::from_fn([s[0], s[1], tile, tile], |i| {
        let (plane, r, c) = (i / (tile * tile), (i / tile) % tile, i % tile);
        canvas.data()[plane * h * w + (y + r) * w + (x + c) % w]
    }))
}

/// Weighted per-pixel mean of tile results in f64.
pub struct TileAccumulator {
    shape: [usize; 4],
    sum: Vec<f64>,
    weight: Vec<f64>,
}

impl TileAccumulator {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            shape: [n, c, h, w],
            sum: vec![0.0; n * c * h * w],
            weight: vec![0.0; n * h * w],
        }
    }

    /// Adds `[n, c, t, t]` values at `(x, y)` (wrapping in x) with `t × t` weights.
    pub fn add_tile(
        &mut self,
        values: &Tensor<f32>,
        x: usize,
        y: usize,
        weights: &[f64],
    ) -> Result<()> {
        let [n, c, h, w] = self.shape;
        let t = values.dim(2);
        if values.shape() != [n, c, t, t] || weights.len() != t * t || y + t > h || t > w {
            return Err(shape_err!(
                "tile {:?} at ({x}, {y}) does not fit {:?}",
                values.shape(),
                self.shape
            ));
        }
        for b in 0..n {
            for r in 0..t {
                for col in 0..t {
                    let wt = weights[r * t + col];
                    let p = (y + r) * w + (x + col) % w;
                    self.weight[b * h * w + p] += wt;
                    for ch in 0..c {
                        let v = values.data()[((b * c + ch) * t + r) * t + col] as f64;
                        self.sum[(b * c + ch) * h * w + p] += wt * v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds a canvas-sized contribution with a constant weight.
    pub fn add_canvas(&mut self, values: &Tensor<f32>, weight: f64) -> Result<()> {
        if values.shape() != self.shape {
            return Err(shape_err!(
                "canvas {:?} vs {:?}",
                values.shape(),
                self.shape
            ));
        }
        let [_, c, h, w] = self.shape;
        for (i, v) in values.data().iter().enumerate() {
            self.sum[i] += weight * *v as f64;
            if (i / (h * w)) % c == 0 {
                self.weight[(i / (c * h * w)) * h * w + i % (h * w)] += weight;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Tensor<f32>> {
        let [n, c, h, w] = self.shape;
        let plane = h * w;
        if let Some(i) = self.weight.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Invariant(format!(
                "zero aggregation weight at item {} pixel ({}, {})",
                i / plane,
                i % w,
                (i % plane) / w
            )));
        }
        Ok(Tensor::from_fn([n, c, h, w], |i| {
            (self.sum[i] / self.weight[(i / (c * plane)) * plane + i % plane]) as f32
        }))
    }
}

/// Point grid used by the whole-image tile: sample `j` sits at canvas
/// coordinate `j·step + phase` on each axis. Picking single pixels keeps the
/// per-pixel noise level intact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleGrid {
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub step: (f64, f64),
    pub phase: (f64, f64),
    pub wrap_x: bool,
}

impl SampleGrid {
    /// The phase follows the layout offset so the grid moves with the tiles.
    pub fn new(
        height: usize,
        width: usize,
        size: usize,
        offset: (usize, usize),
        wrap_x: bool,
    ) -> Self {
        let step = (height as f64 / size as f64, width as f64 / size as f64);
        let phase = |o: usize, s: f64| (o % (s.floor() as usize).max(1)) as f64;
        Self {
            size,
            height,
            width,
            step,
            phase: (phase(offset.1, step.0), phase(offset.0, step.1)),
            wrap_x,
        }
    }

    fn row(&self, j: usize) -> usize {
        ((j as f64 * self.step.0 + self.phase.0).round() as usize).min(self.height - 1)
    }

    fn col(&self, j: usize) -> usize {
        let c = (j as f64 * self.step.1 + self.phase.1).round() as usize;
        if self.wrap_x {
            c % self.width
        } else {
            c.min(self.width - 1)
        }
    }

    pub fn sample(&self, canvas: &Tensor<f32>) -> Tensor<f32> {
        let s = canvas.shape();
        let (h, w, n) = (self.height, self.width, self.size);
        Tensor::from_fn([s[0], s[1], n, n], |i| {
            let (plane, r, c) = (i / (n * n), (i / n) % n, i % n);
            canvas.data()[plane * h * w + self.row(r) * w + self.col(c)]
        })
    }

    /// Bilinear interpolation of grid values back onto the canvas.
    pub fn upsample(&self, src: &Tensor<f32>) -> Tensor<f32> {
        let s = src.shape();
        let (h, w, n) = (self.height, self.width, self.size);
        let last = (n - 1) as f64;
        Tensor::from_fn([s[0], s[1], h, w], |i| {
            let (plane, r, c) = (i / (h * w), (i / w) % h, i % w);
            let fy = ((r as f64 - self.phase.0) / self.step.0).clamp(0.0, last);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(n - 1);
            let fx = (c as f64 - self.phase.1) / self.step.1;
            let (x0, x1, tx) = if self.wrap_x {
                let fx = fx.rem_euclid(n as f64);
                let x0 = (fx.floor() as usize).min(n - 1);
                (x0, (x0 + 1) % n, fx - x0 as f64)
            } else {
                let fx = fx.clamp(0.0, last);
                let x0 = fx.floor() as usize;
                (x0, (x0 + 1).min(n - 1), fx - fx.floor())
            };
            let at = |y: usize, x: usize| src.data()[plane * n * n + y * n + x] as f64;
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            (top * (1.0 - ty) + bot * ty) as f32
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TileStrategy {
    pub random_offset: bool,
    pub boundary_decay: bool,
    pub whole_image: bool,
}

impl TileStrategy {
    pub const FULL: Self = Self {
        random_offset: true,
        boundary_decay: true,
        whole_image: true,
    };
    /// Uniform averaging of overlapping tiles at fixed positions.
    pub const PLAIN: Self = Self {
        random_offset: false,
        boundary_decay: false,
        whole_image: false,
    };
}

fn crop_masked(m: &MaskedInput, x: usize, y: usize, t: usize) -> Result<MaskedInput> {
    Ok(MaskedInput {
        mask_x: crop(&m.mask_x, x, y, t)?,
        known_x: crop(&m.known_x, x, y, t)?,
        mask_y: crop(&m.mask_y, x, y, t)?,
        known_y: crop(&m.known_y, x, y, t)?,
    })
}

fn sample_masked(m: &MaskedInput, grid: &SampleGrid) -> MaskedInput {
    MaskedInput {
        mask_x: grid.sample(&m.mask_x),
        known_x: grid.sample(&m.known_x),
        mask_y: grid.sample(&m.mask_y),
        known_y: grid.sample(&m.known_y),
    }
}

/// One synchronized DDIM step over every tile of `layout`. `step` counts from
/// 0 out of `total` and decides whether the whole-image tile takes part.
#[allow(clippy::too_many_arguments)]
pub fn tiled_denoise_step<M: JointModel>(
    model: &M,
    sched: &NoiseSchedule,
    state: &DiffusionState,
    layout: &TileLayout,
    strategy: TileStrategy,
    step: usize,
    total: usize,
    t_prev: Option<usize>,
    guidance: f32,
    mask: Option<&MaskedInput>,
) -> Result<DiffusionState> {
    let t = state
        .t
        .ok_or_else(|| invalid!("tiled step on a clean state"))?;
    let (sx, sy) = (state.x.shape().to_vec(), state.y.shape().to_vec());
    if sx.len() != 4 || sx[2] != layout.height || sx[3] != layout.width {
        return Err(shape_err!(
            "canvas {sx:?} does not match layout {}x{}",
            layout.width,
            layout.height
        ));
    }
    let (n, ts) = (sx[0], layout.tile);
    let whole = strategy.whole_image
        && !layout.is_single_canvas_tile()
        && (step as f64) < WHOLE_IMAGE_FRACTION * total as f64;
    let grid = SampleGrid::new(
        layout.height,
        layout.width,
        ts,
        layout.offset,
        layout.panoramic,
    );

    let mut xs = Vec::with_capacity(layout.tiles.len() + 1);
    let mut ys = Vec::with_capacity(layout.tiles.len() + 1);
    let mut ms = Vec::new();
    for tile in &layout.tiles {
        xs.push(crop(&state.x, tile.x, tile.y, ts)?);
        ys.push(crop(&state.y, tile.x, tile.y, ts)?);
        if let Some(m) = mask {
            ms.push(crop_masked(m, tile.x, tile.y, ts)?);
        }
    }
    if whole {
        xs.push(grid.sample(&state.x));
        ys.push(grid.sample(&state.y));
        if let Some(m) = mask {
            ms.push(sample_masked(m, &grid));
        }
    }
    let k = xs.len();
    let class: Vec<usize> = (0..k).flat_map(|_| state.class.iter().copied()).collect();
    let batch = DiffusionState::new(
        Tensor::cat_batch(&xs)?,
        Tensor::cat_batch(&ys)?,
        Some(t),
        class,
    )?;
    let mref: Vec<&MaskedInput> = ms.iter().collect();
    let bmask = if mask.is_some() {
        Some(MaskedInput::cat_batch(&mref)?)
    } else {
        None
    };
    let (ex, ey) = cfg_predict(model, &batch, guidance, bmask.as_ref())?;
    let (ab_t, ab_prev) = (sched.alpha_bar(Some(t)), sched.alpha_bar(t_prev));

    let mut acc_x = TileAccumulator::new(n, sx[1], sx[2], sx[3]);
    let mut acc_y = TileAccumulator::new(n, sy[1], sy[2], sy[3]);
    for (i, tile) in layout.tiles.iter().enumerate() {
        let w = tile_weights(ts, layout.stride, tile.borders, strategy.boundary_decay);
        let ux = ddim_update(&xs[i], &ex.batch_range(i * n, (i + 1) * n)?, ab_t, ab_prev)?;
        let uy = ddim_update(&ys[i], &ey.batch_range(i * n, (i + 1) * n)?, ab_t, ab_prev)?;
        acc_x.add_tile(&ux, tile.x, tile.y, &w)?;
        acc_y.add_tile(&uy, tile.x, tile.y, &w)?;
    }
    if whole {
        let i = k - 1;
        for (cur, e, small, acc) in [
            (&state.x, &ex, &xs[i], &mut acc_x),
            (&state.y, &ey, &ys[i], &mut acc_y),
        ] {
            let x0 = predict_x0(small, &e.batch_range(i * n, (i + 1) * n)?, ab_t)?;
            let up = grid.upsample(&x0);
            acc.add_canvas(
                &reuse_noise_update(cur, &up, ab_t, ab_prev)?,
                WHOLE_IMAGE_WEIGHT,
            )?;
        }
    }
    Ok(DiffusionState {
        x: acc_x.finish()?,
        y: acc_y.finish()?,
        t: t_prev,
        class: state.class.clone(),
    })
}

/// DDIM step toward a given `x0`, taking the noise from the canvas itself.
fn reuse_noise_update(
    x_t: &Tensor<f32>,
    x0: &Tensor<f32>,
    ab_t: f64,
    ab_prev: f64,
) -> Result<Tensor<f32>> {
    let (a, b) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let eps = x_t.zip_map(x0, |x, z| ((x as f64 - a * z as f64) / b) as f32)?;
    ddim_update(x_t, &eps, ab_t, ab_prev)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiledSampling {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub stride: usize,
    pub steps: usize,
    pub guidance: f32,
    pub class: usize,
    pub strategy: TileStrategy,
    pub panoramic: bool,
}

/// Full reverse chain over a canvas from unit noise.
pub fn tiled_sample<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cfg: &TiledSampling,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let grid = sched.sampling_timesteps(cfg.steps)?;
    let x = crate::diffusion::sample_noise(&[1, 3, cfg.height, cfg.width], rng);
    let y =
        crate::diffusion::sample_noise(&[1, model.joint_channels(), cfg.height, cfg.width], rng);
    let mask = model
        .is_mask_conditioned()
        .then(|| MaskedInput::generate_all(1, 3, model.joint_channels(), cfg.height, cfg.width));
    let mut state = DiffusionState::new(x, y, Some(grid[0]), vec![cfg.class])?;
    for i in 0..grid.len() {
        let layout = if cfg.strategy.random_offset {
            make_layout(
                cfg.width,
                cfg.height,
                cfg.tile,
                cfg.stride,
                cfg.panoramic,
                rng,
            )?
        } else {
            make_layout_with_offset(
                cfg.width,
                cfg.height,
                cfg.tile,
                cfg.stride,
                (0, 0),
                cfg.panoramic,
            )?
        };
        let prev = grid.get(i + 1).copied();
        state = tiled_denoise_step(
            model,
            sched,
            &state,
            &layout,
            cfg.strategy,
            i,
            grid.len(),
            prev,
            cfg.guidance,
            mask.as_ref(),
        )?;
    }
    Ok((state.x, state.y))
}

/// Cylindrical panorama: horizontal wrap on, rows at the model's native size.
pub fn generate_panorama<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cfg: &TiledSampling,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if cfg.height != cfg.tile {
        return Err(invalid!(
            "panorama height {} must equal the tile size {}",
            cfg.height,
            cfg.tile
        ));
    }
    tiled_sample(
        model,
        sched,
        &TiledSampling {
            panoramic: true,
            ..cfg.clone()
        },
        rng,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refine {
    /// Fraction of the schedule to re-noise, in (0, 1].
    pub strength: f64,
    pub steps: usize,
    pub guidance: f32,
    pub class: usize,
    /// `(tile, stride)`; tiles never use the whole-image tile here.
    pub tiling: Option<(usize, usize)>,
    /// Keep the image fixed and refine only the joint modality.
    pub keep_image: bool,
}

/// Corrupts both inputs to `round(strength·T)` and denoises back.
pub fn sdedit_refine<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_init: &Tensor<f32>,
    y_init: &Tensor<f32>,
    cfg: &Refine,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if !(cfg.strength >= 0.0 && cfg.strength <= 1.0) {
        return Err(invalid!("strength {} outside (0, 1]", cfg.strength));
    }
    let levels = (cfg.strength * sched.len() as f64).round() as usize;
    if levels == 0 {
        return Ok((x_init.clone(), y_init.clone()));
    }
    let t0 = levels - 1;
    let mut ts = vec![t0];
    ts.extend(
        sched
            .sampling_timesteps(cfg.steps)?
            .into_iter()
            .filter(|&t| t < t0),
    );

    let s = x_init.shape();
    let n = s[0];
    let keep = if cfg.keep_image { 0.0 } else { 1.0 };
    let mask_x = Tensor::full([n, 1, s[2], s[3]], keep);
    let mask = if model.is_mask_conditioned() {
        Some(MaskedInput::from_clean(
            x_init,
            y_init,
            &mask_x,
            &Tensor::ones([n, 1, s[2], s[3]]),
        )?)
    } else {
        None
    };
    let ex = crate::diffusion::sample_noise(s, rng);
    let ey = crate::diffusion::sample_noise(y_init.shape(), rng);
    let mut state = DiffusionState::new(
        corrupt(x_init, t0, &ex, sched)?,
        corrupt(y_init, t0, &ey, sched)?,
        Some(t0),
        vec![cfg.class; n],
    )?;
    let strategy = TileStrategy {
        whole_image: false,
        ..TileStrategy::FULL
    };
    for i in 0..ts.len() {
        let prev = ts.get(i + 1).copied();
        state = match cfg.tiling {
            Some((tile, stride)) => {
                let layout = make_layout(s[3], s[2], tile, stride, false, rng)?;
                tiled_denoise_step(
                    model,
                    sched,
                    &state,
                    &layout,
                    strategy,
                    i,
                    ts.len(),
                    prev,
                    cfg.guidance,
                    mask.as_ref(),
                )?
            }
            None => crate::diffusion::ddim_step(
                model,
                &state,
                sched,
                prev,
                cfg.guidance,
                mask.as_ref(),
            )?,
        };
        if cfg.keep_image {
            state.x = repaint_blend(&state.x, x_init, &mask_x, prev, sched, rng)?;
        }
    }
    Ok((state.x, state.y))
}
