//! Noise schedule, forward corruption, the joint two-branch loss, reverse
//! samplers and classifier-free guidance.
//!
//! Timesteps are array indices `0..T` into the schedule. A state whose
//! timestep is `None` is fully denoised (ᾱ = 1).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::engine::{Element, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule from `beta_start` to `beta_end` over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid!("schedule needs at least 2 steps, got {steps}"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        ));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect::<Vec<f64>>();
    if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars[steps - 1] <= 0.0 {
        return Err(invalid!(
            "alpha_bars underflow for betas [{beta_start}, {beta_end}] over {steps} steps"
        ));
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl Default for NoiseSchedule {
    /// Linear 1e-4 → 0.02 over 1000 steps.
    fn default() -> Self {
        make_schedule(1000, 1e-4, 0.02).expect("default schedule")
    }
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ at `t`, with `None` meaning clean data (ᾱ = 1).
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    pub(crate) fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(invalid!("timestep {t} outside [0, {})", self.len()));
        }
        Ok(())
    }

    /// Evenly spaced descending timesteps ending near 0, starting at `T-1`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(invalid!(
                "sampling steps must be in 1..={total}, got {steps}"
            ));
        }
        Ok((1..=steps).rev().map(|i| i * total / steps - 1).collect())
    }
}

/// `sqrt(ᾱ)·x0 + sqrt(1-ᾱ)·eps` for an explicit ᾱ.
pub fn corrupt_with_alpha_bar(
    x0: &Tensor<f32>,
    alpha_bar: f64,
    eps: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    x0.expect_same_shape(eps, "corrupt")?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// Forward corruption to timestep `t`.
pub fn corrupt(
    x0: &Tensor<f32>,
    t: usize,
    eps: &Tensor<f32>,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    sched.check(t)?;
    corrupt_with_alpha_bar(x0, sched.alpha_bar(Some(t)), eps)
}

/// Unit normal noise plus `offset` times a per-(image, channel) normal scalar
/// broadcast over the spatial axes. `shape` is `[n, c, h, w]`.
pub fn sample_noise_with_offset<R: Rng + ?Sized>(
    shape: &[usize],
    offset: f64,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if shape.len() != 4 {
        return Err(shape_err!(
            "noise shape must be [n, c, h, w], got {shape:?}"
        ));
    }
    if offset.is_nan() || offset < 0.0 {
        return Err(invalid!("noise offset must be >= 0, got {offset}"));
    }
    let plane = shape[2] * shape[3];
    let planes = shape[0] * shape[1];
    let mut data = Vec::with_capacity(planes * plane);
    for _ in 0..planes {
        let shift = if offset > 0.0 {
            offset * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        for _ in 0..plane {
            data.push((rng.sample::<f64, _>(StandardNormal) + shift) as f32);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Plain unit normal noise.
pub fn sample_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| {
        rng.sample::<f64, _>(StandardNormal) as f32
    })
}

/// Masks and known content fed to a mask-conditioned model. Masks are
/// `[n, 1, h, w]` with 1 = regenerate; `known_*` hold the clean input where
/// the mask is 0 and zero elsewhere.
#[derive(Clone, Debug)]
pub struct MaskedInput {
    pub mask_x: Tensor<f32>,
    pub known_x: Tensor<f32>,
    pub mask_y: Tensor<f32>,
    pub known_y: Tensor<f32>,
}

impl MaskedInput {
    /// Builds the conditioning from clean inputs and masks (known = (1-mask)·clean).
    pub fn from_clean(
        x0: &Tensor<f32>,
        y0: &Tensor<f32>,
        mask_x: &Tensor<f32>,
        mask_y: &Tensor<f32>,
    ) -> Result<Self> {
        Ok(Self {
            known_x: keep_known(x0, mask_x)?,
            known_y: keep_known(y0, mask_y)?,
            mask_x: mask_x.clone(),
            mask_y: mask_y.clone(),
        })
    }

    /// All-regenerate masks with zeroed known content: plain joint generation.
    pub fn generate_all(
        n: usize,
        x_channels: usize,
        y_channels: usize,
        h: usize,
        w: usize,
    ) -> Self {
        Self {
            mask_x: Tensor::ones([n, 1, h, w]),
            known_x: Tensor::zeros([n, x_channels, h, w]),
            mask_y: Tensor::ones([n, 1, h, w]),
            known_y: Tensor::zeros([n, y_channels, h, w]),
        }
    }

    pub fn batch_len(&self) -> usize {
        self.mask_x.dim(0)
    }

    pub fn cat_batch(parts: &[&MaskedInput]) -> Result<Self> {
        let gather = |f: fn(&MaskedInput) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let v: Vec<Tensor<f32>> = parts.iter().map(|p| f(p).clone()).collect();
            Tensor::cat_batch(&v)
        };
        Ok(Self {
            mask_x: gather(|m| &m.mask_x)?,
            known_x: gather(|m| &m.known_x)?,
            mask_y: gather(|m| &m.mask_y)?,
            known_y: gather(|m| &m.known_y)?,
        })
    }
}

/// `(1 - mask) ⊙ clean` with a `[n, 1, h, w]` mask broadcast over channels.
pub fn keep_known(clean: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = clean.shape();
    let m = mask.shape();
    if s.len() != 4 || m != [s[0], 1, s[2], s[3]] {
        return Err(shape_err!("mask {m:?} does not fit tensor {s:?}"));
    }
    let plane = s[2] * s[3];
    let mut out = clean.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let n = i / (s[1] * plane);
        if mask.data()[n * plane + i % plane] != 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// A two-modality noise predictor that can be evaluated on a tape.
pub trait JointModel {
    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Channel count of the joint modality (1 for depth, 3 for normals).
    fn joint_channels(&self) -> usize;

    fn null_class(&self) -> usize;

    /// Whether parameter `name` receives gradients under the current policy.
    fn is_trainable(&self, _name: &str) -> bool {
        true
    }

    /// Whether the model consumes [`MaskedInput`].
    fn is_mask_conditioned(&self) -> bool {
        false
    }

    /// Predicts `(eps_x, eps_y)` for noisy `x_t`, `y_t`.
    #[allow(clippy::too_many_arguments)]
    fn forward<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        x_t: Var,
        y_t: Var,
        t: &[usize],
        class: &[usize],
        mask: Option<&MaskedInput>,
    ) -> Result<(Var, Var)>;

    /// Gradient-free prediction.
    fn predict(
        &self,
        x_t: &Tensor<f32>,
        y_t: &Tensor<f32>,
        t: &[usize],
        class: &[usize],
        mask: Option<&MaskedInput>,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::<f32>::inference(self.params());
        let x = tape.constant(x_t.clone());
        let y = tape.constant(y_t.clone());
        let (ex, ey) = self.forward(&mut tape, x, y, t, class, mask)?;
        Ok((tape.value(ex).clone(), tape.value(ey).clone()))
    }
}

/// Inputs of one joint-loss evaluation; all tensors share `n`, `h`, `w`.
#[derive(Clone, Copy, Debug)]
pub struct LossBatch<'a> {
    pub x0: &'a Tensor<f32>,
    pub y0: &'a Tensor<f32>,
    pub class: &'a [usize],
    pub t: &'a [usize],
    pub eps_x: &'a Tensor<f32>,
    pub eps_y: &'a Tensor<f32>,
    pub mask: Option<&'a MaskedInput>,
}

/// Terms of the joint loss as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub rgb: Var,
    pub joint: Var,
}

/// `mean((eps_x - ε̂_x)²) + mean((eps_y - ε̂_y)²)` with both inputs corrupted
/// to their per-item timesteps.
pub fn joint_loss<M: JointModel, T: Element>(
    model: &M,
    tape: &mut Tape<'_, T>,
    batch: &LossBatch<'_>,
    sched: &NoiseSchedule,
) -> Result<JointLoss> {
    let n = batch.x0.dim(0);
    if batch.t.len() != n || batch.class.len() != n {
        return Err(shape_err!(
            "{} timesteps / {} classes for batch of {n}",
            batch.t.len(),
            batch.class.len()
        ));
    }
    let x_t = corrupt_per_item(batch.x0, batch.t, batch.eps_x, sched)?;
    let y_t = corrupt_per_item(batch.y0, batch.t, batch.eps_y, sched)?;
    let xv = tape.constant(x_t.cast());
    let yv = tape.constant(y_t.cast());
    let (px, py) = model.forward(tape, xv, yv, batch.t, batch.class, batch.mask)?;
    let tx = tape.constant(batch.eps_x.cast());
    let ty = tape.constant(batch.eps_y.cast());
    let rgb = tape.mse(px, tx)?;
    let joint = tape.mse(py, ty)?;
    let total = tape.add(rgb, joint)?;
    Ok(JointLoss { total, rgb, joint })
}

/// Corrupts each batch item to its own timestep.
pub fn corrupt_per_item(
    x0: &Tensor<f32>,
    t: &[usize],
    eps: &Tensor<f32>,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    x0.expect_same_shape(eps, "corrupt")?;
    let n = x0.dim(0);
    if t.len() != n {
        return Err(shape_err!("{} timesteps for batch of {n}", t.len()));
    }
    let per = x0.numel() / n.max(1);
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        sched.check(ti)?;
        let ab = sched.alpha_bar(Some(ti));
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in i * per..(i + 1) * per {
            out.data_mut()[j] = (a * x0.data()[j] as f64 + b * eps.data()[j] as f64) as f32;
        }
    }
    Ok(out)
}

/// Sampler state: both modalities at a shared noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    /// `None` once fully denoised.
    pub t: Option<usize>,
    pub class: Vec<usize>,
}

impl DiffusionState {
    pub fn new(
        x: Tensor<f32>,
        y: Tensor<f32>,
        t: Option<usize>,
        class: Vec<usize>,
    ) -> Result<Self> {
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 4 || ys.len() != 4 || xs[0] != ys[0] || xs[2..] != ys[2..] {
            return Err(shape_err!("x {xs:?} and y {ys:?} must share n, h, w"));
        }
        if class.len() != xs[0] {
            return Err(shape_err!(
                "{} class ids for batch of {}",
                class.len(),
                xs[0]
            ));
        }
        Ok(Self { x, y, t, class })
    }

    pub fn batch_len(&self) -> usize {
        self.x.dim(0)
    }
}

/// Guided noise prediction `ε_null + s·(ε_cond − ε_null)` per branch.
/// `s = 1` returns the conditional prediction and `s = 0` the unconditional one.
pub fn cfg_predict<M: JointModel>(
    model: &M,
    state: &DiffusionState,
    guidance_scale: f32,
    mask: Option<&MaskedInput>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let t = state
        .t
        .ok_or_else(|| invalid!("cannot predict noise for a clean state"))?;
    let n = state.batch_len();
    let ts = vec![t; n];
    let null = vec![model.null_class(); n];
    if guidance_scale == 1.0 {
        return model.predict(&state.x, &state.y, &ts, &state.class, mask);
    }
    if guidance_scale == 0.0 {
        return model.predict(&state.x, &state.y, &ts, &null, mask);
    }
    let x2 = Tensor::cat_batch(&[state.x.clone(), state.x.clone()])?;
    let y2 = Tensor::cat_batch(&[state.y.clone(), state.y.clone()])?;
    let t2 = vec![t; 2 * n];
    let mut c2 = state.class.clone();
    c2.extend_from_slice(&null);
    let m2 = mask.map(|m| MaskedInput::cat_batch(&[m, m])).transpose()?;
    let (ex, ey) = model.predict(&x2, &y2, &t2, &c2, m2.as_ref())?;
    let combine = |e: &Tensor<f32>| -> Result<Tensor<f32>> {
        let cond = e.batch_range(0, n)?;
        let unc = e.batch_range(n, 2 * n)?;
        unc.zip_map(&cond, |u, c| u + guidance_scale * (c - u))
    };
    Ok((combine(&ex)?, combine(&ey)?))
}

/// Deterministic DDIM (η = 0) update from ᾱ_t to ᾱ_prev given a noise estimate.
pub fn ddim_update(
    x_t: &Tensor<f32>,
    eps: &Tensor<f32>,
    ab_t: f64,
    ab_prev: f64,
) -> Result<Tensor<f32>> {
    x_t.expect_same_shape(eps, "ddim")?;
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.zip_map(eps, |x, e| {
        let (x, e) = (x as f64, e as f64);
        let x0 = (x - sb * e) / sa;
        (pa * x0 + pb * e) as f32
    })
}

/// x0 estimate implied by a noise prediction.
pub fn predict_x0(x_t: &Tensor<f32>, eps: &Tensor<f32>, ab_t: f64) -> Result<Tensor<f32>> {
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    x_t.zip_map(eps, |x, e| ((x as f64 - sb * e as f64) / sa) as f32)
}

/// Standard deviation of the noise injected by a DDPM step from `t`.
pub fn ddpm_sigma(sched: &NoiseSchedule, t: usize) -> f64 {
    let ab_t = sched.alpha_bars[t];
    let ab_prev = sched.alpha_bar(t.checked_sub(1));
    (sched.betas[t] * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
}

/// DDPM posterior mean step plus σ_t·z; `z` must match `x_t`'s shape.
pub fn ddpm_update(
    x_t: &Tensor<f32>,
    eps: &Tensor<f32>,
    z: &Tensor<f32>,
    sched: &NoiseSchedule,
    t: usize,
) -> Result<Tensor<f32>> {
    x_t.expect_same_shape(eps, "ddpm")?;
    x_t.expect_same_shape(z, "ddpm")?;
    let beta = sched.betas[t];
    let alpha = 1.0 - beta;
    let coef = beta / (1.0 - sched.alpha_bars[t]).sqrt();
    let sigma = ddpm_sigma(sched, t);
    Ok(Tensor::from_fn(x_t.shape().to_vec(), |i| {
        let mean = (x_t.data()[i] as f64 - coef * eps.data()[i] as f64) / alpha.sqrt();
        (mean + sigma * z.data()[i] as f64) as f32
    }))
}

/// One ancestral DDPM step from `state.t` to `state.t - 1` (or to clean from 0).
pub fn ddpm_step<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    state: &DiffusionState,
    sched: &NoiseSchedule,
    guidance_scale: f32,
    rng: &mut R,
) -> Result<DiffusionState> {
    let t = state
        .t
        .ok_or_else(|| invalid!("ddpm_step on a clean state"))?;
    sched.check(t)?;
    let (ex, ey) = cfg_predict(model, state, guidance_scale, None)?;
    let zx = sample_noise(state.x.shape(), rng);
    let zy = sample_noise(state.y.shape(), rng);
    Ok(DiffusionState {
        x: ddpm_update(&state.x, &ex, &zx, sched, t)?,
        y: ddpm_update(&state.y, &ey, &zy, sched, t)?,
        t: t.checked_sub(1),
        class: state.class.clone(),
    })
}

/// One deterministic DDIM step from `state.t` to `t_prev` (`None` = clean).
pub fn ddim_step<M: JointModel>(
    model: &M,
    state: &DiffusionState,
    sched: &NoiseSchedule,
    t_prev: Option<usize>,
    guidance_scale: f32,
    mask: Option<&MaskedInput>,
) -> Result<DiffusionState> {
    let t = state
        .t
        .ok_or_else(|| invalid!("ddim_step on a clean state"))?;
    sched.check(t)?;
    if let Some(p) = t_prev {
        if p >= t {
            return Err(invalid!("ddim target {p} must precede {t}"));
        }
    }
    let (ex, ey) = cfg_predict(model, state, guidance_scale, mask)?;
    let (ab_t, ab_prev) = (sched.alpha_bar(Some(t)), sched.alpha_bar(t_prev));
    Ok(DiffusionState {
        x: ddim_update(&state.x, &ex, ab_t, ab_prev)?,
        y: ddim_update(&state.y, &ey, ab_t, ab_prev)?,
        t: t_prev,
        class: state.class.clone(),
    })
}

/// Full DDIM chain from unit noise.
pub fn ddim_sample<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    shape_x: &[usize],
    class: Vec<usize>,
    steps: usize,
    guidance_scale: f32,
    rng: &mut R,
) -> Result<DiffusionState> {
    let ts = sched.sampling_timesteps(steps)?;
    let mut shape_y = shape_x.to_vec();
    shape_y[1] = model.joint_channels();
    let x = sample_noise(shape_x, rng);
    let y = sample_noise(&shape_y, rng);
    let mask = model.is_mask_conditioned().then(|| {
        MaskedInput::generate_all(shape_x[0], shape_x[1], shape_y[1], shape_x[2], shape_x[3])
    });
    let mut state = DiffusionState::new(x, y, Some(ts[0]), class)?;
    for (i, _) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied();
        state = ddim_step(model, &state, sched, prev, guidance_scale, mask.as_ref())?;
    }
    Ok(state)
}
