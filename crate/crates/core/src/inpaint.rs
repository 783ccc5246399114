//! Per-modality inpainting by blending known content back in at every step.

use rand::Rng;

use crate::diffusion::{
    corrupt_with_alpha_bar, ddim_step, sample_noise, DiffusionState, JointModel, MaskedInput,
    NoiseSchedule,
};
use crate::engine::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Masks are `[n, 1, h, w]`, 1 = regenerate and 0 = keep.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityMask {
    pub mask_x: Tensor<f32>,
    pub mask_y: Tensor<f32>,
}

pub fn check_binary(mask: &Tensor<f32>) -> Result<()> {
    match mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(invalid!(
            "mask value {} at {i} is not 0 or 1",
            mask.data()[i]
        )),
        None => Ok(()),
    }
}

impl ModalityMask {
    pub fn new(mask_x: Tensor<f32>, mask_y: Tensor<f32>) -> Result<Self> {
        check_binary(&mask_x)?;
        check_binary(&mask_y)?;
        let s = mask_x.shape();
        if s.len() != 4 || s[1] != 1 || mask_y.shape() != s {
            return Err(shape_err!(
                "masks must both be [n, 1, h, w], got {s:?} and {:?}",
                mask_y.shape()
            ));
        }
        Ok(Self { mask_x, mask_y })
    }

    /// The same region regenerated in both modalities (RGBD editing).
    pub fn symmetric(mask: Tensor<f32>) -> Result<Self> {
        Self::new(mask.clone(), mask)
    }

    /// Keep the image, generate the depth.
    pub fn depth_estimation(n: usize, h: usize, w: usize) -> Self {
        Self {
            mask_x: Tensor::zeros([n, 1, h, w]),
            mask_y: Tensor::ones([n, 1, h, w]),
        }
    }

    /// Keep the depth, generate the image.
    pub fn depth_conditioned(n: usize, h: usize, w: usize) -> Self {
        Self {
            mask_x: Tensor::ones([n, 1, h, w]),
            mask_y: Tensor::zeros([n, 1, h, w]),
        }
    }
}

/// `mask ⊙ x_partial + (1 − mask) ⊙ corrupt(x0_known, t)` with fresh noise,
/// evaluated as a per-pixel selection so kept pixels are bit-exact at `t = None`.
pub fn repaint_blend<R: Rng + ?Sized>(
    x_partial: &Tensor<f32>,
    x0_known: &Tensor<f32>,
    mask: &Tensor<f32>,
    t: Option<usize>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    x_partial.expect_same_shape(x0_known, "repaint_blend")?;
    check_binary(mask)?;
    let s = x_partial.shape();
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(shape_err!("mask {:?} does not fit {s:?}", mask.shape()));
    }
    let known = match t {
        None => x0_known.clone(),
        Some(t) => {
            sched.check(t)?;
            let eps = sample_noise(s, rng);
            corrupt_with_alpha_bar(x0_known, sched.alpha_bar(Some(t)), &eps)?
        }
    };
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = known;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.data()[(i / (c * plane)) * plane + i % plane] == 1.0 {
            *v = x_partial.data()[i];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct InpaintRequest<'a> {
    pub x0: &'a Tensor<f32>,
    pub y0: &'a Tensor<f32>,
    pub masks: &'a ModalityMask,
    pub class: Vec<usize>,
    pub steps: usize,
    pub guidance: f32,
}

/// Runs the reverse chain and calls `on_step` with each blended state.
pub fn inpaint_traced<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    req: &InpaintRequest,
    rng: &mut R,
    mut on_step: impl FnMut(&DiffusionState),
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (x0, y0, m) = (req.x0, req.y0, req.masks);
    let s = x0.shape();
    if s.len() != 4 || y0.shape() != [s[0], model.joint_channels(), s[2], s[3]] {
        return Err(shape_err!("x0 {s:?} / y0 {:?} do not pair", y0.shape()));
    }
    let ts = sched.sampling_timesteps(req.steps)?;
    let cond = if model.is_mask_conditioned() {
        Some(MaskedInput::from_clean(x0, y0, &m.mask_x, &m.mask_y)?)
    } else {
        None
    };
    let x = sample_noise(s, rng);
    let y = sample_noise(y0.shape(), rng);
    let x = repaint_blend(&x, x0, &m.mask_x, Some(ts[0]), sched, rng)?;
    let y = repaint_blend(&y, y0, &m.mask_y, Some(ts[0]), sched, rng)?;
    let mut state = DiffusionState::new(x, y, Some(ts[0]), req.class.clone())?;
    on_step(&state);
    for i in 0..ts.len() {
        let prev = ts.get(i + 1).copied();
        let next = ddim_step(model, &state, sched, prev, req.guidance, cond.as_ref())?;
        state = DiffusionState {
            x: repaint_blend(&next.x, x0, &m.mask_x, prev, sched, rng)?,
            y: repaint_blend(&next.y, y0, &m.mask_y, prev, sched, rng)?,
            ..next
        };
        on_step(&state);
    }
    Ok((state.x, state.y))
}

pub fn inpaint<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    req: &InpaintRequest,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    inpaint_traced(model, sched, req, rng, |_| {})
}

/// RGBD editing: one mask for both modalities.
#[allow(clippy::too_many_arguments)]
pub fn edit_rgbd<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x0: &Tensor<f32>,
    y0: &Tensor<f32>,
    mask: &Tensor<f32>,
    class: Vec<usize>,
    steps: usize,
    guidance: f32,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let masks = ModalityMask::symmetric(mask.clone())?;
    let req = InpaintRequest {
        x0,
        y0,
        masks: &masks,
        class,
        steps,
        guidance,
    };
    inpaint(model, sched, &req, rng)
}

/// Mono-view depth estimation. `class` defaults to the null class.
pub fn predict_depth<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    image: &Tensor<f32>,
    class: Option<usize>,
    steps: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(shape_err!("image must be [n, c, h, w], got {s:?}"));
    }
    let y0 = Tensor::zeros([s[0], model.joint_channels(), s[2], s[3]]);
    let masks = ModalityMask::depth_estimation(s[0], s[2], s[3]);
    let class = vec![class.unwrap_or(model.null_class()); s[0]];
    let req = InpaintRequest {
        x0: image,
        y0: &y0,
        masks: &masks,
        class,
        steps,
        guidance: 1.0,
    };
    inpaint(model, sched, &req, rng)
}

/// Depth-conditioned image generation.
pub fn generate_from_depth<M: JointModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    depth: &Tensor<f32>,
    class: usize,
    steps: usize,
    guidance: f32,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = depth.shape();
    if s.len() != 4 {
        return Err(shape_err!("depth must be [n, c, h, w], got {s:?}"));
    }
    let x0 = Tensor::zeros([s[0], 3, s[2], s[3]]);
    let masks = ModalityMask::depth_conditioned(s[0], s[2], s[3]);
    let req = InpaintRequest {
        x0: &x0,
        y0: depth,
        masks: &masks,
        class: vec![class; s[0]],
        steps,
        guidance,
    };
    inpaint(model, sched, &req, rng)
}

/// Fine-tune mask draw: uniform over generate-all, depth-conditioned,
/// depth-estimation and a random box shared by both modalities.
pub fn sample_training_mask<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> ModalityMask {
    let (ones, zeros) = (Tensor::ones([1, 1, h, w]), Tensor::zeros([1, 1, h, w]));
    match rng.gen_range(0..4) {
        0 => ModalityMask {
            mask_x: ones.clone(),
            mask_y: ones,
        },
        1 => ModalityMask::depth_conditioned(1, h, w),
        2 => ModalityMask::depth_estimation(1, h, w),
        _ => {
            let bh = rng.gen_range((h / 4).max(1)..=(3 * h / 4).max(1));
            let bw = rng.gen_range((w / 4).max(1)..=(3 * w / 4).max(1));
            let (y0, x0) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
            let mut m = zeros;
            for y in y0..y0 + bh {
                m.data_mut()[y * w + x0..y * w + x0 + bw].fill(1.0);
            }
            ModalityMask {
                mask_x: m.clone(),
                mask_y: m,
            }
        }
    }
}
