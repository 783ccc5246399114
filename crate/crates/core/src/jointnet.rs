//! Dual-branch JointNet built from a pretrained single-modality backbone,
//! plus the channel-widening Direct Extend baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{JointModel, MaskedInput};
use crate::engine::{fan_in_uniform, Element, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::unet::{conv, exchange_input, Backbone, BackboneConfig, BackboneView, ExchangeView};

pub const RGB_PREFIX: &str = "rgb.";
pub const JOINT_PREFIX: &str = "joint.";
/// Exchange convs owned by the joint branch (input comes from RGB).
pub const R2J: ExchangeView<'static> = ExchangeView {
    prefix: "xchg.r2j.",
};
/// Exchange convs owned by the RGB branch (input comes from the joint branch).
pub const J2R: ExchangeView<'static> = ExchangeView {
    prefix: "xchg.j2r.",
};
pub const MASK_RGB: &str = "mask.rgb.conv_in";
pub const MASK_JOINT: &str = "mask.joint.conv_in";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Every `rgb.` parameter is excluded from gradients.
    Stage1FrozenRgb,
    AllTrainable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointDenoiser {
    pub base_config: BackboneConfig,
    pub joint_channels: usize,
    pub params: ParamStore,
    pub freeze: FreezePolicy,
    pub mask_conditioned: bool,
    joint_config: BackboneConfig,
}

fn check_joint_channels(jc: usize) -> Result<()> {
    if jc != 1 && jc != 3 {
        return Err(invalid!(
            "joint channels must be 1 (depth) or 3 (normal), got {jc}"
        ));
    }
    Ok(())
}

/// Copies the base into the RGB branch, copies it again into the joint
/// branch with re-shaped input/output convs, and adds zeroed exchange convs.
pub fn build_jointnet(base: &Backbone, joint_channels: usize) -> Result<JointDenoiser> {
    check_joint_channels(joint_channels)?;
    let cfg = base.config.clone();
    cfg.validate()?;
    if cfg.in_channels != 3 || cfg.out_channels != 3 {
        return Err(invalid!("base backbone must be RGB in and out"));
    }
    let mut params = ParamStore::new();
    params.absorb(RGB_PREFIX, &base.params);
    for (name, t) in base.params.iter() {
        if name == "class_table" {
            continue;
        }
        let t = match (name, joint_channels) {
            (_, 3) => t.clone(),
            ("conv_in.weight", _) => sum_input_slices(t),
            ("conv_out.weight", _) => Tensor::zeros([1, cfg.base_width, 3, 3]),
            ("conv_out.bias", _) => Tensor::zeros([1]),
            _ => t.clone(),
        };
        params.insert(format!("{JOINT_PREFIX}{name}"), t);
    }
    R2J.init(&cfg, 3, &mut params);
    J2R.init(&cfg, joint_channels, &mut params);
    Ok(JointDenoiser {
        joint_config: cfg.with_channels(joint_channels, joint_channels),
        base_config: cfg,
        joint_channels,
        params,
        freeze: FreezePolicy::Stage1FrozenRgb,
        mask_conditioned: false,
    })
}

/// `[o, 3, k, k]` → `[o, 1, k, k]` by summing over the input channels.
fn sum_input_slices(w: &Tensor<f32>) -> Tensor<f32> {
    let s = w.shape();
    let (o, c, k) = (s[0], s[1], s[2] * s[3]);
    Tensor::from_fn([o, 1, s[2], s[3]], |i| {
        let (oi, ki) = (i / k, i % k);
        (0..c).map(|ci| w.data()[(oi * c + ci) * k + ki]).sum()
    })
}

/// Adds zeroed first-conv channels taking `(mask, known)` for each branch.
pub fn extend_for_masked_conditioning(mut model: JointDenoiser) -> Result<JointDenoiser> {
    if model.mask_conditioned {
        return Err(invalid!("model is already mask-conditioned"));
    }
    let bw = model.base_config.base_width;
    for (name, c) in [(MASK_RGB, 3), (MASK_JOINT, model.joint_channels)] {
        model
            .params
            .insert(format!("{name}.weight"), Tensor::zeros([bw, 1 + c, 3, 3]));
        model
            .params
            .insert(format!("{name}.bias"), Tensor::zeros([bw]));
    }
    model.mask_conditioned = true;
    Ok(model)
}

impl JointDenoiser {
    pub fn rgb_view(&self) -> BackboneView<'_> {
        BackboneView::new(&self.base_config, RGB_PREFIX)
    }

    pub fn joint_view(&self) -> BackboneView<'_> {
        BackboneView {
            cfg: &self.joint_config,
            prefix: JOINT_PREFIX,
            class_prefix: RGB_PREFIX,
        }
    }

    pub fn joint_config(&self) -> &BackboneConfig {
        &self.joint_config
    }

    /// The RGB branch as a standalone backbone.
    pub fn rgb_backbone(&self) -> Backbone {
        Backbone {
            config: self.base_config.clone(),
            params: self.params.with_prefix(RGB_PREFIX),
        }
    }

    /// Reassembles a model from its parts, e.g. after loading a checkpoint.
    pub fn from_parts(
        base_config: BackboneConfig,
        joint_channels: usize,
        params: ParamStore,
        freeze: FreezePolicy,
        mask_conditioned: bool,
    ) -> Result<Self> {
        check_joint_channels(joint_channels)?;
        base_config.validate()?;
        Ok(Self {
            joint_config: base_config.with_channels(joint_channels, joint_channels),
            base_config,
            joint_channels,
            params,
            freeze,
            mask_conditioned,
        })
    }
}

fn mask_extra<T: Element>(
    tape: &mut Tape<'_, T>,
    name: &str,
    mask: &Tensor<f32>,
    known: &Tensor<f32>,
) -> Result<Var> {
    let m = tape.constant(mask.cast());
    let k = tape.constant(known.cast());
    let mk = tape.concat_channels(&[m, k])?;
    conv(tape, name, mk, 1)
}

impl JointModel for JointDenoiser {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn joint_channels(&self) -> usize {
        self.joint_channels
    }

    fn null_class(&self) -> usize {
        self.base_config.null_class()
    }

    fn is_trainable(&self, name: &str) -> bool {
        match self.freeze {
            FreezePolicy::Stage1FrozenRgb => !name.starts_with(RGB_PREFIX),
            FreezePolicy::AllTrainable => true,
        }
    }

    fn is_mask_conditioned(&self) -> bool {
        self.mask_conditioned
    }

    fn forward<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        x_t: Var,
        y_t: Var,
        t: &[usize],
        class: &[usize],
        mask: Option<&MaskedInput>,
    ) -> Result<(Var, Var)> {
        let (xs, ys) = (tape.shape(x_t).to_vec(), tape.shape(y_t).to_vec());
        if xs.len() != 4 || ys.len() != 4 || xs[0] != ys[0] || xs[2..] != ys[2..] {
            return Err(shape_err!("x_t {xs:?} and y_t {ys:?} must share n, h, w"));
        }
        if t.len() != xs[0] {
            return Err(shape_err!("{} timesteps for batch of {}", t.len(), xs[0]));
        }
        let (rgb, joint) = (self.rgb_view(), self.joint_view());
        let cr = rgb.conditioning(tape, t, class)?;
        let cj = joint.conditioning(tape, t, class)?;
        let mut extra_r = vec![exchange_input(tape, y_t, x_t, J2R)?];
        let mut extra_j = vec![exchange_input(tape, x_t, y_t, R2J)?];

        let default_mask;
        let mask = match (self.mask_conditioned, mask) {
            (false, Some(_)) => return Err(invalid!("model is not mask-conditioned")),
            (false, None) => None,
            (true, Some(m)) => Some(m),
            (true, None) => {
                default_mask = MaskedInput::generate_all(xs[0], xs[1], ys[1], xs[2], xs[3]);
                Some(&default_mask)
            }
        };
        if let Some(m) = mask {
            if m.batch_len() != xs[0] {
                return Err(shape_err!(
                    "mask batch {} vs input batch {}",
                    m.batch_len(),
                    xs[0]
                ));
            }
            extra_r.push(mask_extra(tape, MASK_RGB, &m.mask_x, &m.known_x)?);
            extra_j.push(mask_extra(tape, MASK_JOINT, &m.mask_y, &m.known_y)?);
        }

        let ar = rgb.encode(tape, x_t, &cr, &extra_r)?;
        let aj = joint.encode(tape, y_t, &cj, &extra_j)?;
        let ex = rgb.decode(tape, &ar, &cr, Some((&aj, J2R)))?;
        let ey = joint.decode(tape, &aj, &cj, Some((&ar, R2J)))?;
        Ok((ex, ey))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtendInit {
    Zeros,
    Random,
    Copy,
}

impl std::str::FromStr for ExtendInit {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(Self::Zeros),
            "random" => Ok(Self::Random),
            "copy" => Ok(Self::Copy),
            other => Err(invalid!(
                "unknown init mode {other:?} (zeros, random, copy)"
            )),
        }
    }
}

pub const EXT_IN: &str = "conv_in_ext";
pub const EXT_OUT: &str = "conv_out_ext";

/// One backbone whose first and last convs are widened for the joint channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectExtendDenoiser {
    pub config: BackboneConfig,
    pub joint_channels: usize,
    pub init: ExtendInit,
    pub params: ParamStore,
}

pub fn build_direct_extend(
    base: &Backbone,
    joint_channels: usize,
    init: ExtendInit,
    rng: &mut impl Rng,
) -> Result<DirectExtendDenoiser> {
    check_joint_channels(joint_channels)?;
    let cfg = base.config.clone();
    let bw = cfg.base_width;
    let mut params = base.params.clone();
    params.insert(
        format!("{EXT_IN}.weight"),
        Tensor::zeros([bw, joint_channels, 3, 3]),
    );
    let (w, b) = match init {
        ExtendInit::Zeros => (
            Tensor::zeros([joint_channels, bw, 3, 3]),
            Tensor::zeros([joint_channels]),
        ),
        ExtendInit::Random => (
            fan_in_uniform(&[joint_channels, bw, 3, 3], bw * 9, rng),
            Tensor::zeros([joint_channels]),
        ),
        ExtendInit::Copy => {
            let w = base.params.get("conv_out.weight")?;
            let b = base.params.get("conv_out.bias")?;
            let per = bw * 9;
            (
                Tensor::new(
                    [joint_channels, bw, 3, 3],
                    w.data()[..joint_channels * per].to_vec(),
                )?,
                Tensor::new([joint_channels], b.data()[..joint_channels].to_vec())?,
            )
        }
    };
    params.insert(format!("{EXT_OUT}.weight"), w);
    params.insert(format!("{EXT_OUT}.bias"), b);
    Ok(DirectExtendDenoiser {
        config: cfg,
        joint_channels,
        init,
        params,
    })
}

impl DirectExtendDenoiser {
    /// The backbone part with the extension channels dropped.
    pub fn rgb_backbone(&self) -> Backbone {
        let mut params = self.params.clone();
        for suffix in ["weight", "bias"] {
            params.remove(&format!("{EXT_IN}.{suffix}"));
            params.remove(&format!("{EXT_OUT}.{suffix}"));
        }
        Backbone {
            config: self.config.clone(),
            params,
        }
    }
}

impl JointModel for DirectExtendDenoiser {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn joint_channels(&self) -> usize {
        self.joint_channels
    }

    fn null_class(&self) -> usize {
        self.config.null_class()
    }

    fn forward<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        x_t: Var,
        y_t: Var,
        t: &[usize],
        class: &[usize],
        mask: Option<&MaskedInput>,
    ) -> Result<(Var, Var)> {
        if mask.is_some() {
            return Err(invalid!("direct extend does not take mask conditioning"));
        }
        let (xs, ys) = (tape.shape(x_t).to_vec(), tape.shape(y_t).to_vec());
        if ys.len() != 4 || ys[1] != self.joint_channels || xs[0] != ys[0] || xs[2..] != ys[2..] {
            return Err(shape_err!("x_t {xs:?} and y_t {ys:?} must share n, h, w"));
        }
        let view = BackboneView::new(&self.config, "");
        let cond = view.conditioning(tape, t, class)?;
        let w = tape.param(&format!("{EXT_IN}.weight"))?;
        let from_y = tape.conv2d(y_t, w, None, 1, 1)?;
        let acts = view.encode(tape, x_t, &cond, &[from_y])?;
        let feats = view.decode_features(tape, &acts, &cond, None)?;
        let ex = view.head(tape, feats)?;
        let ey = conv(tape, EXT_OUT, feats, 1)?;
        Ok((ex, ey))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_base() -> Backbone {
        let cfg = BackboneConfig {
            base_width: 8,
            channel_mults: vec![1, 2],
            groups: 4,
            embed_dim: 16,
            ..BackboneConfig::default()
        };
        Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn rejects_unsupported_joint_channels() {
        let b = tiny_base();
        assert!(build_jointnet(&b, 2).is_err());
        assert!(
            build_direct_extend(&b, 4, ExtendInit::Zeros, &mut ChaCha8Rng::seed_from_u64(0))
                .is_err()
        );
        assert!("ones".parse::<ExtendInit>().is_err());
    }

    #[test]
    fn depth_input_conv_sums_rgb_slices() {
        let b = tiny_base();
        let m = build_jointnet(&b, 1).unwrap();
        let w3 = b.params.get("conv_in.weight").unwrap();
        let w1 = m.params.get("joint.conv_in.weight").unwrap();
        assert_eq!(w1.shape(), &[8, 1, 3, 3]);
        let k = 9;
        let expect = w3.data()[0] + w3.data()[k] + w3.data()[2 * k];
        assert_eq!(w1.data()[0], expect);
    }

    #[test]
    fn double_mask_extension_rejected() {
        let m = extend_for_masked_conditioning(build_jointnet(&tiny_base(), 1).unwrap()).unwrap();
        assert!(extend_for_masked_conditioning(m).is_err());
    }

    #[test]
    fn stage1_policy_freezes_rgb_only() {
        let m = build_jointnet(&tiny_base(), 3).unwrap();
        assert!(!m.is_trainable("rgb.conv_in.weight"));
        assert!(!m.is_trainable("rgb.class_table"));
        assert!(m.is_trainable("joint.conv_in.weight"));
        assert!(m.is_trainable("xchg.j2r.mid.weight"));
    }
}
