use jointdiff::diffusion::{joint_loss, JointModel, LossBatch, MaskedInput, NoiseSchedule};
use jointdiff::jointnet::{
    build_direct_extend, build_jointnet, extend_for_masked_conditioning, ExtendInit, FreezePolicy,
    JointDenoiser, J2R, R2J,
};
use jointdiff::optim::{Adam, AdamConfig};
use jointdiff::unet::{Backbone, BackboneConfig, ExchangeView};
use jointdiff::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg() -> BackboneConfig {
    BackboneConfig {
        base_width: 8,
        channel_mults: vec![1, 2],
        groups: 4,
        embed_dim: 16,
        ..BackboneConfig::default()
    }
}

fn base(seed: u64) -> Backbone {
    Backbone::new(cfg(), &mut rng(seed)).unwrap()
}

/// The joint branch as a standalone backbone, class table borrowed from RGB.
fn joint_as_backbone(m: &JointDenoiser) -> Backbone {
    let mut params = m.params.with_prefix("joint.");
    params.insert(
        "class_table",
        m.params.get("rgb.class_table").unwrap().clone(),
    );
    Backbone {
        config: m.joint_config().clone(),
        params,
    }
}

fn inputs(n: usize, jc: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>, Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let x = Tensor::randn([n, 3, 8, 8], &mut r);
    let y = Tensor::randn([n, jc, 8, 8], &mut r);
    let t = (0..n).map(|i| (i * 97 + 13) % 1000).collect();
    let c = (0..n).map(|i| i % 9).collect();
    (x, y, t, c)
}

#[test]
fn fresh_jointnet_preserves_both_branch_outputs() {
    for jc in [1, 3] {
        let b = base(1);
        let m = build_jointnet(&b, jc).unwrap();
        let jb = joint_as_backbone(&m);
        let (x, y, t, c) = inputs(4, jc, 2);
        let (ex, ey) = m.predict(&x, &y, &t, &c, None).unwrap();
        assert!(ex.bit_eq(&b.predict(&x, &t, &c).unwrap()));
        assert!(ey.bit_eq(&jb.predict(&y, &t, &c).unwrap()));
    }
}

#[test]
fn depth_branch_starts_silent() {
    let m = build_jointnet(&base(1), 1).unwrap();
    let (x, y, t, c) = inputs(2, 1, 3);
    let (_, ey) = m.predict(&x, &y, &t, &c, None).unwrap();
    assert!(ey.data().iter().all(|&v| v == 0.0));
}

#[test]
fn build_is_deterministic_and_interior_matches_base() {
    let b = base(5);
    let (m1, m2) = (
        build_jointnet(&b, 3).unwrap(),
        build_jointnet(&b, 3).unwrap(),
    );
    assert_eq!(m1, m2);
    for (name, t) in b.params.iter() {
        if name != "class_table" {
            assert!(
                m1.params.get(&format!("joint.{name}")).unwrap().bit_eq(t),
                "{name}"
            );
        }
    }
    for (name, t) in m1.params.iter() {
        if name.starts_with("xchg.") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

fn stage1_step(m: &mut JointDenoiser, opt: &mut Adam, seed: u64) {
    let (x, y, t, c) = inputs(2, m.joint_channels, seed);
    let mut r = rng(seed + 1000);
    let ex = Tensor::randn(x.shape().to_vec(), &mut r);
    let ey = Tensor::randn(y.shape().to_vec(), &mut r);
    let s = NoiseSchedule::default();
    let grads = {
        let mut tape = Tape::<f32>::with_params(Some(&m.params));
        let frozen = m.freeze;
        tape.set_trainable(move |n| frozen == FreezePolicy::AllTrainable || !n.starts_with("rgb."));
        let batch = LossBatch {
            x0: &x,
            y0: &y,
            class: &c,
            t: &t,
            eps_x: &ex,
            eps_y: &ey,
            mask: None,
        };
        let l = joint_loss(&*m, &mut tape, &batch, &s).unwrap();
        tape.backward(l.total).unwrap();
        tape.param_grads()
    };
    assert!(grads.iter().all(|(n, _)| m.is_trainable(n)));
    opt.step(&mut m.params, &grads).unwrap();
}

#[test]
fn stage1_steps_leave_rgb_branch_bit_identical() {
    let mut m = build_jointnet(&base(6), 1).unwrap();
    let snapshot = m.params.clone();
    let mut opt = Adam::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    })
    .unwrap();
    for s in 0..3 {
        stage1_step(&mut m, &mut opt, s);
    }
    assert!(m.params.bit_eq_where(&snapshot, |n| n.starts_with("rgb.")));
    assert!(!m.params.bit_eq_where(&snapshot, |n| n.starts_with("xchg.")));
    assert!(!m
        .params
        .bit_eq_where(&snapshot, |n| n.starts_with("joint.")));
}

#[test]
fn batch_permutation_is_equivariant() {
    let m = build_jointnet(&base(7), 3).unwrap();
    let (x, y, t, c) = inputs(3, 3, 8);
    let (ex, ey) = m.predict(&x, &y, &t, &c, None).unwrap();
    let perm = [2, 0, 1];
    let pick = |a: &Tensor<f32>| {
        let items: Vec<_> = perm.iter().map(|&i| a.batch_item(i).unwrap()).collect();
        Tensor::cat_batch(&items).unwrap()
    };
    let pt: Vec<_> = perm.iter().map(|&i| t[i]).collect();
    let pc: Vec<_> = perm.iter().map(|&i| c[i]).collect();
    let (px, py) = m.predict(&pick(&x), &pick(&y), &pt, &pc, None).unwrap();
    assert!(px.max_abs_diff(&pick(&ex)) < 1e-5);
    assert!(py.max_abs_diff(&pick(&ey)) < 1e-5);
}

fn perturb_exchange(params: &mut ParamStore, xchg: ExchangeView<'_>, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(xchg.prefix))
        .map(String::from)
        .collect();
    for n in names {
        let shape = params.get(&n).unwrap().shape().to_vec();
        params.insert(n, Tensor::rand_uniform(shape, -scale, scale, &mut r));
    }
}

#[test]
fn exchange_carries_information_once_nonzero() {
    let mut m = build_jointnet(&base(9), 1).unwrap();
    let (x, y, t, c) = inputs(1, 1, 10);
    let y2 = y.map(|v| v + 1e-2);
    let (a, _) = m.predict(&x, &y, &t, &c, None).unwrap();
    let (b, _) = m.predict(&x, &y2, &t, &c, None).unwrap();
    assert!(a.bit_eq(&b), "zero exchange must ignore y");
    perturb_exchange(&mut m.params, J2R, 0.05, 11);
    perturb_exchange(&mut m.params, R2J, 0.05, 12);
    let (a, _) = m.predict(&x, &y, &t, &c, None).unwrap();
    let (b, _) = m.predict(&x, &y2, &t, &c, None).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn zeroing_exchange_again_restores_bit_equality() {
    let b = base(13);
    let fresh = build_jointnet(&b, 3).unwrap();
    let mut m = fresh.clone();
    let (x, y, t, c) = inputs(2, 3, 14);
    perturb_exchange(&mut m.params, J2R, 0.1, 15);
    let (ex, _) = m.predict(&x, &y, &t, &c, None).unwrap();
    let base_out = b.predict(&x, &t, &c).unwrap();
    assert!(!ex.bit_eq(&base_out));
    m.params = fresh.params.clone();
    let (ex, _) = m.predict(&x, &y, &t, &c, None).unwrap();
    assert!(ex.bit_eq(&base_out));
}

#[test]
fn forward_rejects_mismatched_shapes() {
    let m = build_jointnet(&base(1), 1).unwrap();
    let mut r = rng(0);
    let x = Tensor::randn([1, 3, 8, 8], &mut r);
    assert!(m
        .predict(&x, &Tensor::zeros([1, 1, 16, 16]), &[1], &[0], None)
        .is_err());
    assert!(m
        .predict(&x, &Tensor::zeros([1, 3, 8, 8]), &[1], &[0], None)
        .is_err());
    assert!(m
        .predict(&x, &Tensor::zeros([2, 1, 8, 8]), &[1], &[0], None)
        .is_err());
}

#[test]
fn parameter_count_is_two_backbones_plus_exchange() {
    for jc in [1usize, 3] {
        let b = base(1);
        let m = build_jointnet(&b, jc).unwrap();
        let c = cfg();
        let base_n = b.params.num_elements();
        let table = (c.num_classes + 1) * c.embed_dim;
        let bw = c.base_width;
        // joint branch differs from the base only in conv_in/conv_out channel counts
        let joint_n =
            base_n - table - (3 * bw * 9) - (bw * 3 * 9 + 3) + (jc * bw * 9) + (bw * jc * 9 + jc);
        let widths: Vec<usize> = c.channel_mults.iter().map(|m| m * bw).collect();
        let top = *widths.last().unwrap();
        let interior: usize = widths.iter().map(|w| w * w + w).sum::<usize>() + top * top + top;
        let xchg = (3 * bw + bw) + (jc * bw + bw) + 2 * interior;
        assert_eq!(m.params.num_elements(), base_n + joint_n + xchg, "jc={jc}");
    }
}

#[test]
fn direct_extend_zero_and_copy_modes() {
    let b = base(16);
    let (x, y, t, c) = inputs(2, 3, 17);
    let base_out = b.predict(&x, &t, &c).unwrap();

    let z = build_direct_extend(&b, 3, ExtendInit::Zeros, &mut rng(0)).unwrap();
    let (ex, ey) = z.predict(&x, &y, &t, &c, None).unwrap();
    assert!(ey.data().iter().all(|&v| v == 0.0));
    assert!(ex.bit_eq(&base_out), "rgb output preserved at build");

    let cp = build_direct_extend(&b, 3, ExtendInit::Copy, &mut rng(0)).unwrap();
    let (ex, ey) = cp.predict(&x, &y, &t, &c, None).unwrap();
    // the documented flaw: the "joint" estimate is just the RGB noise estimate
    assert!(ey.bit_eq(&ex));
    assert!(ex.bit_eq(&base_out));

    let rd = build_direct_extend(&b, 1, ExtendInit::Random, &mut rng(0)).unwrap();
    let y1 = Tensor::randn([2, 1, 8, 8], &mut rng(99));
    let (ex, ey) = rd.predict(&x, &y1, &t, &c, None).unwrap();
    assert!(ex.bit_eq(&base_out));
    assert!(ey.data().iter().any(|&v| v != 0.0));
}

#[test]
fn direct_extend_copy_depth_matches_first_rgb_channel() {
    let b = base(18);
    let (x, _, t, c) = inputs(2, 1, 19);
    let y = Tensor::randn([2, 1, 8, 8], &mut rng(20));
    let cp = build_direct_extend(&b, 1, ExtendInit::Copy, &mut rng(0)).unwrap();
    let (ex, ey) = cp.predict(&x, &y, &t, &c, None).unwrap();
    for n in 0..2 {
        let r = &ex.data()[n * 192..n * 192 + 64];
        assert_eq!(r, &ey.data()[n * 64..(n + 1) * 64]);
    }
    assert!(cp.rgb_backbone().params.bit_eq(&b.params));
}

#[test]
fn mask_extension_preserves_output_and_learns() {
    let m = build_jointnet(&base(21), 1).unwrap();
    let (x, y, t, c) = inputs(2, 1, 22);
    let (ex0, ey0) = m.predict(&x, &y, &t, &c, None).unwrap();
    let mx = extend_for_masked_conditioning(m).unwrap();

    let mut r = rng(23);
    let mask_x = Tensor::from_fn([2, 1, 8, 8], |i| (i % 3 == 0) as u8 as f32);
    let mask_y = Tensor::from_fn([2, 1, 8, 8], |i| (i % 5 < 2) as u8 as f32);
    let masked = MaskedInput::from_clean(
        &Tensor::randn([2, 3, 8, 8], &mut r),
        &Tensor::randn([2, 1, 8, 8], &mut r),
        &mask_x,
        &mask_y,
    )
    .unwrap();
    let (ex1, ey1) = mx.predict(&x, &y, &t, &c, Some(&masked)).unwrap();
    assert!(ex1.bit_eq(&ex0) && ey1.bit_eq(&ey0));

    let white = MaskedInput::generate_all(2, 3, 1, 8, 8);
    let (ew, _) = mx.predict(&x, &y, &t, &c, Some(&white)).unwrap();
    let (ed, _) = mx.predict(&x, &y, &t, &c, None).unwrap();
    assert!(ew.bit_eq(&ed));

    let s = NoiseSchedule::default();
    let eps_x = Tensor::randn([2, 3, 8, 8], &mut r);
    let eps_y = Tensor::randn([2, 1, 8, 8], &mut r);
    let batch = LossBatch {
        x0: &x,
        y0: &y,
        class: &c,
        t: &t,
        eps_x: &eps_x,
        eps_y: &eps_y,
        mask: Some(&masked),
    };
    let grads_of = |m: &JointDenoiser| {
        let mut tape = Tape::<f32>::with_params(Some(&m.params));
        tape.set_trainable(|n| !n.starts_with("rgb."));
        let l = joint_loss(m, &mut tape, &batch, &s).unwrap();
        tape.backward(l.total).unwrap();
        tape.param_grads()
    };
    // the zeroed depth head blocks backprop into the joint branch until it has moved once
    let mut mx = mx;
    let mut opt = Adam::new(AdamConfig::default()).unwrap();
    let g0 = grads_of(&mx);
    opt.step(&mut mx.params, &g0).unwrap();
    let grads = grads_of(&mx);
    for name in ["mask.rgb.conv_in.weight", "mask.joint.conv_in.weight"] {
        let g = &grads.iter().find(|(n, _)| n == name).unwrap().1;
        let norm: f64 = g
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0, "{name}");
    }
}

#[test]
fn unextended_model_refuses_masks() {
    let m = build_jointnet(&base(1), 1).unwrap();
    let (x, y, t, c) = inputs(1, 1, 2);
    let white = MaskedInput::generate_all(1, 3, 1, 8, 8);
    assert!(m.predict(&x, &y, &t, &c, Some(&white)).is_err());
}
