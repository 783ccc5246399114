use jointdiff::diffusion::{corrupt, sample_noise, DiffusionState, NoiseSchedule};
use jointdiff::inpaint::{
    edit_rgbd, generate_from_depth, inpaint, inpaint_traced, predict_depth, repaint_blend,
    InpaintRequest, ModalityMask,
};
use jointdiff::jointnet::{build_jointnet, extend_for_masked_conditioning, JointDenoiser};
use jointdiff::unet::{Backbone, BackboneConfig};
use jointdiff::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn model(seed: u64) -> JointDenoiser {
    let cfg = BackboneConfig {
        base_width: 8,
        channel_mults: vec![1, 2],
        groups: 4,
        embed_dim: 16,
        ..BackboneConfig::default()
    };
    build_jointnet(&Backbone::new(cfg, &mut rng(seed)).unwrap(), 1).unwrap()
}

fn pair(n: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = rng(seed);
    (
        Tensor::rand_uniform([n, 3, 16, 16], -1.0, 1.0, &mut r),
        Tensor::rand_uniform([n, 1, 16, 16], -1.0, 1.0, &mut r),
    )
}

fn request<'a>(
    x0: &'a Tensor<f32>,
    y0: &'a Tensor<f32>,
    masks: &'a ModalityMask,
) -> InpaintRequest<'a> {
    InpaintRequest {
        x0,
        y0,
        masks,
        class: vec![2; x0.dim(0)],
        steps: 4,
        guidance: 1.0,
    }
}

#[test]
fn blend_endpoints() {
    let s = NoiseSchedule::default();
    let (a, _) = pair(2, 1);
    let ones = Tensor::ones([2, 1, 16, 16]);
    let zeros = Tensor::zeros([2, 1, 16, 16]);
    let other = Tensor::rand_uniform([2, 3, 16, 16], -1.0, 1.0, &mut rng(2));
    assert!(repaint_blend(&a, &other, &ones, Some(500), &s, &mut rng(0))
        .unwrap()
        .bit_eq(&a));
    assert!(repaint_blend(&a, &other, &zeros, None, &s, &mut rng(0))
        .unwrap()
        .bit_eq(&other));
    let near = repaint_blend(&a, &other, &zeros, Some(0), &s, &mut rng(0)).unwrap();
    assert!(near.max_abs_diff(&other) < 0.1);
}

#[test]
fn checkerboard_blend_matches_selection_oracle() {
    let s = NoiseSchedule::default();
    let (a, _) = pair(2, 3);
    let known = Tensor::rand_uniform([2, 3, 16, 16], -1.0, 1.0, &mut rng(4));
    let mask = Tensor::from_fn([2, 1, 16, 16], |i| ((i / 16 + i % 16) % 2) as f32);
    let got = repaint_blend(&a, &known, &mask, Some(321), &s, &mut rng(5)).unwrap();
    let eps = sample_noise(&[2, 3, 16, 16], &mut rng(5));
    let noisy = corrupt(&known, 321, &eps, &s).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for p in 0..256 {
                let i = (n * 3 + c) * 256 + p;
                let want = if mask.data()[n * 256 + p] == 1.0 {
                    a.data()[i]
                } else {
                    noisy.data()[i]
                };
                assert_eq!(got.data()[i].to_bits(), want.to_bits(), "at {i}");
            }
        }
    }
}

#[test]
fn nothing_to_generate_returns_inputs() {
    let m = model(6);
    let s = NoiseSchedule::default();
    let (x0, y0) = pair(2, 7);
    let masks =
        ModalityMask::new(Tensor::zeros([2, 1, 16, 16]), Tensor::zeros([2, 1, 16, 16])).unwrap();
    let (x, y) = inpaint(&m, &s, &request(&x0, &y0, &masks), &mut rng(8)).unwrap();
    assert!(x.bit_eq(&x0) && y.bit_eq(&y0));
}

#[test]
fn channel_wise_tasks_keep_the_given_modality() {
    let m = model(9);
    let s = NoiseSchedule::default();
    let (x0, y0) = pair(1, 10);
    let (x, y) = generate_from_depth(&m, &s, &y0, 3, 4, 2.0, &mut rng(11)).unwrap();
    assert!(y.bit_eq(&y0));
    assert!(x.has_non_finite().is_none() && x.max_abs_diff(&Tensor::zeros([1, 3, 16, 16])) > 0.0);
    let (x, y) = predict_depth(&m, &s, &x0, None, 4, &mut rng(12)).unwrap();
    assert!(x.bit_eq(&x0));
    assert!(y.has_non_finite().is_none() && y.max_abs_diff(&Tensor::zeros([1, 1, 16, 16])) > 0.0);
}

#[test]
fn symmetric_editing_is_plain_inpainting() {
    let m = model(13);
    let s = NoiseSchedule::default();
    let (x0, y0) = pair(1, 14);
    let mask = Tensor::from_fn([1, 1, 16, 16], |i| ((i % 16) >= 8) as u8 as f32);
    let a = edit_rgbd(&m, &s, &x0, &y0, &mask, vec![1], 4, 1.0, &mut rng(15)).unwrap();
    let masks = ModalityMask::new(mask.clone(), mask.clone()).unwrap();
    let req = InpaintRequest {
        class: vec![1],
        ..request(&x0, &y0, &masks)
    };
    let b = inpaint(&m, &s, &req, &mut rng(15)).unwrap();
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1));
}

#[test]
fn mask_conditioned_model_preserves_regions() {
    let m = extend_for_masked_conditioning(model(16)).unwrap();
    let s = NoiseSchedule::default();
    let (x0, y0) = pair(1, 17);
    let masks = ModalityMask::depth_estimation(1, 16, 16);
    let (x, y) = inpaint(&m, &s, &request(&x0, &y0, &masks), &mut rng(18)).unwrap();
    assert!(x.bit_eq(&x0));
    assert!(y.has_non_finite().is_none());
}

#[test]
fn known_region_noise_matches_the_samplers_timestep() {
    let m = model(19);
    let s = NoiseSchedule::default();
    let x0 = Tensor::full([4, 3, 16, 16], 0.5);
    let y0 = Tensor::full([4, 1, 16, 16], -0.25);
    let masks =
        ModalityMask::new(Tensor::zeros([4, 1, 16, 16]), Tensor::zeros([4, 1, 16, 16])).unwrap();
    let req = InpaintRequest {
        steps: 10,
        ..request(&x0, &y0, &masks)
    };
    let mut states: Vec<DiffusionState> = Vec::new();
    inpaint_traced(&m, &s, &req, &mut rng(20), |st| states.push(st.clone())).unwrap();
    let grid = s.sampling_timesteps(10).unwrap();
    assert_eq!(states.len(), 11);
    let z_stats = |x: &Tensor<f32>, t: usize| {
        let ab = s.alpha_bar(Some(t));
        let z: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| (v as f64 - ab.sqrt() * 0.5) / (1.0 - ab).sqrt())
            .collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        (mean, var)
    };
    for (k, st) in states.iter().take(10).enumerate() {
        assert_eq!(st.t, Some(grid[k]));
        let (mean, var) = z_stats(&st.x, grid[k]);
        // 3072 samples: std of the variance estimate is about 0.026
        assert!(
            mean.abs() < 0.1 && (var - 1.0).abs() < 0.12,
            "step {k}: {mean} {var}"
        );
        // the off-by-one level is only distinguishable once ᾱ is well away from 0
        let ratio =
            |a: usize, b: usize| (1.0 - s.alpha_bar(Some(a))) / (1.0 - s.alpha_bar(Some(b)));
        if k + 1 < 10 && ratio(grid[k], grid[k + 1]) > 1.3 {
            let (_, wrong) = z_stats(&st.x, grid[k + 1]);
            assert!(
                (wrong - 1.0).abs() > 0.12,
                "step {k}: the next grid level should not fit ({wrong})"
            );
        }
    }
    assert_eq!(states[10].t, None);
    assert!(states[10].x.bit_eq(&x0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn kept_pixels_are_bit_exact(seed in 0u64..1000) {
        let m = model(21);
        let s = NoiseSchedule::default();
        let (x0, y0) = pair(1, seed);
        let mut r = rng(seed);
        let mx = Tensor::from_fn([1, 1, 16, 16], |_| r.gen_bool(0.5) as u8 as f32);
        let my = Tensor::from_fn([1, 1, 16, 16], |_| r.gen_bool(0.3) as u8 as f32);
        let masks = ModalityMask::new(mx.clone(), my.clone()).unwrap();
        let req = InpaintRequest { steps: 2, ..request(&x0, &y0, &masks) };
        let (x, y) = inpaint(&m, &s, &req, &mut r).unwrap();
        for (out, inp, mask, c) in [(&x, &x0, &mx, 3), (&y, &y0, &my, 1)] {
            for i in 0..c * 256 {
                if mask.data()[i % 256] == 0.0 {
                    prop_assert_eq!(out.data()[i].to_bits(), inp.data()[i].to_bits());
                }
            }
        }
    }
}
