use jointdiff::diffusion::{ddim_sample, ddim_step, DiffusionState, NoiseSchedule};
use jointdiff::jointnet::{build_jointnet, JointDenoiser};
use jointdiff::tiling::{
    crop, generate_panorama, make_layout, make_layout_with_offset, sdedit_refine, tile_weights,
    tiled_denoise_step, tiled_sample, Borders, Refine, TileAccumulator, TileStrategy,
    TiledSampling,
};
use jointdiff::unet::{Backbone, BackboneConfig};
use jointdiff::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

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

fn noisy_state(n: usize, h: usize, w: usize, t: usize, seed: u64) -> DiffusionState {
    let mut r = rng(seed);
    DiffusionState::new(
        Tensor::randn([n, 3, h, w], &mut r),
        Tensor::randn([n, 1, h, w], &mut r),
        Some(t),
        vec![1; n],
    )
    .unwrap()
}

#[test]
fn layout_examples() {
    for stride in [1, 7, 16] {
        for pano in [false, true] {
            let l = make_layout(16, 16, 16, stride, pano, &mut rng(stride as u64)).unwrap();
            assert_eq!(l.tiles.len(), 1);
        }
    }
    let l = make_layout_with_offset(64, 32, 32, 32, (0, 0), false).unwrap();
    let xs: Vec<usize> = l.tiles.iter().map(|t| t.x).collect();
    assert_eq!(xs, vec![0, 32]);
    assert!(make_layout(64, 32, 32, 33, false, &mut rng(0)).is_err());
    assert!(make_layout(16, 32, 32, 16, false, &mut rng(0)).is_err());
    assert!(make_layout(72, 32, 32, 16, true, &mut rng(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn layouts_cover_the_canvas(
        tile in 4usize..20, extra_w in 0usize..40, extra_h in 0usize..20,
        sfrac in 0.1f64..1.0, pano in any::<bool>(), seed in 0u64..1000,
    ) {
        let stride = ((tile as f64 * sfrac) as usize).max(1);
        let (w, h) = if pano { (stride * (tile.div_ceil(stride) + extra_w / stride), tile + extra_h) } else { (tile + extra_w, tile + extra_h) };
        let l = make_layout(w, h, tile, stride, pano, &mut rng(seed)).unwrap();
        let mut count = vec![0u32; w * h];
        for t in &l.tiles {
            prop_assert!(t.y + tile <= h);
            if !pano || w == tile {
                prop_assert!(t.x + tile <= w);
            }
            for r in 0..tile {
                for c in 0..tile {
                    count[(t.y + r) * w + (t.x + c) % w] += 1;
                }
            }
        }
        prop_assert!(count.iter().all(|&c| c >= 1));
        // decayed weights still leave every pixel with positive total weight
        if stride * 2 <= tile {
            let mut acc = TileAccumulator::new(1, 1, h, w);
            for t in &l.tiles {
                let wts = tile_weights(tile, stride, t.borders, true);
                acc.add_tile(&Tensor::zeros([1, 1, tile, tile]), t.x, t.y, &wts).unwrap();
            }
            prop_assert!(acc.finish().is_ok());
        }
    }
}

#[test]
fn offsets_are_uniform() {
    let stride = 8;
    let mut counts = vec![0f64; stride * stride];
    let mut r = rng(1);
    let n = 10_000;
    for _ in 0..n {
        let l = make_layout(64, 64, 16, stride, false, &mut r).unwrap();
        counts[l.offset.1 * stride + l.offset.0] += 1.0;
    }
    let e = n as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    let crit = ChiSquared::new((counts.len() - 1) as f64)
        .unwrap()
        .inverse_cdf(0.99);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

#[test]
fn decay_weights_ring_and_ramp() {
    let open = Borders::default();
    let w = tile_weights(16, 8, open, true);
    for i in 0..16 {
        assert_eq!(w[i], 0.0);
        assert_eq!(w[15 * 16 + i], 0.0);
        assert_eq!(w[i * 16], 0.0);
        assert_eq!(w[i * 16 + 15], 0.0);
    }
    // decay width 4: row 8 rises 0, .25, .5, .75, 1
    let row: Vec<f64> = (0..5).map(|c| w[8 * 16 + c]).collect();
    assert_eq!(row, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let left = Borders { left: true, ..open };
    assert_eq!(tile_weights(16, 8, left, true)[8 * 16], 1.0);
    assert!(tile_weights(16, 8, open, false).iter().all(|&v| v == 1.0));
}

#[test]
fn single_tile_step_equals_plain_ddim() {
    let m = model(2);
    let s = NoiseSchedule::default();
    let st = noisy_state(2, 16, 16, 499, 3);
    let l = make_layout(16, 16, 16, 8, false, &mut rng(4)).unwrap();
    for guidance in [1.0, 3.0] {
        let a = tiled_denoise_step(
            &m,
            &s,
            &st,
            &l,
            TileStrategy::FULL,
            0,
            10,
            Some(399),
            guidance,
            None,
        )
        .unwrap();
        let b = ddim_step(&m, &st, &s, Some(399), guidance, None).unwrap();
        assert!(a.x.bit_eq(&b.x) && a.y.bit_eq(&b.y));
        assert_eq!(a.t, Some(399));
    }
}

#[test]
fn canvas_of_one_tile_is_ordinary_generation() {
    let m = model(5);
    let s = NoiseSchedule::default();
    let cfg = TiledSampling {
        width: 16,
        height: 16,
        tile: 16,
        stride: 8,
        steps: 4,
        guidance: 2.0,
        class: 3,
        strategy: TileStrategy::FULL,
        panoramic: true,
    };
    let (x, y) = generate_panorama(&m, &s, &cfg, &mut rng(6)).unwrap();
    let plain = ddim_sample(&m, &s, &[1, 3, 16, 16], vec![3], 4, 2.0, &mut rng(6)).unwrap();
    assert!(x.bit_eq(&plain.x) && y.bit_eq(&plain.y));
}

#[test]
fn equal_predictions_survive_any_weights() {
    // every tile reports the same canvas field at its own pixels
    let mut r = rng(7);
    let field = Tensor::from_fn([1, 2, 8, 24], |i| (i % 97) as f32 * 0.1 - 3.0);
    let mut acc = TileAccumulator::new(1, 2, 8, 24);
    for x in [0, 3, 8, 16, 20] {
        let w: Vec<f64> = (0..64).map(|_| r.gen_range(0.01..5.0)).collect();
        acc.add_tile(&crop(&field, x, 0, 8).unwrap(), x, 0, &w)
            .unwrap();
    }
    let out = acc.finish().unwrap();
    assert!(out.max_abs_diff(&field) < 1e-6);
}

#[test]
fn overlapping_constant_tiles_match_elementwise_oracle() {
    let (a, b) = (0.75f32, -1.5f32);
    let ta = Tensor::full([1, 1, 16, 16], a);
    let tb = Tensor::full([1, 1, 16, 16], b);
    let ba = Borders {
        left: true,
        top: true,
        bottom: true,
        right: false,
    };
    let bb = Borders {
        right: true,
        top: true,
        bottom: true,
        left: false,
    };
    let wa = tile_weights(16, 8, ba, true);
    let wb = tile_weights(16, 8, bb, true);
    let mut acc = TileAccumulator::new(1, 1, 16, 24);
    acc.add_tile(&ta, 0, 0, &wa).unwrap();
    acc.add_tile(&tb, 8, 0, &wb).unwrap();
    let out = acc.finish().unwrap();
    for r in 0..16 {
        for c in 0..24 {
            let wa_ = if c < 16 { wa[r * 16 + c] } else { 0.0 };
            let wb_ = if c >= 8 { wb[r * 16 + c - 8] } else { 0.0 };
            let want = (wa_ * a as f64 + wb_ * b as f64) / (wa_ + wb_);
            assert!(
                (out.data()[r * 24 + c] as f64 - want).abs() < 1e-6,
                "({r}, {c})"
            );
        }
    }
}

#[test]
fn zero_weight_pixels_are_reported() {
    let m = model(8);
    let s = NoiseSchedule::default();
    let st = noisy_state(1, 16, 32, 500, 9);
    // abutting tiles whose shared edge decays to zero on both sides
    let l = make_layout_with_offset(32, 16, 16, 16, (0, 0), false).unwrap();
    let strat = TileStrategy {
        random_offset: false,
        boundary_decay: true,
        whole_image: false,
    };
    let err = tiled_denoise_step(&m, &s, &st, &l, strat, 5, 10, Some(400), 1.0, None).unwrap_err();
    assert!(matches!(err, Error::Invariant(_)), "{err}");
}

/// Plain averaging written independently: one ddim_step per tile, then a count-weighted mean.
fn reference_plain_step(
    m: &JointDenoiser,
    s: &NoiseSchedule,
    st: &DiffusionState,
    tile: usize,
    stride: usize,
    prev: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (st.x.dim(2), st.x.dim(3));
    let mut xs = vec![0.0; 3 * h * w];
    let mut ys = vec![0.0; h * w];
    let mut cnt = vec![0.0; h * w];
    let mut x0 = 0;
    let mut starts = vec![];
    while x0 + tile <= w {
        starts.push(x0);
        x0 += stride;
    }
    if *starts.last().unwrap() != w - tile {
        starts.push(w - tile);
    }
    for &x0 in &starts {
        let sub = DiffusionState::new(
            crop(&st.x, x0, 0, tile).unwrap(),
            crop(&st.y, x0, 0, tile).unwrap(),
            st.t,
            st.class.clone(),
        )
        .unwrap();
        let out = ddim_step(m, &sub, s, Some(prev), 1.0, None).unwrap();
        for r in 0..tile {
            for c in 0..tile {
                let p = r * w + x0 + c;
                cnt[p] += 1.0;
                ys[p] += out.y.data()[r * tile + c] as f64;
                for ch in 0..3 {
                    xs[ch * h * w + p] += out.x.data()[ch * tile * tile + r * tile + c] as f64;
                }
            }
        }
    }
    for (i, v) in xs.iter_mut().enumerate() {
        *v /= cnt[i % (h * w)];
    }
    for (i, v) in ys.iter_mut().enumerate() {
        *v /= cnt[i];
    }
    (xs, ys)
}

#[test]
fn disabled_tricks_reproduce_plain_averaging() {
    let m = model(10);
    let s = NoiseSchedule::default();
    let st = noisy_state(1, 16, 40, 600, 11);
    let l = make_layout_with_offset(40, 16, 16, 8, (0, 0), false).unwrap();
    let got = tiled_denoise_step(
        &m,
        &s,
        &st,
        &l,
        TileStrategy::PLAIN,
        0,
        10,
        Some(500),
        1.0,
        None,
    )
    .unwrap();
    let (xs, ys) = reference_plain_step(&m, &s, &st, 16, 8, 500);
    for (g, r) in got
        .x
        .data()
        .iter()
        .zip(&xs)
        .chain(got.y.data().iter().zip(&ys))
    {
        assert!((*g as f64 - r).abs() < 1e-5, "{g} vs {r}");
    }
}

#[test]
fn panoramas_are_reproducible() {
    let m = model(12);
    let s = NoiseSchedule::default();
    let cfg = TiledSampling {
        width: 48,
        height: 16,
        tile: 16,
        stride: 8,
        steps: 3,
        guidance: 1.0,
        class: 0,
        strategy: TileStrategy::FULL,
        panoramic: true,
    };
    let a = generate_panorama(&m, &s, &cfg, &mut rng(13)).unwrap();
    let b = generate_panorama(&m, &s, &cfg, &mut rng(13)).unwrap();
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1));
    assert_eq!(a.0.shape(), &[1, 3, 16, 48]);
    assert!(a.0.has_non_finite().is_none());
    assert!(generate_panorama(&m, &s, &TiledSampling { height: 32, ..cfg }, &mut rng(13)).is_err());
}

fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let mv = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (
            m,
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64,
        )
    };
    let ((ma, va), (mb, vb)) = (mv(a), mv(b));
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()))
}

#[test]
fn panorama_seam_looks_like_interior() {
    let m = model(14);
    let s = NoiseSchedule::default();
    let cfg = TiledSampling {
        width: 64,
        height: 16,
        tile: 16,
        stride: 8,
        steps: 4,
        guidance: 1.0,
        class: 2,
        strategy: TileStrategy::FULL,
        panoramic: true,
    };
    let (w, h) = (64, 16);
    let (mut seam, mut interior) = (vec![], vec![]);
    for seed in 0..32 {
        let (x, _) = generate_panorama(&m, &s, &cfg, &mut rng(100 + seed)).unwrap();
        let d = |c0: usize, c1: usize| {
            let mut acc = 0.0;
            for ch in 0..3 {
                for r in 0..h {
                    acc += (x.data()[ch * h * w + r * w + c0] - x.data()[ch * h * w + r * w + c1])
                        .abs() as f64;
                }
            }
            acc / (3 * h) as f64
        };
        seam.push(d(w - 1, 0));
        interior.push((0..w - 1).map(|c| d(c, c + 1)).sum::<f64>() / (w - 1) as f64);
    }
    let p = welch_p(&seam, &interior);
    assert!(p > 0.05, "seam differs from interior (p = {p})");
}

#[test]
fn refine_strength_limits() {
    let m = model(15);
    let s = NoiseSchedule::default();
    let mut r = rng(16);
    let x = Tensor::rand_uniform([1, 3, 16, 16], -1.0, 1.0, &mut r);
    let y = Tensor::rand_uniform([1, 1, 16, 16], -1.0, 1.0, &mut r);
    let cfg = Refine {
        strength: 0.0004,
        steps: 10,
        guidance: 1.0,
        class: 0,
        tiling: None,
        keep_image: false,
    };
    let (a, b) = sdedit_refine(&m, &s, &x, &y, &cfg, &mut rng(17)).unwrap();
    assert!(a.bit_eq(&x) && b.bit_eq(&y));
    assert!(sdedit_refine(
        &m,
        &s,
        &x,
        &y,
        &Refine {
            strength: 1.5,
            ..cfg.clone()
        },
        &mut rng(17)
    )
    .is_err());

    // at full strength the input only survives through sqrt(ᾱ_999) ≈ 0.006
    let full = Refine {
        strength: 1.0,
        ..cfg.clone()
    };
    let (a1, _) = sdedit_refine(&m, &s, &x, &y, &full, &mut rng(18)).unwrap();
    let (a2, _) =
        sdedit_refine(&m, &s, &x.map(|v| -v), &y.map(|v| -v), &full, &mut rng(18)).unwrap();
    let plain = ddim_sample(&m, &s, &[1, 3, 16, 16], vec![0], 10, 1.0, &mut rng(99)).unwrap();
    let spread = plain.x.data().iter().map(|v| v.abs() as f64).sum::<f64>() / 768.0;
    let diff = a1
        .data()
        .iter()
        .zip(a2.data())
        .map(|(p, q)| (p - q).abs() as f64)
        .sum::<f64>()
        / 768.0;
    assert!(diff < 0.1 * spread, "{diff} vs {spread}");

    // tiled refinement with the image held fixed
    let big_x = Tensor::rand_uniform([1, 3, 16, 32], -1.0, 1.0, &mut r);
    let big_y = Tensor::rand_uniform([1, 1, 16, 32], -1.0, 1.0, &mut r);
    let tiled = Refine {
        strength: 0.4,
        tiling: Some((16, 8)),
        keep_image: true,
        ..cfg
    };
    let (tx, ty) = sdedit_refine(&m, &s, &big_x, &big_y, &tiled, &mut rng(19)).unwrap();
    assert!(tx.bit_eq(&big_x));
    assert!(ty.has_non_finite().is_none() && ty.max_abs_diff(&big_y) > 0.0);
}

#[test]
fn tiled_sampling_runs_on_taller_canvases() {
    let m = model(20);
    let s = NoiseSchedule::default();
    let cfg = TiledSampling {
        width: 24,
        height: 24,
        tile: 16,
        stride: 8,
        steps: 2,
        guidance: 1.0,
        class: 1,
        strategy: TileStrategy::FULL,
        panoramic: false,
    };
    let (x, y) = tiled_sample(&m, &s, &cfg, &mut rng(21)).unwrap();
    assert_eq!(
        (x.shape(), y.shape()),
        (&[1, 3, 24, 24][..], &[1, 1, 24, 24][..])
    );
    assert!(x.has_non_finite().is_none());
}
