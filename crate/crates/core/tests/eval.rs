use jointdiff::eval::{
    abs_rel, align_scale_shift, denormalize_disparity, evaluate_depth, panorama_to_points,
    point_to_pixel, rmse_disparity, soft_bin, tile_coherence, write_ply, HIST_BINS,
};
use jointdiff::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn positive_map(n: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn([1, n, n], |_| r.gen_range(0.1f32..2.0))
}

// full-set closed form, written out independently
fn full_solve(p: &[f32], g: &[f32]) -> (f64, f64) {
    let n = p.len() as f64;
    let mp = p.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mg = g.iter().map(|&v| v as f64).sum::<f64>() / n;
    let cov: f64 = p
        .iter()
        .zip(g)
        .map(|(&a, &b)| (a as f64 - mp) * (b as f64 - mg))
        .sum();
    let var: f64 = p.iter().map(|&a| (a as f64 - mp).powi(2)).sum();
    let s = cov / var;
    (s, mg - s * mp)
}

#[test]
fn identical_maps_align_exactly() {
    let g = positive_map(32, 1);
    let a = align_scale_shift(&g, &g, &Tensor::ones([1, 32, 32]), 8, 0.1, &mut rng(0)).unwrap();
    assert_eq!((a.scale, a.shift), (1.0, 0.0));
    assert_eq!(a.n_valid, 1024);
    assert_eq!(a.solves.len(), 8);
}

#[test]
fn affine_prediction_recovers_inverse_map() {
    // multiples of 1/64 keep 2·g + 3 exact in f32
    let g = positive_map(32, 2).map(|v| (v * 64.0).round() / 64.0);
    let p = g.map(|v| 2.0 * v + 3.0);
    let (so, to) = full_solve(p.data(), g.data());
    assert!((so - 0.5).abs() < 1e-6 && (to + 1.5).abs() < 1e-5);
    let a = align_scale_shift(&p, &g, &Tensor::ones([1, 32, 32]), 8, 0.1, &mut rng(3)).unwrap();
    assert!((a.scale - so).abs() < 1e-9, "{} vs {so}", a.scale);
    assert!((a.shift - to).abs() < 1e-9, "{} vs {to}", a.shift);
}

#[test]
fn median_of_subset_solves_resists_outliers() {
    // 64 pixels: 10% subsets hold 6 pixels, so most of them miss the 3 outliers
    let g = positive_map(8, 4);
    let mut p = g.clone();
    let mut r = rng(5);
    for i in rand::seq::index::sample(&mut r, 64, 3) {
        p.data_mut()[i] += 40.0;
    }
    let full = full_solve(p.data(), g.data());
    let a = align_scale_shift(&p, &g, &Tensor::ones([1, 8, 8]), 8, 0.1, &mut rng(6)).unwrap();
    let dist = |s: f64, t: f64| ((s - 1.0).powi(2) + t.powi(2)).sqrt();
    assert!(
        dist(a.scale, a.shift) < dist(full.0, full.1),
        "{a:?} vs {full:?}"
    );
}

#[test]
fn invalid_and_nonpositive_pixels_are_ignored() {
    let g = positive_map(8, 7);
    let mut p = g.clone();
    let mut gt = g.clone();
    let mut valid = Tensor::ones([1, 8, 8]);
    p.data_mut()[0] = 100.0;
    valid.data_mut()[0] = 0.0;
    p.data_mut()[1] = -50.0;
    gt.data_mut()[1] = 0.0;
    let a = align_scale_shift(&p, &gt, &valid, 1, 1.0, &mut rng(0)).unwrap();
    assert_eq!(a.n_valid, 62);
    assert!((a.scale - 1.0).abs() < 1e-12 && a.shift.abs() < 1e-12);
    assert!(align_scale_shift(&p, &gt, &Tensor::zeros([1, 8, 8]), 1, 1.0, &mut rng(0)).is_err());
}

#[test]
fn metric_examples() {
    let g = positive_map(16, 8);
    let v = Tensor::ones([1, 16, 16]);
    assert_eq!(abs_rel(&g, &g, &v).unwrap(), 0.0);
    assert_eq!(rmse_disparity(&g, &g, &v).unwrap(), 0.0);
    let scaled = g.map(|x| (1.1f64 * x as f64) as f32);
    // exact up to the f32 rounding of 1.1·g
    let ar = abs_rel(&scaled, &g, &v).unwrap();
    assert!((ar - 0.1).abs() < 1e-7, "{ar}");
    let off = g.map(|x| x + 0.5);
    assert!((rmse_disparity(&off, &g, &v).unwrap() - 0.5).abs() < 1e-6);
}

#[test]
fn metrics_match_reordered_accumulation() {
    let mut r = rng(9);
    let p = positive_map(24, 10);
    let g = positive_map(24, 11);
    let v = Tensor::from_fn([1, 24, 24], |_| (r.gen::<f32>() > 0.2) as u8 as f32);
    let idx: Vec<usize> = (0..576).rev().filter(|&i| v.data()[i] == 1.0).collect();
    // pairwise tree sum in reverse order
    fn tree(x: &[f64]) -> f64 {
        match x.len() {
            0 => 0.0,
            1 => x[0],
            n => tree(&x[..n / 2]) + tree(&x[n / 2..]),
        }
    }
    let rel: Vec<f64> = idx
        .iter()
        .map(|&i| (p.data()[i] as f64 - g.data()[i] as f64).abs() / g.data()[i] as f64)
        .collect();
    let sq: Vec<f64> = idx
        .iter()
        .map(|&i| (p.data()[i] as f64 - g.data()[i] as f64).powi(2))
        .collect();
    let n = idx.len() as f64;
    assert!((abs_rel(&p, &g, &v).unwrap() - tree(&rel) / n).abs() < 1e-9);
    assert!((rmse_disparity(&p, &g, &v).unwrap() - (tree(&sq) / n).sqrt()).abs() < 1e-9);
}

#[test]
fn alignment_is_scale_equivariant_on_noisy_data() {
    let g = positive_map(32, 12);
    let mut r = rng(13);
    let p = Tensor::from_fn([1, 32, 32], |i| {
        0.7 * g.data()[i] + 0.2 + r.gen_range(-0.05..0.05)
    });
    let depth = g.map(|x| 1.0 / x);
    let v = Tensor::ones([1, 32, 32]);
    let base = evaluate_depth(&p, &depth, &v, &mut rng(14)).unwrap();
    // a power of two keeps every product exact
    let a = 4.0f32;
    let q = p.map(|x| a * x);
    let moved = evaluate_depth(&q, &depth, &v, &mut rng(14)).unwrap();
    assert!((moved.alignment.scale - base.alignment.scale / a as f64).abs() < 1e-12);
    assert!((moved.abs_rel - base.abs_rel).abs() < 1e-9);
    assert!((moved.rmse - base.rmse).abs() < 1e-9);
}

#[test]
fn single_full_solve_is_affine_equivariant() {
    let g = positive_map(32, 15);
    let mut r = rng(16);
    let p = Tensor::from_fn([1, 32, 32], |i| g.data()[i] + r.gen_range(-0.1..0.1));
    let v = Tensor::ones([1, 32, 32]);
    let (a, b) = (3.0, -1.25);
    let q = p.map(|x| (a * x as f64 + b) as f32);
    let s0 = align_scale_shift(&p, &g, &v, 1, 1.0, &mut rng(0)).unwrap();
    let s1 = align_scale_shift(&q, &g, &v, 1, 1.0, &mut rng(0)).unwrap();
    assert!((s1.scale - s0.scale / a).abs() < 1e-6);
    let r0 = rmse_disparity(&s0.apply(&p), &g, &v).unwrap();
    let r1 = rmse_disparity(&s1.apply(&q), &g, &v).unwrap();
    assert!((r0 - r1).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn metrics_are_permutation_invariant(seed in 0u64..10_000) {
        let p = positive_map(12, seed);
        let g = positive_map(12, seed + 1);
        let v = Tensor::ones([1, 12, 12]);
        let mut perm: Vec<usize> = (0..144).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng(seed));
        let pp = Tensor::from_fn([1, 12, 12], |i| p.data()[perm[i]]);
        let gp = Tensor::from_fn([1, 12, 12], |i| g.data()[perm[i]]);
        prop_assert!((abs_rel(&p, &g, &v).unwrap() - abs_rel(&pp, &gp, &v).unwrap()).abs() < 1e-12);
        prop_assert!((rmse_disparity(&p, &g, &v).unwrap() - rmse_disparity(&pp, &gp, &v).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn coherence_symmetric_and_offset_invariant(seed in 0u64..10_000, off in -0.3f32..0.3) {
        let mut r = rng(seed);
        let pano = Tensor::from_fn([3, 16, 64], |_| r.gen_range(-0.6f32..0.6));
        let base = tile_coherence(&pano, 4).unwrap();
        // reverse tile order
        let swapped = Tensor::from_fn([3, 16, 64], |i| {
            let (c, y, x) = (i / 1024, (i / 64) % 16, i % 64);
            let (t, col) = (x / 16, x % 16);
            pano.data()[c * 1024 + y * 64 + (3 - t) * 16 + col]
        });
        prop_assert!((tile_coherence(&swapped, 4).unwrap() - base).abs() < 1e-12);
        let shifted = pano.map(|v| v + off);
        prop_assert!((tile_coherence(&shifted, 4).unwrap() - base).abs() < 1e-5);
    }
}

#[test]
fn coherence_of_constant_and_repeated_tiles_is_zero() {
    assert_eq!(
        tile_coherence(&Tensor::full([3, 16, 64], 0.3), 4).unwrap(),
        0.0
    );
    let mut r = rng(17);
    let tile: Vec<f32> = (0..3 * 16 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let pano = Tensor::from_fn([3, 16, 64], |i| {
        let (c, y, x) = (i / 1024, (i / 64) % 16, i % 64);
        tile[c * 256 + y * 16 + x % 16]
    });
    assert_eq!(tile_coherence(&pano, 4).unwrap(), 0.0);
    assert!(tile_coherence(&pano, 3).is_err());
}

#[test]
fn coherence_of_two_constants_matches_closed_form() {
    let (a, b) = (0.4f32, -0.2f32);
    // tiles: a a b b
    let pano = Tensor::from_fn([3, 16, 64], |i| if i % 64 < 32 { a } else { b });
    let got = tile_coherence(&pano, 4).unwrap();
    let m = (a as f64 + b as f64) / 2.0;
    let hist = |x: f64| {
        let mut h = [0.0; HIST_BINS];
        soft_bin(x - m, &mut h, 1.0);
        h
    };
    let (ha, hb) = (hist(a as f64), hist(b as f64));
    let hd: f64 = ha.iter().zip(&hb).map(|(x, y)| (x - y).powi(2)).sum();
    let d = (3.0 * (a as f64 - b as f64).powi(2) + hd).sqrt();
    // 4 of the 6 pairs mix a and b
    let want = 4.0 * d / 6.0;
    assert!(got > 0.0);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn gray_panoramas_are_accepted() {
    let pano = Tensor::from_fn([1, 8, 32], |i| (i % 32) as f32 / 32.0);
    assert!(tile_coherence(&pano, 4).unwrap() > 0.0);
}

#[test]
fn constant_depth_lies_on_cylinder() {
    let rgb = Tensor::zeros([3, 16, 64]);
    let pts = panorama_to_points(&rgb, &Tensor::full([1, 16, 64], 2.5), 180.0).unwrap();
    assert_eq!(pts.len(), 1024);
    for p in &pts {
        assert!(((p.x * p.x + p.z * p.z).sqrt() - 2.5).abs() < 1e-6);
        assert_eq!(p.rgb, [128, 128, 128]);
    }
    // column 32 of 64 is azimuth 0
    assert!(pts.iter().skip(32).step_by(64).all(|p| p.x == 0.0));
}

#[test]
fn points_project_back_to_pixels() {
    let mut r = rng(18);
    let (h, w) = (12, 40);
    let depth = Tensor::from_fn([1, h, w], |_| r.gen_range(0.5f32..9.0));
    let pts = panorama_to_points(&Tensor::zeros([3, h, w]), &depth, 180.0).unwrap();
    for (i, p) in pts.iter().enumerate() {
        let (u, v, d) = point_to_pixel(p, w, h, 180.0);
        assert!((u - (i % w) as f64).abs() < 1e-5);
        assert!((v - (i / w) as f64).abs() < 1e-5);
        assert!((d - depth.data()[i] as f64).abs() < 1e-5);
    }
}

#[test]
fn nonpositive_depth_is_skipped_and_ply_written() {
    let mut depth = Tensor::full([1, 4, 8], 1.0);
    depth.data_mut()[3] = 0.0;
    depth.data_mut()[5] = -2.0;
    let pts = panorama_to_points(&Tensor::zeros([3, 4, 8]), &depth, 180.0).unwrap();
    assert_eq!(pts.len(), 30);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ply");
    write_ply(&pts, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 30\n"));
    assert_eq!(text.lines().count(), 10 + 30);
    assert!(panorama_to_points(&Tensor::zeros([3, 4, 7]), &depth, 180.0).is_err());
}

#[test]
fn disparity_denormalization_spans_near_far() {
    let d = denormalize_disparity(
        &Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap(),
        1.0,
        10.0,
    );
    assert!((d.data()[0] - 10.0).abs() < 1e-5);
    assert!((d.data()[2] - 1.0).abs() < 1e-6);
    assert!((d.data()[1] as f64 - 1.0 / 0.55).abs() < 1e-5);
}
