use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use jointdiff::diffusion::{make_schedule, DiffusionState, JointModel};
use jointdiff::engine::gemm;
use jointdiff::engine::kernels::{conv2d_forward, ConvGeom};
use jointdiff::jointnet::build_jointnet;
use jointdiff::tiling::{make_layout_with_offset, tiled_denoise_step, TileStrategy};
use jointdiff::unet::{Backbone, BackboneConfig};
use jointdiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk() -> BackboneConfig {
    BackboneConfig {
        base_width: 16,
        channel_mults: vec![1, 2],
        embed_dim: 64,
        ..BackboneConfig::default()
    }
}

fn bench_gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for n in [64usize, 256] {
        let a = vec![0.5f32; n * n];
        let b = vec![0.25f32; n * n];
        let mut out = vec![0.0f32; n * n];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| {
                gemm(
                    n,
                    n,
                    n,
                    black_box(&a),
                    false,
                    black_box(&b),
                    false,
                    &mut out,
                    false,
                )
            })
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("conv3x3");
    for (ch, hw) in [(16usize, 32usize), (32, 16)] {
        let x = Tensor::<f32>::randn([8, ch, hw, hw], &mut rng);
        let w = Tensor::<f32>::randn([ch, ch, 3, 3], &mut rng);
        let geom = ConvGeom::new(x.shape(), w.shape(), 1, 1).unwrap();
        let mut out = vec![0.0f32; 8 * ch * hw * hw];
        g.bench_function(format!("{ch}x{hw}x{hw}"), |b| {
            b.iter(|| conv2d_forward(x.data(), w.data(), None, &geom, &mut out))
        });
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = Backbone::new(desk(), &mut rng).unwrap();
    let joint = build_jointnet(&base, 1).unwrap();
    let x = Tensor::<f32>::randn([8, 3, 32, 32], &mut rng);
    let y = Tensor::<f32>::randn([8, 1, 32, 32], &mut rng);
    let t = vec![500; 8];
    let class = vec![0; 8];
    c.bench_function("unet_forward_b8_32px", |b| {
        b.iter(|| base.predict(black_box(&x), &t, &class).unwrap())
    });
    c.bench_function("jointnet_forward_b8_32px", |b| {
        b.iter(|| joint.predict(black_box(&x), &y, &t, &class, None).unwrap())
    });
}

fn bench_tiled_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = Backbone::new(desk(), &mut rng).unwrap();
    let joint = build_jointnet(&base, 1).unwrap();
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let null = joint.rgb_view().cfg.null_class();
    let state = DiffusionState::new(
        Tensor::randn([1, 3, 32, 128], &mut rng),
        Tensor::randn([1, 1, 32, 128], &mut rng),
        Some(999),
        vec![null],
    )
    .unwrap();
    let layout = make_layout_with_offset(128, 32, 32, 16, (5, 0), true).unwrap();
    let mut g = c.benchmark_group("tiled_step_128x32");
    g.sample_size(10);
    for (name, strategy) in [("full", TileStrategy::FULL), ("plain", TileStrategy::PLAIN)] {
        g.bench_function(name, |b| {
            b.iter(|| {
                tiled_denoise_step(
                    &joint,
                    &sched,
                    &state,
                    &layout,
                    strategy,
                    0,
                    25,
                    Some(959),
                    1.0,
                    None,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    bench_gemm,
    bench_conv,
    bench_forward,
    bench_tiled_step
);
criterion_main!(benches);
