use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pcn_core::cascade::Cascade;
use pcn_core::geometry::{frame_image, OrientationFrame};
use pcn_core::pipeline::{detect, propose, DetectConfig, FrameSet};
use pcn_core::geometry::ImageBuffer;
use pcn_core::trainer::SceneSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vga() -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    SceneSpec::random(640, 480, 3, (40.0, 160.0), &mut rng).render()
}

fn pipeline(c: &mut Criterion) {
    let img = vga();
    let cfg = DetectConfig::default();
    // untrained weights with the thresholds opened so every stage does work
    let open = DetectConfig { thresholds: [0.0; 3], max_candidates: 500, ..cfg.clone() };
    let cascade = Cascade::new(1);
    c.bench_function("frames 640x480", |b| b.iter(|| FrameSet::build(black_box(&img))));
    c.bench_function("rotate frame 640x480", |b| b.iter(|| frame_image(black_box(&img), OrientationFrame::Right)));
    c.bench_function("proposals 640x480", |b| b.iter(|| propose(640, 480, black_box(&cfg))));
    let mut group = c.benchmark_group("detect");
    group.sample_size(10);
    group.bench_function("640x480 default", |b| b.iter(|| detect(black_box(&img), &cascade, &cfg).unwrap()));
    group.bench_function("640x480 all stages", |b| b.iter(|| detect(black_box(&img), &cascade, &open).unwrap()));
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
