use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pcn_core::cascade::{Cascade, StageId};
use pcn_core::Tensor;

fn stage_passes(c: &mut Criterion) {
    let mut cascade = Cascade::new(1);
    for stage in StageId::ALL {
        let side = stage.input_side();
        let x = Tensor::filled(&[3, side, side], 0.3f32);
        let net = cascade.net_mut(stage);
        c.bench_function(&format!("{stage} forward"), |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
        c.bench_function(&format!("{stage} forward+backward"), |b| {
            b.iter(|| {
                let (out, trace) = net.forward_trace(black_box(&x)).unwrap();
                net.backward(&trace, &vec![0.1; out.len()]).unwrap()
            })
        });
    }
}

criterion_group!(benches, stage_passes);
criterion_main!(benches);
