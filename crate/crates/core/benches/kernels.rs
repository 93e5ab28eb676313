use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dynsparse::parallel::set_parallel;
use dynsparse::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Shapes of one TinyViT-D6 block at batch 32.
    let x = rand_t(&mut rng, &[32, 65, 128]);
    let w = rand_t(&mut rng, &[128, 512]);
    let q = rand_t(&mut rng, &[128, 65, 32]);
    let scores = rand_t(&mut rng, &[32, 4, 65, 65]);
    let keep = Tensor::from_fn(&[32, 65], |i| ((i % 3) != 1) as u8 as f32);
    let fmap = rand_t(&mut rng, &[32, 4, 4, 128]);
    let dw = rand_t(&mut rng, &[7, 7, 128]);
    let db = rand_t(&mut rng, &[128]);

    let mut group = c.benchmark_group("kernels");
    for (mode, par) in [("parallel", true), ("sequential", false)] {
        set_parallel(par);
        group.bench_with_input(BenchmarkId::new("linear_fwd_bwd", mode), &(), |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let xv = g.param(x.clone());
                let wv = g.param(w.clone());
                let y = g.linear(xv, wv, None).unwrap();
                let l = g.sum(y);
                black_box(g.backward(l).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("bmm_qk", mode), &(), |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let qv = g.constant(q.clone());
                black_box(g.value(g.bmm(qv, qv, true).unwrap()));
            })
        });
        group.bench_with_input(BenchmarkId::new("masked_softmax", mode), &(), |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let s = g.constant(scores.clone());
                let k = g.constant(keep.clone());
                black_box(g.value(g.masked_softmax(s, k).unwrap()));
            })
        });
        group.bench_with_input(BenchmarkId::new("depthwise_conv7", mode), &(), |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let (xv, wv, bv) = (g.constant(fmap.clone()), g.constant(dw.clone()), g.constant(db.clone()));
                black_box(g.value(g.depthwise_conv2d(xv, wv, bv).unwrap()));
            })
        });
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, kernels);
criterion_main!(benches);
