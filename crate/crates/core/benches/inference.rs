use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dynsparse::hier::{FastPathKind, HierConfig, HierModel, HierSchedule};
use dynsparse::nn::ParamStore;
use dynsparse::parallel::set_parallel;
use dynsparse::vit::{Policy, SparsificationSchedule, VisionTransformer, VitConfig};
use dynsparse::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vit(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = VitConfig::tiny_d6(16, 4);
    let mut ps = ParamStore::<f32>::new();
    let model = VisionTransformer::new(&mut ps, &mut rng, &cfg, 3).unwrap();
    let x = Tensor::from_fn(&[32, 64, 16], |_| rng.gen_range(-1.0f32..1.0));

    let mut group = c.benchmark_group("vit_batch32");
    for (mode, par) in [("parallel", true), ("sequential", false)] {
        set_parallel(par);
        for rho in [1.0, 0.7, 0.5] {
            let sched = SparsificationSchedule::geometric(rho, &[1, 3, 4]);
            group.bench_with_input(BenchmarkId::new(mode, rho), &sched, |b, s| {
                b.iter(|| black_box(model.forward_infer(&ps, &x, s, Policy::Learned, &mut rng).unwrap()))
            });
        }
    }
    group.finish();
    set_parallel(true);
}

fn hier(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = HierConfig::tiny(16, 4);
    let x = Tensor::from_fn(&[32, 256, 16], |_| rng.gen_range(-1.0f32..1.0));

    let mut group = c.benchmark_group("hier_batch32");
    for (mode, par) in [("parallel", true), ("sequential", false)] {
        set_parallel(par);
        for rho in [1.0, 0.9, 0.7] {
            let sched = HierSchedule::arithmetic(rho, 2, cfg.depths[2]);
            let mut ps = ParamStore::<f32>::new();
            let model = HierModel::new(&mut ps, &mut rng, &cfg, &sched, FastPathKind::Linear).unwrap();
            group.bench_with_input(BenchmarkId::new(mode, rho), &sched, |b, s| {
                b.iter(|| black_box(model.forward_infer(&ps, &x, s, Policy::Learned, &mut rng).unwrap()))
            });
        }
    }
    group.finish();
    set_parallel(true);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = vit, hier
}
criterion_main!(benches);
