use dynsparse::attention::Attention;
use dynsparse::flops::{flops_hier, flops_vit, hier_preset, vit_preset};
use dynsparse::hier::{reassemble, split, FastPathKind, HierConfig, HierModel, HierSchedule};
use dynsparse::nn::{Group, ParamStore};
use dynsparse::predictor::{keep_count, topk_select};
use dynsparse::vit::{Policy, SparsificationSchedule, VisionTransformer, VitConfig};
use dynsparse::{macs, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn masked_vs_subset(seed: u64, n: usize, keep: &[bool]) -> (f64, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h) = (8, 2);
    let mut ps = ParamStore::<f64>::new();
    let attn = Attention::new(&mut ps, &mut rng, "a", c, h, Group::Backbone).unwrap();
    let x = Tensor::from_fn(&[1, n, c], |_| rng.gen_range(-1.0..1.0));
    let mask: Vec<f64> = keep.iter().map(|&k| k as u8 as f64).collect();
    let kept: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();

    let g = Graph::new();
    let p = ps.bind(&g, |_| false);
    let xv = g.constant(x.clone());
    let kv = g.constant(Tensor::new(vec![1, n], mask).unwrap());
    let masked = g.value(attn.forward(&g, &p, xv, Some(kv)).unwrap().out);

    let sub = Tensor::from_fn(&[1, kept.len(), c], |i| {
        let (r, j) = (i / c, i % c);
        x.data()[kept[r] * c + j]
    });
    let g2 = Graph::new();
    let p2 = ps.bind(&g2, |_| false);
    let dense = g2.value(attn.forward(&g2, &p2, g2.constant(sub), None).unwrap().out);

    let mut worst: f64 = 0.0;
    for (r, &i) in kept.iter().enumerate() {
        for j in 0..c {
            worst = worst.max((masked.data()[i * c + j] - dense.data()[r * c + j]).abs());
        }
    }
    (worst, masked, dense)
}

fn keep_strategy() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (2usize..=12).prop_flat_map(|n| (Just(n), proptest::collection::vec(any::<bool>(), n - 1)))
        .prop_map(|(n, mut rest)| {
            rest.insert(0, true);
            (n, rest)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_attention_matches_attention_on_the_kept_subset(seed in any::<u64>(), (n, keep) in keep_strategy()) {
        let (err, _, _) = masked_vs_subset(seed, n, &keep);
        prop_assert!(err < 1e-9, "max deviation {err}");
    }

    #[test]
    fn split_then_reassemble_is_identity(seed in any::<u64>(), rows in 1usize..40, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[rows, c], |_| rng.gen_range(-2.0..2.0));
        let d: Vec<f64> = (0..rows).map(|_| rng.gen_range(0..2) as f64).collect();
        let parts = split(&x, &d).unwrap();
        prop_assert_eq!(parts.kept.len() + parts.rest.len(), rows);
        prop_assert!(parts.kept.iter().all(|&i| d[i] == 1.0));
        let back = reassemble(&parts.x1, &parts.x2, &parts.kept, &parts.rest).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn topk_returns_the_largest_distinct_indices(vals in proptest::collection::vec(-10.0f64..10.0, 1..30), frac in 0.01f64..1.0) {
        let m = ((frac * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
        let top = topk_select(&vals, m).unwrap();
        prop_assert_eq!(top.len(), m);
        let mut seen = top.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), m);
        let floor = top.iter().map(|&i| vals[i]).fold(f64::INFINITY, f64::min);
        let above = vals.iter().filter(|&&v| v > floor).count();
        prop_assert!(above < m);
        prop_assert!(top.windows(2).all(|w| vals[w[0]] >= vals[w[1]]));
    }

    #[test]
    fn keep_count_is_monotone_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0, n in 1usize..2000) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(keep_count(lo, n) <= keep_count(hi, n));
        prop_assert!(keep_count(hi, n) <= n);
    }

    #[test]
    fn vit_flops_fall_as_rho_falls(a in 0.3f64..=1.0, b in 0.3f64..=1.0) {
        let m = vit_preset("deit-s").unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let f_lo = flops_vit(&m, &m.schedule(lo)).unwrap();
        let f_hi = flops_vit(&m, &m.schedule(hi)).unwrap();
        prop_assert!(f_lo.total_macs <= f_hi.total_macs);
        prop_assert!(f_hi.total_macs <= f_hi.dense_macs + 3 * f_hi.macs_of("predictor"));
    }

    #[test]
    fn hier_flops_fall_as_rho_falls(a in 0.45f64..=1.0, b in 0.45f64..=1.0) {
        let m = hier_preset("convnext-s").unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for kind in FastPathKind::ALL {
            let f_lo = flops_hier(&m, &m.schedule(lo), kind).unwrap();
            let f_hi = flops_hier(&m, &m.schedule(hi), kind).unwrap();
            prop_assert!(f_lo.total_macs <= f_hi.total_macs, "{kind:?}");
        }
    }
}

#[test]
fn dropped_tokens_get_no_gradient_through_kept_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, c) = (6, 8);
    let mut ps = ParamStore::<f64>::new();
    let attn = Attention::new(&mut ps, &mut rng, "a", c, 2, Group::Backbone).unwrap();
    let keep = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    let g = Graph::new();
    let p = ps.bind(&g, |_| false);
    let x = g.param(Tensor::from_fn(&[1, n, c], |_| rng.gen_range(-1.0..1.0)));
    let kv = g.constant(Tensor::from_f64(&[1, n], &keep).unwrap());
    let out = attn.forward(&g, &p, x, Some(kv)).unwrap().out;
    let w = g.constant(Tensor::from_fn(&[1, n, c], |i| if keep[i / c] == 1.0 { 1.0 + i as f64 * 0.1 } else { 0.0 }));
    let loss = g.sum(g.mul(out, w).unwrap());
    let grads = g.backward(loss).unwrap();
    let dx = grads.get(x).unwrap();
    for (i, &k) in keep.iter().enumerate() {
        let row = &dx.data()[i * c..(i + 1) * c];
        if k == 0.0 {
            assert!(row.iter().all(|&v| v == 0.0), "token {i} leaked gradient");
        } else {
            assert!(row.iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn analytic_macs_equal_instrumented_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = VitConfig::tiny_d6(16, 4);
    let mut ps = ParamStore::<f32>::new();
    let model = VisionTransformer::new(&mut ps, &mut rng, &cfg, 3).unwrap();
    let fm = vit_preset("tiny-vit-d6").unwrap();
    let x = Tensor::from_fn(&[1, 64, 16], |_| rng.gen_range(-1.0f32..1.0));
    for rho in [1.0, 0.9, 0.7, 0.5] {
        let sched = SparsificationSchedule::geometric(rho, &fm.locations);
        let (_, counted) = macs::count(|| model.forward_infer(&ps, &x, &sched, Policy::Learned, &mut rng).unwrap());
        assert_eq!(counted, flops_vit(&fm, &sched).unwrap().total_macs, "rho {rho}");
    }

    let hcfg = HierConfig::tiny(16, 4);
    let hm = hier_preset("tiny-hier").unwrap();
    let hx = Tensor::from_fn(&[1, 256, 16], |_| rng.gen_range(-1.0f32..1.0));
    for kind in FastPathKind::ALL {
        for rho in [1.0, 0.9, 0.7] {
            let sched = HierSchedule::arithmetic(rho, 2, hcfg.depths[2]);
            let mut ps = ParamStore::<f32>::new();
            let model = HierModel::new(&mut ps, &mut rng, &hcfg, &sched, kind).unwrap();
            let (_, counted) = macs::count(|| model.forward_infer(&ps, &hx, &sched, Policy::Learned, &mut rng).unwrap());
            assert_eq!(counted, flops_hier(&hm, &sched, kind).unwrap().total_macs, "{kind:?} rho {rho}");
        }
    }
}

#[test]
fn inference_is_invariant_to_batch_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = VitConfig::tiny_d6(16, 4);
    let mut ps = ParamStore::<f64>::new();
    let model = VisionTransformer::new(&mut ps, &mut rng, &cfg, 3).unwrap();
    let sched = SparsificationSchedule::geometric(0.7, &[1, 3, 4]);
    let x = Tensor::<f64>::from_fn(&[3, 64, 16], |_| rng.gen_range(-1.0..1.0));
    let all = model.forward_infer(&ps, &x, &sched, Policy::Learned, &mut rng).unwrap();
    for b in 0..3 {
        let one = Tensor::new(vec![1, 64, 16], x.data()[b * 64 * 16..(b + 1) * 64 * 16].to_vec()).unwrap();
        let r = model.forward_infer(&ps, &one, &sched, Policy::Learned, &mut rng).unwrap();
        for s in 0..3 {
            assert_eq!(r.kept[s][0], all.kept[s][b]);
        }
        for k in 0..4 {
            assert!((r.logits.data()[k] - all.logits.data()[b * 4 + k]).abs() < 1e-10);
        }
    }
}
