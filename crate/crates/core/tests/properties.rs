use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rvsa::analysis::{extra_ratio, model_cost, rvsa_extra_flops, window_attention_flops};
use rvsa::attention::{attend, AttentionConfig, AttentionLayer, Variant};
use rvsa::geometry::{bilinear_sample, transform_grid, WindowGrid, WindowParams, WindowTransform};
use rvsa::mim::{mask_count, masked_mse, random_mask};
use rvsa::model::{build_model, interleave_schedule, pad_pcm_kernel, Arch, ModelConfig};
use rvsa::tensor::{Graph, ParamStore, Session, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed: u64) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::randn([rows, cols], scale, &mut rng(seed)));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6, seed: u64) {
        let mut r = rng(seed);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::randn([m, k], 1.0, &mut r));
        let b = g.leaf(Tensor::randn([k, n], 1.0, &mut r));
        let c = g.leaf(Tensor::randn([n, p], 1.0, &mut r));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        let scale = g.value(left).data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(g.value(left).max_abs_diff(g.value(right)).unwrap() <= 1e-9 * scale);
    }

    #[test]
    fn unused_leaf_has_zero_gradient(n in 1usize..8, seed: u64) {
        let mut r = rng(seed);
        let mut g = Graph::<f64>::new();
        let used = g.leaf(Tensor::randn([n], 1.0, &mut r));
        let unused = g.leaf(Tensor::randn([n], 1.0, &mut r));
        let sq = g.mul(used, used).unwrap();
        let out = g.sum(sq);
        let grads = g.backward(out).unwrap();
        prop_assert!(grads.wrt(&g, unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partition_tiles_the_padded_grid(h in 1usize..40, w in 1usize..40, s in 1usize..15) {
        let grid = WindowGrid::partition(h, w, s).unwrap();
        prop_assert_eq!(grid.rows, h.div_ceil(s));
        prop_assert_eq!(grid.cols, w.div_ceil(s));
        prop_assert!(grid.pad_h < s && grid.pad_w < s);
        prop_assert_eq!(grid.padded_height(), h + grid.pad_h);
        let mut seen = vec![0u8; grid.padded_height() * grid.padded_width()];
        for win in 0..grid.num_windows() {
            for p in 0..grid.points() {
                seen[grid.token(win, p)] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn identity_transform_samples_the_windows(h in 1usize..14, w in 1usize..14, s in 1usize..6, heads in 1usize..3, seed: u64) {
        let grid = WindowGrid::partition(h, w, s).unwrap();
        let f = Tensor::<f64>::randn([2, h, w], 1.0, &mut rng(seed));
        let sg = transform_grid(&grid, &WindowTransform::identity(grid.num_windows(), heads)).unwrap();
        prop_assert_eq!(sg.coords.len(), grid.num_windows() * heads * s * s);
        let out = bilinear_sample(&f, &sg).unwrap();
        let pw = grid.padded_width();
        for win in 0..grid.num_windows() {
            for head in 0..heads {
                for p in 0..grid.points() {
                    let t = grid.token(win, p);
                    let (y, x) = (t / pw, t % pw);
                    for ch in 0..2 {
                        let expect = if y < h && x < w { f.data()[(ch * h + y) * w + x] } else { 0.0 };
                        let got = out.data()[((win * heads + head) * grid.points() + p) * 2 + ch];
                        prop_assert_eq!(got.to_bits(), expect.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_inverts(theta in -10.0f64..10.0, x in -8.0f64..8.0, y in -8.0f64..8.0) {
        let fwd = WindowParams { theta, ..WindowParams::IDENTITY };
        let back = WindowParams { theta: -theta, ..WindowParams::IDENTITY };
        let (bx, by) = back.apply(fwd.apply((x, y)));
        prop_assert!((bx - x).abs() <= 1e-12 && (by - y).abs() <= 1e-12);
    }

    #[test]
    fn sample_count_ignores_transform_values(s in 1usize..8, heads in 1usize..4, seed: u64) {
        let grid = WindowGrid::partition(15, 10, s).unwrap();
        let mut t = WindowTransform::identity(grid.num_windows(), heads);
        let mut r = rng(seed);
        for p in &mut t.params {
            use rand::Rng;
            *p = WindowParams {
                scale_x: r.gen_range(0.1..3.0),
                scale_y: r.gen_range(0.1..3.0),
                offset_x: r.gen_range(-5.0..5.0),
                offset_y: r.gen_range(-5.0..5.0),
                theta: r.gen_range(-3.0..3.0),
            };
        }
        let sg = transform_grid(&grid, &t).unwrap();
        prop_assert_eq!(sg.points, s * s);
        prop_assert_eq!(sg.coords.len(), grid.num_windows() * heads * s * s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn attention_preserves_shape(v in variant(), h in 1usize..12, w in 1usize..12, s in 1usize..8, seed: u64) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn([8, h, w], 1.0, &mut r);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", AttentionConfig::new(8, 2, s, v).unwrap(), &mut r).unwrap();
        let y = attend(&x, &layer, &store).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.all_finite());
    }

    #[test]
    fn zero_heads_reduce_to_window_chain(h in 2usize..12, w in 2usize..12, s in 2usize..6, seed: u64) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn([8, h, w], 1.0, &mut r);
        let mut store = ParamStore::new();
        let base = AttentionLayer::new(&mut store, "a", AttentionConfig::new(8, 2, s, Variant::RvsaDecoupled).unwrap(), &mut r).unwrap();
        let as_variant = |v: Variant, heads: usize| AttentionLayer {
            cfg: AttentionConfig { variant: v, ..base.cfg },
            transform: base.transform[..heads].to_vec(),
            ..base.clone()
        };
        let outs: Vec<Tensor<f64>> = [(Variant::RvsaDecoupled, 2), (Variant::Rvsa, 1), (Variant::Vsa, 1), (Variant::Window, 0)]
            .into_iter()
            .map(|(v, n)| attend(&x, &as_variant(v, n), &store).unwrap())
            .collect();
        for o in &outs[1..] {
            prop_assert_eq!(o, &outs[0]);
        }
    }

    #[test]
    fn head_permutation_permutes_head_outputs(v in variant(), shift in 1usize..3, seed: u64) {
        let (c, heads, (h, w)) = (12, 3, (7, 8));
        let d = c / heads;
        let perm = |j: usize| (j + shift) % heads;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", AttentionConfig::new(c, heads, 3, v).unwrap(), &mut r).unwrap();
        for t in &layer.transform {
            for id in [t.weight, t.bias] {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::randn(shape, 0.2, &mut r);
            }
        }
        // new row perm(j)·block + i takes old row j·block + i
        let permute_rows = |t: &Tensor<f64>, block: usize| {
            let cols = t.len() / t.shape()[0];
            let mut out = t.clone();
            for j in 0..heads {
                for i in 0..block {
                    let (src, dst) = ((j * block + i) * cols, (perm(j) * block + i) * cols);
                    out.data_mut()[dst..dst + cols].copy_from_slice(&t.data()[src..src + cols]);
                }
            }
            out
        };
        let mut permuted = store.clone();
        for lin in [layer.query, layer.key, layer.value] {
            for id in [lin.weight, lin.bias] {
                *permuted.get_mut(id) = permute_rows(store.get(id), d);
            }
        }
        for t in &layer.transform {
            for id in [t.weight, t.bias] {
                *permuted.get_mut(id) = permute_rows(store.get(id), 5);
            }
        }
        let x = Tensor::<f64>::randn([h * w, c], 1.0, &mut r);
        let run = |store: &ParamStore<f64>| {
            let mut s = Session::new(store, false);
            let xv = s.graph.leaf(x.clone());
            let y = layer.forward_heads(&mut s, xv, (h, w)).unwrap();
            s.graph.value(y).clone()
        };
        let (a, b) = (run(&store), run(&permuted));
        for row in 0..h * w {
            for j in 0..heads {
                for i in 0..d {
                    let (x, y) = (a.data()[row * c + j * d + i], b.data()[row * c + perm(j) * d + i]);
                    prop_assert!((x - y).abs() <= 1e-12, "row {row} head {j}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn padded_kernel_matches_pointwise(groups in 1usize..4, h in 1usize..7, w in 1usize..7, seed: u64) {
        let mut r = rng(seed);
        let c = 2 * groups;
        let k1 = Tensor::<f64>::randn([c, c / groups, 1, 1], 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn([c, h, w], 1.0, &mut r));
        let (a, b) = (g.leaf(k1.clone()), g.leaf(pad_pcm_kernel(&k1).unwrap()));
        let one = g.conv2d(x, a, groups, 0).unwrap();
        let three = g.conv2d(x, b, groups, 1).unwrap();
        prop_assert_eq!(g.value(one), g.value(three));
    }

    #[test]
    fn model_is_finite_and_deterministic(arch in prop::sample::select(vec![Arch::Vit, Arch::Vitae]), seed: u64) {
        let cfg = ModelConfig { arch, embed_dim: 16, heads: 2, pcm_groups: 4, window_size: 3, ..ModelConfig::desk() };
        let build = || {
            let mut store = ParamStore::<f64>::new();
            let model = build_model(&cfg, &mut store, &mut rng(seed)).unwrap();
            (model, store)
        };
        let ((m1, s1), (m2, s2)) = (build(), build());
        let img = Tensor::<f64>::randn([3, 20, 16], 1.0, &mut rng(seed ^ 1));
        let (a, b) = (m1.features(&img, &s1).unwrap(), m2.features(&img, &s2).unwrap());
        prop_assert!(a.all_finite());
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #[test]
    fn mask_partition_is_exact(n in 1usize..400, ratio in 0.01f64..0.99, seed: u64) {
        let plan = random_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(plan.masked_ids.len(), mask_count(n, ratio).min(n));
        prop_assert_eq!(plan.masked_ids.len() + plan.visible_ids.len(), n);
        let mut all: Vec<usize> = plan.masked_ids.iter().chain(&plan.visible_ids).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(random_mask(n, ratio, seed).unwrap(), plan);
    }

    #[test]
    fn loss_ignores_visible_rows(n in 2usize..30, d in 1usize..6, seed: u64) {
        let plan = random_mask(n, 0.5, seed).unwrap();
        let mut r = rng(seed);
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, true);
        let pred = s.graph.leaf(Tensor::randn([n, d], 1.0, &mut r));
        let target = Tensor::randn([n, d], 1.0, &mut r);
        let loss = masked_mse(&mut s, pred, &target, &plan.masked_ids).unwrap();
        let g = s.graph.backward(loss).unwrap().wrt(&s.graph, pred);
        for &t in &plan.visible_ids {
            prop_assert!(g.data()[t * d..(t + 1) * d].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn extra_ratio_closed_form(s in 1usize..40, h in 1usize..64) {
        let (s2, h) = ((s * s) as u128, h as u128);
        let expect = Ratio::new(5 * (s2 + 5 * h), 2 * s2 * s2);
        prop_assert_eq!(extra_ratio(s, h as usize).unwrap(), expect);
    }

    #[test]
    fn extras_and_core_scale(hh in 1usize..30, w in 1usize..30, c in 1usize..64, s in 1usize..10) {
        prop_assert_eq!(rvsa_extra_flops(hh, w, c, s, 0).unwrap().total(), Ratio::from_integer(5 * (hh * w * c) as u128));
        let one = window_attention_flops(hh, w, c, s).unwrap().core;
        prop_assert_eq!(window_attention_flops(hh, w, 2 * c, s).unwrap().core, 2 * one);
        prop_assert_eq!(one, 2 * (s * s * hh * w * c) as u128);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn cost_totals_are_layer_sums(v in variant(), th in 1usize..40, tw in 1usize..40, depth in 1usize..4, vitae: bool) {
        let base = if vitae { ModelConfig::desk_vitae() } else { ModelConfig::desk() };
        let cfg = ModelConfig { variant: v, depth: 4 * depth, ..base }.with_default_schedule().unwrap();
        let r = model_cost(&cfg, (th, tw)).unwrap();
        prop_assert_eq!(r.total_flops, r.layers.iter().map(|l| l.flops).sum::<u128>());
        prop_assert_eq!(r.total_params, r.layers.iter().map(|l| l.params).sum::<u128>());
        prop_assert_eq!(r.core_flops() + r.extra_flops(), r.total_flops);
        let deeper = ModelConfig { depth: cfg.depth + 4, ..cfg.clone() }.with_default_schedule().unwrap();
        prop_assert!(model_cost(&deeper, (th, tw)).unwrap().total_flops >= r.total_flops);
    }

    #[test]
    fn interleave_rule(k in 1usize..20) {
        let depth = 4 * k;
        let sched = interleave_schedule(depth).unwrap();
        if depth == 4 {
            prop_assert_eq!(sched, vec![4]);
        } else {
            prop_assert_eq!(sched, (1..=4).map(|i| i * k).collect::<Vec<_>>());
        }
        prop_assert!(interleave_schedule(depth + 1).is_err());
    }
}
