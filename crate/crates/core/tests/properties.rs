use std::collections::BTreeSet;

use proptest::prelude::*;

use mv2mae::masking::{masked_count, random_mask, tube_mask, MaskKey};
use mv2mae::model::{AttentionKind, Forward, ModelConfig, ModelParams, Part};
use mv2mae::numerics::{finite_diff_grad, relative_error, Graph, Tensor};
use mv2mae::objective::{
    cross_entropy_in, masked_mse, motion_weighted_mse, motion_weights, reconstruction_loss, weights_from_norms,
    MotionWeights,
};
use mv2mae::synthdata::{generate_dataset, ClipTensor, GenConfig, MotionKind};
use mv2mae::tokenizer::{normalize_patch_targets, patchify, standardize_clip, unpatchify, PatchConfig};

fn key(seed: u64) -> MaskKey {
    MaskKey {
        seed,
        sample_id: seed / 7,
        epoch: seed % 5,
        view: seed % 2,
    }
}

#[test]
fn token_count_law_over_twelve_configs() {
    let configs = [
        ((2, 16, 16), (16, 128, 128), 512),
        ((2, 16, 16), (16, 224, 224), 1568),
        ((2, 8, 8), (8, 32, 32), 64),
        ((2, 4, 4), (4, 16, 16), 32),
        ((1, 8, 8), (8, 32, 32), 128),
        ((4, 8, 8), (16, 64, 64), 256),
        ((2, 16, 16), (16, 64, 64), 128),
        ((2, 8, 8), (16, 64, 64), 512),
        ((1, 1, 1), (2, 3, 5), 30),
        ((3, 2, 4), (9, 6, 8), 18),
        ((2, 4, 8), (8, 16, 32), 64),
        ((8, 16, 16), (16, 128, 128), 128),
    ];
    for ((pt, ph, pw), (t, h, w), n) in configs {
        let cfg = PatchConfig::new((pt, ph, pw), 3, (t, h, w)).unwrap();
        assert_eq!(cfg.num_tokens(), (t / pt) * (h / ph) * (w / pw));
        assert_eq!(cfg.num_tokens(), n);
    }
}

#[test]
fn default_mask_split_counts() {
    let p = random_mask(512, 0.7, key(1)).unwrap();
    assert_eq!((p.masked.len(), p.visible.len()), (358, 154));
}

#[test]
fn masking_frequency_within_three_sigma() {
    let (n, rho, plans) = (64usize, 0.7, 10_000usize);
    let p = masked_count(n, rho) as f64 / n as f64;
    let sigma = (p * (1.0 - p) / plans as f64).sqrt();
    let mut hits = vec![0usize; n];
    for s in 0..plans as u64 {
        let plan = random_mask(
            n,
            rho,
            MaskKey {
                seed: s,
                ..Default::default()
            },
        )
        .unwrap();
        plan.masked.iter().for_each(|&i| hits[i] += 1);
    }
    for (i, &h) in hits.iter().enumerate() {
        let f = h as f64 / plans as f64;
        assert!(
            (f - p).abs() <= 3.0 * sigma,
            "token {i}: frequency {f} vs {p} ± {}",
            3.0 * sigma
        );
    }
}

fn clip_strategy() -> impl Strategy<Value = (PatchConfig, ClipTensor)> {
    (
        1usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=3,
    )
        .prop_flat_map(|(pt, ph, pw, gt, gh, gw, c)| {
            let cfg = PatchConfig::new((pt, ph, pw), c, (pt * gt, ph * gh, pw * gw)).unwrap();
            let len = c * cfg.frames * cfg.height * cfg.width;
            (Just(cfg), prop::collection::vec(0.0f32..1.0, len))
        })
        .prop_map(|(cfg, data)| {
            let mut clip = ClipTensor::zeros(cfg.channels, cfg.frames, cfg.height, cfg.width);
            clip.data = data;
            (cfg, clip)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_masks_partition_exactly(n in 2usize..600, rho in 0.01f64..0.99, seed in any::<u64>()) {
        let p = random_mask(n, rho, key(seed)).unwrap();
        let m: BTreeSet<usize> = p.masked.iter().copied().collect();
        let v: BTreeSet<usize> = p.visible.iter().copied().collect();
        prop_assert_eq!(m.len(), p.masked.len());
        prop_assert_eq!(v.len(), p.visible.len());
        prop_assert!(m.is_disjoint(&v));
        prop_assert_eq!(m.len() + v.len(), n);
        prop_assert!(m.iter().chain(v.iter()).all(|&i| i < n));
        prop_assert_eq!(p.masked.len(), (rho * n as f64 + 1e-9).floor() as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tube_masks_are_constant_in_time(
        gt in 1usize..6, gh in 1usize..6, gw in 2usize..6, rho in 0.05f64..0.95, seed in any::<u64>()
    ) {
        let p = tube_mask((gt, gh, gw), rho, key(seed)).unwrap();
        let cells = gh * gw;
        let m: BTreeSet<usize> = p.masked.iter().copied().collect();
        for t in 1..gt {
            for c in 0..cells {
                prop_assert_eq!(m.contains(&c), m.contains(&(t * cells + c)));
            }
        }
        prop_assert_eq!(p.masked.len(), masked_count(cells, rho) * gt);
        prop_assert_eq!(p.masked.len() + p.visible.len(), gt * cells);
    }

    #[test]
    fn patchify_is_a_bijection((cfg, clip) in clip_strategy()) {
        let p: Tensor<f64> = patchify(&clip, &cfg).unwrap();
        prop_assert_eq!(p.shape(), &[cfg.num_tokens(), cfg.patch_dim()][..]);
        let back = unpatchify(&p, &cfg).unwrap();
        prop_assert_eq!(&back.data, &clip.data);
        let mut sorted_in = clip.data.clone();
        let mut sorted_out: Vec<f32> = p.data().iter().map(|&v| v as f32).collect();
        sorted_in.sort_by(f32::total_cmp);
        sorted_out.sort_by(f32::total_cmp);
        prop_assert_eq!(sorted_in, sorted_out);
    }

    #[test]
    fn normalized_targets_have_zero_mean_unit_std((cfg, clip) in clip_strategy()) {
        let p: Tensor<f64> = patchify(&clip, &cfg).unwrap();
        let t = normalize_patch_targets(&p, 1e-6);
        for (row, raw) in t.data().chunks(cfg.patch_dim()).zip(p.data().chunks(cfg.patch_dim())) {
            let k = row.len() as f64;
            let mean = row.iter().sum::<f64>() / k;
            prop_assert!(mean.abs() < 1e-6);
            let raw_mean = raw.iter().sum::<f64>() / k;
            let raw_std = (raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / k).sqrt();
            if raw_std > 1e-3 {
                let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
                prop_assert!((1.0 - 1e-3..=1.0).contains(&std), "std {}", std);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[rows, cols], data).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for r in g.value(s).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn motion_weights_sum_to_one_and_entropy_grows((cfg, clip) in clip_strategy()) {
        prop_assume!(cfg.frames >= 2);
        let mut last = f64::NEG_INFINITY;
        for tau in [1.0, 10.0, 60.0, 240.0, 1e4] {
            let w = motion_weights(&clip, &cfg, tau).unwrap();
            prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let h = w.entropy();
            prop_assert!(h >= last - 1e-12, "entropy fell at temperature {}: {} < {}", tau, h, last);
            last = h;
        }
    }

    #[test]
    fn uniform_weighted_mse_is_masked_mse_over_n(
        n in 2usize..40, dim in 1usize..6, rho in 0.05f64..0.95, seed in any::<u64>()
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |k: usize| Tensor::new(&[n, dim], (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (t, p) = (draw(n * dim), draw(n * dim));
        let plan = random_mask(n, rho, key(seed)).unwrap();
        prop_assume!(!plan.masked.is_empty());
        let plain: f64 = masked_mse::<f64>(&t, &p, &plan).unwrap();
        let weighted = motion_weighted_mse::<f64>(&t, &p, &plan, &MotionWeights::uniform(n)).unwrap();
        prop_assert!((weighted - plain / n as f64).abs() < 1e-7);
    }

    #[test]
    fn loss_gradients_match_finite_differences(rows in 1usize..5, dim in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = Tensor::new(&[rows, dim], (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.0..1.0)).collect();
        for weights in [None, Some(w.as_slice())] {
            let eval = |x: &[f64]| {
                let mut g = Graph::<f64>::new();
                let p = g.param(Tensor::new(&[rows, dim], x.to_vec()).unwrap());
                let l = reconstruction_loss(&mut g, p, &target, weights).unwrap();
                (g, p, l)
            };
            let (g, p, l) = eval(&pred);
            let analytic = g.backward(l).unwrap().get(p).unwrap().into_data();
            let numeric = finite_diff_grad(|x| { let (g, _, l) = eval(x); g.value(l).item() }, &pred, 1e-5);
            prop_assert!(relative_error(&analytic, &numeric) < 1e-6);
        }
        let k = rows * dim + 1;
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let label = seed as usize % k;
        let eval = |x: &[f64]| {
            let mut g = Graph::<f64>::new();
            let v = g.param(Tensor::new(&[k], x.to_vec()).unwrap());
            let l = cross_entropy_in(&mut g, v, label, 0.1).unwrap();
            (g, v, l)
        };
        let (g, v, l) = eval(&logits);
        let analytic = g.backward(l).unwrap().get(v).unwrap().into_data();
        let numeric = finite_diff_grad(|x| { let (g, _, l) = eval(x); g.value(l).item() }, &logits, 1e-5);
        prop_assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}

#[test]
fn entropy_grid_on_a_rendered_clip() {
    let ds = generate_dataset(&GenConfig::uniform(3, 8, 2, 8, 8, 32)).unwrap();
    let cfg = PatchConfig::new((2, 8, 8), 3, (8, 32, 32)).unwrap();
    for s in &ds.samples {
        let std = standardize_clip(&s.clips[0]);
        let h: Vec<f64> = [1.0, 10.0, 60.0, 240.0, 1e4]
            .iter()
            .map(|&t| motion_weights(&std, &cfg, t).unwrap().entropy())
            .collect();
        assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{h:?}");
    }
}

#[test]
fn weights_from_norms_closed_form() {
    let w = weights_from_norms(&[0.0, 60.0], 60.0).unwrap();
    let e = std::f64::consts::E;
    assert!((w.weights[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
}

/// Tokens touching the ground-truth motion mask carry more weight than
/// their share of the token count.
#[test]
fn moving_regions_are_up_weighted() {
    let ds = generate_dataset(&GenConfig::uniform(5, 32, 2, 8, 8, 32)).unwrap();
    let cfg = PatchConfig::new((2, 8, 8), 3, (8, 32, 32)).unwrap();
    let (gt, gh, gw) = cfg.grid();
    let n = cfg.num_tokens();
    let mut checked = 0;
    for s in ds.samples.iter().filter(|s| s.label == MotionKind::TranslateX.label()) {
        for (clip, mask) in s.clips.iter().zip(&s.motion_masks) {
            let w = motion_weights(&standardize_clip(clip), &cfg, 60.0).unwrap();
            let mut moving = vec![false; n];
            for t in 0..cfg.frames {
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        if mask[(t * cfg.height + y) * cfg.width + x] != 0 {
                            let tok = ((t / cfg.t_patch) * gh + y / cfg.h_patch) * gw + x / cfg.w_patch;
                            moving[tok] = true;
                        }
                    }
                }
            }
            let count = moving.iter().filter(|&&m| m).count();
            assert!(count > 0 && count < gt * gh * gw);
            let mass: f64 = w.weights.iter().zip(&moving).filter(|(_, &m)| m).map(|(w, _)| w).sum();
            assert!(
                mass > count as f64 / n as f64,
                "mass {mass} vs share {}",
                count as f64 / n as f64
            );
            checked += 1;
        }
    }
    assert!(checked >= 4);
}

#[test]
fn attention_rows_sum_to_one() {
    let patch = PatchConfig::new((2, 8, 8), 3, (8, 32, 32)).unwrap();
    let cfg = ModelConfig::tiny(patch);
    let params = ModelParams::<f64>::init(&cfg, Part::Pretrain, 1).unwrap();
    let ds = generate_dataset(&GenConfig::uniform(2, 1, 2, 8, 8, 32)).unwrap();
    let mut f = Forward::new(cfg, &params).record_attention();
    let n = patch.num_tokens();
    let plan = |v: u64| {
        random_mask(
            n,
            0.7,
            MaskKey {
                view: v,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let (ps, pt) = (plan(0), plan(1));
    let rows = |c: &ClipTensor, p: &mv2mae::masking::MaskPlan| {
        let t: Tensor<f64> = patchify(&standardize_clip(c), &patch).unwrap();
        mv2mae::tokenizer::select_rows(&t, &p.visible)
    };
    let s = &ds.samples[0];
    let xs = f.embed(&rows(&s.clips[0], &ps), &ps.visible).unwrap();
    let es = f.encoder(xs, None).unwrap();
    let src = f.project_source(es, &ps.visible).unwrap();
    let xt = f.embed(&rows(&s.clips[1], &pt), &pt.visible).unwrap();
    let et = f.encoder(xt, None).unwrap();
    let full = f.assemble_decoder_input(et, &pt).unwrap();
    f.self_view_decoder(full, None).unwrap();
    f.cross_view_decoder(full, &[src], None).unwrap();
    for kind in [
        AttentionKind::Encoder,
        AttentionKind::SelfDecoder,
        AttentionKind::CrossDecoder,
    ] {
        assert!(f.attention.iter().any(|m| m.kind == kind));
    }
    for m in &f.attention {
        if m.kind == AttentionKind::CrossDecoder {
            assert_eq!(m.keys, ps.visible.len());
        }
        for row in m.weights.chunks(m.keys) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
