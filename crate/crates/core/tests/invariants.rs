mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use teethseg::apk::{ApkLayer, ApkMask, ArchOrder, TEETH};
use teethseg::autodiff::{Tape, Var};
use teethseg::data::{generate_scene, LabelMap, SceneConfig};
use teethseg::gating::{GatingLayer, MixerKind};
use teethseg::metrics::iou;
use teethseg::model::{ModelConfig, TeethSeg, FOREGROUND};
use teethseg::msa::{MsaBlock, UpscaleMode};
use teethseg::nn::{fusion_mask, AttentionMask, FusionTransformer, TokenGrid};
use teethseg::params::ParamStore;
use teethseg::run::{probe_sample, Variant};
use teethseg::upscale::{bilinear_upsample, naive_downscale, naive_upscale, naive_upscale_index, LinearUpscaler};
use teethseg::Tensor;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

/// Gradient of `Σ w ⊙ out[row]` with respect to `input`, as rows.
fn row_jacobian<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, row: usize, input: Var<'t, f64>, seed: u64) -> Vec<Vec<f64>> {
    let width = out.shape()[1];
    let w = mat(&mut rng(seed), 1, width);
    let picked = out.slice(0, row, row + 1).unwrap();
    let l = picked.mul(tape.constant(tensor(&w))).unwrap().sum();
    let g = tape.backward(l).unwrap().get_or_zeros(input);
    rows_of(&g)
}

fn nonzero(row: &[f64]) -> bool {
    row.iter().any(|&v| v != 0.0)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..10, shift in -50.0f64..50.0) {
        let x = mat(&mut rng(seed), rows, cols).into_iter().map(|r| r.iter().map(|v| 20.0 * v).collect()).collect();
        let tape = Tape::<f64>::new();
        let a = tape.constant(tensor(&x)).softmax(1).unwrap().value();
        let shifted: Vec<Vec<f64>> = x.iter().map(|r: &Vec<f64>| r.iter().map(|v| v + shift).collect()).collect();
        let b = tape.constant(tensor(&shifted)).softmax(1).unwrap().value();
        for r in 0..rows {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn reshape_round_trip_is_identity(seed in any::<u64>(), a in 1usize..6, b in 1usize..6) {
        let x = mat(&mut rng(seed), a, b);
        let tape = Tape::<f64>::new();
        let v = tape.constant(tensor(&x)).reshape([a * b]).unwrap().reshape([a, b]).unwrap();
        prop_assert_eq!(rows_of(&v.value()), x);
    }

    #[test]
    fn gating_output_is_colinear_with_values(seed in any::<u64>(), heads in 1usize..4, dh in 1usize..4, k in 1usize..6, l in 1usize..6, masked: bool) {
        let mut r = rng(seed);
        let d = heads * dh;
        let mut store = ParamStore::<f64>::new();
        let g = GatingLayer::new(&mut store, "g", d, heads, &mut r).unwrap();
        for lin in [&g.w_k, &g.w_q, &g.w_v] {
            *store.get_mut(lin.weight) = tensor(&mat(&mut r, d, d));
        }
        let v = mat(&mut r, k, d);
        let t = mat(&mut r, l, d);
        let mask = masked.then(|| attention_mask(&random_mask(&mut r, l, k)));
        let tape = Tape::<f64>::new();
        let p = store.bind(&tape);
        let gated = g.forward(&p, tape.constant(tensor(&v)), tape.constant(tensor(&t)), mask.as_ref()).unwrap();
        let values = rows_of(&tape.constant(tensor(&t)).matmul(p.get(g.w_v.weight)).unwrap().value());
        let out = rows_of(&gated.out.value());
        for row in 0..l {
            for h in 0..heads {
                let o = &out[row][h * dh..(h + 1) * dh];
                let vv = &values[row][h * dh..(h + 1) * dh];
                let oo = o.iter().map(|x| x * x).sum::<f64>();
                let vn = vv.iter().map(|x| x * x).sum::<f64>();
                if oo > 0.0 && vn > 0.0 {
                    // Norm of the wedge product from its 2x2 minors.
                    let mut wedge = 0.0;
                    for i in 0..dh {
                        for j in 0..i {
                            wedge += (o[i] * vv[j] - o[j] * vv[i]).powi(2);
                        }
                    }
                    prop_assert!(wedge.sqrt() / (oo.sqrt() * vn.sqrt()) < 1e-9);
                }
                let bound = mask.as_ref().map_or(k, |m| m.allowed_in_row(row)) as f64;
                let imp = gated.importance[h].value().data()[row];
                prop_assert!(imp.abs() <= bound + 1e-12, "importance {imp} above {bound}");
            }
        }
    }

    #[test]
    fn importance_ignores_key_scale_with_identity_projection(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let g = GatingLayer::new(&mut store, "g", d, 2, &mut r).unwrap();
        let eye: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect();
        *store.get_mut(g.w_k.weight) = tensor(&eye);
        *store.get_mut(g.w_q.weight) = tensor(&mat(&mut r, d, d));
        *store.get_mut(g.w_v.weight) = tensor(&mat(&mut r, d, d));
        let v = mat(&mut r, 5, d);
        let scaled: Vec<Vec<f64>> = v.iter().map(|row| row.iter().map(|x| c * x).collect()).collect();
        let t = mat(&mut r, 3, d);
        let tape = Tape::<f64>::new();
        let p = store.bind(&tape);
        let a = g.cross_gate(&p, tape.constant(tensor(&v)), tape.constant(tensor(&t)), None).unwrap().value();
        let b = g.cross_gate(&p, tape.constant(tensor(&scaled)), tape.constant(tensor(&t)), None).unwrap().value();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn naive_upscale_is_a_permutation(h in 1usize..6, w in 1usize..6, q in 1usize..4) {
        let d = 4 * q;
        let mut idx = naive_upscale_index(h, w, d).unwrap();
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..h * w * d).collect::<Vec<_>>());
        let data: Vec<f64> = (0..h * w * d).map(|i| i as f64).collect();
        let tape = Tape::<f64>::new();
        let g = TokenGrid::new(tape.constant(Tensor::from_f64([h * w, d], &data).unwrap()), h, w).unwrap();
        let back = naive_downscale(naive_upscale(g).unwrap()).unwrap();
        let value = back.tokens.value();
        prop_assert_eq!(value.data(), data.as_slice());
    }

    #[test]
    fn bilinear_commutes_with_channel_permutation(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, d in 2usize..5) {
        let mut r = rng(seed);
        let x = mat(&mut r, h * w, d);
        let mut perm: Vec<usize> = (0..d).collect();
        perm.rotate_left(r.random_range(0..d));
        let permuted: Vec<Vec<f64>> = x.iter().map(|row| perm.iter().map(|&p| row[p]).collect()).collect();
        let tape = Tape::<f64>::new();
        let up = |m: &Vec<Vec<f64>>| rows_of(&bilinear_upsample(TokenGrid::new(tape.constant(tensor(m)), h, w).unwrap(), 2 * h, 3 * w).unwrap().tokens.value());
        let a = up(&x);
        let b = up(&permuted);
        for (ra, rb) in a.iter().zip(&b) {
            let expect: Vec<f64> = perm.iter().map(|&p| ra[p]).collect();
            prop_assert_eq!(&expect, rb);
        }
    }

    #[test]
    fn iou_is_symmetric_bounded_and_label_permutation_invariant(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let scenes = random_scenes(&mut r, 1, h, w);
        let (p, g) = &scenes[0];
        let pm = LabelMap::new(h, w, p.clone()).unwrap();
        let gm = LabelMap::new(h, w, g.clone()).unwrap();
        let mut perm: Vec<u8> = (0..=16).collect();
        perm[1..].rotate_left(r.random_range(0..16));
        let relabel = |m: &Vec<u8>| LabelMap::new(h, w, m.iter().map(|&k| perm[k as usize]).collect()).unwrap();
        for k in 0..=16u8 {
            let a = iou(&pm, &gm, k).unwrap();
            prop_assert_eq!(a, iou(&gm, &pm, k).unwrap());
            prop_assert_eq!(a, iou(&relabel(p), &relabel(g), perm[k as usize]).unwrap());
            if let Some(v) = a {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let own = iou(&gm, &gm, k).unwrap();
            prop_assert!(own.is_none() || own == Some(1.0));
        }
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn upscalers_are_local(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, q in 1usize..3, linear: bool) {
        let mut r = rng(seed);
        let d = 4 * q;
        let mut store = ParamStore::<f64>::new();
        let up = LinearUpscaler::new(&mut store, "u", d, &mut r).unwrap();
        *store.get_mut(up.proj.weight) = tensor(&mat(&mut r, q, d));
        let x = mat(&mut r, h * w, d);
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let tape = Tape::<f64>::new();
                let p = store.bind(&tape);
                let input = tape.param(&tensor(&x));
                let g = TokenGrid::new(input, h, w).unwrap();
                let out = if linear { up.forward(&p, g).unwrap() } else { naive_upscale(g).unwrap() };
                let jac = row_jacobian(&tape, out.tokens, oy * 2 * w + ox, input, seed ^ 1);
                for (i, row) in jac.iter().enumerate() {
                    if i != (oy / 2) * w + ox / 2 {
                        prop_assert!(!nonzero(row), "output ({oy},{ox}) depends on input token {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn fusion_class_tokens_never_interact(seed in any::<u64>(), layers in 1usize..3) {
        let mut r = rng(seed);
        let (d, n_vis, n_cls) = (8, 4, 5);
        let mut store = ParamStore::<f64>::new();
        let fusion = FusionTransformer::new(&mut store, d, layers, 2, &mut r).unwrap();
        let x = mat(&mut r, n_vis, d);
        let c = mat(&mut r, n_cls, d);
        for i in 0..n_cls {
            let tape = Tape::<f64>::new();
            let p = store.bind(&tape);
            let xv = tape.param(&tensor(&x));
            let cv = tape.param(&tensor(&c));
            let (_, cls) = fusion.forward(&p, TokenGrid::new(xv, 2, 2).unwrap(), cv).unwrap();
            let jac = row_jacobian(&tape, cls, i, cv, seed);
            for (j, row) in jac.iter().enumerate() {
                prop_assert_eq!(nonzero(row), j == i, "class token {} vs {}", i, j);
            }
        }
        for v in 0..n_vis {
            let tape = Tape::<f64>::new();
            let p = store.bind(&tape);
            let xv = tape.param(&tensor(&x));
            let cv = tape.param(&tensor(&c));
            let (grid, _) = fusion.forward(&p, TokenGrid::new(xv, 2, 2).unwrap(), cv).unwrap();
            let jac = row_jacobian(&tape, grid.tokens, v, cv, seed);
            prop_assert!(jac.iter().all(|row| !nonzero(row)), "visual token {v} reads class tokens");
        }
        let m = fusion_mask(n_vis, n_cls).unwrap();
        prop_assert_eq!((0..n_vis + n_cls).map(|q| m.allowed_in_row(q)).collect::<Vec<_>>(), vec![n_vis; n_vis + n_cls]);
    }

    #[test]
    fn apk_blocked_pairs_have_zero_jacobian(seed in any::<u64>(), attention: bool, normalize: bool) {
        let mut r = rng(seed);
        let d = 8;
        let kind = if attention { MixerKind::Attention } else { MixerKind::Gating };
        let mask = ApkMask::build(&ArchOrder::default());
        let mut store = ParamStore::<f64>::new();
        let apk = ApkLayer::new(&mut store, kind, d, 2, &mask, normalize, true, &mut r).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            let n = shape.iter().product();
            *store.get_mut(id) = Tensor::from_f64(shape, &mat(&mut r, 1, n)[0]).unwrap();
        }
        let fb = mat(&mut r, 2, d);
        let th = mat(&mut r, TEETH, d);
        for i in 0..TEETH {
            let tape = Tape::<f64>::new();
            let p = store.bind(&tape);
            let thv = tape.param(&tensor(&th));
            let out = apk.forward(&p, tape.constant(tensor(&fb)), thv).unwrap();
            let jac = row_jacobian(&tape, out, i, thv, seed);
            for (j, row) in jac.iter().enumerate() {
                if !mask.allowed(i, j) {
                    prop_assert!(!nonzero(row), "tooth {i} depends on blocked tooth {j}");
                }
            }
            prop_assert!(nonzero(&jac[i]));
        }
    }

    #[test]
    fn attention_blocked_keys_have_zero_jacobian(seed in any::<u64>(), nq in 1usize..5, nk in 1usize..5) {
        let mut r = rng(seed);
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let att = teethseg::nn::Attention::new(&mut store, "a", d, 2, &mut r).unwrap();
        let allowed = random_mask(&mut r, nq, nk);
        let m = attention_mask(&allowed);
        let q = mat(&mut r, nq, d);
        let k = mat(&mut r, nk, d);
        for i in 0..nq {
            let tape = Tape::<f64>::new();
            let p = store.bind(&tape);
            let kv = tape.param(&tensor(&k));
            let out = att.forward(&p, tape.constant(tensor(&q)), kv, Some(&m)).unwrap();
            let jac = row_jacobian(&tape, out, i, kv, seed);
            for j in 0..nk {
                if !allowed[i][j] {
                    prop_assert!(!nonzero(&jac[j]));
                }
            }
        }
    }

    #[test]
    fn synthetic_arch_is_mirror_symmetric_without_jitter(seed in any::<u64>()) {
        let cfg = SceneConfig { dropout: 0.0, crowding: 0.0, ..SceneConfig::default() };
        let s = generate_scene(&cfg, seed).unwrap();
        let (h, w) = (s.labels.h(), s.labels.w());
        let mirror = |k: u8| if k == 0 { 0 } else { (k - 1 + 8) % 16 + 1 };
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(s.labels.get(y, x), mirror(s.labels.get(y, w - 1 - x)));
            }
        }
    }

    #[test]
    fn synthetic_scenes_are_deterministic_and_ordered(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, seed).unwrap();
        let b = generate_scene(&cfg, seed).unwrap();
        prop_assert_eq!(a.image.data(), b.image.data());
        prop_assert_eq!(&a.labels, &b.labels);
        prop_assert_eq!(a.present, a.labels.present());
        let order = ArchOrder::default();
        let centroid = |k: u8| {
            let (mut sx, mut n) = (0.0, 0usize);
            for y in 0..a.labels.h() {
                for x in 0..a.labels.w() {
                    if a.labels.get(y, x) == k {
                        sx += x as f64;
                        n += 1;
                    }
                }
            }
            (n > 0).then(|| sx / n as f64)
        };
        let xs: Vec<f64> = order.sequence.iter().filter_map(|&t| centroid(t as u8 + 1)).collect();
        prop_assert!(xs.windows(2).all(|p| p[0] < p[1]), "centroids out of arch order: {xs:?}");
    }
}

#[test]
fn msa_blocks_double_the_grid_each_time() {
    let mut r = rng(3);
    let d = 8;
    let mut store = ParamStore::<f64>::new();
    let blocks: Vec<MsaBlock> = (0..3)
        .map(|k| MsaBlock::new(&mut store, &format!("m{k}"), MixerKind::Gating, UpscaleMode::Permute, d, 2, false, true, &mut r).unwrap())
        .collect();
    let tape = Tape::<f64>::new();
    let p = store.bind(&tape);
    let mut x = TokenGrid::new(tape.constant(tensor(&mat(&mut r, 6, d))), 2, 3).unwrap();
    let mut cls = tape.constant(tensor(&mat(&mut r, 18, d)));
    for (k, b) in blocks.iter().enumerate() {
        (x, cls) = b.forward(&p, x, cls, x).unwrap();
        assert_eq!((x.h, x.w, x.width()), (2 << (k + 1), 3 << (k + 1), d));
    }
    assert_eq!(cls.shape(), vec![18, d]);
}

#[test]
fn apk_keeps_tooth_tokens_distinct() {
    let mut r = rng(11);
    let d = 8;
    let mut store = ParamStore::<f64>::new();
    let apk = ApkLayer::new(&mut store, MixerKind::Gating, d, 2, &ApkMask::build(&ArchOrder::default()), false, true, &mut r).unwrap();
    let tape = Tape::<f64>::new();
    let p = store.bind(&tape);
    let out = rows_of(&apk.forward(&p, tape.constant(tensor(&mat(&mut r, 2, d))), tape.constant(tensor(&mat(&mut r, TEETH, d)))).unwrap().value());
    for i in 0..TEETH {
        for j in 0..i {
            let dot: f64 = out[i].iter().zip(&out[j]).map(|(a, b)| a * b).sum();
            let n = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((1.0 - dot / (n(&out[i]) * n(&out[j]))).abs() > 1e-3);
        }
    }
}

#[test]
fn every_parameter_receives_a_gradient() {
    for v in Variant::ALL {
        let cfg = v.apply(&ModelConfig::tiny());
        let model = TeethSeg::<f64>::new(cfg.clone()).unwrap();
        let (image, labels) = probe_sample(&cfg, 4).unwrap();
        let tape = Tape::<f64>::new();
        let p = model.store.bind(&tape);
        let l = teethseg::model::loss(&model.forward(&p, &tape, &image).unwrap(), &labels, false).unwrap();
        let grads = tape.backward(l.total).unwrap();
        for (name, &var) in model.store.names().iter().zip(p.vars()) {
            assert!(grads.get(var).is_some(), "variant {v:?}: {name} unreachable");
        }
    }
}

#[test]
fn score_rows_are_distributions() {
    for seed in 0..4 {
        for v in Variant::ALL {
            let mut cfg = v.apply(&ModelConfig::tiny());
            cfg.seed = seed;
            let (image, _) = probe_sample(&cfg, seed).unwrap();
            let m64 = TeethSeg::<f64>::new(cfg.clone()).unwrap();
            let (th, fb) = m64.score_maps(&image).unwrap();
            for t in [&th, &fb] {
                for i in 0..t.shape()[0] {
                    assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            let m32 = TeethSeg::<f32>::new(cfg).unwrap();
            let (th, fb) = m32.score_maps(&image.cast()).unwrap();
            for t in [&th, &fb] {
                for i in 0..t.shape()[0] {
                    assert!((t.row(i).iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn zero_foreground_token_leaves_tooth_tokens_unchanged() {
    let mut model = TeethSeg::<f64>::new(ModelConfig::tiny()).unwrap();
    let fb = model.cls_fb;
    let d = model.cfg.width;
    model.store.get_mut(fb).data_mut()[FOREGROUND * d..(FOREGROUND + 1) * d].fill(0.0);
    let tape = Tape::<f64>::new();
    let p = model.store.bind(&tape);
    let tokens = model.class_tokens_in(&p).unwrap().value();
    assert_eq!(&tokens.data()[2 * d..], model.store.get(model.cls_th).data());
}

#[test]
fn relabeling_teeth_permutes_predictions() {
    let cfg = ModelConfig::tiny();
    let mut model = TeethSeg::<f64>::new(cfg.clone()).unwrap();
    let d = cfg.width;
    let th_id = model.cls_th;
    for x in model.store.get_mut(th_id).data_mut() {
        *x *= 50.0;
    }
    let (image, _) = probe_sample(&cfg, 9).unwrap();
    let sigma: Vec<usize> = (0..TEETH).map(|k| (5 * k + 3) % TEETH).collect();
    let mut permuted = model.clone();
    let src = model.store.get(th_id).data().to_vec();
    let dst = permuted.store.get_mut(th_id).data_mut();
    for k in 0..TEETH {
        dst[sigma[k] * d..(sigma[k] + 1) * d].copy_from_slice(&src[k * d..(k + 1) * d]);
    }
    let apk = permuted.apk.as_mut().unwrap();
    let mut allowed = vec![false; TEETH * TEETH];
    for i in 0..TEETH {
        for j in 0..TEETH {
            allowed[sigma[i] * TEETH + sigma[j]] = apk.mask.allowed(i, j);
        }
    }
    apk.mask = AttentionMask::from_allowed(TEETH, TEETH, allowed).unwrap();
    let (a, _) = model.score_maps(&image).unwrap();
    let (b, _) = permuted.score_maps(&image).unwrap();
    for px in 0..a.shape()[0] {
        for k in 0..TEETH {
            assert!((a.row(px)[k] - b.row(px)[sigma[k]]).abs() < 1e-12);
        }
    }
    let pa = model.predict(&image).unwrap();
    let pb = permuted.predict(&image).unwrap();
    for (&x, &y) in pa.data().iter().zip(pb.data()) {
        let mapped = if x == 0 { 0 } else { sigma[x as usize - 1] as u8 + 1 };
        assert_eq!(mapped, y);
    }
}
