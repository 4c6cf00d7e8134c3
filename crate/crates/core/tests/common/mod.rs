//! Oracle comparisons shared by the equivalence tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teethseg::autodiff::Tape;
use teethseg::data::LabelMap;
use teethseg::gating::GatingLayer;
use teethseg::metrics::{Aggregation, IoUAccumulator};
use teethseg::model::{loss, Scores};
use teethseg::nn::{Attention, AttentionMask, TokenGrid};
use teethseg::params::ParamStore;
use teethseg::upscale::{bilinear_upsample, naive_upscale};
use teethseg::Tensor;
use teethseg_oracle as oracle;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mat(rng: &mut impl Rng, rows: usize, cols: usize) -> oracle::Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn tensor(m: &oracle::Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn rows_of(t: &Tensor<f64>) -> oracle::Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn max_diff(a: &oracle::Mat, b: &oracle::Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Random `rows × cols` mask with at least one allowed entry per row.
pub fn random_mask(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<bool>> {
    (0..rows)
        .map(|_| {
            let mut row: Vec<bool> = (0..cols).map(|_| rng.random_bool(0.5)).collect();
            let keep = rng.random_range(0..cols);
            row[keep] = true;
            row
        })
        .collect()
}

pub fn attention_mask(m: &[Vec<bool>]) -> AttentionMask {
    AttentionMask::from_allowed(m.len(), m[0].len(), m.iter().flatten().copied().collect()).unwrap()
}

/// Largest gating discrepancy over `n` random instances.
pub fn gating_vs_oracle(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..5);
        let (k, l) = (r.random_range(1..7), r.random_range(1..7));
        let normalize = r.random_bool(0.5);
        let masked = r.random_bool(0.5);
        let mut store = ParamStore::<f64>::new();
        let mut g = GatingLayer::new(&mut store, "g", d, heads, &mut r).unwrap();
        g.normalize = normalize;
        let ws: Vec<oracle::Mat> = (0..3).map(|_| mat(&mut r, d, d)).collect();
        for (lin, w) in [&g.w_k, &g.w_q, &g.w_v].into_iter().zip(&ws) {
            *store.get_mut(lin.weight) = tensor(w);
        }
        let v = mat(&mut r, k, d);
        let t = mat(&mut r, l, d);
        let allowed = masked.then(|| random_mask(&mut r, l, k));
        let expect = oracle::cross_gate(&v, &t, &ws[0], &ws[1], &ws[2], heads, allowed.as_ref(), normalize);
        let tape = Tape::<f64>::new();
        let p = store.bind(&tape);
        let am = allowed.as_ref().map(|a| attention_mask(a));
        let got = g
            .cross_gate(&p, tape.constant(tensor(&v)), tape.constant(tensor(&t)), am.as_ref())
            .unwrap();
        worst = worst.max(max_diff(&rows_of(&got.value()), &expect));
    }
    worst
}

/// Largest masked multi-head attention discrepancy over `n` random instances.
pub fn attention_vs_oracle(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..5);
        let (nq, nk) = (r.random_range(1..7), r.random_range(1..7));
        let mut store = ParamStore::<f64>::new();
        let att = Attention::new(&mut store, "a", d, heads, &mut r).unwrap();
        let ws: Vec<oracle::Mat> = (0..4).map(|_| mat(&mut r, d, d)).collect();
        let bs: Vec<Vec<f64>> = (0..4).map(|_| mat(&mut r, 1, d).remove(0)).collect();
        for (i, lin) in [&att.q, &att.k, &att.v, &att.out].into_iter().enumerate() {
            *store.get_mut(lin.weight) = tensor(&ws[i]);
            *store.get_mut(lin.bias.unwrap()) = Tensor::from_f64([d], &bs[i]).unwrap();
        }
        let q = mat(&mut r, nq, d);
        let k = mat(&mut r, nk, d);
        let allowed = r.random_bool(0.5).then(|| random_mask(&mut r, nq, nk));
        let expect = oracle::attention(
            &q,
            &k,
            [&ws[0], &ws[1], &ws[2], &ws[3]],
            [&bs[0], &bs[1], &bs[2], &bs[3]],
            heads,
            allowed.as_ref(),
        );
        let tape = Tape::<f64>::new();
        let p = store.bind(&tape);
        let am = allowed.as_ref().map(|a| attention_mask(a));
        let got = att
            .forward(&p, tape.constant(tensor(&q)), tape.constant(tensor(&k)), am.as_ref())
            .unwrap();
        worst = worst.max(max_diff(&rows_of(&got.value()), &expect));
    }
    worst
}

/// Number of random grids where the naive upscaler is not bitwise equal to
/// the index-loop oracle.
pub fn naive_upscale_mismatches(n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..n {
        let (h, w, d) = (r.random_range(1..6), r.random_range(1..6), 4 * r.random_range(1..5));
        let data: Vec<f64> = (0..h * w * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let tape = Tape::<f64>::new();
        let g = TokenGrid::new(tape.constant(Tensor::from_f64([h * w, d], &data).unwrap()), h, w).unwrap();
        let up = naive_upscale(g).unwrap();
        let same = (up.h, up.w) == (2 * h, 2 * w) && up.tokens.value().data() == oracle::naive_upscale(h, w, d, &data).as_slice();
        bad += (!same) as usize;
    }
    bad
}

/// Largest bilinear discrepancy over `n` random grids and output sizes.
pub fn bilinear_vs_oracle(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w, d) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..4));
        let (oh, ow) = (h * r.random_range(1..4) + r.random_range(0..2), w * r.random_range(1..4));
        let data: Vec<f64> = (0..h * w * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let tape = Tape::<f64>::new();
        let g = TokenGrid::new(tape.constant(Tensor::from_f64([h * w, d], &data).unwrap()), h, w).unwrap();
        let got = bilinear_upsample(g, oh, ow).unwrap().tokens.value();
        for c in 0..d {
            let channel: Vec<f64> = (0..h * w).map(|i| data[i * d + c]).collect();
            let expect = oracle::bilinear(h, w, &channel, oh, ow);
            for (i, e) in expect.iter().enumerate() {
                worst = worst.max((got.data()[i * d + c] - e).abs());
            }
        }
    }
    worst
}

/// Largest loss discrepancy (both tooth-loss modes) over `n` random maps.
pub fn loss_vs_oracle(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        let (h, w) = (r.random_range(1..7), r.random_range(1..7));
        let px = h * w;
        let th = mat(&mut r, px, 16).into_iter().map(|row| row.iter().map(|x| 4.0 * x).collect()).collect();
        let fb = mat(&mut r, px, 2).into_iter().map(|row| row.iter().map(|x| 4.0 * x).collect()).collect();
        let p_bg = [0.0, 0.5, 1.0][i % 3];
        let labels: Vec<u8> = (0..px)
            .map(|_| if r.random_bool(p_bg) { 0 } else { r.random_range(1..=16) })
            .collect();
        let map = LabelMap::new(h, w, labels.clone()).unwrap();
        for all in [false, true] {
            let (eth, efb) = oracle::loss(&th, &fb, &labels, all);
            let tape = Tape::<f64>::new();
            let scores = Scores {
                logits_th: tape.constant(tensor(&th)),
                logits_fb: tape.constant(tensor(&fb)),
            };
            let l = loss(&scores, &map, all).unwrap();
            let got_th = l.th.value().item().unwrap();
            let got_fb = l.fb.value().item().unwrap();
            worst = worst.max((got_th - eth).abs()).max((got_fb - efb).abs());
        }
    }
    worst
}

/// Random label maps with some classes missing, as (pred, gt) pairs.
pub fn random_scenes(r: &mut impl Rng, count: usize, h: usize, w: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    (0..count)
        .map(|_| {
            let missing: Vec<u8> = (0..3).map(|_| r.random_range(1..=16)).collect();
            let draw = |r: &mut dyn rand::RngCore| {
                (0..h * w)
                    .map(|_| {
                        let k = r.random_range(0..=16u8);
                        if missing.contains(&k) { 0 } else { k }
                    })
                    .collect::<Vec<u8>>()
            };
            let gt = draw(r);
            let pred = draw(r);
            (pred, gt)
        })
        .collect()
}

/// Number of random splits where the metric's per-class IoU or mIoU differs
/// from the confusion-count recomputation. Comparison is exact.
pub fn iou_mismatches(n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..n {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let count = r.random_range(1..5);
        let scenes = random_scenes(&mut r, count, h, w);
        let mut acc = IoUAccumulator::new(Aggregation::Dataset);
        for (pred, gt) in &scenes {
            acc.add(&LabelMap::new(h, w, pred.clone()).unwrap(), &LabelMap::new(h, w, gt.clone()).unwrap())
                .unwrap();
        }
        let report = acc.report();
        let (per, miou) = oracle::miou(&scenes);
        bad += (report.per_class.to_vec() != per || report.miou != miou) as usize;
    }
    bad
}
