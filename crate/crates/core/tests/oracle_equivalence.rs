mod common;

use common::*;
use rand::Rng;
use teethseg::autodiff::Tape;
use teethseg::data::LabelMap;
use teethseg::model::{loss, Scores};
use teethseg_oracle as oracle;

const INSTANCES: usize = 100;

#[test]
fn gating_matches_loop_oracle() {
    let worst = gating_vs_oracle(INSTANCES, 1);
    assert!(worst < 1e-10, "max abs diff {worst:e}");
}

#[test]
fn masked_attention_matches_loop_oracle() {
    let worst = attention_vs_oracle(INSTANCES, 2);
    assert!(worst < 1e-10, "max abs diff {worst:e}");
}

#[test]
fn naive_upscaler_is_bitwise_the_index_formula() {
    assert_eq!(naive_upscale_mismatches(INSTANCES, 3), 0);
}

#[test]
fn bilinear_matches_per_pixel_formula() {
    let worst = bilinear_vs_oracle(INSTANCES, 4);
    assert!(worst < 1e-12, "max abs diff {worst:e}");
}

#[test]
fn loss_matches_direct_sum() {
    let worst = loss_vs_oracle(INSTANCES, 5);
    assert!(worst < 1e-10, "max abs diff {worst:e}");
}

#[test]
fn iou_matches_confusion_counts_exactly() {
    assert_eq!(iou_mismatches(INSTANCES, 6), 0);
}

#[test]
fn matmul_and_softmax_match_loops() {
    let mut r = rng(7);
    for _ in 0..INSTANCES {
        let (m, k, n) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..9));
        let a = mat(&mut r, m, k);
        let b = mat(&mut r, k, n);
        let tape = Tape::<f64>::new();
        let prod = tape.constant(tensor(&a)).matmul(tape.constant(tensor(&b))).unwrap();
        assert!(max_diff(&rows_of(&prod.value()), &oracle::matmul(&a, &b)) < 1e-12);
        let sm = tape.constant(tensor(&a)).softmax(1).unwrap();
        let expect: oracle::Mat = a.iter().map(|row| oracle::softmax(row)).collect();
        assert!(max_diff(&rows_of(&sm.value()), &expect) < 1e-12);
    }
}

#[test]
fn uniform_scores_give_log16_plus_log2() {
    let th = vec![vec![0.0; 16]; 12];
    let fb = vec![vec![0.0; 2]; 12];
    let labels: Vec<u8> = (0..12).map(|i| (i % 17) as u8).collect();
    let (eth, efb) = oracle::loss(&th, &fb, &labels, false);
    assert!((eth + efb - (16f64.ln() + 2f64.ln())).abs() < 1e-12);
    let tape = Tape::<f64>::new();
    let scores = Scores {
        logits_th: tape.constant(tensor(&th)),
        logits_fb: tape.constant(tensor(&fb)),
    };
    let l = loss(&scores, &LabelMap::new(3, 4, labels).unwrap(), false).unwrap();
    assert!((l.total.value().item().unwrap() - (16f64.ln() + 2f64.ln())).abs() < 1e-9);
}

#[test]
fn loss_gradient_matches_oracle_central_differences() {
    let mut r = rng(8);
    for _ in 0..20 {
        let px = r.random_range(1..10);
        let th = mat(&mut r, px, 16);
        let fb = mat(&mut r, px, 2);
        let labels: Vec<u8> = (0..px).map(|_| r.random_range(0..=16)).collect();
        let tape = Tape::<f64>::new();
        let vth = tape.param(&tensor(&th));
        let vfb = tape.param(&tensor(&fb));
        let l = loss(
            &Scores {
                logits_th: vth,
                logits_fb: vfb,
            },
            &LabelMap::new(1, px, labels.clone()).unwrap(),
            false,
        )
        .unwrap();
        let grads = tape.backward(l.total).unwrap();
        let g = grads.get_or_zeros(vth);
        let flat: Vec<f64> = th.iter().flatten().copied().collect();
        let f = |x: &[f64]| {
            let rows: oracle::Mat = x.chunks(16).map(|c| c.to_vec()).collect();
            let (a, b) = oracle::loss(&rows, &fb, &labels, false);
            a + b
        };
        for i in 0..flat.len() {
            let numeric = oracle::central_difference(f, &flat, i, 1e-5);
            assert!((g.data()[i] - numeric).abs() < 1e-8, "index {i}: {} vs {numeric}", g.data()[i]);
        }
    }
}
