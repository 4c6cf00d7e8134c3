//! Brute-force reference implementations used only by tests.
//!
//! Everything works on plain `f64` vectors with explicit loops and shares no
//! code with the `teethseg` crate.

/// Row-major matrix.
pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let na = dot(a, a).sqrt().max(floor);
    let nb = dot(b, b).sqrt().max(floor);
    dot(a, b) / (na * nb)
}

/// Gating of `t` by `v`: per head, `out[l] = (Σ_k cos(q_l, k_k)) · value_l`
/// over allowed `(l, k)` pairs. Weights are `d × d`, applied as `x · W`.
#[allow(clippy::too_many_arguments)]
pub fn cross_gate(
    v: &Mat,
    t: &Mat,
    w_k: &Mat,
    w_q: &Mat,
    w_v: &Mat,
    heads: usize,
    allowed: Option<&Vec<Vec<bool>>>,
    normalize: bool,
) -> Mat {
    let keys = matmul(v, w_k);
    let queries = matmul(t, w_q);
    let values = matmul(t, w_v);
    let d = w_k[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; t.len()];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for l in 0..t.len() {
            let mut importance = 0.0;
            let mut count = 0;
            for k in 0..v.len() {
                if allowed.is_some_and(|a| !a[l][k]) {
                    continue;
                }
                importance += cosine(&queries[l][r.clone()], &keys[k][r.clone()], 1e-8);
                count += 1;
            }
            if normalize && count > 0 {
                importance /= count as f64;
            }
            for c in r.clone() {
                out[l][c] = importance * values[l][c];
            }
        }
    }
    out
}

/// Multi-head scaled dot-product attention, `queries · W_q` etc., with
/// blocked pairs left out of the softmax, then the output projection.
/// Biases are added per row.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q_in: &Mat,
    k_in: &Mat,
    w: [&Mat; 4],
    b: [&[f64]; 4],
    heads: usize,
    allowed: Option<&Vec<Vec<bool>>>,
) -> Mat {
    let affine = |x: &Mat, i: usize| -> Mat {
        matmul(x, w[i])
            .into_iter()
            .map(|row| row.iter().zip(b[i]).map(|(a, c)| a + c).collect())
            .collect()
    };
    let q = affine(q_in, 0);
    let k = affine(k_in, 1);
    let v = affine(k_in, 2);
    let d = q[0].len();
    let dh = d / heads;
    let mut mixed = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let cols: Vec<usize> = (0..k.len()).filter(|&j| allowed.is_none_or(|a| a[i][j])).collect();
            let scores: Vec<f64> = cols
                .iter()
                .map(|&j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for (wt, &j) in p.iter().zip(&cols) {
                for c in r.clone() {
                    mixed[i][c] += wt * v[j][c];
                }
            }
        }
    }
    affine(&mixed, 3)
}

/// Channel-to-space upscaling of an `h × w` grid of width-`d` tokens
/// (flat row-major buffer), chunk `2r + c` going to `(2i + r, 2j + c)`.
pub fn naive_upscale(h: usize, w: usize, d: usize, input: &[f64]) -> Vec<f64> {
    let q = d / 4;
    let mut out = vec![0.0; input.len()];
    for i in 0..h {
        for j in 0..w {
            for r in 0..2 {
                for c in 0..2 {
                    for t in 0..q {
                        let o = ((2 * i + r) * 2 * w + 2 * j + c) * q + t;
                        out[o] = input[(i * w + j) * d + (2 * r + c) * q + t];
                    }
                }
            }
        }
    }
    out
}

/// Half-pixel bilinear resampling of one channel with edge clamping.
pub fn bilinear(h: usize, w: usize, input: &[f64], out_h: usize, out_w: usize) -> Vec<f64> {
    let src = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = src(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src(ox, w, out_w);
            let top = input[y0 * w + x0] * (1.0 - fx) + input[y0 * w + x1] * fx;
            let bottom = input[y1 * w + x0] * (1.0 - fx) + input[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    softmax(row)[k].ln()
}

/// Two-part cross entropy from raw logits. Returns `(L_th, L_fb)`.
/// Labels: 0 background, 1..=16 teeth. The tooth term averages over tooth
/// pixels, or over all pixels with a uniform target for background when
/// `th_over_all_pixels`.
pub fn loss(logits_th: &Mat, logits_fb: &Mat, labels: &[u8], th_over_all_pixels: bool) -> (f64, f64) {
    let n = labels.len() as f64;
    let mut fb = 0.0;
    let mut th = 0.0;
    let mut fg = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let fb_target = if l == 0 { 1 } else { 0 };
        fb -= log_softmax_at(&logits_fb[i], fb_target);
        if l > 0 {
            th -= log_softmax_at(&logits_th[i], l as usize - 1);
            fg += 1;
        } else if th_over_all_pixels {
            let classes = logits_th[i].len();
            for k in 0..classes {
                th -= log_softmax_at(&logits_th[i], k) / classes as f64;
            }
        }
    }
    let th = if th_over_all_pixels {
        th / n
    } else if fg > 0 {
        th / fg as f64
    } else {
        0.0
    };
    (th, fb / n)
}

/// `confusion[g][p]` pixel counts over classes `0..classes`.
pub fn confusion(pred: &[u8], gt: &[u8], classes: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        c[g as usize][p as usize] += 1;
    }
    c
}

/// IoU of class `k` from a confusion matrix; `None` when the class appears
/// in neither map.
pub fn iou_from_confusion(c: &[Vec<u64>], k: usize) -> Option<f64> {
    let tp = c[k][k];
    let gt_total: u64 = c[k].iter().sum();
    let pred_total: u64 = c.iter().map(|row| row[k]).sum();
    let union = gt_total + pred_total - tp;
    (union > 0).then(|| tp as f64 / union as f64)
}

/// Dataset-level mean IoU over tooth classes 1..=16 from summed confusion counts.
pub fn miou(scenes: &[(Vec<u8>, Vec<u8>)]) -> (Vec<Option<f64>>, Option<f64>) {
    let mut total = vec![vec![0u64; 17]; 17];
    for (pred, gt) in scenes {
        let c = confusion(pred, gt, 17);
        for g in 0..17 {
            for p in 0..17 {
                total[g][p] += c[g][p];
            }
        }
    }
    let per: Vec<Option<f64>> = (1..17).map(|k| iou_from_confusion(&total, k)).collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}

/// Central difference of `f` at `x` along coordinate `i` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    let mut down = x.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_class_counts() {
        let th = vec![vec![0.0; 16]; 4];
        let fb = vec![vec![0.0; 2]; 4];
        let (lt, lf) = loss(&th, &fb, &[0, 3, 16, 1], false);
        assert!((lt - 16f64.ln()).abs() < 1e-12);
        assert!((lf - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_gate_is_zero_and_parallel_is_identity() {
        let eye: Mat = (0..2).map(|i| (0..2).map(|j| (i == j) as u8 as f64).collect()).collect();
        let z = cross_gate(&vec![vec![1.0, 0.0]], &vec![vec![0.0, 3.0]], &eye, &eye, &eye, 1, None, false);
        assert_eq!(z, vec![vec![0.0, 0.0]]);
        let p = cross_gate(&vec![vec![1.0, 2.0]], &vec![vec![2.0, 4.0]], &eye, &eye, &eye, 1, None, false);
        assert!((p[0][0] - 2.0).abs() < 1e-12 && (p[0][1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_iou_handles_empty_classes() {
        let c = confusion(&[0, 1, 1], &[0, 1, 2], 3);
        assert_eq!(iou_from_confusion(&c, 1), Some(0.5));
        assert_eq!(iou_from_confusion(&c, 2), Some(0.0));
        let c = confusion(&[0], &[0], 3);
        assert_eq!(iou_from_confusion(&c, 2), None);
    }
}
