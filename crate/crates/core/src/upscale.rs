//! Channel-to-space upscalers and bilinear resampling over token grids.
//!
//! The naive upscaler splits each width-`d` token into four `d/4` chunks;
//! chunk `2r + c` lands at spatial position `(2i + r, 2j + c)`.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, TokenGrid};
use crate::params::{Bound, ParamStore};
use crate::tensor::Scalar;

/// Source index of every output element of the naive upscaler.
pub fn naive_upscale_index(h: usize, w: usize, d: usize) -> Result<Vec<usize>> {
    if d % 4 != 0 {
        return Err(Error::Config(format!("naive upscaler needs width divisible by 4, got {d}")));
    }
    let q = d / 4;
    let w2 = 2 * w;
    let mut src = vec![0; h * w * d];
    for i in 0..h {
        for j in 0..w {
            for r in 0..2 {
                for c in 0..2 {
                    let out_tok = (2 * i + r) * w2 + 2 * j + c;
                    let in_base = (i * w + j) * d + (2 * r + c) * q;
                    for t in 0..q {
                        src[out_tok * q + t] = in_base + t;
                    }
                }
            }
        }
    }
    Ok(src)
}

fn invert(src: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; src.len()];
    for (o, &s) in src.iter().enumerate() {
        inv[s] = o;
    }
    inv
}

/// `[h·w, d]` → `[2h·2w, d/4]`.
pub fn naive_upscale<'t, S: Scalar>(g: TokenGrid<'t, S>) -> Result<TokenGrid<'t, S>> {
    let d = g.width();
    let src = naive_upscale_index(g.h, g.w, d)?;
    let (h2, w2) = (2 * g.h, 2 * g.w);
    let tokens = g.tokens.gather_flat(Rc::new(src), [h2 * w2, d / 4], "naive_upscale")?;
    TokenGrid::new(tokens, h2, w2)
}

/// Exact inverse of [`naive_upscale`]: `[2h·2w, d]` → `[h·w, 4d]`.
pub fn naive_downscale<'t, S: Scalar>(g: TokenGrid<'t, S>) -> Result<TokenGrid<'t, S>> {
    if g.h % 2 != 0 || g.w % 2 != 0 {
        return Err(Error::Config(format!(
            "naive downscaler needs even extents, got {}x{}",
            g.h, g.w
        )));
    }
    let (h, w, d) = (g.h / 2, g.w / 2, 4 * g.width());
    let src = invert(&naive_upscale_index(h, w, d)?);
    let tokens = g.tokens.gather_flat(Rc::new(src), [h * w, d], "naive_downscale")?;
    TokenGrid::new(tokens, h, w)
}

/// Naive upscaler followed by a learned `d/4 → d` map.
#[derive(Clone, Debug)]
pub struct LinearUpscaler {
    pub proj: Linear,
}

impl LinearUpscaler {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if width % 4 != 0 {
            return Err(Error::Config(format!("linear upscaler needs width divisible by 4, got {width}")));
        }
        Ok(LinearUpscaler {
            proj: Linear::new(store, &format!("{name}.proj"), width / 4, width, false, rng),
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, g: TokenGrid<'t, S>) -> Result<TokenGrid<'t, S>> {
        if g.width() != self.proj.d_out {
            return Err(Error::dim("linear_upscale", &g.tokens.shape(), &[self.proj.d_in, self.proj.d_out]));
        }
        let up = naive_upscale(g)?;
        TokenGrid::new(self.proj.forward(p, up.tokens)?, up.h, up.w)
    }
}

/// Two-tap interpolation weights along one axis (half-pixel centers, edges clamped).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Row-mixing entries for bilinear resampling of an `h × w` grid.
pub fn bilinear_weights(h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<(usize, usize, f64)> {
    let (ty, tx) = (axis_taps(h, out_h), axis_taps(w, out_w));
    let mut entries = Vec::with_capacity(out_h * out_w * 4);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let o = oy * out_w + ox;
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wgt = wy * wx;
                    if wgt != 0.0 {
                        entries.push((o, y * w + x, wgt));
                    }
                }
            }
        }
    }
    entries
}

/// Per-channel bilinear resampling with `align_corners = false`.
pub fn bilinear_upsample<'t, S: Scalar>(
    g: TokenGrid<'t, S>,
    out_h: usize,
    out_w: usize,
) -> Result<TokenGrid<'t, S>> {
    if out_h < g.h || out_w < g.w || g.h == 0 || g.w == 0 {
        return Err(Error::Contract(format!(
            "bilinear upsample {}x{} -> {out_h}x{out_w} must not shrink",
            g.h, g.w
        )));
    }
    if (out_h, out_w) == (g.h, g.w) {
        return Ok(g);
    }
    let entries = bilinear_weights(g.h, g.w, out_h, out_w);
    let tokens = g.tokens.mix_rows(out_h * out_w, Rc::new(entries), "bilinear_upsample")?;
    TokenGrid::new(tokens, out_h, out_w)
}
