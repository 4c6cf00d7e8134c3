//! Transformer building blocks: linear maps, masked multi-head attention,
//! pre-norm blocks, the patch encoder and the class-token fusion stage.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Visual tokens with their spatial layout; token index is `row * w + col`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'t, S: Scalar> {
    pub tokens: Var<'t, S>,
    pub h: usize,
    pub w: usize,
}

impl<'t, S: Scalar> TokenGrid<'t, S> {
    pub fn new(tokens: Var<'t, S>, h: usize, w: usize) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != h * w {
            return Err(Error::dim("token_grid", &shape, &[h * w, 0]));
        }
        Ok(TokenGrid { tokens, h, w })
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Query/key visibility with an additive reading (0 allowed, −∞ blocked).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Fails when any query row has no allowed key.
    pub fn from_allowed(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim("attention_mask", &[rows, cols], &[allowed.len()]));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a)) {
            return Err(Error::Contract(format!("attention mask row {r} blocks every key")));
        }
        Ok(AttentionMask { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Reads an additive mask: `0` allowed, `-inf` blocked.
    pub fn from_additive<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let [rows, cols] = t.shape()[..] else {
            return Err(Error::dim("attention_mask", t.shape(), &[0, 0]));
        };
        let mut allowed = Vec::with_capacity(rows * cols);
        for &v in t.data() {
            if v == S::zero() {
                allowed.push(true);
            } else if v == S::neg_infinity() {
                allowed.push(false);
            } else {
                return Err(Error::Contract(format!("mask entry {v:?} is neither 0 nor -inf")));
            }
        }
        Self::from_allowed(rows, cols, allowed)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn allowed_in_row(&self, q: usize) -> usize {
        self.allowed[q * self.cols..(q + 1) * self.cols].iter().filter(|&&a| a).count()
    }

    pub fn additive<S: Scalar>(&self) -> Tensor<S> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { S::zero() } else { S::neg_infinity() })
            .collect();
        Tensor::new([self.rows, self.cols], data).expect("extents match")
    }

    /// 1 for allowed entries, 0 for blocked.
    pub fn indicator<S: Scalar>(&self) -> Tensor<S> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { S::one() } else { S::zero() })
            .collect();
        Tensor::new([self.rows, self.cols], data).expect("extents match")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.init(format!("{name}.w"), &[d_in, d_out], Init::Normal(INIT_STD), rng);
        let bias = bias.then(|| store.init(format!("{name}.b"), &[d_out], Init::Zeros, rng));
        Linear { weight, bias, d_in, d_out }
    }

    /// `x · W (+ b)` for `x: [n, d_in]`.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let y = x.matmul(p.get(self.weight))?;
        match self.bias {
            None => Ok(y),
            Some(b) => {
                let rows = y.shape()[0];
                let b = p.get(b).reshape([1, self.d_out])?.repeat_axis(0, rows)?;
                y.add(b)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        LayerNorm {
            gain: store.init(format!("{name}.gain"), &[d], Init::Ones, rng),
            bias: store.init(format!("{name}.bias"), &[d], Init::Zeros, rng),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention with an additive mask.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
            heads,
            width,
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        queries: Var<'t, S>,
        keys: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, S>> {
        let (qs, ks) = (queries.shape(), keys.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.width || ks[1] != self.width {
            return Err(Error::dim("attention", &qs, &ks));
        }
        let tape = queries.tape();
        let mask = match mask {
            Some(m) if m.rows() != qs[0] || m.cols() != ks[0] => {
                return Err(Error::dim("attention_mask", &[m.rows(), m.cols()], &[qs[0], ks[0]]));
            }
            Some(m) => Some(tape.constant(m.additive())),
            None => None,
        };
        let q = self.q.forward(p, queries)?;
        let k = self.k.forward(p, keys)?;
        let v = self.v.forward(p, keys)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = q.slice(1, a, b)?;
            let kh = k.slice(1, a, b)?;
            let vh = v.slice(1, a, b)?;
            let mut scores = qh.matmul_t(kh)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            heads.push(scores.softmax(1)?.matmul(vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 1)? };
        self.out.forward(p, joined)
    }
}

/// Pre-norm transformer block with a GELU feed-forward of 4× width.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width, rng),
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width, rng),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), width, 4 * width, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * width, width, true, rng),
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        x: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, S>> {
        let n = self.norm1.forward(p, x)?;
        let x = x.add(self.attn.forward(p, n, n, mask)?)?;
        let n = self.norm2.forward(p, x)?;
        let ff = self.ff_out.forward(p, self.ff_in.forward(p, n)?.gelu())?;
        x.add(ff)
    }
}

/// Geometry of the patch grid for an `h × w` image and patch size `patch`.
pub fn patch_grid(h: usize, w: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} does not divide image {h}x{w}"
        )));
    }
    Ok((h / patch, w / patch))
}

/// Flattens an `[H, W, C]` image into `[(H/P)·(W/P), P·P·C]` patch rows,
/// ordered (row-in-patch, col-in-patch, channel).
pub fn patchify<S: Scalar>(image: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let [h, w, c] = image.shape()[..] else {
        return Err(Error::dim("patchify", image.shape(), &[0, 0, 0]));
    };
    let (gh, gw) = patch_grid(h, w, patch)?;
    let row_len = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * row_len);
    for gi in 0..gh {
        for gj in 0..gw {
            for pi in 0..patch {
                let start = ((gi * patch + pi) * w + gj * patch) * c;
                out.extend_from_slice(&image.data()[start..start + patch * c]);
            }
        }
    }
    Tensor::new([gh * gw, row_len], out)
}

/// Trainable patch-embedding encoder producing a [`TokenGrid`].
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub patch: usize,
    pub channels: usize,
    pub grid: (usize, usize),
    pub width: usize,
    pub proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl PatchEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        image: (usize, usize, usize),
        patch: usize,
        width: usize,
        depth: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (h, w, c) = image;
        let grid = patch_grid(h, w, patch)?;
        let proj = Linear::new(store, "encoder.patch", patch * patch * c, width, true, rng);
        let pos = store.init("encoder.pos", &[grid.0 * grid.1, width], Init::Normal(INIT_STD), rng);
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("encoder.block{i}"), width, heads, rng))
            .collect::<Result<_>>()?;
        Ok(PatchEncoder {
            patch,
            channels: c,
            grid,
            width,
            proj,
            pos,
            blocks,
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        tape: &'t Tape<S>,
        image: &Tensor<S>,
    ) -> Result<TokenGrid<'t, S>> {
        let expected = [self.grid.0 * self.patch, self.grid.1 * self.patch, self.channels];
        if image.shape() != expected {
            return Err(Error::dim("patch_encode", image.shape(), &expected));
        }
        let patches = tape.constant(patchify(image, self.patch)?);
        let mut x = self.proj.forward(p, patches)?.add(p.get(self.pos))?;
        for block in &self.blocks {
            x = block.forward(p, x, None)?;
        }
        TokenGrid::new(x, self.grid.0, self.grid.1)
    }
}

/// Mask for `[visual; class]` token sequences: every query sees the visual
/// keys only, so class tokens never exchange information with each other.
pub fn fusion_mask(n_visual: usize, n_class: usize) -> Result<AttentionMask> {
    let n = n_visual + n_class;
    let allowed = (0..n * n).map(|i| i % n < n_visual).collect();
    AttentionMask::from_allowed(n, n, allowed)
}

/// Shallow fusion of visual and class tokens through masked blocks.
#[derive(Clone, Debug)]
pub struct FusionTransformer {
    pub blocks: Vec<TransformerBlock>,
}

impl FusionTransformer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        width: usize,
        layers: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers < 1 {
            return Err(Error::Config("fusion transformer needs at least one layer".into()));
        }
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, &format!("fusion.block{i}"), width, heads, rng))
            .collect::<Result<_>>()?;
        Ok(FusionTransformer { blocks })
    }

    /// Returns the updated grid and class tokens.
    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        x: TokenGrid<'t, S>,
        cls: Var<'t, S>,
    ) -> Result<(TokenGrid<'t, S>, Var<'t, S>)> {
        let n_vis = x.len();
        let n_cls = cls.shape()[0];
        if cls.shape()[1] != x.width() {
            return Err(Error::dim("fusion_transformer", &x.tokens.shape(), &cls.shape()));
        }
        let mask = fusion_mask(n_vis, n_cls)?;
        let mut seq = Var::concat(&[x.tokens, cls], 0)?;
        for block in &self.blocks {
            seq = block.forward(p, seq, Some(&mask))?;
        }
        let vis = seq.slice(0, 0, n_vis)?;
        let cls = seq.slice(0, n_vis, n_vis + n_cls)?;
        Ok((TokenGrid::new(vis, x.h, x.w)?, cls))
    }
}
