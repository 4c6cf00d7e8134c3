//! End-to-end segmentation model: encoder, class-token fusion, multi-scale
//! aggregation, upscaler tail, prior-knowledge layer and the two score heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apk::{ApkLayer, ApkMask, ArchOrder, TEETH};
use crate::autodiff::{Tape, Var};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::gating::MixerKind;
use crate::msa::{MsaBlock, SkipSource, UpscaleMode};
use crate::nn::{FusionTransformer, Linear, PatchEncoder, TokenGrid, INIT_STD};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::upscale::{bilinear_upsample, naive_upscale, LinearUpscaler};

/// Foreground/background token count and indices.
pub const FB: usize = 2;
pub const FOREGROUND: usize = 0;
pub const BACKGROUND: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    /// Token width `D`.
    pub width: usize,
    /// Masked fusion layers `M`.
    pub fusion_layers: usize,
    pub msa_blocks: usize,
    pub up_blocks: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub upscale: UpscaleMode,
    pub mixer: MixerKind,
    pub use_msa: bool,
    /// Stage used in place of each MSA block when `use_msa` is off.
    pub bare_stage: UpscaleMode,
    pub use_apk: bool,
    pub normalize_importance: bool,
    pub residual: bool,
    pub skip: SkipSource,
    pub arch_order: String,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            channels: 1,
            patch: 8,
            width: 64,
            fusion_layers: 2,
            msa_blocks: 2,
            up_blocks: 1,
            heads: 4,
            encoder_depth: 4,
            upscale: UpscaleMode::Permute,
            mixer: MixerKind::Gating,
            use_msa: true,
            bare_stage: UpscaleMode::Permute,
            use_apk: true,
            normalize_importance: false,
            residual: true,
            skip: SkipSource::Block,
            arch_order: ArchOrder::default().to_text(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small geometry used by the end-to-end gradient check.
    pub fn tiny() -> Self {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            patch: 4,
            width: 16,
            fusion_layers: 1,
            msa_blocks: 1,
            up_blocks: 1,
            heads: 2,
            encoder_depth: 1,
            ..Default::default()
        }
    }

    pub fn final_width(&self) -> usize {
        match self.upscale {
            UpscaleMode::Permute => self.width >> (2 * self.up_blocks),
            UpscaleMode::Bilinear => self.width,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch.max(1), self.image_w / self.patch.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.image_h == 0 || self.image_w == 0 {
            return fail("image extents must be positive".into());
        }
        let stages = self.msa_blocks + self.up_blocks;
        if stages >= usize::BITS as usize || self.patch != 1 << stages {
            return fail(format!(
                "patch {} must equal 2^(msa_blocks + up_blocks) = 2^{stages}",
                self.patch
            ));
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return fail(format!(
                "patch {} does not divide image {}x{}",
                self.patch, self.image_h, self.image_w
            ));
        }
        if self.fusion_layers < 1 {
            return fail("fusion_layers must be at least 1".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("{} heads do not divide width {}", self.heads, self.width));
        }
        if self.upscale == UpscaleMode::Permute {
            let div = 1usize << (2 * self.up_blocks);
            if self.width % div != 0 {
                return fail(format!("width {} not divisible by 4^up_blocks = {div}", self.width));
            }
            if self.msa_blocks > 0 && self.width % 4 != 0 {
                return fail(format!("width {} not divisible by 4", self.width));
            }
        }
        let d = self.final_width();
        if self.use_apk && d % self.heads != 0 {
            return fail(format!("{} heads do not divide final width {d}", self.heads));
        }
        ArchOrder::parse(&self.arch_order)?;
        Ok(())
    }
}

/// One resolution-doubling stage between the fusion transformer and the tail.
#[derive(Clone, Debug)]
enum Stage {
    Msa(MsaBlock),
    Linear(LinearUpscaler),
    Bilinear,
}

#[derive(Clone, Debug)]
pub struct TeethSeg<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub encoder: PatchEncoder,
    pub cls_fb: ParamId,
    pub cls_th: ParamId,
    pub fusion: FusionTransformer,
    stages: Vec<Stage>,
    pub w_cls: Linear,
    pub apk: Option<ApkLayer>,
    pub apk_mask: ApkMask,
}

/// Pre-softmax score heads. Rows are pixels in row-major order.
pub struct Scores<'t, S: Scalar> {
    pub logits_th: Var<'t, S>,
    pub logits_fb: Var<'t, S>,
}

pub struct Losses<'t, S: Scalar> {
    pub th: Var<'t, S>,
    pub fb: Var<'t, S>,
    pub total: Var<'t, S>,
}

impl<S: Scalar> TeethSeg<S> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = cfg.width;
        let encoder = PatchEncoder::new(
            s,
            (cfg.image_h, cfg.image_w, cfg.channels),
            cfg.patch,
            d,
            cfg.encoder_depth,
            cfg.heads,
            rng,
        )?;
        let cls_fb = s.init("cls_fb", &[FB, d], Init::Normal(INIT_STD), rng);
        let cls_th = s.init("cls_th", &[TEETH, d], Init::Normal(INIT_STD), rng);
        let fusion = FusionTransformer::new(s, d, cfg.fusion_layers, cfg.heads, rng)?;
        let mut stages = Vec::with_capacity(cfg.msa_blocks);
        for k in 0..cfg.msa_blocks {
            let name = format!("msa{k}");
            let mode = if cfg.use_msa { cfg.upscale } else { cfg.bare_stage };
            stages.push(match (cfg.use_msa, mode) {
                (true, mode) => Stage::Msa(MsaBlock::new(
                    s,
                    &name,
                    cfg.mixer,
                    mode,
                    d,
                    cfg.heads,
                    cfg.normalize_importance,
                    cfg.residual,
                    rng,
                )?),
                (false, UpscaleMode::Permute) => Stage::Linear(LinearUpscaler::new(s, &name, d, rng)?),
                (false, UpscaleMode::Bilinear) => Stage::Bilinear,
            });
        }
        let d_final = cfg.final_width();
        let w_cls = Linear::new(s, "w_cls", d, d_final, false, rng);
        let apk_mask = ApkMask::build(&ArchOrder::parse(&cfg.arch_order)?);
        let apk = if cfg.use_apk {
            Some(ApkLayer::new(
                s,
                cfg.mixer,
                d_final,
                cfg.heads,
                &apk_mask,
                cfg.normalize_importance,
                cfg.residual,
                rng,
            )?)
        } else {
            None
        };
        Ok(TeethSeg {
            cfg,
            store,
            encoder,
            cls_fb,
            cls_th,
            fusion,
            stages,
            w_cls,
            apk,
            apk_mask,
        })
    }

    /// Rebuilds the model for `cfg` and copies in the given parameter values.
    pub fn with_params(cfg: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        if params.names() != m.store.names() {
            return Err(Error::Config("parameter names do not match the model configuration".into()));
        }
        for (dst, src) in m.store.tensors_mut().iter_mut().zip(params.tensors()) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "parameter shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(m)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.cfg.image_h, self.cfg.image_w, self.cfg.channels]
    }

    /// Class tokens entering the fusion transformer: `[cls_fb; cls_th + cls_fb[fg]]`.
    pub fn class_tokens_in<'t>(&self, p: &Bound<'t, S>) -> Result<Var<'t, S>> {
        let fb = p.get(self.cls_fb);
        let fg = fb.slice(0, FOREGROUND, FOREGROUND + 1)?.repeat_axis(0, TEETH)?;
        let th = p.get(self.cls_th).add(fg)?;
        Var::concat(&[fb, th], 0)
    }

    pub fn forward<'t>(&self, p: &Bound<'t, S>, tape: &'t Tape<S>, image: &Tensor<S>) -> Result<Scores<'t, S>> {
        let grid = self.encoder.forward(p, tape, image)?;
        let cls = self.class_tokens_in(p)?;
        let (mut x, mut cls) = self.fusion.forward(p, grid, cls)?;
        let first = x;
        for stage in &self.stages {
            x = match stage {
                Stage::Msa(block) => {
                    let skip = match self.cfg.skip {
                        SkipSource::Block => x,
                        SkipSource::First => first,
                    };
                    let (nx, ncls) = block.forward(p, x, cls, skip)?;
                    cls = ncls;
                    nx
                }
                Stage::Linear(up) => up.forward(p, x)?,
                Stage::Bilinear => bilinear_upsample(x, 2 * x.h, 2 * x.w)?,
            };
        }
        for _ in 0..self.cfg.up_blocks {
            x = match self.cfg.upscale {
                UpscaleMode::Permute => naive_upscale(x)?,
                UpscaleMode::Bilinear => bilinear_upsample(x, 2 * x.h, 2 * x.w)?,
            };
        }
        let cls = self.w_cls.forward(p, cls)?;
        let fb = cls.slice(0, 0, FB)?;
        let mut th = cls.slice(0, FB, FB + TEETH)?;
        if let Some(apk) = &self.apk {
            th = apk.forward(p, fb, th)?;
        }
        heads(x, fb, th)
    }

    /// Forward pass on an inference tape returning `(score_th, score_fb)` probabilities.
    pub fn score_maps(&self, image: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let tape = Tape::inference();
        let p = self.store.bind(&tape);
        let s = self.forward(&p, &tape, image)?;
        Ok((
            s.logits_th.softmax(1)?.value().as_ref().clone(),
            s.logits_fb.softmax(1)?.value().as_ref().clone(),
        ))
    }

    pub fn predict(&self, image: &Tensor<S>) -> Result<LabelMap> {
        let (th, fb) = self.score_maps(image)?;
        predict(&th, &fb, self.cfg.image_h, self.cfg.image_w)
    }
}

/// `softmax(x·clsᵀ / √d)` logits for both heads.
fn heads<'t, S: Scalar>(x: TokenGrid<'t, S>, fb: Var<'t, S>, th: Var<'t, S>) -> Result<Scores<'t, S>> {
    let scale = 1.0 / (x.width() as f64).sqrt();
    Ok(Scores {
        logits_th: x.tokens.matmul_t(th)?.scale(scale),
        logits_fb: x.tokens.matmul_t(fb)?.scale(scale),
    })
}

/// Per-pixel targets: one row per pixel, weights summing to the pixel's
/// share of the loss.
pub fn loss_targets<S: Scalar>(labels: &LabelMap, th_over_all_pixels: bool) -> Result<(Tensor<S>, Tensor<S>)> {
    let n = labels.len();
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize > TEETH) {
        return Err(Error::Data(format!("label {bad} outside 0..={TEETH}")));
    }
    let n_fg = labels.data().iter().filter(|&&l| l > 0).count();
    let mut fb = vec![S::zero(); n * FB];
    let mut th = vec![S::zero(); n * TEETH];
    let inv_n = S::of(1.0 / n as f64);
    let th_fg_weight = if th_over_all_pixels {
        inv_n
    } else if n_fg > 0 {
        S::of(1.0 / n_fg as f64)
    } else {
        S::zero()
    };
    let uniform = S::of(1.0 / (n as f64 * TEETH as f64));
    for (i, &l) in labels.data().iter().enumerate() {
        if l == 0 {
            fb[i * FB + BACKGROUND] = inv_n;
            if th_over_all_pixels {
                th[i * TEETH..(i + 1) * TEETH].fill(uniform);
            }
        } else {
            fb[i * FB + FOREGROUND] = inv_n;
            th[i * TEETH + l as usize - 1] = th_fg_weight;
        }
    }
    Ok((Tensor::new([n, TEETH], th)?, Tensor::new([n, FB], fb)?))
}

/// Cross-entropy losses. Tooth loss averages over foreground pixels unless
/// `th_over_all_pixels`, where background pixels target the uniform
/// distribution and the mean runs over every pixel.
pub fn loss<'t, S: Scalar>(scores: &Scores<'t, S>, labels: &LabelMap, th_over_all_pixels: bool) -> Result<Losses<'t, S>> {
    let rows = scores.logits_th.shape()[0];
    if rows != labels.len() {
        return Err(Error::dim("loss", &[rows], &[labels.len()]));
    }
    let tape = scores.logits_th.tape();
    let (t_th, t_fb) = loss_targets(labels, th_over_all_pixels)?;
    let th = scores.logits_th.log_softmax(1)?.mul(tape.constant(t_th))?.sum().scale(-1.0);
    let fb = scores.logits_fb.log_softmax(1)?.mul(tape.constant(t_fb))?.sum().scale(-1.0);
    Ok(Losses { th, fb, total: th.add(fb)? })
}

/// Background where the fb head prefers background, otherwise `1 + argmax`
/// of the tooth head. Ties go to the lower index.
pub fn predict<S: Scalar>(score_th: &Tensor<S>, score_fb: &Tensor<S>, h: usize, w: usize) -> Result<LabelMap> {
    let n = h * w;
    if score_th.shape() != [n, TEETH] || score_fb.shape() != [n, FB] {
        return Err(Error::dim("predict", score_th.shape(), score_fb.shape()));
    }
    let argmax = |row: &[S]| {
        row.iter()
            .enumerate()
            .fold(0, |best, (k, &v)| if v > row[best] { k } else { best })
    };
    let labels = (0..n)
        .map(|i| {
            if argmax(score_fb.row(i)) == BACKGROUND {
                0
            } else {
                1 + argmax(score_th.row(i)) as u8
            }
        })
        .collect();
    LabelMap::new(h, w, labels)
}
