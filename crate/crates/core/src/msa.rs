//! Multi-scale aggregation: class tokens gather from the current grid, then
//! the grid doubles in resolution with a bilinear skip path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::Result;
use crate::gating::{MixerKind, TokenMixer};
use crate::nn::TokenGrid;
use crate::params::{Bound, ParamStore};
use crate::tensor::Scalar;
use crate::upscale::{bilinear_upsample, LinearUpscaler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpscaleMode {
    /// Channel-to-space permutation (with a learned projection inside MSA blocks).
    #[default]
    Permute,
    Bilinear,
}

/// Where each block's skip connection comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipSource {
    /// The block's own input grid.
    #[default]
    Block,
    /// The grid entering the first block.
    First,
}

#[derive(Clone, Debug)]
pub struct MsaBlock {
    pub mixer: TokenMixer,
    pub upscaler: Option<LinearUpscaler>,
    pub residual: bool,
}

impl MsaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        kind: MixerKind,
        mode: UpscaleMode,
        width: usize,
        heads: usize,
        normalize: bool,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mixer = TokenMixer::new(kind, store, &format!("{name}.gate"), width, heads, normalize, rng)?;
        let upscaler = match mode {
            UpscaleMode::Permute => Some(LinearUpscaler::new(store, &format!("{name}.up"), width, rng)?),
            UpscaleMode::Bilinear => None,
        };
        Ok(MsaBlock { mixer, upscaler, residual })
    }

    /// `skip` is the grid the bilinear skip path upsamples.
    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        x: TokenGrid<'t, S>,
        cls: Var<'t, S>,
        skip: TokenGrid<'t, S>,
    ) -> Result<(TokenGrid<'t, S>, Var<'t, S>)> {
        let update = self.mixer.forward(p, x.tokens, cls, None)?;
        let cls = if self.residual { cls.add(update)? } else { update };
        let (h2, w2) = (2 * x.h, 2 * x.w);
        let main = match &self.upscaler {
            Some(up) => up.forward(p, x)?,
            None => bilinear_upsample(x, h2, w2)?,
        };
        let side = bilinear_upsample(skip, h2, w2)?;
        let tokens = main.tokens.add(side.tokens)?;
        Ok((TokenGrid::new(tokens, h2, w2)?, cls))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gate_keeps_class_tokens_and_doubles_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let block = MsaBlock::new(&mut store, "m", MixerKind::Gating, UpscaleMode::Permute, 8, 2, false, true, &mut rng).unwrap();
        let TokenMixer::Gate(g) = &block.mixer else { unreachable!() };
        store.get_mut(g.w_v.weight).data_mut().fill(0.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = TokenGrid::new(tape.constant(Tensor::from_f64([6, 8], &[0.25; 48]).unwrap()), 2, 3).unwrap();
        let cls_t = Tensor::from_f64([3, 8], &(0..24).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let cls = tape.constant(cls_t.clone());
        let (y, c) = block.forward(&p, x, cls, x).unwrap();
        assert_eq!((y.h, y.w, y.width()), (4, 6, 8));
        assert_eq!(c.value().data(), cls_t.data());
    }
}
