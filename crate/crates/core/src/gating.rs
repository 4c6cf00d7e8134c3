//! Multi-head cross/self-gating: each token of the gated sequence `T` is
//! scaled by the summed cosine similarity of its query to the keys of `V`.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Attention, AttentionMask, Linear};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const COSINE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GatingLayer {
    pub w_k: Linear,
    pub w_q: Linear,
    pub w_v: Linear,
    pub heads: usize,
    pub width: usize,
    /// Divide each importance by the number of keys it sums over.
    pub normalize: bool,
}

/// Gated output together with the per-head importance vectors `[L]`.
pub struct Gated<'t, S: Scalar> {
    pub out: Var<'t, S>,
    pub importance: Vec<Var<'t, S>>,
}

impl GatingLayer {
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
        Ok(GatingLayer {
            w_k: Linear::new(store, &format!("{name}.k"), width, width, false, rng),
            w_q: Linear::new(store, &format!("{name}.q"), width, width, false, rng),
            w_v: Linear::new(store, &format!("{name}.v"), width, width, false, rng),
            heads,
            width,
            normalize: false,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Gates `t: [L, d]` by importances computed against `v: [K, d]`.
    /// `mask`, when given, is `L × K`; blocked pairs contribute nothing.
    pub fn cross_gate<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        v: Var<'t, S>,
        t: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, S>> {
        Ok(self.forward(p, v, t, mask)?.out)
    }

    pub fn self_gate<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        t: Var<'t, S>,
        mask: &AttentionMask,
    ) -> Result<Var<'t, S>> {
        self.cross_gate(p, t, t, Some(mask))
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        v: Var<'t, S>,
        t: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<Gated<'t, S>> {
        let (vs, ts) = (v.shape(), t.shape());
        if vs.len() != 2 || ts.len() != 2 || vs[1] != self.width || ts[1] != self.width {
            return Err(Error::dim("cross_gate", &vs, &ts));
        }
        let (k, l) = (vs[0], ts[0]);
        if k == 0 || l == 0 {
            return Err(Error::Contract(format!("cross_gate needs non-empty sequences, got K={k}, L={l}")));
        }
        if let Some(m) = mask {
            if m.rows() != l || m.cols() != k {
                return Err(Error::dim("gating_mask", &[m.rows(), m.cols()], &[l, k]));
            }
        }
        let tape = t.tape();
        let keep = mask.map(|m| tape.constant(m.indicator()));
        let norm = if self.normalize {
            let counts: Vec<f64> = (0..l)
                .map(|q| 1.0 / mask.map_or(k, |m| m.allowed_in_row(q)) as f64)
                .collect();
            Some(tape.constant(Tensor::from_f64([l], &counts)?))
        } else {
            None
        };

        let keys = self.w_k.forward(p, v)?;
        let queries = self.w_q.forward(p, t)?;
        let values = self.w_v.forward(p, t)?;
        let dh = self.head_width();
        let mut outs = Vec::with_capacity(self.heads);
        let mut importance = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let kn = keys.slice(1, a, b)?.normalize_rows(COSINE_FLOOR)?;
            let qn = queries.slice(1, a, b)?.normalize_rows(COSINE_FLOOR)?;
            let mut sim = qn.matmul_t(kn)?;
            if let Some(keep) = keep {
                sim = sim.mul(keep)?;
            }
            let mut imp = sim.sum_axis(1)?;
            if let Some(norm) = norm {
                imp = imp.mul(norm)?;
            }
            let gate = imp.reshape([l, 1])?.repeat_axis(1, dh)?;
            outs.push(gate.mul(values.slice(1, a, b)?)?);
            importance.push(imp);
        }
        let out = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 1)? };
        Ok(Gated { out, importance })
    }
}

/// Which mechanism lets one token sequence modulate another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    #[default]
    Gating,
    Attention,
}

/// Gating layer or, for comparison, standard masked multi-head attention.
#[derive(Clone, Debug)]
pub enum TokenMixer {
    Gate(GatingLayer),
    Attend(Attention),
}

impl TokenMixer {
    pub fn new<S: Scalar>(
        kind: MixerKind,
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        normalize: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            MixerKind::Gating => {
                let mut g = GatingLayer::new(store, name, width, heads, rng)?;
                g.normalize = normalize;
                TokenMixer::Gate(g)
            }
            MixerKind::Attention => TokenMixer::Attend(Attention::new(store, name, width, heads, rng)?),
        })
    }

    /// Update for `t` driven by `v`; `mask` is `|t| × |v|`.
    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        v: Var<'t, S>,
        t: Var<'t, S>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, S>> {
        match self {
            TokenMixer::Gate(g) => g.cross_gate(p, v, t, mask),
            TokenMixer::Attend(a) => a.forward(p, t, v, mask),
        }
    }
}
