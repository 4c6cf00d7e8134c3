//! Prior-knowledge layer over the 16 tooth tokens: foreground emphasis, then
//! self-gating restricted to adjacent and contralateral teeth.
//!
//! Tooth indices are 0-based (`0` is T1, `15` is T16).

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gating::{MixerKind, TokenMixer};
use crate::nn::AttentionMask;
use crate::params::{Bound, ParamStore};
use crate::tensor::Scalar;

pub const TEETH: usize = 16;

/// Linear arrangement of the teeth along the arch plus the mirror pairing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchOrder {
    /// Tooth indices from one end of the arch to the other.
    pub sequence: [usize; TEETH],
    /// `contralateral[i]` is the mirror tooth of `i`.
    pub contralateral: [usize; TEETH],
}

impl Default for ArchOrder {
    /// `T8 … T1 | T9 … T16` with `Ti ↔ Ti+8`.
    fn default() -> Self {
        let mut sequence = [0; TEETH];
        for (p, s) in sequence.iter_mut().enumerate() {
            *s = if p < 8 { 7 - p } else { p };
        }
        let contralateral = std::array::from_fn(|i| (i + 8) % TEETH);
        ArchOrder { sequence, contralateral }
    }
}

impl ArchOrder {
    pub fn new(sequence: [usize; TEETH], contralateral: [usize; TEETH]) -> Result<Self> {
        let mut seen = [false; TEETH];
        for &t in &sequence {
            if t >= TEETH || std::mem::replace(&mut seen[t], true) {
                return Err(Error::Config(format!("arch sequence is not a permutation: {sequence:?}")));
            }
        }
        for (i, &c) in contralateral.iter().enumerate() {
            if c >= TEETH || contralateral[c] != i || c == i {
                return Err(Error::Config(format!("contralateral pairing is not a mirror involution at T{}", i + 1)));
            }
        }
        Ok(ArchOrder { sequence, contralateral })
    }

    /// Parses comma-separated tooth names (`T8,T7,…`) with the `Ti ↔ Ti+8` pairing.
    pub fn parse(text: &str) -> Result<Self> {
        let names: Vec<&str> = text.split(',').map(str::trim).collect();
        if names.len() != TEETH {
            return Err(Error::Config(format!("arch order needs {TEETH} teeth, got {}", names.len())));
        }
        let mut sequence = [0; TEETH];
        for (slot, name) in sequence.iter_mut().zip(&names) {
            let n: usize = name
                .strip_prefix(['T', 't'])
                .and_then(|n| n.parse().ok())
                .filter(|n| (1..=TEETH).contains(n))
                .ok_or_else(|| Error::Config(format!("bad tooth name {name:?}")))?;
            *slot = n - 1;
        }
        Self::new(sequence, ArchOrder::default().contralateral)
    }

    pub fn position(&self, tooth: usize) -> usize {
        self.sequence.iter().position(|&t| t == tooth).expect("permutation")
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.position(a).abs_diff(self.position(b)) == 1
    }

    pub fn to_text(&self) -> String {
        self.sequence.iter().map(|t| format!("T{}", t + 1)).collect::<Vec<_>>().join(",")
    }
}

/// Which tooth pairs may interact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApkMask {
    allowed: [[bool; TEETH]; TEETH],
}

impl ApkMask {
    pub fn build(order: &ArchOrder) -> Self {
        let allowed = std::array::from_fn(|i| {
            std::array::from_fn(|j| i == j || order.adjacent(i, j) || order.contralateral[i] == j)
        });
        ApkMask { allowed }
    }

    pub fn diagonal() -> Self {
        ApkMask {
            allowed: std::array::from_fn(|i| std::array::from_fn(|j| i == j)),
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i][j]
    }

    pub fn attention_mask(&self) -> AttentionMask {
        let flat = self.allowed.iter().flatten().copied().collect();
        AttentionMask::from_allowed(TEETH, TEETH, flat).expect("diagonal is always allowed")
    }

    /// 16 lines of space-separated `0`/`1`, rows and columns in T1…T16 order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.allowed {
            let line: Vec<&str> = row.iter().map(|&a| if a { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ApkLayer {
    pub cross: TokenMixer,
    pub within: TokenMixer,
    pub mask: AttentionMask,
    pub residual: bool,
}

impl ApkLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        kind: MixerKind,
        width: usize,
        heads: usize,
        mask: &ApkMask,
        normalize: bool,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ApkLayer {
            cross: TokenMixer::new(kind, store, "apk.cross", width, heads, normalize, rng)?,
            within: TokenMixer::new(kind, store, "apk.self", width, heads, normalize, rng)?,
            mask: mask.attention_mask(),
            residual,
        })
    }

    /// Returns the updated tooth tokens `[16, d]`.
    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        cls_fb: Var<'t, S>,
        cls_th: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        if cls_th.shape()[0] != TEETH {
            return Err(Error::dim("apk", &cls_th.shape(), &[TEETH, 0]));
        }
        let step = |base: Var<'t, S>, update: Var<'t, S>| if self.residual { base.add(update) } else { Ok(update) };
        let th = step(cls_th, self.cross.forward(p, cls_fb, cls_th, None)?)?;
        step(th, self.within.forward(p, th, th, Some(&self.mask))?)
    }
}
