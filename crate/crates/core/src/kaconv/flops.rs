use serde::Serialize;

use super::{KaConvConfig, OuterMode};

/// Multiply-accumulate counts of one KA layer, split by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct KaConvFlops {
    /// `H'W'·C·Q·K²` for the SiLU-basis reduction.
    pub inner_base: u64,
    /// `H'W'·C·Q·K²` for the learnable-branch reduction.
    pub inner_learn: u64,
    /// Outer stage: `H'W'·C·Q·C` dense or `H'W'·C·Q` per channel.
    pub outer: u64,
    /// `H'W'·C·C_out` channel mixing.
    pub mix: u64,
    /// Pointwise work: both activations, the product, norm and SiLU.
    pub elementwise: u64,
}

impl KaConvFlops {
    pub fn new(cfg: &KaConvConfig, ho: usize, wo: usize) -> Self {
        let l = (ho * wo) as u64;
        let (c, q, kk, c_out) = (cfg.c_in as u64, cfg.q() as u64, (cfg.kernel * cfg.kernel) as u64, cfg.c_out as u64);
        let inner = l * c * q * kk;
        let outer = match cfg.outer {
            OuterMode::Dense => l * c * q * c,
            OuterMode::PerChannel => l * c * q,
        };
        Self {
            inner_base: inner,
            inner_learn: inner,
            outer,
            mix: l * c * c_out,
            elementwise: 2 * l * c * kk + 3 * l * c * q,
        }
    }

    /// Multiply-accumulates of the matrix stages (what network totals use).
    pub fn macs(&self) -> u64 {
        self.inner_base + self.inner_learn + self.outer + self.mix
    }

    /// [`Self::macs`] plus pointwise work.
    pub fn total(&self) -> u64 {
        self.macs() + self.elementwise
    }

    /// The two leading complexity terms, `H'W'·C·Q·K² + H'W'·C·C_out`.
    pub fn headline(&self) -> u64 {
        self.inner_base + self.mix
    }
}
