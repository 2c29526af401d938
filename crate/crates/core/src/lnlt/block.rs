use super::attention::{self, AttentionRecorder, MsaWeights, Projection};
use crate::nn::{Conv, LayerNorm};
use crate::tensor::params::Initializer;
use crate::tensor::{ops, BoundParams, Var};
use crate::Result;

/// Gated depthwise feed-forward network.
#[derive(Clone, Debug)]
pub struct GdfnWeights {
    pub gate: Projection,
    pub value: Projection,
    pub out: Conv,
}

impl GdfnWeights {
    pub fn bind(p: &BoundParams, name: &str, hidden: usize) -> Result<Self> {
        Ok(Self {
            gate: Projection::bind(p, &format!("{name}.gate"), hidden)?,
            value: Projection::bind(p, &format!("{name}.value"), hidden)?,
            out: Conv::same(p, &format!("{name}.out"), 1, 1)?,
        })
    }
}

pub fn init_gdfn(init: &mut Initializer<'_>, name: &str, c: usize, hidden: usize) {
    for branch in ["gate", "value"] {
        init.conv(&format!("{name}.{branch}.pw"), c, hidden, 1, 1);
        init.conv(&format!("{name}.{branch}.dw"), hidden, hidden, 3, hidden);
    }
    init.conv(&format!("{name}.out"), hidden, c, 1, 1);
}

/// `W_p(GELU(gate(X)) * value(X))`.
pub fn gdfn_core(x: &Var, w: &GdfnWeights) -> Result<Var> {
    let gate = ops::gelu(&w.gate.forward(x)?)?;
    w.out.forward(&ops::mul(&gate, &w.value.forward(x)?)?)
}

/// GDFN with residual.
pub fn gdfn(x: &Var, w: &GdfnWeights) -> Result<Var> {
    ops::add(&gdfn_core(x, w)?, x)
}

/// One local/non-local transformer block.
#[derive(Clone, Debug)]
pub struct LnlbWeights {
    pub norm1: LayerNorm,
    pub local: MsaWeights,
    pub norm2: LayerNorm,
    pub nonlocal: MsaWeights,
    pub norm3: LayerNorm,
    pub ffn: GdfnWeights,
}

impl LnlbWeights {
    pub fn bind(p: &BoundParams, name: &str, c: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::bind(p, &format!("{name}.norm1"))?,
            local: MsaWeights::bind(p, &format!("{name}.local"), c, heads)?,
            norm2: LayerNorm::bind(p, &format!("{name}.norm2"))?,
            nonlocal: MsaWeights::bind(p, &format!("{name}.nonlocal"), c, heads)?,
            norm3: LayerNorm::bind(p, &format!("{name}.norm3"))?,
            ffn: GdfnWeights::bind(p, &format!("{name}.ffn"), hidden)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    pub window: usize,
    pub grid: usize,
}

pub fn init_lnlb(init: &mut Initializer<'_>, name: &str, s: BlockShape) {
    init.layer_norm(&format!("{name}.norm1"), s.channels);
    attention::init_msa(init, &format!("{name}.local"), s.channels, s.heads, s.window * s.window);
    init.layer_norm(&format!("{name}.norm2"), s.channels);
    attention::init_msa(init, &format!("{name}.nonlocal"), s.channels, s.heads, s.grid * s.grid);
    init.layer_norm(&format!("{name}.norm3"), s.channels);
    init_gdfn(init, &format!("{name}.ffn"), s.channels, s.hidden);
}

/// Pre-norm residual block: each sub-layer sees the normalised input and its
/// output is added back onto the un-normalised stream.
pub fn lnlb_forward(
    x: &Var,
    w: &LnlbWeights,
    window: usize,
    grid: usize,
    rec: &AttentionRecorder,
) -> Result<Var> {
    let x = ops::add(x, &attention::local_msa_core(&w.norm1.forward(x)?, &w.local, window, rec)?)?;
    let x = ops::add(&x, &attention::nonlocal_msa_core(&w.norm2.forward(&x)?, &w.nonlocal, grid, rec)?)?;
    ops::add(&x, &gdfn_core(&w.norm3.forward(&x)?, &w.ffn)?)
}
