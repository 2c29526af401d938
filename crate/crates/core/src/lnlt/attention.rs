//! Local and non-local multi-head self-attention.
//!
//! Both variants project along channels (1x1 conv, then 3x3 depthwise conv)
//! and differ only in how tokens are formed. The local variant treats every
//! pixel of an `M x M` window as a token and attends within the window. The
//! non-local variant cuts the image into an `N x N` grid of windows and
//! treats each whole window as a token, so its attention map is always
//! `N^2 x N^2` regardless of image size. Heads split the channel axis in
//! both cases: a non-local token for head `i` is the window's pixels over
//! channels `[i C/h, (i+1) C/h)`.

use std::cell::RefCell;

use crate::nn::Conv;
use crate::tensor::params::Initializer;
use crate::tensor::{ops, BoundParams, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Projection {
    pub pointwise: Conv,
    pub depthwise: Conv,
}

impl Projection {
    pub fn bind(p: &BoundParams, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            pointwise: Conv::same(p, &format!("{name}.pw"), 1, 1)?,
            depthwise: Conv::same(p, &format!("{name}.dw"), 3, channels)?,
        })
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        self.depthwise.forward(&self.pointwise.forward(x)?)
    }
}

pub fn init_projection(init: &mut Initializer<'_>, name: &str, c: usize) {
    init.conv(&format!("{name}.pw"), c, c, 1, 1);
    init.conv(&format!("{name}.dw"), c, c, 3, c);
}

/// Weights of one attention module.
#[derive(Clone, Debug)]
pub struct MsaWeights {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    /// Output projection `W_p`.
    pub proj: Conv,
    /// Learnable position bias `[heads, T, T]`.
    pub pos: Var,
    pub heads: usize,
}

impl MsaWeights {
    pub fn bind(p: &BoundParams, name: &str, channels: usize, heads: usize) -> Result<Self> {
        let pos = p.get(&format!("{name}.pos"))?.clone();
        if pos.shape().len() != 3 || pos.shape()[0] != heads {
            return Err(Error::shape(format!(
                "{name}.pos must be [heads={heads}, T, T], got {:?}",
                pos.shape()
            )));
        }
        Ok(Self {
            q: Projection::bind(p, &format!("{name}.q"), channels)?,
            k: Projection::bind(p, &format!("{name}.k"), channels)?,
            v: Projection::bind(p, &format!("{name}.v"), channels)?,
            proj: Conv::same(p, &format!("{name}.proj"), 1, 1)?,
            pos,
            heads,
        })
    }

    /// Side of the square position-bias matrix.
    pub fn tokens(&self) -> usize {
        self.pos.shape()[1]
    }
}

pub fn init_msa(init: &mut Initializer<'_>, name: &str, c: usize, heads: usize, tokens: usize) {
    for x in ["q", "k", "v"] {
        init_projection(init, &format!("{name}.{x}"), c);
    }
    init.conv(&format!("{name}.proj"), c, c, 1, 1);
    init.constant(&format!("{name}.pos"), &[heads, tokens, tokens], 0.0);
}

/// Collects post-softmax attention maps when enabled.
#[derive(Debug, Default)]
pub struct AttentionRecorder {
    enabled: bool,
    maps: RefCell<Vec<(String, Tensor)>>,
}

impl AttentionRecorder {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            maps: RefCell::default(),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub(crate) fn record(&self, label: impl FnOnce() -> String, map: &Var) {
        if self.enabled {
            self.maps.borrow_mut().push((label(), map.value().clone()));
        }
    }

    pub fn take(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.maps.borrow_mut())
    }
}

pub fn qkv_project(x: &Var, w: &MsaWeights) -> Result<(Var, Var, Var)> {
    Ok((w.q.forward(x)?, w.k.forward(x)?, w.v.forward(x)?))
}

fn dims(x: &Var, heads: usize, grid: usize, what: &str) -> Result<(usize, usize, usize, usize)> {
    let (h, w, c) = x.value().dims3()?;
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::InvalidConfig(format!(
            "{what}: {h}x{w} is not divisible by {grid}"
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "{what}: {c} channels not divisible by {heads} heads"
        )));
    }
    Ok((h, w, c, c / heads))
}

/// `softmax(Q K^T / sqrt(d) + P) V` over `M x M` pixel windows. Inputs and
/// output are `[H, W, C]`; `pos` is `[heads, M^2, M^2]`.
pub fn local_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    window: usize,
    heads: usize,
    pos: &Var,
    rec: &AttentionRecorder,
) -> Result<Var> {
    let (h, w, c, d) = dims(q, heads, window, "local attention")?;
    let t = window * window;
    pos.value().expect_shape(&[heads, t, t], "local position bias")?;
    let (nh, nw) = (h / window, w / window);
    let split = [nh, window, nw, window, heads, d];
    let tokens = |x: &Var| -> Result<Var> {
        let x = ops::reshape(x, &split)?;
        let x = ops::permute(&x, &[0, 2, 4, 1, 3, 5])?;
        ops::reshape(&x, &[nh * nw * heads, t, d])
    };
    let (qt, kt, vt) = (tokens(q)?, tokens(k)?, tokens(v)?);
    let scores = ops::scale(&ops::bmm(&qt, &kt, true)?, 1.0 / (d as f64).sqrt())?;
    let attn = ops::softmax_lastdim(&ops::add_tiled(&scores, pos)?)?;
    rec.record(|| format!("local {h}x{w}x{c} M={window}"), &attn);
    let out = ops::bmm(&attn, &vt, false)?;
    let out = ops::reshape(&out, &[nh, nw, heads, window, window, d])?;
    let out = ops::permute(&out, &[0, 3, 1, 4, 2, 5])?;
    ops::reshape(&out, &[h, w, c])
}

/// `softmax(Q K^T / sqrt(d) + P) V` with each of the `N x N` windows as one
/// token of dimension `(H/N)(W/N)(C/heads)`; `pos` is `[heads, N^2, N^2]`.
pub fn nonlocal_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    grid: usize,
    heads: usize,
    pos: &Var,
    rec: &AttentionRecorder,
) -> Result<Var> {
    let (h, w, c, d) = dims(q, heads, grid, "non-local attention")?;
    let t = grid * grid;
    pos.value().expect_shape(&[heads, t, t], "non-local position bias")?;
    let (wh, ww) = (h / grid, w / grid);
    let token_dim = wh * ww * d;
    let tokens = |x: &Var| -> Result<Var> {
        let x = ops::reshape(x, &[grid, wh, grid, ww, heads, d])?;
        let x = ops::permute(&x, &[4, 0, 2, 1, 3, 5])?;
        ops::reshape(&x, &[heads, t, token_dim])
    };
    let (qt, kt, vt) = (tokens(q)?, tokens(k)?, tokens(v)?);
    let scores = ops::scale(&ops::bmm(&qt, &kt, true)?, 1.0 / (token_dim as f64).sqrt())?;
    let attn = ops::softmax_lastdim(&ops::add_tiled(&scores, pos)?)?;
    rec.record(|| format!("nonlocal {h}x{w}x{c} N={grid}"), &attn);
    let out = ops::bmm(&attn, &vt, false)?;
    let out = ops::reshape(&out, &[heads, grid, grid, wh, ww, d])?;
    let out = ops::permute(&out, &[1, 3, 2, 4, 0, 5])?;
    ops::reshape(&out, &[h, w, c])
}

/// `W_p concat(heads)` without the residual.
pub fn local_msa_core(x: &Var, w: &MsaWeights, window: usize, rec: &AttentionRecorder) -> Result<Var> {
    let (q, k, v) = qkv_project(x, w)?;
    w.proj.forward(&local_attention(&q, &k, &v, window, w.heads, &w.pos, rec)?)
}

pub fn nonlocal_msa_core(x: &Var, w: &MsaWeights, grid: usize, rec: &AttentionRecorder) -> Result<Var> {
    let (q, k, v) = qkv_project(x, w)?;
    w.proj.forward(&nonlocal_attention(&q, &k, &v, grid, w.heads, &w.pos, rec)?)
}

/// Local MSA with its residual: `W_p concat(heads) + X`.
pub fn local_msa(x: &Var, w: &MsaWeights, window: usize) -> Result<Var> {
    ops::add(&local_msa_core(x, w, window, &AttentionRecorder::disabled())?, x)
}

/// Non-local MSA with its residual: `W_p concat(heads) + X`.
pub fn nonlocal_msa(x: &Var, w: &MsaWeights, grid: usize) -> Result<Var> {
    ops::add(&nonlocal_msa_core(x, w, grid, &AttentionRecorder::disabled())?, x)
}
