//! Parameterised layers bound to graph leaves.

use crate::tensor::{ops, BoundParams, Var};
use crate::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub groups: usize,
    pub pad: usize,
}

impl Conv {
    pub fn bind(p: &BoundParams, name: &str, stride: usize, groups: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get(&format!("{name}.weight"))?.clone(),
            bias: p.get(&format!("{name}.bias"))?.clone(),
            stride,
            groups,
            pad,
        })
    }

    /// Same-size convolution with odd kernel `k` (padding `k / 2`).
    pub fn same(p: &BoundParams, name: &str, k: usize, groups: usize) -> Result<Self> {
        Self::bind(p, name, 1, groups, k / 2)
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        ops::conv2d(x, &self.weight, &self.bias, self.stride, self.groups, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn bind(p: &BoundParams, name: &str, stride: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get(&format!("{name}.weight"))?.clone(),
            bias: p.get(&format!("{name}.bias"))?.clone(),
            stride,
        })
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        ops::conv_transpose2d(x, &self.weight, &self.bias, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn bind(p: &BoundParams, name: &str) -> Result<Self> {
        Ok(Self {
            weight: p.get(&format!("{name}.weight"))?.clone(),
            bias: p.get(&format!("{name}.bias"))?.clone(),
        })
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        ops::linear(x, &self.weight, &self.bias)
    }
}

/// Per-pixel normalisation over the channel axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn bind(p: &BoundParams, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: p.get(&format!("{name}.gamma"))?.clone(),
            beta: p.get(&format!("{name}.beta"))?.clone(),
        })
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        ops::layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}
