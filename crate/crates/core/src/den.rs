//! Degradation estimation network.
//!
//! Each stage predicts a residual `Phi^R` between the calibrated sensing
//! operator and the operator that actually degraded the measurement, plus the
//! stage penalty `mu` and the denoiser conditioning `eta`:
//!
//! ```text
//! [shift(z_prev) | Phi]  --1x1-->  DLCB x depth  --1x1-->  Phi^R (masked to dispersion support)
//! Phi_hat = clamp(Phi + Phi^R, 0, PHI_HAT_MAX)
//! (mu, eta) = softplus(MLP(GAP(Phi^R)))
//! ```
//!
//! The same `Phi^R` node feeds both the corrected operator and the pooling
//! head. Because `Phi^R` is zero outside each band's dispersion window,
//! `Phi_hat Phi_hat^T` stays diagonal and the closed-form data step remains
//! exact for the corrected operator.

use crate::cassi::{self, HsiCube, SensingOperator};
use crate::nn::{Conv, Linear};
use crate::rng::Rng;
use crate::tensor::params::Initializer;
use crate::tensor::{ops, BoundParams, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Upper clamp on corrected transmittance.
pub const PHI_HAT_MAX: f64 = 1.5;
/// Floor on `mu` and `eta`; softplus underflows to 0 for inputs below about -745.
pub const POSITIVE_FLOOR: f64 = 1e-12;

pub const PREFIX: &str = "den";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenConfig {
    pub bands: usize,
    /// Number of DLCBs.
    pub depth: usize,
    /// Channel width inside the DLCB stack.
    pub width: usize,
}

impl DenConfig {
    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            depth: 3,
            width: 2 * bands,
        }
    }

    /// Recovers depth and width from a parameter set written by
    /// [`DenConfig::init_params`].
    pub fn from_params(p: &ParamStore) -> Result<Self> {
        let entry = p.get(&format!("{PREFIX}.entry.weight"))?.shape().to_vec();
        if entry.len() != 4 || entry[3] % 2 != 0 {
            return Err(Error::shape(format!("{PREFIX}.entry.weight has shape {entry:?}")));
        }
        let cfg = Self {
            bands: entry[3] / 2,
            depth: (0..).take_while(|i| p.contains(&format!("{PREFIX}.dlcb{i}.conv1.weight"))).count(),
            width: entry[0],
        };
        let mut expect = ParamStore::new();
        cfg.init_params(&mut expect, &mut crate::rng::stream(0, crate::rng::Stream::Params));
        for (name, t) in expect.iter() {
            let got = p.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape(format!("`{name}` is {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(cfg)
    }

    /// Adds freshly initialised DEN parameters to `store`.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let mut init = Initializer { store, rng };
        let (b, c) = (self.bands, self.width);
        init.conv(&format!("{PREFIX}.entry"), 2 * b, c, 1, 1);
        for i in 0..self.depth {
            init.conv(&format!("{PREFIX}.dlcb{i}.conv1"), c, c, 3, 1);
            init.conv(&format!("{PREFIX}.dlcb{i}.conv2"), c, c, 3, 1);
        }
        init.conv(&format!("{PREFIX}.exit"), c, b, 1, 1);
        init.linear(&format!("{PREFIX}.mlp.fc1"), b, b);
        init.linear(&format!("{PREFIX}.mlp.fc2"), b, 2);
    }
}

/// Degradation learning convolution block: `x + conv2(relu(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct Dlcb {
    pub conv1: Conv,
    pub conv2: Conv,
}

#[derive(Clone, Debug)]
pub struct DenWeights {
    pub entry: Conv,
    pub blocks: Vec<Dlcb>,
    pub exit: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DenWeights {
    pub fn bind(p: &BoundParams, cfg: &DenConfig) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| {
                Ok(Dlcb {
                    conv1: Conv::same(p, &format!("{PREFIX}.dlcb{i}.conv1"), 3, 1)?,
                    conv2: Conv::same(p, &format!("{PREFIX}.dlcb{i}.conv2"), 3, 1)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            entry: Conv::same(p, &format!("{PREFIX}.entry"), 1, 1)?,
            blocks,
            exit: Conv::same(p, &format!("{PREFIX}.exit"), 1, 1)?,
            fc1: Linear::bind(p, &format!("{PREFIX}.mlp.fc1"))?,
            fc2: Linear::bind(p, &format!("{PREFIX}.mlp.fc2"))?,
        })
    }
}

pub fn dlcb_forward(input: &Var, block: &Dlcb) -> Result<Var> {
    let hidden = ops::relu(&block.conv1.forward(input)?)?;
    ops::add(input, &block.conv2.forward(&hidden)?)
}

/// Global average pooling over positions, then `fc2(gelu(fc1(.)))` and
/// softplus, floored at [`POSITIVE_FLOOR`]. Returns one-element `(mu, eta)`.
pub fn gap_mlp(residual: &Var, fc1: &Linear, fc2: &Linear) -> Result<(Var, Var)> {
    let pooled = ops::mean_over_positions(residual)?;
    let hidden = ops::gelu(&fc1.forward(&pooled)?)?;
    let out = ops::clamp(&ops::softplus(&fc2.forward(&hidden)?)?, POSITIVE_FLOOR, f64::INFINITY)?;
    Ok((ops::select(&out, 0)?, ops::select(&out, 1)?))
}

/// Graph-level DEN output for one stage.
#[derive(Clone, Debug)]
pub struct DenOutput {
    /// `Phi^R`, `[H, W', B]`.
    pub phi_residual: Var,
    /// Corrected shifted mask `Phi_hat`, `[H, W', B]`.
    pub phi_hat: Var,
    pub mu: Var,
    pub eta: Var,
}

/// Value-level view of a [`DenOutput`].
#[derive(Clone, Debug)]
pub struct DegradationEstimate {
    pub phi_residual: Tensor,
    pub phi_hat: SensingOperator,
    pub mu: f64,
    pub eta: f64,
}

impl DenOutput {
    pub fn estimate(&self, step: usize) -> Result<DegradationEstimate> {
        Ok(DegradationEstimate {
            phi_residual: self.phi_residual.value().clone(),
            phi_hat: SensingOperator::from_shifted(self.phi_hat.value().clone(), step)?,
            mu: self.mu.value().item(),
            eta: self.eta.value().item(),
        })
    }
}

pub fn den_forward(z_prev: &Var, phi: &SensingOperator, w: &DenWeights) -> Result<DenOutput> {
    z_prev
        .value()
        .expect_shape(&[phi.height(), phi.width(), phi.bands()], "DEN input vs operator")?;
    let mask = Var::constant(phi.shifted_mask().clone());
    let aligned = cassi::shift_var(z_prev, phi.step())?;
    let mut feat = w.entry.forward(&ops::concat_last(&aligned, &mask)?)?;
    for block in &w.blocks {
        feat = dlcb_forward(&feat, block)?;
    }
    let support = Var::constant(phi.support());
    let phi_residual = ops::mul(&w.exit.forward(&feat)?, &support)?;
    let phi_hat = ops::clamp(&ops::add(&mask, &phi_residual)?, 0.0, PHI_HAT_MAX)?;

    let probe = SensingOperator::from_shifted(phi_hat.value().clone(), phi.step());
    if let Err(e) = probe {
        return Err(Error::InvalidOperator(format!("DEN broke the dispersion structure: {e}")));
    }

    let (mu, eta) = gap_mlp(&phi_residual, &w.fc1, &w.fc2)?;
    for (name, v) in [("mu", &mu), ("eta", &eta)] {
        if !(v.value().item() > 0.0) {
            return Err(Error::Degenerate(format!("DEN produced non-positive {name}")));
        }
    }
    Ok(DenOutput {
        phi_residual,
        phi_hat,
        mu,
        eta,
    })
}

/// Convenience wrapper on plain values.
pub fn estimate(z_prev: &HsiCube, phi: &SensingOperator, params: &ParamStore, cfg: &DenConfig) -> Result<DegradationEstimate> {
    let bound = params.bind(false);
    let w = DenWeights::bind(&bound, cfg)?;
    den_forward(&Var::constant(z_prev.tensor().clone()), phi, &w)?.estimate(phi.step())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cassi::Mask2D;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    fn setup(h: usize, w: usize, b: usize, seed: u64) -> (ParamStore, DenConfig, SensingOperator, HsiCube) {
        let cfg = DenConfig::new(b);
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut stream(seed, Stream::Params));
        let op = SensingOperator::from_mask(&Mask2D::random_binary(h, w, seed).unwrap(), b, 2).unwrap();
        let mut rng = stream(seed, Stream::Test);
        let z = HsiCube::new(Tensor::from_fn(&[h, w, b], |_| rng.random_range(0.0..1.0))).unwrap();
        (store, cfg, op, z)
    }

    #[test]
    fn zero_exit_conv_gives_calibrated_operator() {
        let (mut store, cfg, op, z) = setup(6, 7, 3, 1);
        for name in ["den.exit.weight", "den.exit.bias"] {
            let t = store.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        store.insert("den.mlp.fc2.bias", Tensor::new(vec![2], vec![0.3, -1.0]).unwrap());
        let est = estimate(&z, &op, &store, &cfg).unwrap();
        assert_eq!(est.phi_hat, op);
        assert_eq!(est.phi_residual.max_abs(), 0.0);
        // GAP of a zero residual is zero, so fc1 gives its (zero) bias and
        // GELU(0) = 0; only fc2's bias survives.
        assert!((est.mu - crate::tensor::kernels::softplus(0.3)).abs() < 1e-15);
        assert!((est.eta - crate::tensor::kernels::softplus(-1.0)).abs() < 1e-15);
    }

    #[test]
    fn underflowing_softplus_is_floored() {
        let (mut store, cfg, op, z) = setup(6, 7, 3, 2);
        store.insert("den.mlp.fc2.bias", Tensor::new(vec![2], vec![-1e4, -800.0]).unwrap());
        let est = estimate(&z, &op, &store, &cfg).unwrap();
        assert!(est.mu >= POSITIVE_FLOOR && est.eta >= POSITIVE_FLOOR);
    }

    #[test]
    fn outputs_positive_and_support_preserved_for_random_weights() {
        for seed in 0..8 {
            let (store, cfg, op, z) = setup(5, 6, 4, seed);
            let est = estimate(&z, &op, &store, &cfg).unwrap();
            assert!(est.mu > 0.0 && est.eta > 0.0);
            assert_eq!(est.phi_hat.support_violation(), None);
            let support = op.support();
            for (r, s) in est.phi_residual.data().iter().zip(support.data()) {
                if *s == 0.0 {
                    assert_eq!(*r, 0.0);
                }
            }
        }
    }

    #[test]
    fn dlcb_with_zero_weights_is_identity() {
        let mut store = ParamStore::new();
        for c in ["b.conv1", "b.conv2"] {
            store.insert(format!("{c}.weight"), Tensor::zeros(&[3, 3, 3, 3]));
            store.insert(format!("{c}.bias"), Tensor::zeros(&[3]));
        }
        let p = store.bind(false);
        let block = Dlcb {
            conv1: Conv::same(&p, "b.conv1", 3, 1).unwrap(),
            conv2: Conv::same(&p, "b.conv2", 3, 1).unwrap(),
        };
        let x = Var::constant(Tensor::from_fn(&[5, 4, 3], |i| (i as f64 * 0.37).sin()));
        let y = dlcb_forward(&x, &block).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn config_recovered_from_params() {
        let cfg = DenConfig { bands: 3, depth: 2, width: 5 };
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut stream(0, Stream::Params));
        assert_eq!(DenConfig::from_params(&store).unwrap(), cfg);
    }

    #[test]
    fn deterministic_given_inputs() {
        let (store, cfg, op, z) = setup(4, 5, 2, 3);
        let a = estimate(&z, &op, &store, &cfg).unwrap();
        let b = estimate(&z, &op, &store, &cfg).unwrap();
        assert_eq!(a.phi_residual, b.phi_residual);
        assert_eq!(a.mu.to_bits(), b.mu.to_bits());
    }
}
