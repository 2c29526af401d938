//! Single-patch overfitting of the shared-weight recurrence.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::cassi::{forward_measure, HsiCube, NoiseConfig, SensingOperator};
use crate::hqs::{forward_graph, ReconConfig};
use crate::metrics::{charbonnier_var, CHARBONNIER_EPS};
use crate::rng::{stream, Stream};
use crate::tensor::{backward, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Side lengths of the training crop; `None` trains on the full cube.
    pub patch: Option<(usize, usize)>,
    pub noise: NoiseConfig,
    pub recon: ReconConfig,
}

impl TrainConfig {
    pub fn new(recon: ReconConfig, steps: usize, seed: u64) -> Self {
        Self {
            steps,
            lr: 4e-4,
            warmup_steps: 0,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
            seed,
            patch: None,
            noise: NoiseConfig::none(),
            recon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::InvalidConfig(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if self.recon.stages == 0 {
            return Err(Error::InvalidConfig("training needs at least one stage".into()));
        }
        if !self.recon.needs_params() {
            return Err(Error::InvalidConfig("configuration has no learned components".into()));
        }
        Ok(())
    }

    /// Learning rate at step `t` (0-based): linear warmup `lr (t + 1) / warmup`,
    /// then cosine decay over the remaining steps.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            return self.lr * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = (t - self.warmup_steps) as f64 / span as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        p.expect_same_shape(g)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.dot(g).unwrap()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|r| vec![r.step.to_string(), r.lr.to_string(), r.loss.to_string()])
        .collect();
    crate::io::csv(&["step", "lr", "loss"], &rows)
}

/// Crops `truth` and `phi` to the configured patch, at an offset drawn from
/// the crop stream.
pub fn training_patch(truth: &HsiCube, phi: &SensingOperator, cfg: &TrainConfig) -> Result<(HsiCube, SensingOperator)> {
    let Some((ph, pw)) = cfg.patch else {
        return Ok((truth.clone(), phi.clone()));
    };
    let (h, w, b) = truth.dims();
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::shape(format!("patch {ph}x{pw} does not fit in {h}x{w}")));
    }
    let mut rng = stream(cfg.seed, Stream::Crop);
    let (r0, c0) = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
    let crop = Tensor::from_fn(&[ph, pw, b], |i| {
        let (r, rest) = (i / (pw * b), i % (pw * b));
        truth.tensor().at3(r0 + r, c0 + rest / b, rest % b)
    });
    Ok((HsiCube::new(crop)?, phi.crop(r0, c0, ph, pw)?))
}

fn diverged(e: Error, step: usize) -> Error {
    let mut root = &e;
    while let Error::Stage { source, .. } = root {
        root = source;
    }
    match root {
        Error::NonFinite { .. } | Error::Degenerate(_) => Error::Divergence { step },
        _ => e,
    }
}

/// Simulates a measurement of `truth`, then fits `params` so that the
/// K-stage reconstruction matches `truth` under the Charbonnier loss.
/// Returns the final parameters and the loss seen before each update.
pub fn train_overfit(
    truth: &HsiCube,
    phi: &SensingOperator,
    params: ParamStore,
    cfg: &TrainConfig,
) -> Result<(ParamStore, Vec<LossRecord>)> {
    cfg.validate()?;
    let (truth, phi) = training_patch(truth, phi, cfg)?;
    cfg.recon.lnlt.validate(truth.height(), truth.width())?;
    let y = forward_measure(&truth, &phi, &cfg.noise)?;

    let mut params = params;
    let mut state = AdamState::default();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let bound = params.bind(true);
        let run = forward_graph(&y, &phi, &cfg.recon, std::slice::from_ref(&bound)).map_err(|e| diverged(e, step))?;
        let loss = charbonnier_var(run.output(), truth.tensor(), CHARBONNIER_EPS).map_err(|e| diverged(e, step))?;
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = backward(&loss, &Tensor::scalar(1.0)).map_err(|e| diverged(e, step))?;
        let mut grads = bound.gradients(&grads);
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step });
        }
        if let Some(max) = cfg.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let lr = cfg.lr_at(step);
        adam_step(&mut params, &grads, &mut state, lr, cfg.betas, cfg.adam_eps)?;
        if params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence { step });
        }
        curve.push(LossRecord {
            step,
            lr,
            loss: loss_value,
        });
    }
    Ok((params, curve))
}

/// The desk-scale learned model: DEN plus an 8-channel LNLT with 4x4 local
/// windows and a 2x2 non-local grid. Inputs must be multiples of 16.
pub fn toy_recon(bands: usize, stages: usize) -> ReconConfig {
    let mut recon = ReconConfig::learned(bands, stages);
    recon.lnlt.base_channels = 8;
    recon.lnlt.window_size = 4;
    recon.lnlt.window_count = 2;
    recon
}

/// Fresh DEN and denoiser weights for `recon`, drawn from the parameter stream.
pub fn init_params(recon: &ReconConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, Stream::Params);
    if recon.use_den {
        recon.den.init_params(&mut store, &mut rng);
    }
    if recon.denoiser == crate::hqs::DenoiserKind::Lnlt {
        recon.lnlt.init_params(&mut store, &mut rng);
    }
    store
}
