//! Coded-aperture snapshot spectral imaging forward model.
//!
//! A scene cube `[H, W, B]` is modulated by a 2D mask, each band `n`
//! (zero-based) is shifted right by `step * n` columns, and the sensor sums
//! the shifted bands into an `[H, W + step * (B - 1)]` measurement. The
//! operator is stored in shifted-mask form: an `[H, W', B]` tensor whose band
//! plane `n` is the mask placed at column offset `step * n`, so a forward
//! application is a per-pixel dot product over bands of the shifted mask with
//! the shifted cube. Each measurement pixel only touches its own column of
//! the shifted cube, which is why `Phi Phi^T` is diagonal.

pub mod dense;
mod noise;

use std::rc::Rc;

use rand::Rng as _;

pub use noise::{NoiseConfig, NoiseKind};

use crate::rng::{stream, Stream};
use crate::tensor::{ops, Tensor, Var};
use crate::{Error, Result};

/// A hyperspectral cube `[H, W, B]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    data: Tensor,
}

impl HsiCube {
    pub fn new(data: Tensor) -> Result<Self> {
        let (h, w, b) = data.dims3()?;
        if h == 0 || w == 0 || b == 0 {
            return Err(Error::shape(format!("cube extents must be positive, got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize, bands: usize) -> Self {
        Self {
            data: Tensor::zeros(&[h, w, bands]),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.bands())
    }

    /// Band `n` as an `[H, W]` plane.
    pub fn band(&self, n: usize) -> Vec<f64> {
        let b = self.bands();
        self.data.data().iter().skip(n).step_by(b).copied().collect()
    }
}

/// A 2D coded aperture `[H, W]` with transmittance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask2D {
    data: Tensor,
}

impl Mask2D {
    pub fn new(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [h, w] if h > 0 && w > 0 => {}
            _ => return Err(Error::shape(format!("mask must be [H, W], got {:?}", data.shape()))),
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidOperator("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    /// Seeded uniform-random binary mask.
    pub fn random_binary(h: usize, w: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Mask);
        Self::new(Tensor::from_fn(&[h, w], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }))
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::full(&[h, w], 1.0),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// A single coded snapshot `[H, W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    data: Tensor,
}

impl Measurement {
    pub fn new(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [h, w] if h > 0 && w > 0 => Ok(Self { data }),
            [h, w, 1] if h > 0 && w > 0 => Ok(Self {
                data: data.reshape(&[h, w])?,
            }),
            _ => Err(Error::shape(format!(
                "measurement must be [H, W'], got {:?}",
                data.shape()
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    /// The measurement as `[H, W', 1]`.
    pub fn as_column(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        self.data.clone().reshape(&[h, w, 1]).expect("same length")
    }
}

/// Width of the sensor after dispersing `bands` bands of a `width`-wide scene.
pub fn dispersed_width(width: usize, bands: usize, step: usize) -> usize {
    width + step * bands.saturating_sub(1)
}

/// Column offset of zero-based band `n`.
pub fn band_offset(n: usize, step: usize) -> usize {
    step * n
}

/// Places band `n` of an `[H, W, C]` tensor at column offset `step * n`.
pub fn shift_cube(x: &Tensor, step: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    let wp = dispersed_width(w, c, step);
    let mut out = Tensor::zeros(&[h, wp, c]);
    let src = x.data();
    let dst = out.data_mut();
    for r in 0..h {
        for col in 0..w {
            let s = &src[(r * w + col) * c..][..c];
            for (n, &v) in s.iter().enumerate() {
                dst[(r * wp + col + band_offset(n, step)) * c + n] = v;
            }
        }
    }
    Ok(out)
}

/// Adjoint and left inverse of [`shift_cube`]: reads band `n` back from
/// columns `[step * n, step * n + W)`.
pub fn unshift_cube(xs: &Tensor, step: usize) -> Result<Tensor> {
    let (h, wp, c) = xs.dims3()?;
    let span = step * c.saturating_sub(1);
    if wp <= span {
        return Err(Error::shape(format!(
            "shifted width {wp} too small for {c} bands at step {step}"
        )));
    }
    let w = wp - span;
    let mut out = Tensor::zeros(&[h, w, c]);
    let src = xs.data();
    let dst = out.data_mut();
    for r in 0..h {
        for col in 0..w {
            for n in 0..c {
                dst[(r * w + col) * c + n] = src[(r * wp + col + band_offset(n, step)) * c + n];
            }
        }
    }
    Ok(out)
}

/// The sensing matrix in shifted-mask form.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingOperator {
    shifted_mask: Tensor,
    step: usize,
    width: usize,
}

impl SensingOperator {
    /// Disperses a 2D mask over `bands` bands.
    pub fn from_mask(mask: &Mask2D, bands: usize, step: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::shape("operator needs at least one band"));
        }
        let (h, w) = (mask.height(), mask.width());
        let md = mask.tensor().data();
        let stacked = Tensor::from_fn(&[h, w, bands], |i| md[i / bands]);
        Ok(Self {
            shifted_mask: shift_cube(&stacked, step)?,
            step,
            width: w,
        })
    }

    /// Wraps an existing shifted mask, checking that it is non-negative and
    /// that band `n` has no support outside columns `[step*n, step*n + W)`.
    pub fn from_shifted(shifted_mask: Tensor, step: usize) -> Result<Self> {
        let (_, wp, c) = shifted_mask.dims3()?;
        let span = step * c.saturating_sub(1);
        if wp <= span {
            return Err(Error::shape(format!(
                "shifted mask width {wp} too small for {c} bands at step {step}"
            )));
        }
        if shifted_mask.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidOperator(
                "shifted mask must be finite and non-negative".into(),
            ));
        }
        let op = Self {
            shifted_mask,
            step,
            width: wp - span,
        };
        if let Some((r, col, n)) = op.support_violation() {
            return Err(Error::InvalidOperator(format!(
                "band {n} has support at row {r}, column {col} outside its dispersion window"
            )));
        }
        Ok(op)
    }

    pub fn shifted_mask(&self) -> &Tensor {
        &self.shifted_mask
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn height(&self) -> usize {
        self.shifted_mask.shape()[0]
    }

    /// Scene width `W`.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Sensor width `W'`.
    pub fn shifted_width(&self) -> usize {
        self.shifted_mask.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.shifted_mask.shape()[2]
    }

    /// Indicator of the valid dispersion columns of every band.
    pub fn support(&self) -> Tensor {
        support_mask(self.height(), self.width, self.bands(), self.step)
    }

    /// First `(row, column, band)` with a nonzero entry outside the band's
    /// dispersion window, if any.
    pub fn support_violation(&self) -> Option<(usize, usize, usize)> {
        let (h, wp, c) = (self.height(), self.shifted_width(), self.bands());
        for r in 0..h {
            for col in 0..wp {
                for n in 0..c {
                    let lo = band_offset(n, self.step);
                    let inside = col >= lo && col < lo + self.width;
                    if !inside && self.shifted_mask.data()[(r * wp + col) * c + n] != 0.0 {
                        return Some((r, col, n));
                    }
                }
            }
        }
        None
    }

    fn check_cube(&self, x: &Tensor) -> Result<()> {
        x.expect_shape(&[self.height(), self.width, self.bands()], "cube vs operator")
    }

    fn check_measurement(&self, y: &Measurement) -> Result<()> {
        y.tensor()
            .expect_shape(&[self.height(), self.shifted_width()], "measurement vs operator")
    }

    /// Noiseless `Phi x` of a cube.
    pub fn apply(&self, x: &HsiCube) -> Result<Measurement> {
        self.check_cube(x.tensor())?;
        self.apply_shifted(&shift_cube(x.tensor(), self.step)?)
    }

    /// `Phi` applied to an already shifted `[H, W', B]` tensor.
    pub fn apply_shifted(&self, xs: &Tensor) -> Result<Measurement> {
        xs.expect_shape(self.shifted_mask.shape(), "shifted cube vs operator")?;
        let c = self.bands();
        let data = xs
            .data()
            .chunks(c)
            .zip(self.shifted_mask.data().chunks(c))
            .map(|(a, m)| a.iter().zip(m).map(|(a, m)| a * m).sum())
            .collect();
        Measurement::new(Tensor::new(vec![self.height(), self.shifted_width()], data)?)
    }

    /// `Phi^T y` in the shifted domain, `[H, W', B]`.
    pub fn adjoint_shifted(&self, y: &Measurement) -> Result<Tensor> {
        self.check_measurement(y)?;
        let c = self.bands();
        let mut out = self.shifted_mask.clone();
        for (px, &v) in out.data_mut().chunks_mut(c).zip(y.tensor().data()) {
            for m in px.iter_mut() {
                *m *= v;
            }
        }
        Ok(out)
    }

    /// `Phi^T y` as a cube: `unshift(shifted_mask * y)`.
    pub fn adjoint(&self, y: &Measurement) -> Result<HsiCube> {
        HsiCube::new(unshift_cube(&self.adjoint_shifted(y)?, self.step)?)
    }

    /// Diagonal of `Phi Phi^T`: per measurement pixel, the sum over bands of
    /// the squared shifted mask.
    pub fn gram_diag(&self) -> Tensor {
        let c = self.bands();
        let data = self
            .shifted_mask
            .data()
            .chunks(c)
            .map(|m| m.iter().map(|v| v * v).sum())
            .collect();
        Tensor::new(vec![self.height(), self.shifted_width()], data).expect("consistent")
    }

    /// Operator restricted to the scene window `[row0, row0+h) x [col0, col0+w)`.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || row0 + h > self.height() || col0 + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({row0},{col0}) exceeds scene {}x{}",
                self.height(),
                self.width
            )));
        }
        let (c, wp) = (self.bands(), self.shifted_width());
        let nwp = dispersed_width(w, c, self.step);
        let mut out = Tensor::zeros(&[h, nwp, c]);
        for r in 0..h {
            for col in 0..w {
                for n in 0..c {
                    let d = band_offset(n, self.step);
                    let v = self.shifted_mask.data()[((row0 + r) * wp + col0 + col + d) * c + n];
                    out.data_mut()[(r * nwp + col + d) * c + n] = v;
                }
            }
        }
        Self::from_shifted(out, self.step)
    }
}

/// `[H, W', B]` indicator of the columns band `n` may occupy.
pub fn support_mask(h: usize, w: usize, bands: usize, step: usize) -> Tensor {
    let wp = dispersed_width(w, bands, step);
    Tensor::from_fn(&[h, wp, bands], |i| {
        let n = i % bands;
        let col = (i / bands) % wp;
        let lo = band_offset(n, step);
        if col >= lo && col < lo + w {
            1.0
        } else {
            0.0
        }
    })
}

/// Simulates a measurement: noiseless `Phi x`, then the configured noise.
pub fn forward_measure(x: &HsiCube, op: &SensingOperator, noise: &NoiseConfig) -> Result<Measurement> {
    if op.shifted_mask.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidOperator("negative mask values".into()));
    }
    let clean = op.apply(x)?;
    noise.apply(&clean)
}

/// `Phi^T y`.
pub fn adjoint_apply(y: &Measurement, op: &SensingOperator) -> Result<HsiCube> {
    op.adjoint(y)
}

/// `diag(Phi Phi^T)` as an `[H, W']` tensor.
pub fn phi_gram_diag(op: &SensingOperator) -> Tensor {
    op.gram_diag()
}

// ── differentiable counterparts ─────────────────────────────────────────

/// [`shift_cube`] on the graph.
pub fn shift_var(x: &Var, step: usize) -> Result<Var> {
    ops::linear_map(
        "shift_cube",
        x,
        Rc::new(move |t| shift_cube(t, step)),
        Rc::new(move |g| unshift_cube(g, step)),
    )
}

/// [`unshift_cube`] on the graph.
pub fn unshift_var(xs: &Var, step: usize) -> Result<Var> {
    ops::linear_map(
        "unshift_cube",
        xs,
        Rc::new(move |t| unshift_cube(t, step)),
        Rc::new(move |g| shift_cube(g, step)),
    )
}

/// `Phi x` for a graph-valued shifted mask: returns `[H, W', 1]`.
pub fn apply_var(shifted_mask: &Var, x: &Var, step: usize) -> Result<Var> {
    ops::sum_last(&ops::mul(shifted_mask, &shift_var(x, step)?)?)
}

/// `Phi^T r` for a graph-valued shifted mask and `[H, W', 1]` residual.
pub fn adjoint_var(shifted_mask: &Var, r: &Var, step: usize) -> Result<Var> {
    let bands = shifted_mask.value().last_dim();
    unshift_var(&ops::mul(shifted_mask, &ops::broadcast_last(r, bands)?)?, step)
}

/// `diag(Phi Phi^T)` for a graph-valued shifted mask, `[H, W', 1]`.
pub fn gram_diag_var(shifted_mask: &Var) -> Result<Var> {
    ops::sum_last(&ops::square(shifted_mask)?)
}
