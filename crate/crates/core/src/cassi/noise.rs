use rand_distr::{Distribution, Poisson};

use super::Measurement;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    None,
    /// Photon shot noise at a `bits`-bit full well.
    Shot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub bits: u32,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            bits: 11,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn shot(bits: u32, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Shot,
            bits,
            seed,
        }
    }

    /// Shot noise: the clean measurement is normalised by its maximum, scaled
    /// to `2^bits` photon counts, drawn per pixel from a Poisson law and
    /// mapped back to the original scale.
    pub fn apply(&self, clean: &Measurement) -> Result<Measurement> {
        match self.kind {
            NoiseKind::None => Ok(clean.clone()),
            NoiseKind::Shot => {
                if self.bits == 0 || self.bits > 52 {
                    return Err(Error::InvalidParameter(format!(
                        "shot-noise bit depth must be in 1..=52, got {}",
                        self.bits
                    )));
                }
                let peak = clean.tensor().data().iter().fold(0.0f64, |m, &v| m.max(v));
                if peak <= 0.0 {
                    return Ok(clean.clone());
                }
                let full_well = (1u64 << self.bits) as f64;
                let mut rng = stream(self.seed, Stream::Noise);
                let mut out = Vec::with_capacity(clean.tensor().len());
                for &v in clean.tensor().data() {
                    let rate = (v.max(0.0) / peak) * full_well;
                    let count = if rate > 0.0 {
                        Poisson::new(rate)
                            .map_err(|e| Error::InvalidParameter(e.to_string()))?
                            .sample(&mut rng)
                    } else {
                        0.0
                    };
                    out.push(count / full_well * peak);
                }
                Measurement::new(Tensor::new(clean.tensor().shape().to_vec(), out)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Measurement {
        Measurement::new(Tensor::from_fn(&[8, 8], |i| i as f64 / 63.0)).unwrap()
    }

    #[test]
    fn seeded_shot_noise_is_reproducible() {
        let a = NoiseConfig::shot(11, 4).apply(&ramp()).unwrap();
        let b = NoiseConfig::shot(11, 4).apply(&ramp()).unwrap();
        assert_eq!(a, b);
        let c = NoiseConfig::shot(11, 5).apply(&ramp()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shot_noise_is_quantised_and_close() {
        let clean = ramp();
        let noisy = NoiseConfig::shot(11, 1).apply(&clean).unwrap();
        for (&n, &c) in noisy.tensor().data().iter().zip(clean.tensor().data()) {
            let counts = n * 2048.0;
            assert!((counts - counts.round()).abs() < 1e-9);
            // Poisson std at 2048 counts is ~45 counts, i.e. ~0.022 of the peak.
            assert!((n - c).abs() < 0.15);
        }
    }

    #[test]
    fn no_noise_is_identity() {
        assert_eq!(NoiseConfig::none().apply(&ramp()).unwrap(), ramp());
    }
}
