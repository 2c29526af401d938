//! Seeded synthetic scenes: smooth spectral gradients with a few flat
//! geometric shapes on top. Values lie in `[0, 1]`.

use rand::Rng as _;

use crate::cassi::HsiCube;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { r0: f64, c0: f64, r1: f64, c1: f64 },
    Disk { r: f64, c: f64, radius: f64 },
}

impl Shape {
    fn contains(&self, r: f64, c: f64) -> bool {
        match *self {
            Shape::Rect { r0, c0, r1, c1 } => r >= r0 && r < r1 && c >= c0 && c < c1,
            Shape::Disk { r: rc, c: cc, radius } => (r - rc).powi(2) + (c - cc).powi(2) <= radius * radius,
        }
    }
}

/// Spectral signature: a Gaussian bump over normalised wavelength.
fn signature(center: f64, width: f64, peak: f64, t: f64) -> f64 {
    peak * (-0.5 * ((t - center) / width).powi(2)).exp()
}

pub fn phantom(h: usize, w: usize, bands: usize, seed: u64) -> Result<HsiCube> {
    if h == 0 || w == 0 || bands == 0 {
        return Err(Error::shape(format!("phantom extents must be positive, got {h}x{w}x{bands}")));
    }
    let mut rng = stream(seed, Stream::Phantom);
    let (fr, fc) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let n_shapes = rng.random_range(3..=6);
    let shapes: Vec<(Shape, f64, f64, f64)> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let (a, b) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
                Shape::Rect {
                    r0: a,
                    c0: b,
                    r1: a + rng.random_range(0.1..0.4),
                    c1: b + rng.random_range(0.1..0.4),
                }
            } else {
                Shape::Disk {
                    r: rng.random_range(0.1..0.9),
                    c: rng.random_range(0.1..0.9),
                    radius: rng.random_range(0.05..0.25),
                }
            };
            (shape, rng.random_range(0.0..1.0), rng.random_range(0.15..0.6), rng.random_range(0.4..0.95))
        })
        .collect();

    let mut cube = Tensor::zeros(&[h, w, bands]);
    for i in 0..h {
        for j in 0..w {
            let (r, c) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
            // Later shapes paint over earlier ones.
            let cover = shapes.iter().rev().find(|(s, ..)| s.contains(r, c));
            for n in 0..bands {
                let t = if bands == 1 { 0.5 } else { n as f64 / (bands - 1) as f64 };
                let v = match cover {
                    Some(&(_, center, width, peak)) => 0.05 + signature(center, width, peak, t),
                    None => {
                        0.35 + 0.2 * (std::f64::consts::PI * (fr * r + fc * c) + phase + 2.0 * t).sin()
                            + 0.1 * (r - t)
                    }
                };
                cube.set3(i, j, n, v.clamp(0.0, 1.0));
            }
        }
    }
    HsiCube::new(cube)
}
