//! Central finite-difference check of analytic gradients.

use rand::seq::index;

use super::{backward, BoundParams, ParamStore, Tensor, Var};
use crate::rng::{stream, Stream};
use crate::{Error, Result};

/// Relative error `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from reporting rounding noise as failures.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Number of scalar parameters probed; all of them when larger than the store.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-3,
            samples: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares `backward` through `f` against central differences of `f` on a
/// seeded sample of scalar parameters. `f` must return a one-element tensor.
pub fn fd_gradcheck<F>(f: F, params: &ParamStore, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&BoundParams) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }
    let bound = params.bind(true);
    let out = f(&bound)?;
    if out.value().len() != 1 {
        return Err(Error::shape(format!("gradcheck needs a scalar output, got {:?}", out.shape())));
    }
    let grads = bound.gradients(&backward(&out, &Tensor::scalar(1.0))?);

    let layout: Vec<(&str, usize)> = params.iter().map(|(k, v)| (k, v.len())).collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    let mut rng = stream(opts.seed, Stream::Sampling);
    let mut picks = index::sample(&mut rng, total, opts.samples.min(total)).into_vec();
    picks.sort_unstable();

    let eval = |store: &ParamStore| -> Result<f64> {
        let v = f(&store.bind(false))?.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "fd_gradcheck" })
        }
    };

    let mut probes = Vec::with_capacity(picks.len());
    let mut work = params.clone();
    for flat in picks {
        let (name, index) = locate(&layout, flat);
        let orig = params.get(name)?.data()[index];
        work.get_mut(name)?.data_mut()[index] = orig + opts.step;
        let plus = eval(&work)?;
        work.get_mut(name)?.data_mut()[index] = orig - opts.step;
        let minus = eval(&work)?;
        work.get_mut(name)?.data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let analytic = grads[name].data()[index];
        probes.push(Probe {
            name: name.to_string(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = probes.iter().fold(0.0f64, |m, p| m.max(p.rel_err));
    Ok(GradcheckReport {
        probes,
        max_rel_err,
        tol: opts.tol,
    })
}

fn locate<'a>(layout: &[(&'a str, usize)], mut flat: usize) -> (&'a str, usize) {
    for &(name, n) in layout {
        if flat < n {
            return (name, flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond parameter count")
}
