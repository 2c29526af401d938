//! Built-in verification suite.
//!
//! Every check compares an optimised code path against an independent
//! reference (dense linear algebra, scalar loops, finite differences or a
//! closed form) and reports the largest error it saw next to the tolerance.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng as _;

use crate::cassi::dense::{dense_data_step, materialize_dense, DEFAULT_ORACLE_CAP};
use crate::cassi::{HsiCube, Mask2D, Measurement, NoiseConfig, SensingOperator};
use crate::den::{den_forward, DenConfig, DenWeights};
use crate::hqs::{data_step, run_hqs, DenoiserKind, ReconConfig};
use crate::lnlt::{self, AttentionRecorder, BlockShape, LnlbWeights, MsaWeights};
use crate::metrics;
use crate::phantom::phantom;
use crate::rng::{stream, Rng, Stream};
use crate::tensor::gradcheck::{fd_gradcheck, GradcheckOptions};
use crate::tensor::params::Initializer;
use crate::tensor::{ops, ParamStore, Tensor, Var};
use crate::tv;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl std::str::FromStr for Level {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Self::Quick),
            "full" => Ok(Self::Full),
            _ => Err(crate::Error::InvalidConfig(format!("unknown selftest level `{s}`"))),
        }
    }
}

/// Deliberate corruption of a fixture, for checking that the suite notices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Tamper {
    #[default]
    None,
    /// Negates the output-projection kernel handed to the MSA under test
    /// while the reference keeps the original.
    ConvSign,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
    /// Set when the check itself could not run.
    pub error: Option<String>,
}

impl CheckResult {
    fn new(name: &str, max_err: f64, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            max_err,
            tol,
            error: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_err <= self.tol
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect()
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>11}  {:>9}  status\n", "check", "max error", "tol");
        for c in &self.checks {
            let status = match &c.error {
                Some(e) => format!("ERROR {e}"),
                None if c.passed() => "ok".into(),
                None => "FAIL".into(),
            };
            writeln!(out, "{:<width$}  {:>11.3e}  {:>9.1e}  {status}", c.name, c.max_err, c.tol).unwrap();
        }
        out
    }
}

pub fn run(level: Level, tamper: Tamper) -> Report {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut push = |name: &str, tol: f64, r: Result<f64>| {
        checks.push(match r {
            Ok(e) => CheckResult::new(name, e, tol),
            Err(e) => CheckResult {
                error: Some(e.to_string()),
                ..CheckResult::new(name, f64::NAN, tol)
            },
        })
    };
    let full = level == Level::Full;
    let seeds = if full { 20 } else { 5 };

    push("operator-adjoint", 1e-5, adjoint_error(seeds, 16, 16, 8, 2));
    push("data-step-dense", 1e-6, data_step_error(if full { 30 } else { 20 }, 0));
    push("gram-block-diagonal", 1e-10, gram_structure_error(seeds as u64));
    let attn_cfgs: &[(usize, usize, usize)] = if full {
        &[(16, 16, 8)]
    } else {
        &[(8, 8, 4)]
    };
    let mut local = Ok(0.0f64);
    let mut nonlocal = Ok(0.0f64);
    for &(h, w, c) in attn_cfgs {
        for heads in [1, 2, 4] {
            for m in [4, 8].into_iter().filter(|m| h % m == 0) {
                local = max_ok(local, local_attention_error(h, w, c, m, heads, m as u64));
            }
            for n in [2, 4] {
                nonlocal = max_ok(nonlocal, nonlocal_attention_error(h, w, c, n, heads, n as u64));
            }
        }
    }
    push("local-attention-oracle", 1e-5, local);
    push("nonlocal-attention-oracle", 1e-5, nonlocal);
    push("uniform-attention", 1e-6, uniform_attention_error(8, 8, 4, 4, 2));
    push("local-msa-oracle", 1e-5, msa_error(false, tamper));
    push("nonlocal-msa-oracle", 1e-5, msa_error(true, tamper));
    let samples = if full { 100 } else { 50 };
    push("lnlb-gradcheck", 1e-3, lnlb_gradcheck(samples, 0).map(|r| r.max_rel_err));
    push("den-gradcheck", 1e-3, den_gradcheck(samples, 0).map(|r| r.max_rel_err));
    push("metric-oracles", 1e-9, metric_error());
    push("tv-decrease", 0.0, tv_decrease_violation(seeds as u64));
    if full {
        // Pass iff PSNR beats the start and the residual falls over the
        // stages; the reported error is the larger shortfall.
        push(
            "hqs-tv-k9",
            0.0,
            tv_reconstruction(0).map(|r| (r.psnr_init - r.psnr_final).max(r.residual_final - r.residual_first).max(0.0)),
        );
    }
    Report {
        checks,
        elapsed: start.elapsed(),
    }
}

fn max_ok(a: Result<f64>, b: Result<f64>) -> Result<f64> {
    Ok(a?.max(b?))
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Largest `|<Phi x, y> - <x, Phi^T y>|` relative to `||Phi x|| ||y||`.
pub fn adjoint_error(seeds: u64, h: usize, w: usize, b: usize, step: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let op = SensingOperator::from_mask(&Mask2D::random_binary(h, w, seed)?, b, step)?;
        let mut rng = stream(seed, Stream::Test);
        let x = HsiCube::new(uniform(&mut rng, &[h, w, b], -1.0, 1.0))?;
        let y = Measurement::new(uniform(&mut rng, &[h, op.shifted_width()], -1.0, 1.0))?;
        let px = op.apply(&x)?;
        let lhs = px.tensor().dot(y.tensor())?;
        let rhs = x.tensor().dot(op.adjoint(&y)?.tensor())?;
        let scale = (px.tensor().norm() * y.tensor().norm()).max(f64::MIN_POSITIVE);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(worst)
}

/// Closed-form data step against a dense Cholesky solve on random small
/// instances (`H, W <= 6`, `B <= 4`, `step <= 2`, `mu` in `{1e-3, 1, 1e3}`).
pub fn data_step_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Test);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (b, step) = (rng.random_range(1..=4), rng.random_range(0..=2));
        let mu = [1e-3, 1.0, 1e3][i % 3];
        let mask = Mask2D::new(uniform(&mut rng, &[h, w], 0.0, 1.0))?;
        let op = SensingOperator::from_mask(&mask, b, step)?;
        let z = HsiCube::new(uniform(&mut rng, &[h, w, b], 0.0, 1.0))?;
        let y = Measurement::new(uniform(&mut rng, &[h, op.shifted_width()], 0.0, 2.0))?;
        let fast = data_step(&z, &y, &op, mu)?;
        let dense = dense_data_step(&op, &y, &z, mu, DEFAULT_ORACLE_CAP)?;
        let err = fast.tensor().sub(dense.tensor())?.norm() / dense.tensor().norm().max(f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Dense `Phi Phi^T`: returns the largest off-diagonal magnitude plus the
/// largest diagonal deviation from the fast gram diagonal. Off-diagonal
/// entries must be exactly zero, so any non-zero value fails.
pub fn gram_structure_error(seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = stream(seed, Stream::Test);
        let (h, w, b, step) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(0..=2));
        let mask = Mask2D::new(uniform(&mut rng, &[h, w], 0.0, 1.0))?;
        let op = SensingOperator::from_mask(&mask, b, step)?;
        let a = materialize_dense(&op, DEFAULT_ORACLE_CAP)?;
        let g = &a * a.transpose();
        let diag = op.gram_diag();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                if i == j {
                    worst = worst.max((g[(i, i)] - diag.data()[i]).abs());
                } else if g[(i, j)] != 0.0 {
                    return Ok(f64::INFINITY);
                }
            }
        }
    }
    Ok(worst)
}

/// Scalar-loop references.
pub mod oracle {
    use crate::tensor::Tensor;

    /// Same-padded stride-1 convolution; kernel `[Cout, k, k, Cin / groups]`.
    pub fn conv2d_same(x: &Tensor, kernel: &Tensor, bias: &Tensor, groups: usize) -> Tensor {
        let (h, w, cin) = x.dims3().unwrap();
        let s = kernel.shape();
        let (cout, k, cg) = (s[0], s[1], s[3]);
        let pad = k / 2;
        let og = cout / groups;
        let mut out = Tensor::zeros(&[h, w, cout]);
        for i in 0..h {
            for j in 0..w {
                for o in 0..cout {
                    let g = o / og;
                    let mut acc = bias.data()[o];
                    for di in 0..k {
                        for dj in 0..k {
                            let (r, c) = (i + di, j + dj);
                            if r < pad || c < pad || r - pad >= h || c - pad >= w {
                                continue;
                            }
                            for ci in 0..cg {
                                let wv = kernel.data()[((o * k + di) * k + dj) * cg + ci];
                                acc += wv * x.at3(r - pad, c - pad, g * cg + ci);
                            }
                        }
                    }
                    out.set3(i, j, o, acc);
                }
            }
        }
        debug_assert_eq!(cg * groups, cin);
        out
    }

    /// Softmax-weighted average of `values` with `scores`.
    fn attend(scores: &mut [f64], values: &[Vec<f64>]) -> Vec<f64> {
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        let mut out = vec![0.0; values[0].len()];
        for (s, v) in scores.iter().zip(values) {
            for (o, v) in out.iter_mut().zip(v) {
                *o += s / z * v;
            }
        }
        out
    }

    /// Per-token local window attention with position bias `[heads, M^2, M^2]`.
    pub fn local_attention(q: &Tensor, k: &Tensor, v: &Tensor, m: usize, heads: usize, pos: &Tensor) -> Tensor {
        let (h, w, c) = q.dims3().unwrap();
        let d = c / heads;
        let t = m * m;
        let mut out = Tensor::zeros(&[h, w, c]);
        let token = |x: &Tensor, wr: usize, wc: usize, hd: usize, i: usize| -> Vec<f64> {
            (0..d).map(|e| x.at3(wr * m + i / m, wc * m + i % m, hd * d + e)).collect()
        };
        for wr in 0..h / m {
            for wc in 0..w / m {
                for hd in 0..heads {
                    let values: Vec<Vec<f64>> = (0..t).map(|j| token(v, wr, wc, hd, j)).collect();
                    for i in 0..t {
                        let qi = token(q, wr, wc, hd, i);
                        let mut scores: Vec<f64> = (0..t)
                            .map(|j| {
                                let kj = token(k, wr, wc, hd, j);
                                let dot: f64 = qi.iter().zip(&kj).map(|(a, b)| a * b).sum();
                                dot / (d as f64).sqrt() + pos.data()[(hd * t + i) * t + j]
                            })
                            .collect();
                        let o = attend(&mut scores, &values);
                        for (e, val) in o.into_iter().enumerate() {
                            out.set3(wr * m + i / m, wc * m + i % m, hd * d + e, val);
                        }
                    }
                }
            }
        }
        out
    }

    /// Attention among the `N x N` window tokens, one head per channel group.
    pub fn nonlocal_attention(q: &Tensor, k: &Tensor, v: &Tensor, n: usize, heads: usize, pos: &Tensor) -> Tensor {
        let (h, w, c) = q.dims3().unwrap();
        let d = c / heads;
        let (wh, ww) = (h / n, w / n);
        let t = n * n;
        let token = |x: &Tensor, hd: usize, tok: usize| -> Vec<f64> {
            let (gi, gj) = (tok / n, tok % n);
            let mut out = Vec::with_capacity(wh * ww * d);
            for r in 0..wh {
                for col in 0..ww {
                    for e in 0..d {
                        out.push(x.at3(gi * wh + r, gj * ww + col, hd * d + e));
                    }
                }
            }
            out
        };
        let mut out = Tensor::zeros(&[h, w, c]);
        for hd in 0..heads {
            let values: Vec<Vec<f64>> = (0..t).map(|j| token(v, hd, j)).collect();
            for i in 0..t {
                let qi = token(q, hd, i);
                let mut scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = qi.iter().zip(token(k, hd, j)).map(|(a, b)| a * b).sum();
                        dot / ((wh * ww * d) as f64).sqrt() + pos.data()[(hd * t + i) * t + j]
                    })
                    .collect();
                let o = attend(&mut scores, &values);
                let (gi, gj) = (i / n, i % n);
                let mut it = o.into_iter();
                for r in 0..wh {
                    for col in 0..ww {
                        for e in 0..d {
                            out.set3(gi * wh + r, gj * ww + col, hd * d + e, it.next().unwrap());
                        }
                    }
                }
            }
        }
        out
    }
}

fn qkv_pos(h: usize, w: usize, c: usize, heads: usize, tokens: usize, seed: u64) -> [Tensor; 4] {
    let mut rng = stream(seed, Stream::Test);
    [
        uniform(&mut rng, &[h, w, c], -2.0, 2.0),
        uniform(&mut rng, &[h, w, c], -2.0, 2.0),
        uniform(&mut rng, &[h, w, c], -1.0, 1.0),
        uniform(&mut rng, &[heads, tokens, tokens], -0.5, 0.5),
    ]
}

pub fn local_attention_error(h: usize, w: usize, c: usize, m: usize, heads: usize, seed: u64) -> Result<f64> {
    let [q, k, v, pos] = qkv_pos(h, w, c, heads, m * m, seed);
    let expect = oracle::local_attention(&q, &k, &v, m, heads, &pos);
    let got = lnlt::local_attention(
        &Var::constant(q),
        &Var::constant(k),
        &Var::constant(v),
        m,
        heads,
        &Var::constant(pos),
        &AttentionRecorder::disabled(),
    )?;
    got.value().max_abs_diff(&expect)
}

pub fn nonlocal_attention_error(h: usize, w: usize, c: usize, n: usize, heads: usize, seed: u64) -> Result<f64> {
    let [q, k, v, pos] = qkv_pos(h, w, c, heads, n * n, seed);
    let expect = oracle::nonlocal_attention(&q, &k, &v, n, heads, &pos);
    let got = lnlt::nonlocal_attention(
        &Var::constant(q),
        &Var::constant(k),
        &Var::constant(v),
        n,
        heads,
        &Var::constant(pos),
        &AttentionRecorder::disabled(),
    )?;
    got.value().max_abs_diff(&expect)
}

/// With zero queries and bias every token attends uniformly, so each output
/// is the plain mean of the values in its window (local) or over all
/// windows at the same offset (non-local).
pub fn uniform_attention_error(h: usize, w: usize, c: usize, m: usize, n: usize) -> Result<f64> {
    let mut rng = stream(0, Stream::Test);
    let v = uniform(&mut rng, &[h, w, c], -1.0, 1.0);
    let zero = Var::constant(Tensor::zeros(&[h, w, c]));
    let rec = AttentionRecorder::disabled();
    let vv = Var::constant(v.clone());

    let local = lnlt::local_attention(&zero, &zero, &vv, m, 1, &Var::constant(Tensor::zeros(&[1, m * m, m * m])), &rec)?;
    let mut worst = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let (r0, c0) = (i / m * m, j / m * m);
                let mean = (0..m * m).map(|t| v.at3(r0 + t / m, c0 + t % m, ch)).sum::<f64>() / (m * m) as f64;
                worst = worst.max((local.value().at3(i, j, ch) - mean).abs());
            }
        }
    }

    let nl = lnlt::nonlocal_attention(&zero, &zero, &vv, n, 1, &Var::constant(Tensor::zeros(&[1, n * n, n * n])), &rec)?;
    let (wh, ww) = (h / n, w / n);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mean = (0..n * n).map(|t| v.at3(t / n * wh + i % wh, t % n * ww + j % ww, ch)).sum::<f64>() / (n * n) as f64;
                worst = worst.max((nl.value().at3(i, j, ch) - mean).abs());
            }
        }
    }
    Ok(worst)
}

fn msa_fixture(nonlocal: bool) -> (ParamStore, Tensor, usize, usize) {
    let (h, w, c, heads) = (8, 8, 4, 2);
    let grid = if nonlocal { 2 } else { 4 };
    let tokens = grid * grid;
    let mut store = ParamStore::new();
    let mut rng = stream(1, Stream::Params);
    lnlt::init_msa(&mut Initializer { store: &mut store, rng: &mut rng }, "msa", c, heads, tokens);
    // Non-zero position bias so the oracle exercises it.
    let mut trng = stream(2, Stream::Test);
    store.insert("msa.pos", uniform(&mut trng, &[heads, tokens, tokens], -0.5, 0.5));
    let x = uniform(&mut trng, &[h, w, c], -1.0, 1.0);
    (store, x, grid, heads)
}

/// Full MSA (projections, attention, output projection) against scalar
/// loops.
pub fn msa_error(nonlocal: bool, tamper: Tamper) -> Result<f64> {
    let (store, x, grid, heads) = msa_fixture(nonlocal);
    let p = |name: &str| store.get(&format!("msa.{name}")).unwrap();
    let project = |which: &str| {
        let pw = oracle::conv2d_same(&x, p(&format!("{which}.pw.weight")), p(&format!("{which}.pw.bias")), 1);
        let c = pw.last_dim();
        oracle::conv2d_same(&pw, p(&format!("{which}.dw.weight")), p(&format!("{which}.dw.bias")), c)
    };
    let (q, k, v) = (project("q"), project("k"), project("v"));
    let attn = if nonlocal {
        oracle::nonlocal_attention(&q, &k, &v, grid, heads, p("pos"))
    } else {
        oracle::local_attention(&q, &k, &v, grid, heads, p("pos"))
    };
    let expect = oracle::conv2d_same(&attn, p("proj.weight"), p("proj.bias"), 1);

    let mut under_test = store.clone();
    if tamper == Tamper::ConvSign {
        let t = under_test.get_mut("msa.proj.weight")?;
        *t = t.scale(-1.0);
    }
    let bound = under_test.bind(false);
    let c = x.last_dim();
    let w = MsaWeights::bind(&bound, "msa", c, heads)?;
    let xv = Var::constant(x.clone());
    let rec = AttentionRecorder::disabled();
    let got = if nonlocal {
        lnlt::nonlocal_msa_core(&xv, &w, grid, &rec)?
    } else {
        lnlt::local_msa_core(&xv, &w, grid, &rec)?
    };
    got.value().max_abs_diff(&expect)
}

/// Fixed random readout turning a tensor into a scalar loss.
fn readout(x: &Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, Stream::Test);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    ops::sum_all(&ops::mul(x, &Var::constant(r))?)
}

/// Finite-difference check of one full LNLB on `8 x 8 x 4` (M = 4, N = 2,
/// two heads, hidden width 8).
pub fn lnlb_gradcheck(samples: usize, seed: u64) -> Result<crate::tensor::gradcheck::GradcheckReport> {
    let shape = BlockShape {
        channels: 4,
        heads: 2,
        hidden: 8,
        window: 4,
        grid: 2,
    };
    let mut store = ParamStore::new();
    let mut rng = stream(seed, Stream::Params);
    lnlt::init_lnlb(&mut Initializer { store: &mut store, rng: &mut rng }, "blk", shape);
    // Perturb the zero-initialised biases, affine and position terms so
    // their gradients are exercised away from the symmetric start.
    let mut prng = stream(seed, Stream::Test);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += prng.random_range(-0.1..0.1);
        }
    }
    let x = Var::constant(uniform(&mut prng, &[8, 8, 4], -1.0, 1.0));
    let f = |p: &crate::tensor::BoundParams| -> Result<Var> {
        let w = LnlbWeights::bind(p, "blk", shape.channels, shape.heads, shape.hidden)?;
        let y = lnlt::lnlb_forward(&x, &w, shape.window, shape.grid, &AttentionRecorder::disabled())?;
        readout(&y, seed + 1)
    };
    fd_gradcheck(
        f,
        &store,
        &GradcheckOptions {
            samples,
            seed,
            ..Default::default()
        },
    )
}

/// Finite-difference check of the DEN through the corrected operator and
/// both scalar heads on `8 x 8 x 3`, step 2.
pub fn den_gradcheck(samples: usize, seed: u64) -> Result<crate::tensor::gradcheck::GradcheckReport> {
    let (h, w, b) = (8, 8, 3);
    let cfg = DenConfig::new(b);
    let mut store = ParamStore::new();
    cfg.init_params(&mut store, &mut stream(seed, Stream::Params));
    let mut rng = stream(seed, Stream::Test);
    let mask = Mask2D::new(uniform(&mut rng, &[h, w], 0.2, 0.8))?;
    let op = SensingOperator::from_mask(&mask, b, 2)?;
    let z = Var::constant(uniform(&mut rng, &[h, w, b], 0.0, 1.0));
    let f = |p: &crate::tensor::BoundParams| -> Result<Var> {
        let out = den_forward(&z, &op, &DenWeights::bind(p, &cfg)?)?;
        let s = readout(&out.phi_hat, seed + 2)?;
        ops::add(&s, &ops::add(&ops::scale(&out.mu, 3.0)?, &ops::scale(&out.eta, -2.0)?)?)
    };
    fd_gradcheck(
        f,
        &store,
        &GradcheckOptions {
            samples,
            seed,
            ..Default::default()
        },
    )
}

/// Closed-form metric values on constructed inputs.
pub fn metric_error() -> Result<f64> {
    let (h, w, b) = (16, 16, 3);
    let base = phantom(h, w, b, 5)?;
    let mut worst = 0.0f64;

    // A constant offset of 0.1 gives MSE 0.01, i.e. 20 dB at peak 1.
    let shifted = HsiCube::new(base.tensor().map(|v| v + 0.1))?;
    worst = worst.max((metrics::psnr(&shifted, &base, 1.0)? - 20.0).abs());
    worst = worst.max((metrics::psnr(&base, &base, 1.0)? - metrics::PSNR_CAP_DB).abs());
    worst = worst.max((metrics::ssim(&base, &base)? - 1.0).abs());

    // Orthogonal spectra are 90 degrees apart; scaled copies 0.
    let mut a = Tensor::zeros(&[1, 1, 2]);
    a.set3(0, 0, 0, 1.0);
    let mut c = Tensor::zeros(&[1, 1, 2]);
    c.set3(0, 0, 1, 1.0);
    worst = worst.max((metrics::sam(&HsiCube::new(a)?, &HsiCube::new(c)?)?.mean_degrees - 90.0).abs());
    let doubled = HsiCube::new(base.tensor().scale(2.0))?;
    worst = worst.max(metrics::sam(&doubled, &base)?.mean_degrees);

    // Charbonnier of a zero difference is eps.
    worst = worst.max((metrics::charbonnier(&base, &base, 1e-3)? - 1e-3).abs());
    Ok(worst)
}

/// Counts (band, weight, iteration) combinations where TV denoising failed
/// to lower the total variation of a noisy phantom.
pub fn tv_decrease_violation(seeds: u64) -> Result<f64> {
    let mut bad = 0usize;
    for seed in 0..seeds {
        let mut rng = stream(seed, Stream::Noise);
        let clean = phantom(16, 16, 2, seed)?;
        let noisy = HsiCube::new(clean.tensor().add(&uniform(&mut rng, &[16, 16, 2], -0.1, 0.1))?)?;
        for weight in [0.01, 0.05, 0.2, 1.0] {
            for iters in [1, 5, 20] {
                let out = tv::tv_denoise(&noisy, weight, iters)?;
                for n in 0..2 {
                    if tv::total_variation(&out.band(n), 16, 16) >= tv::total_variation(&noisy.band(n), 16, 16) {
                        bad += 1;
                    }
                }
            }
        }
    }
    Ok(bad as f64)
}

/// Outcome of the plug-and-play TV reconstruction property.
#[derive(Clone, Copy, Debug)]
pub struct TvReconOutcome {
    pub psnr_init: f64,
    pub psnr_final: f64,
    /// `||y - Phi z_1||` after the first stage. The normalised-adjoint start
    /// already fits the measurement exactly, so stage 1 is the baseline.
    pub residual_first: f64,
    pub residual_final: f64,
    pub all_finite: bool,
}

/// K = 9 HQS with the TV prior and the default geometric schedule on a
/// noiseless `64 x 64 x 8` phantom, random binary mask, step 2.
pub fn tv_reconstruction(seed: u64) -> Result<TvReconOutcome> {
    let (h, w, b) = (64, 64, 8);
    let truth = phantom(h, w, b, seed)?;
    let op = SensingOperator::from_mask(&Mask2D::random_binary(h, w, seed)?, b, 2)?;
    let y = crate::cassi::forward_measure(&truth, &op, &NoiseConfig::none())?;
    let cfg = ReconConfig::new(b, 9, DenoiserKind::Tv);
    let r = run_hqs(&y, &op, &cfg, None)?;
    let all_finite = r.trace.iter().all(|s| {
        s.x_k.tensor().is_finite() && s.z_k.tensor().is_finite() && s.residual_norm.is_finite()
    });
    Ok(TvReconOutcome {
        psnr_init: metrics::psnr(&r.init, &truth, 1.0)?,
        psnr_final: metrics::psnr(&r.estimate, &truth, 1.0)?,
        residual_first: r.trace[0].residual_norm,
        residual_final: r.final_residual(),
        all_finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_oracle_matches_kernel() {
        let mut rng = stream(0, Stream::Test);
        let x = uniform(&mut rng, &[5, 6, 4], -1.0, 1.0);
        for (groups, cout) in [(1, 3), (2, 4), (4, 4)] {
            let k = uniform(&mut rng, &[cout, 3, 3, 4 / groups], -1.0, 1.0);
            let b = uniform(&mut rng, &[cout], -1.0, 1.0);
            let got = ops::conv2d(&Var::constant(x.clone()), &Var::constant(k.clone()), &Var::constant(b.clone()), 1, groups, 1).unwrap();
            assert!(got.value().max_abs_diff(&oracle::conv2d_same(&x, &k, &b, groups)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn tampering_fails_the_named_checks() {
        assert!(msa_error(false, Tamper::None).unwrap() < 1e-10);
        assert!(msa_error(false, Tamper::ConvSign).unwrap() > 1e-3);
        assert!(msa_error(true, Tamper::ConvSign).unwrap() > 1e-3);
    }
}
