//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::kernels;
use super::{Tensor, Var};
use crate::{Error, Result};

fn need(parents: &[Var], i: usize) -> bool {
    parents[i].requires_grad()
}

// ── elementwise binary ──────────────────────────────────────────────────

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    let v = a.value().add(b.value())?;
    Var::record("add", v, &[a, b], Box::new(|g, _, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    let v = a.value().sub(b.value())?;
    Var::record(
        "sub",
        v,
        &[a, b],
        Box::new(|g, _, _| Ok(vec![Some(g.clone()), Some(g.scale(-1.0))])),
    )
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    let v = a.value().zip_map(b.value(), |x, y| x * y)?;
    Var::record(
        "mul",
        v,
        &[a, b],
        Box::new(|g, _, p| {
            let ga = need(p, 0).then(|| g.zip_map(p[1].value(), |g, y| g * y)).transpose()?;
            let gb = need(p, 1).then(|| g.zip_map(p[0].value(), |g, x| g * x)).transpose()?;
            Ok(vec![ga, gb])
        }),
    )
}

pub fn div(a: &Var, b: &Var) -> Result<Var> {
    if b.value().data().iter().any(|&v| v == 0.0) {
        return Err(Error::Degenerate("division by zero".into()));
    }
    let v = a.value().zip_map(b.value(), |x, y| x / y)?;
    Var::record(
        "div",
        v,
        &[a, b],
        Box::new(|g, out, p| {
            let ga = need(p, 0).then(|| g.zip_map(p[1].value(), |g, y| g / y)).transpose()?;
            let gb = if need(p, 1) {
                // d(a/b)/db = -(a/b)/b
                let t = g.zip_map(out, |g, q| -g * q)?;
                Some(t.zip_map(p[1].value(), |t, y| t / y)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }),
    )
}

// ── elementwise unary ───────────────────────────────────────────────────

fn unary(
    op: &'static str,
    x: &Var,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var> {
    let v = x.value().map(f);
    Var::record(
        op,
        v,
        &[x],
        Box::new(move |g, out, p| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(p[0].value().data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), d)?)])
        }),
    )
}

pub fn scale(x: &Var, c: f64) -> Result<Var> {
    unary("scale", x, |v| v * c, move |_, _| c)
}

pub fn add_scalar(x: &Var, c: f64) -> Result<Var> {
    unary("add_scalar", x, |v| v + c, |_, _| 1.0)
}

pub fn square(x: &Var) -> Result<Var> {
    unary("square", x, |v| v * v, |x, _| 2.0 * x)
}

pub fn sqrt(x: &Var) -> Result<Var> {
    if x.value().data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Degenerate("sqrt of a non-positive value".into()));
    }
    unary("sqrt", x, f64::sqrt, |_, y| 0.5 / y)
}

pub fn relu(x: &Var) -> Result<Var> {
    unary("relu", x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn gelu(x: &Var) -> Result<Var> {
    unary("gelu", x, kernels::gelu, |x, _| kernels::gelu_grad(x))
}

pub fn softplus(x: &Var) -> Result<Var> {
    unary("softplus", x, kernels::softplus, |x, _| kernels::sigmoid(x))
}

/// Clamp into `[lo, hi]`; gradient passes only strictly inside the range.
pub fn clamp(x: &Var, lo: f64, hi: f64) -> Result<Var> {
    unary(
        "clamp",
        x,
        move |v| v.clamp(lo, hi),
        move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
    )
}

// ── broadcasting ────────────────────────────────────────────────────────

/// `a + b` where `b` is tiled over `a` (`a.len()` a multiple of `b.len()`).
pub fn add_tiled(a: &Var, b: &Var) -> Result<Var> {
    let n = b.value().len();
    if n == 0 || a.value().len() % n != 0 {
        return Err(Error::shape(format!(
            "cannot tile {:?} over {:?}",
            b.shape(),
            a.shape()
        )));
    }
    let mut v = a.value().clone();
    for chunk in v.data_mut().chunks_mut(n) {
        for (x, y) in chunk.iter_mut().zip(b.value().data()) {
            *x += y;
        }
    }
    Var::record(
        "add_tiled",
        v,
        &[a, b],
        Box::new(move |g, _, p| {
            let gb = need(p, 1).then(|| {
                let mut acc = Tensor::zeros(p[1].shape());
                for chunk in g.data().chunks(n) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(chunk) {
                        *a += x;
                    }
                }
                acc
            });
            Ok(vec![Some(g.clone()), gb])
        }),
    )
}

/// `a * b` where `b` is tiled over `a`.
pub fn mul_tiled(a: &Var, b: &Var) -> Result<Var> {
    let n = b.value().len();
    if n == 0 || a.value().len() % n != 0 {
        return Err(Error::shape(format!(
            "cannot tile {:?} over {:?}",
            b.shape(),
            a.shape()
        )));
    }
    let mut v = a.value().clone();
    for chunk in v.data_mut().chunks_mut(n) {
        for (x, y) in chunk.iter_mut().zip(b.value().data()) {
            *x *= y;
        }
    }
    Var::record(
        "mul_tiled",
        v,
        &[a, b],
        Box::new(move |g, _, p| {
            let bv = p[1].value().data();
            let ga = need(p, 0).then(|| {
                let mut t = g.clone();
                for chunk in t.data_mut().chunks_mut(n) {
                    for (x, y) in chunk.iter_mut().zip(bv) {
                        *x *= y;
                    }
                }
                t
            });
            let gb = need(p, 1).then(|| {
                let mut acc = Tensor::zeros(p[1].shape());
                for (gc, ac) in g.data().chunks(n).zip(p[0].value().data().chunks(n)) {
                    for ((s, &gv), &av) in acc.data_mut().iter_mut().zip(gc).zip(ac) {
                        *s += gv * av;
                    }
                }
                acc
            });
            Ok(vec![ga, gb])
        }),
    )
}

/// Adds a single-element tensor to every entry of `a`.
pub fn add_scalar_var(a: &Var, s: &Var) -> Result<Var> {
    if s.value().len() != 1 {
        return Err(Error::shape(format!("expected a scalar, got {:?}", s.shape())));
    }
    add_tiled(a, s)
}

/// Fills a tensor of `shape` with the value of a single-element tensor.
pub fn broadcast_scalar(s: &Var, shape: &[usize]) -> Result<Var> {
    if s.value().len() != 1 {
        return Err(Error::shape(format!("expected a scalar, got {:?}", s.shape())));
    }
    let v = Tensor::full(shape, s.value().item());
    Var::record(
        "broadcast_scalar",
        v,
        &[s],
        Box::new(|g, _, _| Ok(vec![Some(Tensor::scalar(g.sum()))])),
    )
}

/// Repeats a `[..., 1]` tensor `n` times along its last axis.
pub fn broadcast_last(x: &Var, n: usize) -> Result<Var> {
    if x.value().last_dim() != 1 {
        return Err(Error::shape(format!(
            "broadcast_last expects a trailing axis of 1, got {:?}",
            x.shape()
        )));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let data = x
        .value()
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, n))
        .collect();
    let v = Tensor::new(shape, data)?;
    Var::record(
        "broadcast_last",
        v,
        &[x],
        Box::new(move |g, _, p| {
            let d = g.data().chunks(n).map(|c| c.iter().sum()).collect();
            Ok(vec![Some(Tensor::new(p[0].shape().to_vec(), d)?)])
        }),
    )
}

// ── reductions ──────────────────────────────────────────────────────────

pub fn sum_all(x: &Var) -> Result<Var> {
    let v = Tensor::scalar(x.value().sum());
    Var::record(
        "sum_all",
        v,
        &[x],
        Box::new(|g, _, p| Ok(vec![Some(Tensor::full(p[0].shape(), g.item()))])),
    )
}

pub fn mean_all(x: &Var) -> Result<Var> {
    let n = x.value().len();
    if n == 0 {
        return Err(Error::shape("mean of an empty tensor"));
    }
    scale(&sum_all(x)?, 1.0 / n as f64)
}

/// Sums over the last axis, keeping it with extent 1.
pub fn sum_last(x: &Var) -> Result<Var> {
    let c = x.value().last_dim();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    let d = x.value().data().chunks(c).map(|r| r.iter().sum()).collect();
    let v = Tensor::new(shape, d)?;
    Var::record(
        "sum_last",
        v,
        &[x],
        Box::new(move |g, _, p| {
            let d = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, c))
                .collect();
            Ok(vec![Some(Tensor::new(p[0].shape().to_vec(), d)?)])
        }),
    )
}

/// Averages over every axis but the last: `[..., C] -> [C]`.
pub fn mean_over_positions(x: &Var) -> Result<Var> {
    let c = x.value().last_dim();
    let rows = x.value().len() / c.max(1);
    if rows == 0 {
        return Err(Error::shape("mean over zero positions"));
    }
    let mut acc = vec![0.0; c];
    for r in x.value().data().chunks(c) {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let inv = 1.0 / rows as f64;
    let v = Tensor::new(vec![c], acc.into_iter().map(|a| a * inv).collect())?;
    Var::record(
        "mean_over_positions",
        v,
        &[x],
        Box::new(move |g, _, p| {
            let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
            let d = std::iter::repeat_n(row, rows).flatten().collect();
            Ok(vec![Some(Tensor::new(p[0].shape().to_vec(), d)?)])
        }),
    )
}

/// Element `index` of the flattened tensor, as a one-element tensor.
pub fn select(x: &Var, index: usize) -> Result<Var> {
    let Some(&val) = x.value().data().get(index) else {
        return Err(Error::shape(format!("index {index} out of range for {:?}", x.shape())));
    };
    Var::record(
        "select",
        Tensor::scalar(val),
        &[x],
        Box::new(move |g, _, p| {
            let mut t = Tensor::zeros(p[0].shape());
            t.data_mut()[index] = g.item();
            Ok(vec![Some(t)])
        }),
    )
}

// ── layout ──────────────────────────────────────────────────────────────

pub fn reshape(x: &Var, shape: &[usize]) -> Result<Var> {
    let v = x.value().clone().reshape(shape)?;
    Var::record(
        "reshape",
        v,
        &[x],
        Box::new(|g, _, p| Ok(vec![Some(g.clone().reshape(p[0].shape())?)])),
    )
}

pub fn permute(x: &Var, axes: &[usize]) -> Result<Var> {
    let v = kernels::permute(x.value(), axes)?;
    let inv = kernels::inverse_permutation(axes);
    Var::record(
        "permute",
        v,
        &[x],
        Box::new(move |g, _, _| Ok(vec![Some(kernels::permute(g, &inv)?)])),
    )
}

/// Concatenates along the last axis; leading extents must agree.
pub fn concat_last(a: &Var, b: &Var) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::shape(format!("cannot concat {sa:?} and {sb:?} on the last axis")));
    }
    let (ca, cb) = (a.value().last_dim(), b.value().last_dim());
    let mut data = Vec::with_capacity(a.value().len() + b.value().len());
    for (ra, rb) in a.value().data().chunks(ca).zip(b.value().data().chunks(cb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    let v = Tensor::new(shape, data)?;
    Var::record(
        "concat_last",
        v,
        &[a, b],
        Box::new(move |g, _, p| {
            let mut ga = Vec::with_capacity(p[0].value().len());
            let mut gb = Vec::with_capacity(p[1].value().len());
            for r in g.data().chunks(ca + cb) {
                ga.extend_from_slice(&r[..ca]);
                gb.extend_from_slice(&r[ca..]);
            }
            Ok(vec![
                Some(Tensor::new(p[0].shape().to_vec(), ga)?),
                Some(Tensor::new(p[1].shape().to_vec(), gb)?),
            ])
        }),
    )
}

// ── linear algebra and neural-network layers ────────────────────────────

pub fn bmm(a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
    let v = kernels::bmm(a.value(), false, b.value(), trans_b)?;
    Var::record(
        "bmm",
        v,
        &[a, b],
        Box::new(move |g, _, p| {
            let (av, bv) = (p[0].value(), p[1].value());
            // C = A B  : dA = G Bᵀ, dB = Aᵀ G
            // C = A Bᵀ : dA = G B,  dB = Gᵀ A
            let ga = need(p, 0).then(|| kernels::bmm(g, false, bv, !trans_b)).transpose()?;
            let gb = if !need(p, 1) {
                None
            } else if trans_b {
                Some(kernels::bmm(g, true, av, false)?)
            } else {
                Some(kernels::bmm(av, true, g, false)?)
            };
            Ok(vec![ga, gb])
        }),
    )
}

/// `W x + b` for a vector `x` of length `in`, `W` shaped `[out, in]`.
pub fn linear(x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let (out_dim, in_dim) = match *w.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::shape(format!("linear weight must be [out,in], got {:?}", w.shape()))),
    };
    x.value().expect_shape(&[in_dim], "linear input")?;
    b.value().expect_shape(&[out_dim], "linear bias")?;
    let xv = x.value().clone().reshape(&[1, in_dim, 1])?;
    let wv = w.value().clone().reshape(&[1, out_dim, in_dim])?;
    let y = kernels::bmm(&wv, false, &xv, false)?.reshape(&[out_dim])?;
    let v = y.add(b.value())?;
    Var::record(
        "linear",
        v,
        &[x, w, b],
        Box::new(move |g, _, p| {
            let (xv, wv) = (p[0].value().data(), p[1].value().data());
            let gx = need(p, 0).then(|| {
                Tensor::from_fn(&[in_dim], |i| (0..out_dim).map(|o| g.data()[o] * wv[o * in_dim + i]).sum())
            });
            let gw = need(p, 1)
                .then(|| Tensor::from_fn(&[out_dim, in_dim], |k| g.data()[k / in_dim] * xv[k % in_dim]));
            Ok(vec![gx, gw, Some(g.clone())])
        }),
    )
}

pub fn conv2d(x: &Var, kernel: &Var, bias: &Var, stride: usize, groups: usize, pad: usize) -> Result<Var> {
    let v = kernels::conv2d(x.value(), kernel.value(), bias.value(), stride, groups, pad)?;
    Var::record(
        "conv2d",
        v,
        &[x, kernel, bias],
        Box::new(move |g, _, p| {
            let (dx, dk, db) =
                kernels::conv2d_backward(p[0].value(), p[1].value(), stride, groups, pad, g)?;
            Ok(vec![Some(dx), Some(dk), Some(db)])
        }),
    )
}

pub fn conv_transpose2d(x: &Var, kernel: &Var, bias: &Var, stride: usize) -> Result<Var> {
    let v = kernels::conv_transpose2d(x.value(), kernel.value(), bias.value(), stride)?;
    Var::record(
        "conv_transpose2d",
        v,
        &[x, kernel, bias],
        Box::new(move |g, _, p| {
            let (dx, dk, db) = kernels::conv_transpose2d_backward(p[0].value(), p[1].value(), stride, g)?;
            Ok(vec![Some(dx), Some(dk), Some(db)])
        }),
    )
}

pub fn softmax_lastdim(x: &Var) -> Result<Var> {
    let v = kernels::softmax_lastdim(x.value())?;
    Var::record(
        "softmax_lastdim",
        v,
        &[x],
        Box::new(|g, out, _| Ok(vec![Some(kernels::softmax_lastdim_backward(out, g))])),
    )
}

pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    let v = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps)?;
    Var::record(
        "layer_norm",
        v,
        &[x, gamma, beta],
        Box::new(move |g, _, p| {
            let (dx, dg, db) = kernels::layer_norm_backward(p[0].value(), p[1].value(), eps, g);
            Ok(vec![Some(dx), Some(dg), Some(db)])
        }),
    )
}

/// A linear map with a known adjoint, e.g. the dispersion shift.
pub type LinearFn = Rc<dyn Fn(&Tensor) -> Result<Tensor>>;

pub fn linear_map(op: &'static str, x: &Var, forward: LinearFn, adjoint: LinearFn) -> Result<Var> {
    let v = forward(x.value())?;
    Var::record(op, v, &[x], Box::new(move |g, _, _| Ok(vec![Some(adjoint(g)?)])))
}
