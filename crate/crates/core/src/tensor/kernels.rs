//! Forward and backward kernels on plain tensors.
//!
//! Images are channel-last `[H, W, C]`. Convolution kernels are laid out as
//! `[C_out, k, k, C_in / groups]`, transposed-convolution kernels as
//! `[C_in, k, k, C_out]`.

use super::Tensor;
use crate::{Error, Result};

/// `tanh` approximation of GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── softmax ─────────────────────────────────────────────────────────────

pub fn softmax_lastdim(t: &Tensor) -> Result<Tensor> {
    if t.is_empty() {
        return Err(Error::shape("softmax of an empty tensor"));
    }
    let n = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Given softmax output `y` and upstream gradient `g`, returns `dL/dx`.
pub fn softmax_lastdim_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut gx = g.clone();
    for (gr, yr) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for (gv, &yv) in gr.iter_mut().zip(yr) {
            *gv = yv * (*gv - s);
        }
    }
    gx
}

// ── layer norm over the last axis ───────────────────────────────────────

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    check_layer_norm(x, gamma, beta, eps)?;
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let (mean, inv) = row_stats(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = x.last_dim();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut xhat = vec![0.0; c];
    let mut gh = vec![0.0; c];
    for ((xr, gr), dxr) in x
        .data()
        .chunks(c)
        .zip(g.data().chunks(c))
        .zip(dx.data_mut().chunks_mut(c))
    {
        let (mean, inv) = row_stats(xr, eps);
        for j in 0..c {
            xhat[j] = (xr[j] - mean) * inv;
            gh[j] = gr[j] * gamma.data()[j];
            dgamma.data_mut()[j] += gr[j] * xhat[j];
            dbeta.data_mut()[j] += gr[j];
        }
        let mean_gh = gh.iter().sum::<f64>() / c as f64;
        let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            dxr[j] = inv * (gh[j] - mean_gh - xhat[j] * mean_ghx);
        }
    }
    (dx, dgamma, dbeta)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn check_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "layer norm eps must be positive, got {eps}"
        )));
    }
    if x.is_empty() {
        return Err(Error::shape("layer norm of an empty tensor"));
    }
    let c = x.last_dim();
    gamma.expect_shape(&[c], "layer norm gamma")?;
    beta.expect_shape(&[c], "layer norm beta")
}

// ── convolution ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        groups: usize,
        pad: usize,
    ) -> Result<Self> {
        let (h, w, cin) = match *input {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::shape(format!("conv2d input must be [H,W,C], got {input:?}"))),
        };
        let (cout, k, cpg) = match *kernel {
            [o, k1, k2, i] if k1 == k2 => (o, k1, i),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel must be [Cout,k,k,Cin/groups], got {kernel:?}"
                )))
            }
        };
        if stride == 0 || groups == 0 || k == 0 {
            return Err(Error::shape("conv2d stride, groups and kernel size must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(format!(
                "conv2d channels {cin}->{cout} not divisible by groups {groups}"
            )));
        }
        if cpg != cin / groups {
            return Err(Error::shape(format!(
                "conv2d kernel expects {cpg} input channels per group, input provides {}",
                cin / groups
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d kernel {k} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(Self {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    groups: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, groups, pad)?;
    bias.expect_shape(&[g.cout], "conv2d bias")?;
    let (cpi, cpo) = (g.cin_per_group(), g.cout_per_group());
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; g.ho * g.wo * g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let acc = &mut out[(oy * g.wo + ox) * g.cout..][..g.cout];
            acc.copy_from_slice(bias.data());
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &xd[(iy * g.w + ix) * g.cin..][..g.cin];
                    for (o, a) in acc.iter_mut().enumerate() {
                        let xs = &xin[(o / cpo) * cpi..][..cpi];
                        let ks = &kd[((o * g.k + ky) * g.k + kx) * cpi..][..cpi];
                        *a += xs.iter().zip(ks).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.ho, g.wo, g.cout], out)
}

/// Returns `(dx, dkernel, dbias)` for [`conv2d`].
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    groups: usize,
    pad: usize,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, groups, pad)?;
    gy.expect_shape(&[g.ho, g.wo, g.cout], "conv2d output gradient")?;
    let (cpi, cpo) = (g.cin_per_group(), g.cout_per_group());
    let xd = x.data();
    let kd = kernel.data();
    let gd = gy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let go = &gd[(oy * g.wo + ox) * g.cout..][..g.cout];
            for (b, &v) in db.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let base = (iy * g.w + ix) * g.cin;
                    for (o, &gv) in go.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let off = base + (o / cpo) * cpi;
                        let kof = ((o * g.k + ky) * g.k + kx) * cpi;
                        for c in 0..cpi {
                            dx[off + c] += gv * kd[kof + c];
                            dk[kof + c] += gv * xd[off + c];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![g.cout], db)?,
    ))
}

/// Transposed convolution without padding: output extent `(H-1)*stride + k`.
pub fn conv_transpose2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let (h, w, cin, k, cout) = transpose_geom(x, kernel, stride)?;
    bias.expect_shape(&[cout], "conv_transpose2d bias")?;
    let (ho, wo) = ((h - 1) * stride + k, (w - 1) * stride + k);
    let mut out = vec![0.0; ho * wo * cout];
    for px in out.chunks_mut(cout) {
        px.copy_from_slice(bias.data());
    }
    let xd = x.data();
    let kd = kernel.data();
    for iy in 0..h {
        for ix in 0..w {
            let xin = &xd[(iy * w + ix) * cin..][..cin];
            for ky in 0..k {
                for kx in 0..k {
                    let o = &mut out[((iy * stride + ky) * wo + ix * stride + kx) * cout..][..cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        let ks = &kd[((ci * k + ky) * k + kx) * cout..][..cout];
                        for (a, &kv) in o.iter_mut().zip(ks) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, cout], out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, cin, k, cout) = transpose_geom(x, kernel, stride)?;
    let (ho, wo) = ((h - 1) * stride + k, (w - 1) * stride + k);
    gy.expect_shape(&[ho, wo, cout], "conv_transpose2d output gradient")?;
    let xd = x.data();
    let kd = kernel.data();
    let gd = gy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; cout];
    for go in gd.chunks(cout) {
        for (b, &v) in db.iter_mut().zip(go) {
            *b += v;
        }
    }
    for iy in 0..h {
        for ix in 0..w {
            let xb = (iy * w + ix) * cin;
            for ky in 0..k {
                for kx in 0..k {
                    let go = &gd[((iy * stride + ky) * wo + ix * stride + kx) * cout..][..cout];
                    for ci in 0..cin {
                        let kof = ((ci * k + ky) * k + kx) * cout;
                        let xv = xd[xb + ci];
                        let mut acc = 0.0;
                        for (o, &gv) in go.iter().enumerate() {
                            acc += gv * kd[kof + o];
                            dk[kof + o] += gv * xv;
                        }
                        dx[xb + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![cout], db)?,
    ))
}

fn transpose_geom(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, cin) = x.dims3()?;
    match *kernel.shape() {
        [ci, k1, k2, co] if ci == cin && k1 == k2 && k1 > 0 && stride > 0 => {
            Ok((h, w, cin, k1, co))
        }
        _ => Err(Error::shape(format!(
            "conv_transpose2d kernel {:?} incompatible with input {:?}",
            kernel.shape(),
            x.shape()
        ))),
    }
}

// ── batched matrix multiply ─────────────────────────────────────────────

/// `[B, m, k] x [B, k, n] -> [B, m, n]`; either operand may be supplied
/// transposed in its last two axes.
pub fn bmm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (batch, m, ka, sa) = mat_dims(a, trans_a)?;
    let (batch_b, kb, n, sb) = mat_dims(b, trans_b)?;
    if batch != batch_b || ka != kb {
        return Err(Error::shape(format!(
            "bmm operands {:?}{} and {:?}{} do not conform",
            a.shape(),
            if trans_a { "ᵀ" } else { "" },
            b.shape(),
            if trans_b { "ᵀ" } else { "" }
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &ad[bi * m * ka..][..m * ka];
        let bb = &bd[bi * ka * n..][..ka * n];
        let ob = &mut out[bi * m * n..][..m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..][..n];
            for p in 0..ka {
                let av = ab[i * sa.0 + p * sa.1];
                if av == 0.0 {
                    continue;
                }
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += av * bb[p * sb.0 + j * sb.1];
                }
            }
        }
    }
    Tensor::new(vec![batch, m, n], out)
}

/// Returns `(batch, rows, cols, (row_stride, col_stride))` of the logical matrix.
fn mat_dims(t: &Tensor, trans: bool) -> Result<(usize, usize, usize, (usize, usize))> {
    match *t.shape() {
        [b, r, c] => Ok(if trans {
            (b, c, r, (1, c))
        } else {
            (b, r, c, (c, 1))
        }),
        _ => Err(Error::shape(format!("bmm expects rank-3 operands, got {:?}", t.shape()))),
    }
}

// ── layout ──────────────────────────────────────────────────────────────

pub fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(format!(
            "invalid permutation {axes:?} for rank {rank}"
        )));
    }
    let shape = t.shape();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let src = t.data();
    let mut offset = 0usize;
    for _ in 0..t.len() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_over_equal_logits() {
        let y = softmax_lastdim(&Tensor::zeros(&[1, 4])).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let y = softmax_lastdim(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in y.data().iter().zip(&e) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax_lastdim(&Tensor::zeros(&[0])).is_err());
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor::full(&[2, 2, 4], 3.5);
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.max_abs() == 0.0);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = Tensor::full(&[1, 4], 1.0);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(layer_norm(&x, &g, &b, 0.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let x = Tensor::zeros(&[4, 4, 3]);
        let k = Tensor::zeros(&[4, 1, 1, 1]);
        let b = Tensor::zeros(&[4]);
        assert!(conv2d(&x, &k, &b, 1, 2, 0).is_err());
    }

    #[test]
    fn conv_output_extent_arithmetic() {
        let x = Tensor::zeros(&[9, 7, 2]);
        let k = Tensor::zeros(&[3, 4, 4, 2]);
        let b = Tensor::zeros(&[3]);
        let y = conv2d(&x, &k, &b, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[(9 + 2 - 4) / 2 + 1, (7 + 2 - 4) / 2 + 1, 3]);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], t.data()[4]);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bmm_transposes() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(bmm(&a, false, &i, false).unwrap().data(), a.data());
        assert_eq!(bmm(&a, true, &i, false).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(bmm(&i, false, &a, true).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
