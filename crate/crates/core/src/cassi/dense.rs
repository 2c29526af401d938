//! Dense materialisation of the sensing operator, for oracle checks only.

use nalgebra::{DMatrix, DVector};

use super::{dispersed_width, HsiCube, Measurement, SensingOperator};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Largest matrix extent the dense routines will allocate along either axis.
pub const DEFAULT_ORACLE_CAP: usize = 50_000;

fn check_cap(cols: usize, cap: usize) -> Result<()> {
    if cols > cap {
        return Err(Error::OracleCap(format!(
            "dense operator would need {cols} columns, cap is {cap}"
        )));
    }
    Ok(())
}

/// `Phi` as an `[H W', H W' B]` matrix acting on the row-major shifted cube.
pub fn materialize_dense(op: &SensingOperator, cap: usize) -> Result<DMatrix<f64>> {
    let (h, wp, c) = (op.height(), op.shifted_width(), op.bands());
    check_cap(h * wp * c, cap)?;
    let mut m = DMatrix::zeros(h * wp, h * wp * c);
    for (i, px) in op.shifted_mask().data().chunks(c).enumerate() {
        for (n, &v) in px.iter().enumerate() {
            m[(i, i * c + n)] = v;
        }
    }
    Ok(m)
}

/// `Phi` composed with the dispersion shift: an `[H W', H W B]` matrix acting
/// on the row-major unshifted cube.
pub fn materialize_dense_cube(op: &SensingOperator, cap: usize) -> Result<DMatrix<f64>> {
    let (h, w, c, step) = (op.height(), op.width(), op.bands(), op.step());
    let wp = dispersed_width(w, c, step);
    check_cap(h * w * c, cap)?;
    let mut m = DMatrix::zeros(h * wp, h * w * c);
    for r in 0..h {
        for col in 0..w {
            for n in 0..c {
                let row = r * wp + col + step * n;
                m[(row, (r * w + col) * c + n)] = op.shifted_mask().data()[row * c + n];
            }
        }
    }
    Ok(m)
}

pub fn to_vector(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

/// Solves `(A^T A + mu I) x = A^T y + mu z` by Cholesky with `A` the dense
/// cube operator.
pub fn dense_data_step(
    op: &SensingOperator,
    y: &Measurement,
    z: &HsiCube,
    mu: f64,
    cap: usize,
) -> Result<HsiCube> {
    let a = materialize_dense_cube(op, cap)?;
    let n = a.ncols();
    let lhs = a.transpose() * &a + DMatrix::identity(n, n) * mu;
    let rhs = a.transpose() * to_vector(y.tensor()) + to_vector(z.tensor()) * mu;
    let chol = lhs
        .cholesky()
        .ok_or_else(|| Error::Degenerate("dense data-step system is not positive definite".into()))?;
    let x = chol.solve(&rhs);
    HsiCube::new(Tensor::new(z.tensor().shape().to_vec(), x.as_slice().to_vec())?)
}
