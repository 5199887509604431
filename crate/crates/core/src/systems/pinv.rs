//! Full-measurement control baseline: complex least squares through the
//! pseudo-inverse of the transmission matrix.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::{Complex, DMatrix, DVector};

pub struct PinvSolution {
    /// Input field as interleaved `(re, im)` pairs of length 2n.
    pub x: Tensor,
    /// Set when F was rank deficient at the regularization threshold.
    pub condition_warning: bool,
}

const RIDGE: f64 = 1e-8;

/// Solve `min_x ||F x - y||_2` by SVD with singular values below the
/// regularization threshold truncated. `y_target` is interleaved complex of
/// length 2m.
pub fn pseudo_inverse_control(
    f_re: &Tensor,
    f_im: &Tensor,
    y_target: &Tensor,
) -> Result<PinvSolution> {
    if f_re.rank() != 2 || !f_re.same_shape(f_im) {
        return Err(Error::shape("pseudo_inverse_control", f_re.shape(), f_im.shape()));
    }
    let (m, n) = (f_re.shape()[0], f_re.shape()[1]);
    if y_target.len() != 2 * m {
        return Err(Error::shape("pseudo_inverse_control target", y_target.shape(), &[2 * m]));
    }
    let f = DMatrix::from_fn(m, n, |i, j| {
        Complex::new(f_re.data()[i * n + j], f_im.data()[i * n + j])
    });
    let y = DVector::from_fn(m, |i, _| {
        Complex::new(y_target.data()[2 * i], y_target.data()[2 * i + 1])
    });
    let svd = f.svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = (RIDGE * max_sv).max(RIDGE);
    let rank_deficient = svd
        .singular_values
        .iter()
        .any(|&s| s <= cutoff)
        || svd.singular_values.len() < n.min(m);
    let x = svd
        .solve(&y, cutoff)
        .map_err(|e| Error::Invalid(format!("pseudo-inverse solve failed: {e}")))?;
    let mut data = vec![0.0; 2 * n];
    for i in 0..n {
        data[2 * i] = x[i].re;
        data[2 * i + 1] = x[i].im;
    }
    Ok(PinvSolution {
        x: Tensor::new(vec![2 * n], data)?,
        condition_warning: rank_deficient,
    })
}

/// Phase map in `[0,1]^n` whose phasors point along the given complex field.
pub fn phases_of(x_complex: &Tensor) -> Tensor {
    let n = x_complex.len() / 2;
    let data = (0..n)
        .map(|i| {
            let a = x_complex.data()[2 * i + 1].atan2(x_complex.data()[2 * i]);
            let frac = a / std::f64::consts::TAU;
            frac - frac.floor()
        })
        .map(|v| v.clamp(0.0, 1.0).min(1.0))
        .collect();
    Tensor::from_vec(data)
}
