//! Orthonormal multilevel Haar transform, periodic, any dimension. The
//! analysis/synthesis pair is exactly orthogonal, so the inverse is the
//! adjoint to machine precision.

use crate::array::ComplexArray;
use crate::{Error, Result};
use ndarray::Axis;
use num_complex::Complex64;

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn check(shape: &[usize], levels: usize) -> Result<()> {
    for &n in shape {
        if n % (1 << levels) != 0 {
            return Err(Error::InvalidArgument(format!(
                "axis length {n} not divisible by 2^{levels}"
            )));
        }
    }
    Ok(())
}

/// Multilevel forward transform; the level-L lowpass block lands in the
/// leading corner.
pub fn haar_forward(x: &ComplexArray, levels: usize) -> Result<ComplexArray> {
    check(x.shape(), levels)?;
    let mut out = x.clone();
    let d = x.ndim();
    for level in 0..levels {
        for axis in 0..d {
            let m = x.shape()[axis] >> level;
            let mut buf = vec![Complex64::default(); m];
            for mut lane in out.lanes_mut(Axis(axis)) {
                for i in 0..m / 2 {
                    let a = lane[2 * i];
                    let b = lane[2 * i + 1];
                    buf[i] = (a + b) * INV_SQRT2;
                    buf[m / 2 + i] = (a - b) * INV_SQRT2;
                }
                for i in 0..m {
                    lane[i] = buf[i];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse (= adjoint) of [`haar_forward`].
pub fn haar_inverse(w: &ComplexArray, levels: usize) -> Result<ComplexArray> {
    check(w.shape(), levels)?;
    let mut out = w.clone();
    let d = w.ndim();
    for level in (0..levels).rev() {
        for axis in 0..d {
            let m = w.shape()[axis] >> level;
            let mut buf = vec![Complex64::default(); m];
            for mut lane in out.lanes_mut(Axis(axis)) {
                for i in 0..m / 2 {
                    let l = lane[i];
                    let h = lane[m / 2 + i];
                    buf[2 * i] = (l + h) * INV_SQRT2;
                    buf[2 * i + 1] = (l - h) * INV_SQRT2;
                }
                for i in 0..m {
                    lane[i] = buf[i];
                }
            }
        }
    }
    Ok(out)
}
