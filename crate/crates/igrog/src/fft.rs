//! Centered FFT helpers shared by every fast operator.
//!
//! The centered forward transform is `fftshift(fft(ifftshift(x)))`, which for
//! any axis length evaluates `X[k] = sum_r x[r] exp(-j 2 pi k r / N)` with
//! `r, k = index - floor(N/2)`. Transforms are unnormalized, so the centered
//! inverse (same shift sandwich, conjugate kernel) is the exact adjoint of the
//! forward; divide by the element count where a true inverse is needed.

use ndarray::{ArrayD, Axis, Dimension};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::cell::RefCell;
use std::sync::Arc;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, dir: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, dir))
}

/// Unnormalized centered DFT along the given axes.
pub fn centered_fft(x: &ArrayD<Complex64>, axes: &[usize]) -> ArrayD<Complex64> {
    transform(x, axes, FftDirection::Forward)
}

/// Unnormalized centered inverse DFT along the given axes (exact adjoint of
/// [`centered_fft`]).
pub fn centered_ifft(x: &ArrayD<Complex64>, axes: &[usize]) -> ArrayD<Complex64> {
    transform(x, axes, FftDirection::Inverse)
}

/// Normalized centered inverse: `centered_ifft` divided by the product of the
/// transformed axis lengths.
pub fn centered_ifft_norm(x: &ArrayD<Complex64>, axes: &[usize]) -> ArrayD<Complex64> {
    let mut out = centered_ifft(x, axes);
    let scale = 1.0 / axes.iter().map(|&a| x.shape()[a] as f64).product::<f64>();
    out.mapv_inplace(|v| v * scale);
    out
}

fn transform(x: &ArrayD<Complex64>, axes: &[usize], dir: FftDirection) -> ArrayD<Complex64> {
    let mut out = x.clone();
    for &axis in axes {
        let n = out.shape()[axis];
        let fft = plan(n, dir);
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let mut buf = vec![Complex64::default(); n];
        // ifftshift on gather, fftshift on scatter: one pass per lane.
        let pre = n / 2; // floor(n/2)
        let post = n - n / 2; // ceil(n/2)
        for mut lane in out.lanes_mut(Axis(axis)) {
            for j in 0..n {
                buf[j] = lane[(j + pre) % n];
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for i in 0..n {
                lane[i] = buf[(i + post) % n];
            }
        }
    }
    out
}

/// Zero-pad `x` to `shape`, keeping the center voxel `floor(n/2)` aligned.
pub fn pad_center(x: &ArrayD<Complex64>, shape: &[usize]) -> ArrayD<Complex64> {
    assert_eq!(x.ndim(), shape.len());
    for (o, n) in x.shape().iter().zip(shape) {
        assert!(n >= o, "pad_center: target smaller than input");
    }
    let mut out = ArrayD::zeros(shape.to_vec());
    let offsets: Vec<usize> = x
        .shape()
        .iter()
        .zip(shape)
        .map(|(&o, &n)| n / 2 - o / 2)
        .collect();
    for (idx, &v) in x.indexed_iter() {
        let mut j = Vec::with_capacity(idx.ndim());
        for (a, &i) in idx.slice().iter().enumerate() {
            j.push(i + offsets[a]);
        }
        out[j.as_slice()] = v;
    }
    out
}

/// Crop the center `shape` region out of `x` (adjoint of [`pad_center`]).
pub fn crop_center(x: &ArrayD<Complex64>, shape: &[usize]) -> ArrayD<Complex64> {
    assert_eq!(x.ndim(), shape.len());
    for (o, n) in x.shape().iter().zip(shape) {
        assert!(n <= o, "crop_center: target larger than input");
    }
    let offsets: Vec<usize> = x
        .shape()
        .iter()
        .zip(shape)
        .map(|(&o, &n)| o / 2 - n / 2)
        .collect();
    let mut out = ArrayD::zeros(shape.to_vec());
    for (idx, v) in out.indexed_iter_mut() {
        let mut j = Vec::with_capacity(idx.ndim());
        for (a, &i) in idx.slice().iter().enumerate() {
            j.push(i + offsets[a]);
        }
        *v = x[j.as_slice()];
    }
    out
}
