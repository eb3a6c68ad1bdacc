//! Pipe-Menon iterative density compensation.

use crate::nufft::NufftPlan;
use crate::{Error, Result};

/// Per-sample density compensation weights, max-normalized.
#[derive(Debug, Clone)]
pub struct Dcf {
    pub weights: Vec<f64>,
}

/// Fixed-point iteration `w <- w / (G G^H w)`, where `G G^H` is Kaiser-Bessel
/// gridding followed by degridding (no apodization), started from all ones.
/// Returns the raw weights before max-normalization.
pub fn pipe_menon_raw(plan: &NufftPlan, iters: usize) -> Result<Vec<f64>> {
    if iters == 0 {
        return Err(Error::InvalidArgument("pipe_menon needs at least one iteration".into()));
    }
    let m = plan.num_samples();
    let mut w = vec![1.0f64; m];
    for _ in 0..iters {
        let den = plan.kb_density_convolution(&w);
        let dmax = den.iter().cloned().fold(0.0f64, f64::max);
        let floor = 1e-12 * dmax;
        for (wi, di) in w.iter_mut().zip(&den) {
            *wi /= di.max(floor);
        }
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical("pipe_menon produced invalid weights".into()));
    }
    Ok(w)
}

/// Max-normalized Pipe-Menon weights (30 iterations by default).
pub fn pipe_menon(plan: &NufftPlan, iters: usize) -> Result<Dcf> {
    let mut w = pipe_menon_raw(plan, iters)?;
    let wmax = w.iter().cloned().fold(0.0f64, f64::max);
    if wmax <= 0.0 {
        return Err(Error::Numerical("pipe_menon weights all zero".into()));
    }
    for v in w.iter_mut() {
        *v /= wmax;
    }
    Ok(Dcf { weights: w })
}
