//! Iterative reconstruction: the linear-operator abstraction, CG-SENSE and
//! FISTA with L1-wavelet regularization.
//!
//! Operators carry their own DCF weights: `apply`/`adjoint` form the exact
//! unweighted pair (so adjoint tests hold at machine precision) and
//! `adjoint_weighted`/`normal` realize `A^H W b` and `A^H W A x`, which is
//! what both solvers iterate.

use crate::array::{CoilMaps, ComplexArray, Grid};
use crate::fft::{centered_fft, centered_ifft};
use crate::nufft::{toeplitz_psf, NufftPlan, ToeplitzPsf};
use crate::wavelet::{haar_forward, haar_inverse};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Image-to-data linear operator with optional per-sample weights and a fast
/// normal path.
pub trait LinearOp: Sync {
    fn domain_shape(&self) -> Vec<usize>;
    fn num_coils(&self) -> usize;
    fn num_samples(&self) -> usize;
    /// `A x`: image to C x M data.
    fn apply(&self, img: &ComplexArray) -> ComplexArray2;
    /// Exact adjoint `A^H y` (no weights).
    fn adjoint(&self, data: &ComplexArray2) -> ComplexArray;
    /// The operator's DCF weights, if any.
    fn weights(&self) -> Option<&[f64]> {
        None
    }
    /// `A^H W y`.
    fn adjoint_weighted(&self, data: &ComplexArray2) -> ComplexArray {
        match self.weights() {
            None => self.adjoint(data),
            Some(w) => {
                let mut wd = data.clone();
                for mut row in wd.rows_mut() {
                    for (v, &wi) in row.iter_mut().zip(w) {
                        *v *= wi;
                    }
                }
                self.adjoint(&wd)
            }
        }
    }
    /// `A^H W A x` (override with a fast path where one exists).
    fn normal(&self, img: &ComplexArray) -> ComplexArray {
        self.adjoint_weighted(&self.apply(img))
    }
}

pub type ComplexArray2 = Array2<Complex64>;

/// SENSE operator through a NUFFT: coil multiply then gridding transform.
pub struct SenseNufftOp {
    pub maps: CoilMaps,
    pub plan: NufftPlan,
    pub dcf: Option<Vec<f64>>,
    toeplitz: Option<ToeplitzPsf>,
}

impl SenseNufftOp {
    pub fn new(maps: CoilMaps, plan: NufftPlan, dcf: Option<Vec<f64>>) -> Result<Self> {
        if maps.spatial_shape() != plan.grid.shape() {
            return Err(Error::ShapeMismatch("maps vs plan grid".into()));
        }
        if let Some(w) = &dcf {
            if w.len() != plan.num_samples() {
                return Err(Error::ShapeMismatch("dcf length vs samples".into()));
            }
        }
        Ok(SenseNufftOp { maps, plan, dcf, toeplitz: None })
    }

    /// Precompute the Toeplitz PSF of `A^H W A` for the stored weights.
    pub fn with_toeplitz(mut self) -> Result<Self> {
        let w = match &self.dcf {
            Some(w) => w.clone(),
            None => vec![1.0; self.plan.num_samples()],
        };
        self.toeplitz = Some(toeplitz_psf(&self.plan, &w)?);
        Ok(self)
    }

    fn coil_images(&self, img: &ComplexArray) -> ComplexArray {
        let c = self.maps.num_coils();
        let mut shape = vec![c];
        shape.extend(img.shape());
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for ci in 0..c {
            let mut coil = img.clone();
            coil.zip_mut_with(&self.maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
            out.index_axis_mut(Axis(0), ci).assign(&coil);
        }
        out
    }

    fn combine_coils(&self, imgs: &ComplexArray) -> ComplexArray {
        let c = self.maps.num_coils();
        let mut out = ArrayD::zeros(IxDyn(&self.domain_shape()));
        for ci in 0..c {
            let coil = imgs.index_axis(Axis(0), ci);
            let maps = self.maps.maps.index_axis(Axis(0), ci);
            ndarray::Zip::from(&mut out).and(&coil).and(&maps).for_each(|o, &x, &s| {
                *o += x * s.conj();
            });
        }
        out
    }
}

impl LinearOp for SenseNufftOp {
    fn domain_shape(&self) -> Vec<usize> {
        self.plan.grid.shape()
    }
    fn num_coils(&self) -> usize {
        self.maps.num_coils()
    }
    fn num_samples(&self) -> usize {
        self.plan.num_samples()
    }
    fn weights(&self) -> Option<&[f64]> {
        self.dcf.as_deref()
    }

    fn apply(&self, img: &ComplexArray) -> ComplexArray2 {
        let coils = self.coil_images(img);
        self.plan.forward(&coils).expect("shape checked at construction")
    }

    fn adjoint(&self, data: &ComplexArray2) -> ComplexArray {
        let imgs = self.plan.adjoint(data, None).expect("shape checked at construction");
        self.combine_coils(&imgs)
    }

    fn normal(&self, img: &ComplexArray) -> ComplexArray {
        match &self.toeplitz {
            None => self.adjoint_weighted(&self.apply(img)),
            Some(psf) => {
                let coils = self.coil_images(img);
                let normed = psf.normal(&coils).expect("PSF shape fixed");
                self.combine_coils(&normed)
            }
        }
    }
}

/// SENSE operator for Cartesian (gridded) data: coil multiply, FFT, gather at
/// integer coordinates.
pub struct SenseGriddedOp {
    pub maps: CoilMaps,
    pub grid: Grid,
    /// Wrapped integer coordinates, M x d.
    pub coords: Array2<i64>,
    pub dcf: Option<Vec<f64>>,
    /// Linear array indices corresponding to `coords`.
    flat_idx: Vec<usize>,
}

impl SenseGriddedOp {
    pub fn new(maps: CoilMaps, grid: Grid, coords: Array2<i64>, dcf: Option<Vec<f64>>) -> Result<Self> {
        if maps.spatial_shape() != grid.shape() {
            return Err(Error::ShapeMismatch("maps vs grid".into()));
        }
        if coords.ncols() != grid.dim {
            return Err(Error::ShapeMismatch("coords dim vs grid".into()));
        }
        if let Some(w) = &dcf {
            if w.len() != coords.nrows() {
                return Err(Error::ShapeMismatch("dcf length vs coords".into()));
            }
        }
        let n = grid.extent;
        let mut flat_idx = Vec::with_capacity(coords.nrows());
        for row in coords.rows() {
            let mut lin = 0usize;
            for &k in row {
                if k < grid.kmin() || k > grid.kmax() {
                    return Err(Error::InvalidArgument(format!(
                        "integer coordinate {k} outside grid [{}, {}]",
                        grid.kmin(),
                        grid.kmax()
                    )));
                }
                lin = lin * n + grid.index_of_wrapped(k);
            }
            flat_idx.push(lin);
        }
        Ok(SenseGriddedOp { maps, grid, coords, dcf, flat_idx })
    }
}

impl LinearOp for SenseGriddedOp {
    fn domain_shape(&self) -> Vec<usize> {
        self.grid.shape()
    }
    fn num_coils(&self) -> usize {
        self.maps.num_coils()
    }
    fn num_samples(&self) -> usize {
        self.flat_idx.len()
    }
    fn weights(&self) -> Option<&[f64]> {
        self.dcf.as_deref()
    }

    fn apply(&self, img: &ComplexArray) -> ComplexArray2 {
        let c = self.maps.num_coils();
        let axes: Vec<usize> = (0..self.grid.dim).collect();
        let mut out = Array2::zeros((c, self.flat_idx.len()));
        for ci in 0..c {
            let mut coil = img.clone();
            coil.zip_mut_with(&self.maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
            let ksp = centered_fft(&coil, &axes);
            let flat = ksp.as_slice().expect("standard layout");
            for (i, &idx) in self.flat_idx.iter().enumerate() {
                out[[ci, i]] = flat[idx];
            }
        }
        out
    }

    fn adjoint(&self, data: &ComplexArray2) -> ComplexArray {
        let c = self.maps.num_coils();
        let axes: Vec<usize> = (0..self.grid.dim).collect();
        let mut out = ArrayD::zeros(IxDyn(&self.domain_shape()));
        for ci in 0..c {
            let mut ksp = ArrayD::<Complex64>::zeros(IxDyn(&self.domain_shape()));
            {
                let flat = ksp.as_slice_mut().expect("standard layout");
                for (i, &idx) in self.flat_idx.iter().enumerate() {
                    flat[idx] += data[[ci, i]];
                }
            }
            let img = centered_ifft(&ksp, &axes);
            let maps = self.maps.maps.index_axis(Axis(0), ci);
            ndarray::Zip::from(&mut out).and(&img).and(&maps).for_each(|o, &x, &s| {
                *o += x * s.conj();
            });
        }
        out
    }
}

/// Largest eigenvalue of `A^H W A` by power iteration from a seeded random
/// start (Rayleigh quotient after `iters` steps).
pub fn max_eigen(op: &dyn LinearOp, iters: usize, seed: u64) -> f64 {
    let shape = op.domain_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: ComplexArray = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    let mut lambda = 0.0;
    for _ in 0..iters {
        let nv = op.normal(&v);
        let num: f64 = v.iter().zip(nv.iter()).map(|(a, b)| (a.conj() * b).re).sum();
        let den: f64 = v.iter().map(|a| a.norm_sqr()).sum();
        lambda = num / den;
        let norm: f64 = nv.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = nv.mapv(|x| x / norm);
    }
    lambda
}

/// Per-iteration solver telemetry.
#[derive(Debug, Clone, Default)]
pub struct SolveTrace {
    /// (iteration, residual, objective, wall milliseconds)
    pub rows: Vec<(usize, f64, f64, f64)>,
}

impl SolveTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,residual,objective,wall_ms\n");
        for (i, r, o, w) in &self.rows {
            s.push_str(&format!("{i},{r},{o},{w}\n"));
        }
        s
    }
}

/// Conjugate gradient on the weighted normal equations
/// `A^H W A x = A^H W b`, with a relative-residual early stop.
pub fn cg_sense(
    op: &dyn LinearOp,
    data: &ComplexArray2,
    iters: usize,
    tol: f64,
    with_objective: bool,
) -> Result<(ComplexArray, SolveTrace)> {
    let rhs = op.adjoint_weighted(data);
    let start = Instant::now();
    let mut x: ComplexArray = ArrayD::zeros(rhs.raw_dim());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v.norm_sqr()).sum();
    let rr0 = rr.max(1e-300);
    let mut trace = SolveTrace::default();
    for it in 0..iters {
        if !rr.is_finite() {
            return Err(Error::Numerical(format!("CG residual non-finite at iteration {it}")));
        }
        if (rr / rr0).sqrt() <= tol {
            break;
        }
        let np = op.normal(&p);
        let pnp: f64 = p.iter().zip(np.iter()).map(|(a, b)| (a.conj() * b).re).sum();
        if pnp <= 0.0 {
            break; // numerically singular direction
        }
        let alpha = rr / pnp;
        ndarray::Zip::from(&mut x).and(&p).for_each(|xi, &pi| *xi += pi * alpha);
        ndarray::Zip::from(&mut r).and(&np).for_each(|ri, &ni| *ri -= ni * alpha);
        let rr_new: f64 = r.iter().map(|v| v.norm_sqr()).sum();
        let beta = rr_new / rr;
        let mut p_new = r.clone();
        ndarray::Zip::from(&mut p_new).and(&p).for_each(|pn, &pi| *pn += pi * beta);
        p = p_new;
        rr = rr_new;
        let objective = if with_objective {
            weighted_data_objective(op, &x, data)
        } else {
            f64::NAN
        };
        trace
            .rows
            .push((it + 1, (rr / rr0).sqrt(), objective, start.elapsed().as_secs_f64() * 1e3));
    }
    Ok((x, trace))
}

fn weighted_data_objective(op: &dyn LinearOp, x: &ComplexArray, data: &ComplexArray2) -> f64 {
    let ax = op.apply(x);
    let mut acc = 0.0;
    for ci in 0..ax.nrows() {
        for i in 0..ax.ncols() {
            let r = ax[[ci, i]] - data[[ci, i]];
            let w = op.weights().map(|w| w[i]).unwrap_or(1.0);
            acc += w * r.norm_sqr();
        }
    }
    0.5 * acc
}

/// FISTA with L1 regularization of an orthonormal Haar transform (threshold
/// on coefficient magnitudes). `lipschitz` is the largest eigenvalue of the
/// weighted normal operator; the step is its inverse.
#[allow(clippy::too_many_arguments)]
pub fn fista_l1(
    op: &dyn LinearOp,
    data: &ComplexArray2,
    lambda_reg: f64,
    levels: usize,
    iters: usize,
    lipschitz: f64,
    with_objective: bool,
) -> Result<(ComplexArray, SolveTrace)> {
    if lambda_reg < 0.0 {
        return Err(Error::InvalidArgument("regularization must be nonnegative".into()));
    }
    if !(lipschitz > 0.0) {
        return Err(Error::InvalidArgument("lipschitz must be positive".into()));
    }
    let step = 1.0 / lipschitz;
    let rhs = op.adjoint_weighted(data);
    let start = Instant::now();
    let mut x: ComplexArray = ArrayD::zeros(rhs.raw_dim());
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut trace = SolveTrace::default();
    for it in 0..iters {
        let grad = {
            let mut g = op.normal(&y);
            ndarray::Zip::from(&mut g).and(&rhs).for_each(|gi, &ri| *gi -= ri);
            g
        };
        let mut z = y.clone();
        ndarray::Zip::from(&mut z).and(&grad).for_each(|zi, &gi| *zi -= gi * step);
        // Proximal step in the wavelet domain.
        let x_new = if lambda_reg > 0.0 {
            let mut w = haar_forward(&z, levels)?;
            let thresh = lambda_reg * step;
            w.mapv_inplace(|v| {
                let m = v.norm();
                if m <= thresh {
                    Complex64::default()
                } else {
                    v * ((m - thresh) / m)
                }
            });
            haar_inverse(&w, levels)?
        } else {
            z
        };
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_new;
        let mut y_new = x_new.clone();
        ndarray::Zip::from(&mut y_new).and(&x_new).and(&x).for_each(|yi, &xn, &xo| {
            *yi = xn + (xn - xo) * beta;
        });
        if x_new.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Numerical(format!("FISTA iterate non-finite at iteration {it}")));
        }
        let objective = if with_objective {
            let quad = weighted_data_objective(op, &x_new, data);
            let l1: f64 = haar_forward(&x_new, levels)?.iter().map(|v| v.norm()).sum();
            quad + lambda_reg * l1
        } else {
            f64::NAN
        };
        let dx: f64 = x_new
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        trace
            .rows
            .push((it + 1, dx, objective, start.elapsed().as_secs_f64() * 1e3));
        x = x_new;
        y = y_new;
        t = t_new;
    }
    Ok((x, trace))
}
