//! Kaiser-Bessel gridding NUFFT: forward, adjoint, apodization correction and
//! the Toeplitz normal operator.
//!
//! Forward path: apodize -> zero-pad to the oversampled grid -> centered FFT
//! -> kernel gather at the trajectory coordinates (wrapped modulo the
//! oversampled grid, which is exact for the periodic DFT model). The adjoint
//! is the exact numerical transpose of every step, so adjoint tests hold to
//! machine precision; accuracy versus the true nonuniform DFT is set by
//! (alpha, W).

use crate::array::{ComplexArray, Grid, Trajectory};
use crate::fft::{centered_fft, centered_ifft, centered_ifft_norm, crop_center, pad_center};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Modified Bessel function of the first kind, order zero (power series;
/// ample for the beta range used by gridding kernels).
pub fn bessel_i0(x: f64) -> f64 {
    let t = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= t / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-Bessel shape parameter for a given width and oversampling
/// (Beatty's minimum-aliasing formula).
pub fn beatty_beta(width: f64, alpha: f64) -> f64 {
    PI * ((width / alpha).powi(2) * (alpha - 0.5).powi(2) - 0.8).sqrt()
}

#[derive(Debug, Clone)]
struct Kernel {
    width: f64,
    beta: f64,
    i0_beta: f64,
}

impl Kernel {
    fn new(width: f64, alpha: f64) -> Self {
        let beta = beatty_beta(width, alpha);
        Kernel { width, beta, i0_beta: bessel_i0(beta) }
    }

    /// Kernel value at distance `x` (oversampled grid units).
    fn eval(&self, x: f64) -> f64 {
        let t = 2.0 * x / self.width;
        let arg = 1.0 - t * t;
        if arg <= 0.0 {
            return if arg > -1e-12 { 1.0 / self.i0_beta } else { 0.0 };
        }
        bessel_i0(self.beta * arg.sqrt()) / self.i0_beta
    }

    /// Continuous Fourier transform of the kernel at image coordinate `r`
    /// on an oversampled grid of `n_os` points.
    fn transform(&self, r: f64, n_os: f64) -> f64 {
        let v = PI * self.width * r / n_os;
        let s = self.beta * self.beta - v * v;
        let g = if s > 1e-12 {
            let q = s.sqrt();
            q.sinh() / q
        } else if s < -1e-12 {
            let q = (-s).sqrt();
            q.sin() / q
        } else {
            1.0
        };
        self.width * g / self.i0_beta
    }

    /// First lattice point and weights covering `|u - j| <= W/2`.
    fn taps(&self, u: f64, out: &mut Vec<f64>) -> i64 {
        let w = self.width.round() as usize;
        let j0 = (u - self.width / 2.0).ceil() as i64;
        out.clear();
        for t in 0..w {
            out.push(self.eval(u - (j0 + t as i64) as f64));
        }
        j0
    }
}

/// Precomputed gridding plan for one trajectory.
#[derive(Debug, Clone)]
pub struct NufftPlan {
    pub grid: Grid,
    /// Oversampled extent per axis.
    pub n_os: usize,
    /// Recorded oversampling after rounding `alpha N` up to an integer.
    pub alpha: f64,
    pub width: f64,
    pub kb_beta: f64,
    kernel: Kernel,
    /// Trajectory coordinates scaled to oversampled grid units.
    coords_os: Array2<f64>,
    /// Apodization map (1 / kernel transform) on the N^d grid.
    pub apod: ArrayD<f64>,
    /// Optional per-sample kernel taps: (per-axis start index, per-axis weights).
    precomputed: Option<Vec<(Vec<i64>, Vec<Vec<f64>>)>>,
}

/// Build a plan. `alpha` must lie in (1, 2]; `width >= 2` grid units.
pub fn plan(grid: &Grid, traj: &Trajectory, alpha: f64, width: f64) -> Result<NufftPlan> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(Error::InvalidArgument(format!("oversampling alpha must be in (1, 2], got {alpha}")));
    }
    if width < 2.0 {
        return Err(Error::InvalidArgument(format!("kernel width must be >= 2, got {width}")));
    }
    traj.validate_within(grid)?;
    let n = grid.extent;
    let n_os = (alpha * n as f64).ceil() as usize;
    let alpha_actual = n_os as f64 / n as f64;
    let kernel = Kernel::new(width, alpha_actual);

    let scale = n_os as f64 / n as f64;
    let coords_os = traj.coords.mapv(|k| k * scale);

    // Separable apodization, one axis vector reused (isotropic grid).
    let half = (n / 2) as f64;
    let axis: Vec<f64> = (0..n)
        .map(|i| kernel.transform(i as f64 - half, n_os as f64))
        .collect();
    if axis.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numerical("kernel transform not strictly positive on the image support".into()));
    }
    let d = grid.dim;
    let apod = ArrayD::from_shape_fn(IxDyn(&grid.shape()), |idx| {
        let mut c = 1.0;
        for a in 0..d {
            c *= axis[idx[a]];
        }
        1.0 / c
    });

    Ok(NufftPlan {
        grid: *grid,
        n_os,
        alpha: alpha_actual,
        width,
        kb_beta: kernel.beta,
        kernel,
        coords_os,
        apod,
        precomputed: None,
    })
}

impl NufftPlan {
    pub fn num_samples(&self) -> usize {
        self.coords_os.nrows()
    }

    /// Store per-sample kernel taps (memory for speed).
    pub fn with_precompute(mut self) -> Self {
        let d = self.grid.dim;
        let taps = (0..self.num_samples())
            .map(|i| {
                let mut starts = Vec::with_capacity(d);
                let mut weights = Vec::with_capacity(d);
                for a in 0..d {
                    let mut w = Vec::new();
                    let j0 = self.kernel.taps(self.coords_os[[i, a]], &mut w);
                    starts.push(j0);
                    weights.push(w);
                }
                (starts, weights)
            })
            .collect();
        self.precomputed = Some(taps);
        self
    }

    fn os_shape(&self) -> Vec<usize> {
        vec![self.n_os; self.grid.dim]
    }

    fn sample_taps(&self, i: usize) -> (Vec<i64>, Vec<Vec<f64>>) {
        if let Some(pre) = &self.precomputed {
            return pre[i].clone();
        }
        let d = self.grid.dim;
        let mut starts = Vec::with_capacity(d);
        let mut weights = Vec::with_capacity(d);
        for a in 0..d {
            let mut w = Vec::new();
            let j0 = self.kernel.taps(self.coords_os[[i, a]], &mut w);
            starts.push(j0);
            weights.push(w);
        }
        (starts, weights)
    }

    /// NUFFT of a `[C, N..]` (or single `[N..]`) image: C x M samples.
    pub fn forward(&self, img: &ComplexArray) -> Result<Array2<Complex64>> {
        let d = self.grid.dim;
        let (coils, spatial) = split_coils(img, d)?;
        if spatial != self.grid.shape() {
            return Err(Error::ShapeMismatch(format!(
                "image spatial shape {:?} vs grid {:?}",
                spatial,
                self.grid.shape()
            )));
        }
        let m = self.num_samples();
        let mut out = Array2::zeros((coils.len(), m));
        let rows: Vec<Vec<Complex64>> = coils
            .par_iter()
            .map(|c| {
                let ksp = self.image_to_os_kspace(c);
                self.gather_all(&ksp)
            })
            .collect();
        for (ci, row) in rows.into_iter().enumerate() {
            for (i, v) in row.into_iter().enumerate() {
                out[[ci, i]] = v;
            }
        }
        Ok(out)
    }

    /// Exact adjoint of [`forward`], optionally pre-weighted by a DCF.
    pub fn adjoint(&self, data: &Array2<Complex64>, weights: Option<&[f64]>) -> Result<ComplexArray> {
        if data.ncols() != self.num_samples() {
            return Err(Error::ShapeMismatch(format!(
                "data has {} samples, plan {}",
                data.ncols(),
                self.num_samples()
            )));
        }
        if let Some(w) = weights {
            if w.len() != self.num_samples() {
                return Err(Error::ShapeMismatch("weights length vs samples".into()));
            }
        }
        let coils = data.nrows();
        let mut shape = vec![coils];
        shape.extend(self.grid.shape());
        let mut out = ArrayD::zeros(IxDyn(&shape));
        let imgs: Vec<ArrayD<Complex64>> = (0..coils)
            .into_par_iter()
            .map(|ci| {
                let samples: Vec<Complex64> = match weights {
                    Some(w) => data.row(ci).iter().zip(w).map(|(v, &wi)| v * wi).collect(),
                    None => data.row(ci).to_vec(),
                };
                self.adjoint_single(&samples)
            })
            .collect();
        for (ci, img) in imgs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), ci).assign(&img);
        }
        Ok(out)
    }

    /// Apodize, pad and FFT one image onto the oversampled k-space grid.
    pub(crate) fn image_to_os_kspace(&self, img: &ComplexArray) -> ComplexArray {
        let mut apodized = img.clone();
        apodized.zip_mut_with(&self.apod, |v, &a| *v *= a);
        let padded = pad_center(&apodized, &self.os_shape());
        centered_fft(&padded, &(0..self.grid.dim).collect::<Vec<_>>())
    }

    /// Kernel gather of every plan sample from an oversampled k-space grid.
    pub(crate) fn gather_all(&self, ksp: &ComplexArray) -> Vec<Complex64> {
        (0..self.num_samples()).map(|i| self.gather_one_idx(ksp, i)).collect()
    }

    fn gather_one_idx(&self, ksp: &ComplexArray, i: usize) -> Complex64 {
        let (starts, weights) = self.sample_taps(i);
        gather_point(ksp, self.n_os, &starts, &weights)
    }

    fn adjoint_single(&self, samples: &[Complex64]) -> ComplexArray {
        let mut ksp = ArrayD::zeros(IxDyn(&self.os_shape()));
        for (i, &v) in samples.iter().enumerate() {
            let (starts, weights) = self.sample_taps(i);
            scatter_point(&mut ksp, self.n_os, &starts, &weights, v);
        }
        let img_os = centered_ifft(&ksp, &(0..self.grid.dim).collect::<Vec<_>>());
        let mut img = crop_center(&img_os, &self.grid.shape());
        img.zip_mut_with(&self.apod, |v, &a| *v *= a);
        img
    }

    /// Spread real weights onto the oversampled grid and gather them back
    /// (the `G G^H` of Pipe-Menon density estimation; no FFT, no apodization).
    pub fn kb_density_convolution(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.num_samples());
        let mut grid_acc = vec![0f64; self.os_shape().iter().product()];
        let d = self.grid.dim;
        for i in 0..w.len() {
            let (starts, weights) = self.sample_taps(i);
            spread_real(&mut grid_acc, self.n_os, d, &starts, &weights, w[i]);
        }
        (0..w.len())
            .into_par_iter()
            .map(|i| {
                let (starts, weights) = self.sample_taps(i);
                gather_real(&grid_acc, self.n_os, d, &starts, &weights)
            })
            .collect()
    }
}

fn split_coils(img: &ComplexArray, d: usize) -> Result<(Vec<ComplexArray>, Vec<usize>)> {
    if img.ndim() == d {
        Ok((vec![img.clone()], img.shape().to_vec()))
    } else if img.ndim() == d + 1 {
        let coils = (0..img.shape()[0])
            .map(|c| img.index_axis(Axis(0), c).to_owned())
            .collect();
        Ok((coils, img.shape()[1..].to_vec()))
    } else {
        Err(Error::ShapeMismatch(format!(
            "expected [N..] or [C, N..] image with {} spatial dims, got {:?}",
            d,
            img.shape()
        )))
    }
}

fn wrap(j: i64, n: usize) -> usize {
    let n = n as i64;
    let half = n / 2;
    (((j + half) % n + n) % n) as usize
}

fn gather_point(ksp: &ComplexArray, n_os: usize, starts: &[i64], weights: &[Vec<f64>]) -> Complex64 {
    let d = starts.len();
    let mut acc = Complex64::default();
    match d {
        2 => {
            for (ta, &wa) in weights[0].iter().enumerate() {
                let ia = wrap(starts[0] + ta as i64, n_os);
                for (tb, &wb) in weights[1].iter().enumerate() {
                    let ib = wrap(starts[1] + tb as i64, n_os);
                    acc += ksp[[ia, ib]] * (wa * wb);
                }
            }
        }
        3 => {
            for (ta, &wa) in weights[0].iter().enumerate() {
                let ia = wrap(starts[0] + ta as i64, n_os);
                for (tb, &wb) in weights[1].iter().enumerate() {
                    let ib = wrap(starts[1] + tb as i64, n_os);
                    let wab = wa * wb;
                    for (tc, &wc) in weights[2].iter().enumerate() {
                        let ic = wrap(starts[2] + tc as i64, n_os);
                        acc += ksp[[ia, ib, ic]] * (wab * wc);
                    }
                }
            }
        }
        _ => unreachable!("grid dim is 2 or 3"),
    }
    acc
}

fn scatter_point(
    ksp: &mut ComplexArray,
    n_os: usize,
    starts: &[i64],
    weights: &[Vec<f64>],
    value: Complex64,
) {
    let d = starts.len();
    match d {
        2 => {
            for (ta, &wa) in weights[0].iter().enumerate() {
                let ia = wrap(starts[0] + ta as i64, n_os);
                for (tb, &wb) in weights[1].iter().enumerate() {
                    let ib = wrap(starts[1] + tb as i64, n_os);
                    ksp[[ia, ib]] += value * (wa * wb);
                }
            }
        }
        3 => {
            for (ta, &wa) in weights[0].iter().enumerate() {
                let ia = wrap(starts[0] + ta as i64, n_os);
                for (tb, &wb) in weights[1].iter().enumerate() {
                    let ib = wrap(starts[1] + tb as i64, n_os);
                    let wab = wa * wb;
                    for (tc, &wc) in weights[2].iter().enumerate() {
                        let ic = wrap(starts[2] + tc as i64, n_os);
                        ksp[[ia, ib, ic]] += value * (wab * wc);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

fn spread_real(grid: &mut [f64], n_os: usize, d: usize, starts: &[i64], weights: &[Vec<f64>], v: f64) {
    match d {
        2 => {
            for (ta, &wa) in weights[0].iter().enumerate() {
                let ia = wrap(starts[0] + ta as i64, n_os);
                for (tb, &wb) in weights[1].iter().enumerate() {
                    let ib = wrap(starts[1] + tb as i64, n_os);
                    grid[ia * n_os + ib] += v * wa * wb;
                }
            }
        }
        3 => {
            for (ta, &wa) in weights[0].iter().enumerate() {
                let ia = wrap(starts[0] + ta as i64, n_os);
                for (tb, &wb) in weights[1].iter().enumerate() {
                    let ib = wrap(starts[1] + tb as i64, n_os);
                    for (tc, &wc) in weights[2].iter().enumerate() {
                        let ic = wrap(starts[2] + tc as i64, n_os);
                        grid[(ia * n_os + ib) * n_os + ic] += v * wa * wb * wc;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

fn gather_real(grid: &[f64], n_os: usize, d: usize, starts: &[i64], weights: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    match d {
        2 => {
            for (ta, &wa) in weights[0].iter().enumerate() {
                let ia = wrap(starts[0] + ta as i64, n_os);
                for (tb, &wb) in weights[1].iter().enumerate() {
                    let ib = wrap(starts[1] + tb as i64, n_os);
                    acc += grid[ia * n_os + ib] * wa * wb;
                }
            }
        }
        3 => {
            for (ta, &wa) in weights[0].iter().enumerate() {
                let ia = wrap(starts[0] + ta as i64, n_os);
                for (tb, &wb) in weights[1].iter().enumerate() {
                    let ib = wrap(starts[1] + tb as i64, n_os);
                    for (tc, &wc) in weights[2].iter().enumerate() {
                        let ic = wrap(starts[2] + tc as i64, n_os);
                        acc += grid[(ia * n_os + ib) * n_os + ic] * wa * wb * wc;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    acc
}

/// Interpolator for evaluating gridded k-space at arbitrary continuous
/// coordinates (the Kaiser-Bessel evaluator behind kernel-training batches).
#[derive(Debug, Clone)]
pub struct KspaceInterpolator {
    pub grid: Grid,
    n_os: usize,
    kernel: Kernel,
    /// Oversampled k-space, one grid per coil.
    os_ksp: Vec<ComplexArray>,
}

impl KspaceInterpolator {
    /// Build from Cartesian k-space `[C, N..]` on `grid`. Training-data
    /// synthesis fixes oracle-grade settings (alpha = 2, W = 6).
    pub fn new(kdata: &ComplexArray, grid: &Grid, alpha: f64, width: f64) -> Result<Self> {
        let d = grid.dim;
        let (coils, spatial) = split_coils(kdata, d)?;
        if spatial != grid.shape() {
            return Err(Error::ShapeMismatch("calibration k-space vs grid".into()));
        }
        let n = grid.extent;
        let n_os = (alpha * n as f64).ceil() as usize;
        let kernel = Kernel::new(width, n_os as f64 / n as f64);

        let half = (n / 2) as f64;
        let axis: Vec<f64> = (0..n)
            .map(|i| kernel.transform(i as f64 - half, n_os as f64))
            .collect();
        let axes: Vec<usize> = (0..d).collect();
        let os_ksp = coils
            .iter()
            .map(|k| {
                // k-space -> image -> apodize -> pad -> oversampled k-space
                let mut img = centered_ifft_norm(k, &axes);
                for (idx, v) in img.indexed_iter_mut() {
                    let mut c = 1.0;
                    for a in 0..d {
                        c *= axis[idx[a]];
                    }
                    *v /= c;
                }
                let padded = pad_center(&img, &vec![n_os; d]);
                centered_fft(&padded, &axes)
            })
            .collect();
        Ok(KspaceInterpolator { grid: *grid, n_os, kernel, os_ksp })
    }

    pub fn num_coils(&self) -> usize {
        self.os_ksp.len()
    }

    /// Evaluate all coils at one coordinate (delta_k units).
    pub fn eval(&self, coord: &[f64], out: &mut [Complex64]) {
        let d = self.grid.dim;
        let scale = self.n_os as f64 / self.grid.extent as f64;
        let mut starts = Vec::with_capacity(d);
        let mut weights = Vec::with_capacity(d);
        for a in 0..d {
            let mut w = Vec::new();
            let j0 = self.kernel.taps(coord[a] * scale, &mut w);
            starts.push(j0);
            weights.push(w);
        }
        for (c, ksp) in self.os_ksp.iter().enumerate() {
            out[c] = gather_point(ksp, self.n_os, &starts, &weights);
        }
    }
}

/// Point spread function of the weighted normal operator, embedded on the
/// 2x grid so that the normal evaluates `A^H diag(w) A` with two FFTs.
#[derive(Debug, Clone)]
pub struct ToeplitzPsf {
    /// Image-domain PSF on the (2N)^d grid.
    pub psf: ComplexArray,
    psf_hat: ComplexArray,
    base_shape: Vec<usize>,
}

/// Build the PSF by adjoint-regridding the weights onto a 2x grid with
/// doubled trajectory coordinates. Uses oracle-grade kernel settings so the
/// PSF error stays below the plan's own interpolation error.
pub fn toeplitz_psf(nufft_plan: &NufftPlan, weights: &[f64]) -> Result<ToeplitzPsf> {
    if weights.len() != nufft_plan.num_samples() {
        return Err(Error::ShapeMismatch("weights length vs samples".into()));
    }
    let grid = &nufft_plan.grid;
    let big = Grid { dim: grid.dim, extent: 2 * grid.extent, fov: grid.fov };
    // k/N == (2k)/(2N): double the coordinates on the doubled grid.
    let coords2 = nufft_plan.coords_os.mapv(|u| u * 2.0 * grid.extent as f64 / nufft_plan.n_os as f64);
    let m = coords2.nrows();
    let times: Vec<f64> = (0..m).map(|i| i as f64).collect();
    let traj2 = Trajectory::new(coords2, times, (0..m).collect())?;
    let plan2 = plan(&big, &traj2, 2.0, 6.0)?;
    let wdata = Array2::from_shape_fn((1, m), |(_, i)| Complex64::new(weights[i], 0.0));
    let psf_all = plan2.adjoint(&wdata, None)?;
    let psf = psf_all.index_axis(Axis(0), 0).to_owned();
    let axes: Vec<usize> = (0..grid.dim).collect();
    let psf_hat = centered_fft(&psf, &axes);
    Ok(ToeplitzPsf { psf, psf_hat, base_shape: grid.shape() })
}

impl ToeplitzPsf {
    /// `A^H diag(w) A` applied to a `[C, N..]` or `[N..]` image:
    /// pad to (2N)^d -> FFT -> multiply by the PSF spectrum -> IFFT -> crop.
    pub fn normal(&self, img: &ComplexArray) -> Result<ComplexArray> {
        let d = self.base_shape.len();
        let (coils, spatial) = split_coils(img, d)?;
        if spatial != self.base_shape {
            return Err(Error::ShapeMismatch("image shape vs PSF base shape".into()));
        }
        let axes: Vec<usize> = (0..d).collect();
        let big_shape: Vec<usize> = self.base_shape.iter().map(|&n| 2 * n).collect();
        let out_coils: Vec<ComplexArray> = coils
            .par_iter()
            .map(|c| {
                let padded = pad_center(c, &big_shape);
                let mut spec = centered_fft(&padded, &axes);
                spec.zip_mut_with(&self.psf_hat, |v, &h| *v *= h);
                let img_big = centered_ifft_norm(&spec, &axes);
                crop_center(&img_big, &self.base_shape)
            })
            .collect();
        if img.ndim() == d {
            Ok(out_coils.into_iter().next().unwrap())
        } else {
            let mut shape = vec![out_coils.len()];
            shape.extend(&self.base_shape);
            let mut out = ArrayD::zeros(IxDyn(&shape));
            for (ci, c) in out_coils.into_iter().enumerate() {
                out.index_axis_mut(Axis(0), ci).assign(&c);
            }
            Ok(out)
        }
    }
}
