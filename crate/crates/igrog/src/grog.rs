//! Classic GROG: per-axis unit-shift GRAPPA kernels calibrated from Cartesian
//! calibration data and applied through fractional matrix powers.

use crate::array::{Calibration, ComplexArray, Grid};
use crate::{usable_calibration_region, Error, Result};
use faer::prelude::Solve;
use faer::Mat;
use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;

fn to_faer(a: &Array2<Complex64>) -> Mat<Complex64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_faer(m: &Mat<Complex64>) -> Array2<Complex64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Ridge least squares `G = T S^H (S S^H + lambda tr(S S^H)/C I)^-1` for
/// stacked source/target columns. `lambda` is in trace-normalized units; the
/// unregularized problem errors out when the normal matrix is singular.
pub(crate) fn ridge_fit(
    sources: &Array2<Complex64>,
    targets: &Array2<Complex64>,
    lambda: f64,
) -> Result<Array2<Complex64>> {
    let rows_s = sources.nrows();
    let n = sources.ncols();
    if targets.ncols() != n {
        return Err(Error::ShapeMismatch("source/target pair count".into()));
    }
    // A = S S^H, B = T S^H
    let mut a = Array2::<Complex64>::zeros((rows_s, rows_s));
    for i in 0..rows_s {
        for j in 0..rows_s {
            let mut acc = Complex64::default();
            for p in 0..n {
                acc += sources[[i, p]] * sources[[j, p]].conj();
            }
            a[[i, j]] = acc;
        }
    }
    let rows_t = targets.nrows();
    let mut b = Array2::<Complex64>::zeros((rows_t, rows_s));
    for i in 0..rows_t {
        for j in 0..rows_s {
            let mut acc = Complex64::default();
            for p in 0..n {
                acc += targets[[i, p]] * sources[[j, p]].conj();
            }
            b[[i, j]] = acc;
        }
    }
    let trace: f64 = (0..rows_s).map(|i| a[[i, i]].re).sum();
    let ridge = lambda * trace / rows_s as f64;
    for i in 0..rows_s {
        a[[i, i]] += Complex64::new(ridge, 0.0);
    }
    // Solve A^T X^T = B^T  (i.e. X A = B) via LU; A is Hermitian so A^T = conj(A).
    let af = to_faer(&a);
    let lu = af.partial_piv_lu();
    // Detect singularity through the reciprocal condition estimate of U's diagonal.
    let mut dmin = f64::MAX;
    let mut dmax: f64 = 0.0;
    for i in 0..rows_s {
        let d = lu.U()[(i, i)].norm();
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    if dmin <= 1e-14 * dmax.max(1e-300) {
        return Err(Error::Numerical(
            "normal matrix singular; calibrate with lambda > 0".into(),
        ));
    }
    // X = B A^{-1}  <=>  A^H X^H = B^H with A Hermitian: A X^H = B^H.
    let bh = Mat::from_fn(rows_s, rows_t, |i, j| b[[j, i]].conj());
    let xh = lu.solve(&bh);
    Ok(Array2::from_shape_fn((rows_t, rows_s), |(i, j)| xh[(j, i)].conj()))
}

/// Ridge fit on sample-major arrays (rows are samples, matching the
/// training-batch layout): `G = T S^H (S S^H + lambda I)^{-1}`.
pub fn ridge_fit_samples(
    sources: &Array2<Complex64>, // n x q
    targets: &Array2<Complex64>, // n x c
    lambda: f64,
) -> Array2<Complex64> {
    let st = Array2::from_shape_fn((sources.ncols(), sources.nrows()), |(i, j)| sources[[j, i]]);
    let tt = Array2::from_shape_fn((targets.ncols(), targets.nrows()), |(i, j)| targets[[j, i]]);
    ridge_fit(&st, &tt, lambda).unwrap()
}

/// One calibrated axis kernel with its cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct AxisKernel {
    pub matrix: Array2<Complex64>,
    eigvals: Vec<Complex64>,
    eigvecs: Array2<Complex64>,
    inv_eigvecs: Array2<Complex64>,
    /// Condition number of the eigenvector matrix.
    pub eig_cond: f64,
}

impl AxisKernel {
    pub fn new(matrix: Array2<Complex64>) -> Result<Self> {
        let c = matrix.nrows();
        if matrix.ncols() != c {
            return Err(Error::ShapeMismatch("kernel must be square".into()));
        }
        let mf = to_faer(&matrix);
        let evd = mf
            .eigen()
            .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
        let eigvals: Vec<Complex64> = (0..c).map(|i| evd.S()[i]).collect();
        let u = evd.U();
        let vmat = Mat::from_fn(c, c, |i, j| u[(i, j)]);
        let svd = vmat
            .svd()
            .map_err(|e| Error::Numerical(format!("svd failed: {e:?}")))?;
        let smax = svd.S()[0].re;
        let smin = svd.S()[c - 1].re;
        let eig_cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        let lu = vmat.partial_piv_lu();
        let inv = lu.solve(&Mat::<Complex64>::identity(c, c));
        Ok(AxisKernel {
            matrix,
            eigvals,
            eigvecs: from_faer(&vmat),
            inv_eigvecs: from_faer(&inv),
            eig_cond,
        })
    }

    pub fn num_coils(&self) -> usize {
        self.matrix.nrows()
    }

    /// Any eigenvalue within 1e-6 of the negative real axis (principal-log
    /// branch cut)?
    pub fn near_branch_cut(&self) -> bool {
        self.eigvals.iter().any(|l| l.re < 0.0 && l.im.abs() < 1e-6)
    }

    fn powered_eigvals(&self, delta: f64) -> Result<Vec<Complex64>> {
        self.eigvals
            .iter()
            .map(|l| {
                if l.norm() < 1e-12 {
                    Err(Error::Numerical("defective kernel: eigenvalue at zero".into()))
                } else {
                    // principal branch: l^delta = exp(delta Log l)
                    Ok((l.ln() * delta).exp())
                }
            })
            .collect()
    }

    /// `G^delta = V diag(l_i^delta) V^-1` with the principal logarithm.
    pub fn power(&self, delta: f64) -> Result<Array2<Complex64>> {
        let c = self.num_coils();
        let pl = self.powered_eigvals(delta)?;
        let mut out = Array2::zeros((c, c));
        for i in 0..c {
            for j in 0..c {
                let mut acc = Complex64::default();
                for k in 0..c {
                    acc += self.eigvecs[[i, k]] * pl[k] * self.inv_eigvecs[[k, j]];
                }
                out[[i, j]] = acc;
            }
        }
        Ok(out)
    }

    /// `G^delta x` using the cached decomposition (two matrix-vector
    /// products).
    pub fn power_apply(&self, delta: f64, x: &[Complex64], out: &mut [Complex64]) -> Result<()> {
        let c = self.num_coils();
        let pl = self.powered_eigvals(delta)?;
        let mut tmp = vec![Complex64::default(); c];
        for k in 0..c {
            let mut acc = Complex64::default();
            for j in 0..c {
                acc += self.inv_eigvecs[[k, j]] * x[j];
            }
            tmp[k] = acc * pl[k];
        }
        for i in 0..c {
            let mut acc = Complex64::default();
            for k in 0..c {
                acc += self.eigvecs[[i, k]] * tmp[k];
            }
            out[i] = acc;
        }
        Ok(())
    }
}

/// The d per-axis unit-shift kernels.
#[derive(Debug, Clone)]
pub struct AxisKernels {
    pub kernels: Vec<AxisKernel>,
    pub lambda: f64,
}

/// Fractional power of an arbitrary (diagonalizable) kernel matrix.
pub fn frac_power(g: &Array2<Complex64>, delta: f64) -> Result<Array2<Complex64>> {
    AxisKernel::new(g.clone())?.power(delta)
}

/// Calibrate one unit-shift kernel per axis by ridge least squares over all
/// source/target pairs `delta_k = 1` apart inside the usable region (echo 0).
pub fn calibrate_axis_kernels(cal: &Calibration, lambda: f64) -> Result<AxisKernels> {
    let region = usable_calibration_region(cal)?;
    if region.hi - region.lo + 1 < 8 {
        return Err(Error::InvalidArgument(
            "usable calibration region smaller than 8 points per axis".into(),
        ));
    }
    let d = cal.grid.dim;
    let c = cal.num_coils();
    let kdata = &cal.kdata[0];
    let n = cal.grid.extent;

    let mut kernels = Vec::with_capacity(d);
    for axis in 0..d {
        // Enumerate positions where both k and k + e_axis stay usable.
        let mut counts = vec![region.hi - region.lo + 1; d];
        counts[axis] -= 1;
        let n_pairs: usize = counts.iter().product();
        let mut sources = Array2::zeros((c, n_pairs));
        let mut targets = Array2::zeros((c, n_pairs));
        let mut col = 0;
        let mut idx = vec![region.lo; d];
        loop {
            for ci in 0..c {
                let mut s_index = vec![ci];
                s_index.extend(&idx);
                let mut t_index = s_index.clone();
                t_index[1 + axis] += 1;
                sources[[ci, col]] = kdata[IxDyn(&s_index)];
                targets[[ci, col]] = kdata[IxDyn(&t_index)];
            }
            col += 1;
            // Odometer increment over the usable box.
            let mut a = d;
            loop {
                if a == 0 {
                    break;
                }
                a -= 1;
                let hi = if a == axis { region.hi - 1 } else { region.hi };
                if idx[a] < hi {
                    idx[a] += 1;
                    break;
                }
                idx[a] = region.lo;
                if a == 0 {
                    break;
                }
            }
            if col == n_pairs {
                break;
            }
        }
        let _ = n;
        let g = ridge_fit(&sources, &targets, lambda)?;
        kernels.push(AxisKernel::new(g)?);
    }
    Ok(AxisKernels { kernels, lambda })
}

/// Cartesian data produced by a gridding pass: unique wrapped integer targets
/// and collision-averaged values.
#[derive(Debug, Clone)]
pub struct GriddedKspace {
    pub grid: Grid,
    /// C x M_unique values.
    pub data: Array2<Complex64>,
    /// M_unique x d wrapped integer coordinates in `[-N/2, N/2)`.
    pub coords: Array2<i64>,
    /// Accumulated collision weight per unique target.
    pub weight_sum: Vec<f64>,
}

/// Shift every sample to its nearest integer grid point with sequential
/// per-axis fractional kernel powers (axis 0 first). Duplicate targets are
/// averaged with the supplied pre-gridding DCF weights (uniform when absent).
/// Targets wrap modulo N, so edge samples keep `|delta| <= 0.5`.
pub fn grog_grid(
    data: &Array2<Complex64>,
    traj_coords: &Array2<f64>,
    grid: &Grid,
    kernels: &AxisKernels,
    weights: Option<&[f64]>,
) -> Result<GriddedKspace> {
    let order: Vec<usize> = (0..grid.dim).collect();
    grog_grid_with_order(data, traj_coords, grid, kernels, weights, &order)
}

/// [`grog_grid`] with an explicit axis application order (the kernels do not
/// commute exactly, so order changes results slightly).
pub fn grog_grid_with_order(
    data: &Array2<Complex64>,
    traj_coords: &Array2<f64>,
    grid: &Grid,
    kernels: &AxisKernels,
    weights: Option<&[f64]>,
    order: &[usize],
) -> Result<GriddedKspace> {
    let c = data.nrows();
    let m = data.ncols();
    let d = grid.dim;
    if traj_coords.nrows() != m || traj_coords.ncols() != d {
        return Err(Error::ShapeMismatch("data columns vs trajectory rows".into()));
    }
    if kernels.kernels.len() != d || kernels.kernels[0].num_coils() != c {
        return Err(Error::ShapeMismatch("kernel set vs data dims".into()));
    }
    if let Some(w) = weights {
        if w.len() != m {
            return Err(Error::ShapeMismatch("weights length".into()));
        }
    }

    let mut slots: std::collections::HashMap<Vec<i64>, usize> = std::collections::HashMap::new();
    let mut uniq_coords: Vec<Vec<i64>> = Vec::new();
    let mut acc: Vec<Vec<Complex64>> = Vec::new();
    let mut wsum: Vec<f64> = Vec::new();

    let mut shifted = vec![Complex64::default(); c];
    let mut tmp = vec![Complex64::default(); c];
    for i in 0..m {
        // Nearest integer target and per-axis shifts.
        let mut target = vec![0i64; d];
        let mut deltas = vec![0f64; d];
        for a in 0..d {
            let k = traj_coords[[i, a]];
            let t = k.round();
            target[a] = t as i64;
            deltas[a] = t - k;
            debug_assert!(deltas[a].abs() <= 0.5 + 1e-12);
        }
        for (ci, v) in shifted.iter_mut().enumerate() {
            *v = data[[ci, i]];
        }
        for &a in order {
            if deltas[a] != 0.0 {
                kernels.kernels[a].power_apply(deltas[a], &shifted, &mut tmp)?;
                shifted.copy_from_slice(&tmp);
            }
        }
        let wrapped: Vec<i64> = target
            .iter()
            .map(|&t| {
                let n = grid.extent as i64;
                let mut v = (t + n / 2).rem_euclid(n) - n / 2;
                if v >= n - n / 2 {
                    v -= n;
                }
                v
            })
            .collect();
        let w = weights.map(|w| w[i]).unwrap_or(1.0);
        let slot = *slots.entry(wrapped.clone()).or_insert_with(|| {
            uniq_coords.push(wrapped.clone());
            acc.push(vec![Complex64::default(); c]);
            wsum.push(0.0);
            uniq_coords.len() - 1
        });
        for ci in 0..c {
            acc[slot][ci] += shifted[ci] * w;
        }
        wsum[slot] += w;
    }

    let mu = uniq_coords.len();
    let mut out = Array2::zeros((c, mu));
    let mut coords = Array2::zeros((mu, d));
    for (s, uc) in uniq_coords.iter().enumerate() {
        for a in 0..d {
            coords[[s, a]] = uc[a];
        }
        let wn = if wsum[s] > 0.0 { wsum[s] } else { 1.0 };
        for ci in 0..c {
            out[[ci, s]] = acc[s][ci] / wn;
        }
    }
    Ok(GriddedKspace { grid: *grid, data: out, coords, weight_sum: wsum })
}

/// Persist axis kernels: one array per axis plus a JSON descriptor.
pub fn save_axis_kernels(dir: &std::path::Path, kernels: &AxisKernels) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (a, k) in kernels.kernels.iter().enumerate() {
        let arr: ArrayD<Complex64> = k.matrix.clone().into_dyn();
        crate::io::write_array(dir.join(format!("axis{a}.carr")), &arr, crate::io::Precision::C128)?;
    }
    let meta = serde_json::json!({
        "axes": kernels.kernels.len(),
        "lambda": kernels.lambda,
        "coils": kernels.kernels[0].num_coils(),
    });
    std::fs::write(dir.join("kernels.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}

pub fn load_axis_kernels(dir: &std::path::Path) -> Result<AxisKernels> {
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("kernels.json"))?,
    )
    .map_err(|e| Error::Format(format!("kernels.json: {e}")))?;
    let axes = meta["axes"].as_u64().ok_or_else(|| Error::Format("missing axes".into()))? as usize;
    let lambda = meta["lambda"].as_f64().unwrap_or(0.0);
    let mut kernels = Vec::with_capacity(axes);
    for a in 0..axes {
        let arr = crate::io::read_array(dir.join(format!("axis{a}.carr")))?;
        let c = arr.shape()[0];
        let mat = Array2::from_shape_fn((c, c), |(i, j)| arr[[i, j]]);
        kernels.push(AxisKernel::new(mat)?);
    }
    Ok(AxisKernels { kernels, lambda })
}

/// Build a calibration block by cropping the k-space center of a full
/// multi-coil acquisition (the standard low-resolution calibration scan).
pub fn calibration_from_kspace(
    kspace: &ComplexArray,
    full_grid: &Grid,
    cal_extent: usize,
) -> Result<Calibration> {
    let d = full_grid.dim;
    if kspace.ndim() != d + 1 {
        return Err(Error::ShapeMismatch("expected [C, N..] k-space".into()));
    }
    let c = kspace.shape()[0];
    let mut shape = vec![c];
    shape.extend(vec![cal_extent; d]);
    let cropped = crate::fft::crop_center(kspace, &shape);
    let cal_grid = Grid { dim: d, extent: cal_extent, fov: full_grid.fov };
    Calibration::new(cal_grid, vec![cropped], vec![0.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::centered_fft;
    use crate::sim::synth_coil_maps;
    use ndarray::Axis;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Calibration of a point object at voxel offset r0 with unit coil.
    fn point_cal(n: usize, r0: [i64; 2]) -> Calibration {
        let grid = Grid::new(2, n, 1.0).unwrap();
        let mut img = ArrayD::<Complex64>::zeros(IxDyn(&[n, n]));
        let half = (n / 2) as i64;
        img[[(r0[0] + half) as usize, (r0[1] + half) as usize]] = Complex64::new(1.0, 0.0);
        let k = centered_fft(&img, &[0, 1]).insert_axis(Axis(0));
        Calibration::new(grid, vec![k], vec![0.0]).unwrap()
    }

    /// Smooth multi-coil calibration with compact support (eigenvalue phases
    /// stay away from the branch cut).
    fn blob_cal(n: usize, c: usize) -> Calibration {
        let grid = Grid::new(2, n, 1.0).unwrap();
        let maps = synth_coil_maps(&grid, c, 5).unwrap();
        let half = (n / 2) as f64;
        let img = ArrayD::from_shape_fn(IxDyn(&[n, n]), |idx| {
            let x = idx[0] as f64 - half;
            let y = idx[1] as f64 - half + 2.0;
            let r2 = (x * x + y * y) / (0.22 * n as f64).powi(2);
            Complex64::new((-r2).exp() + 0.3 * (-((x - 3.0) * (x - 3.0) + y * y) / 30.0).exp(), 0.0)
        });
        let mut kdata = ArrayD::zeros(IxDyn(&[c, n, n]));
        for ci in 0..c {
            let mut coil_img = img.clone();
            coil_img.zip_mut_with(&maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
            kdata
                .index_axis_mut(Axis(0), ci)
                .assign(&centered_fft(&coil_img, &[0, 1]));
        }
        Calibration::new(grid, vec![kdata], vec![0.0]).unwrap()
    }

    #[test]
    fn single_coil_point_object_kernel_is_analytic_phase() {
        // Point at the center: G = 1 exactly.
        let cal = point_cal(32, [0, 0]);
        let ks = calibrate_axis_kernels(&cal, 0.0).unwrap();
        for k in &ks.kernels {
            assert!((k.matrix[[0, 0]] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        // Off-center point: G_a = exp(-j 2 pi r0_a / N).
        let cal = point_cal(32, [3, -2]);
        let ks = calibrate_axis_kernels(&cal, 0.0).unwrap();
        for (a, &r) in [3f64, -2.0].iter().enumerate() {
            let expect = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * r / 32.0);
            assert!(
                (ks.kernels[a].matrix[[0, 0]] - expect).norm() < 1e-10,
                "axis {a}"
            );
        }
    }

    #[test]
    fn ridge_fit_recovers_exact_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 4;
        let n = 200;
        let g0 = Array2::from_shape_fn((c, c), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let s = Array2::from_shape_fn((c, n), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let mut t = Array2::zeros((c, n));
        for p in 0..n {
            for i in 0..c {
                let mut acc = Complex64::default();
                for j in 0..c {
                    acc += g0[[i, j]] * s[[j, p]];
                }
                t[[i, p]] = acc;
            }
        }
        let g = ridge_fit(&s, &t, 0.0).unwrap();
        let mut max_err: f64 = 0.0;
        for (a, b) in g.iter().zip(g0.iter()) {
            max_err = max_err.max((a - b).norm());
        }
        assert!(max_err < 1e-10, "max err {max_err}");
    }

    #[test]
    fn huge_lambda_shrinks_kernel() {
        let cal = blob_cal(32, 4);
        let ks = calibrate_axis_kernels(&cal, 1e12).unwrap();
        for k in &ks.kernels {
            let fro: f64 = k.matrix.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!(fro < 1e-6, "frobenius {fro}");
        }
    }

    #[test]
    fn singular_normal_matrix_errors_without_ridge() {
        // Rank-deficient sources: two identical coils.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<Complex64> = (0..50)
            .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let s = Array2::from_shape_fn((2, 50), |(_, j)| row[j]);
        let t = s.clone();
        match ridge_fit(&s, &t, 0.0) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("lambda")),
            other => panic!("expected singular error, got {other:?}"),
        }
        assert!(ridge_fit(&s, &t, 1e-3).is_ok());
    }

    #[test]
    fn frac_power_identity_and_unit() {
        let cal = blob_cal(32, 6);
        let ks = calibrate_axis_kernels(&cal, 1e-4).unwrap();
        for k in &ks.kernels {
            let c = k.num_coils();
            let p0 = k.power(0.0).unwrap();
            for i in 0..c {
                for j in 0..c {
                    let want = if i == j { Complex64::new(1.0, 0.0) } else { Complex64::default() };
                    assert!((p0[[i, j]] - want).norm() < 1e-12);
                }
            }
            let p1 = k.power(1.0).unwrap();
            for (a, b) in p1.iter().zip(k.matrix.iter()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn frac_power_semigroup() {
        let cal = blob_cal(32, 6);
        let ks = calibrate_axis_kernels(&cal, 1e-4).unwrap();
        for k in &ks.kernels {
            assert!(!k.near_branch_cut(), "test kernel should stay off the cut");
            let a = k.power(0.3).unwrap();
            let b = k.power(0.2).unwrap();
            let ab = a.dot(&b);
            let half = k.power(0.5).unwrap();
            let scale: f64 = half.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for (x, y) in ab.iter().zip(half.iter()) {
                assert!((x - y).norm() / scale <= 1e-8);
            }
        }
    }

    #[test]
    fn on_grid_samples_pass_through() {
        let cal = blob_cal(32, 4);
        let ks = calibrate_axis_kernels(&cal, 1e-3).unwrap();
        let grid = Grid::new(2, 32, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 25;
        let mut coords = Array2::zeros((m, 2));
        let mut seen = std::collections::HashSet::new();
        let mut i = 0;
        while i < m {
            let kx = rng.gen_range(-16i64..16);
            let ky = rng.gen_range(-16i64..16);
            if seen.insert((kx, ky)) {
                coords[[i, 0]] = kx as f64;
                coords[[i, 1]] = ky as f64;
                i += 1;
            }
        }
        let data = Array2::from_shape_fn((4, m), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let out = grog_grid(&data, &coords, &grid, &ks, None).unwrap();
        assert_eq!(out.data.ncols(), m);
        for s in 0..m {
            for c in 0..4 {
                assert!((out.data[[c, s]] - data[[c, s]]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn single_coil_point_object_gridding_is_exact() {
        // Scalar kernels are exact for a point source: gridded values equal
        // the true on-grid values.
        let n = 32;
        let cal = point_cal(n, [2, 1]);
        let ks = calibrate_axis_kernels(&cal, 0.0).unwrap();
        let grid = Grid::new(2, n, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 40;
        let coords = Array2::from_shape_fn((m, 2), |_| 14.0 * (rng.gen::<f64>() - 0.5));
        // Data: k-space of the same point object at the off-grid coords.
        let phase = |kx: f64, ky: f64| {
            Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (kx * 2.0 + ky * 1.0) / n as f64)
        };
        let data = Array2::from_shape_fn((1, m), |(_, i)| phase(coords[[i, 0]], coords[[i, 1]]));
        let out = grog_grid(&data, &coords, &grid, &ks, None).unwrap();
        for s in 0..out.data.ncols() {
            let expect = phase(out.coords[[s, 0]] as f64, out.coords[[s, 1]] as f64);
            assert!((out.data[[0, s]] - expect).norm() < 1e-10);
        }
    }

    #[test]
    fn collisions_average_with_weights() {
        let cal = point_cal(32, [0, 0]); // identity kernels
        let ks = calibrate_axis_kernels(&cal, 0.0).unwrap();
        let grid = Grid::new(2, 32, 1.0).unwrap();
        // Two samples snapping to the same target (1, 0).
        let coords = Array2::from_shape_vec((2, 2), vec![0.8, 0.0, 1.2, 0.0]).unwrap();
        let data = Array2::from_shape_vec(
            (1, 2),
            vec![Complex64::new(1.0, 0.0), Complex64::new(3.0, 0.0)],
        )
        .unwrap();
        let out = grog_grid(&data, &coords, &grid, &ks, Some(&[1.0, 3.0])).unwrap();
        assert_eq!(out.data.ncols(), 1);
        assert_eq!(out.coords[[0, 0]], 1);
        // Weighted average (1*1 + 3*3) / 4 = 2.5.
        assert!((out.data[[0, 0]].re - 2.5).abs() < 1e-12);
    }

    #[test]
    fn axis_order_sensitivity_is_measured() {
        let cal = blob_cal(32, 6);
        let ks = calibrate_axis_kernels(&cal, 1e-3).unwrap();
        let grid = Grid::new(2, 32, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 60;
        let coords = Array2::from_shape_fn((m, 2), |_| 14.0 * (rng.gen::<f64>() - 0.5));
        let data = Array2::from_shape_fn((6, m), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let xy = grog_grid_with_order(&data, &coords, &grid, &ks, None, &[0, 1]).unwrap();
        let yx = grog_grid_with_order(&data, &coords, &grid, &ks, None, &[1, 0]).unwrap();
        let num: f64 = xy.data.iter().zip(yx.data.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = xy.data.iter().map(|v| v.norm_sqr()).sum();
        let rel = (num / den).sqrt();
        // Kernels do not commute exactly; differences are expected and small.
        println!("axis-order sensitivity: relative L2 difference {rel:.3e}");
        assert!(rel.is_finite());
    }

    #[test]
    fn edge_targets_wrap_and_deltas_stay_small() {
        let cal = point_cal(32, [0, 0]);
        let ks = calibrate_axis_kernels(&cal, 0.0).unwrap();
        let grid = Grid::new(2, 32, 1.0).unwrap();
        let coords = Array2::from_shape_vec((1, 2), vec![15.7, 0.0]).unwrap();
        let data = Array2::from_elem((1, 1), Complex64::new(1.0, 0.0));
        let out = grog_grid(&data, &coords, &grid, &ks, None).unwrap();
        // 15.7 rounds to 16 = +N/2, which wraps to -N/2.
        assert_eq!(out.coords[[0, 0]], -16);
    }

    #[test]
    fn kernel_roundtrip_serialization() {
        let cal = blob_cal(32, 4);
        let ks = calibrate_axis_kernels(&cal, 1e-3).unwrap();
        let dir = std::env::temp_dir().join("igrog_grog_kernels");
        save_axis_kernels(&dir, &ks).unwrap();
        let back = load_axis_kernels(&dir).unwrap();
        assert_eq!(back.kernels.len(), 2);
        for (a, b) in ks.kernels.iter().zip(back.kernels.iter()) {
            for (x, y) in a.matrix.iter().zip(b.matrix.iter()) {
                assert_eq!(x, y);
            }
        }
    }
}
