//! Field-imperfection machinery: the separable phase decomposition, time
//! segmentation (clustered centers + zero-order or least-squares
//! interpolators), time-segmented NUFFT operators, and the field-conditioned
//! implicit kernel training that moves most of the per-segment phase
//! correction into the gridding step.

use crate::array::{Calibration, CoilMaps, ComplexArray, Grid};
use crate::fft::{centered_fft, centered_ifft_norm};
use crate::grog::GriddedKspace;
use crate::igrog::{
    train_on_source, BatchSource, GriddingPlan, KernelNet, TrainConfig, TrainingBatch,
};
use crate::nufft::{toeplitz_psf, KspaceInterpolator, NufftPlan, ToeplitzPsf};
use crate::recon::{ComplexArray2, LinearOp};
use crate::sim::{AlphaModel, FieldMap};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InterpMode {
    ZeroOrder,
    LeastSquares,
}

/// Time segmentation: centers in temporal-coefficient space, real
/// interpolator rows per sample, and the nearest-center assignment.
#[derive(Debug, Clone)]
pub struct TimeSegmentation {
    /// L x P cluster centers.
    pub centers: Array2<f64>,
    /// M x L interpolator matrix (rows one-hot for zero-order).
    pub interpolators: Array2<f64>,
    pub mode: InterpMode,
    /// Nearest center per sample.
    pub assignment: Vec<usize>,
}

/// Lloyd k-means with k-means++ seeding on the rows of `alphas` (M x P).
/// Selection draws use a single uniform variate walked over the cumulative
/// distribution, which makes the result invariant to duplicating the data.
pub fn cluster_centers(alphas: &Array2<f64>, l: usize, seed: u64) -> Result<Array2<f64>> {
    let m = alphas.nrows();
    let p = alphas.ncols();
    if l == 0 {
        return Err(Error::InvalidArgument("need at least one segment".into()));
    }
    if l > m {
        return Err(Error::InvalidArgument(format!("L = {l} exceeds the {m} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::zeros((l, p));

    // k-means++ seeding.
    let first = ((rng.gen::<f64>() * m as f64) as usize).min(m - 1);
    centers.row_mut(0).assign(&alphas.row(first));
    let mut d2: Vec<f64> = (0..m)
        .map(|i| row_dist2(alphas, i, &centers, 0))
        .collect();
    for k in 1..l {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            ((rng.gen::<f64>() * m as f64) as usize).min(m - 1)
        } else {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = m - 1;
            for (i, &v) in d2.iter().enumerate() {
                acc += v;
                if acc >= u {
                    idx = i;
                    break;
                }
            }
            idx
        };
        centers.row_mut(k).assign(&alphas.row(pick));
        for i in 0..m {
            d2[i] = d2[i].min(row_dist2(alphas, i, &centers, k));
        }
    }

    // Lloyd iterations.
    let mut assign = vec![0usize; m];
    for _ in 0..100 {
        let mut moved = 0.0f64;
        for i in 0..m {
            let mut best = 0;
            let mut bd = f64::MAX;
            for k in 0..l {
                let d = row_dist2(alphas, i, &centers, k);
                if d < bd {
                    bd = d;
                    best = k;
                }
            }
            assign[i] = best;
        }
        for k in 0..l {
            let members: Vec<usize> = (0..m).filter(|&i| assign[i] == k).collect();
            if members.is_empty() {
                continue; // keep the old center
            }
            for j in 0..p {
                let mean: f64 =
                    members.iter().map(|&i| alphas[[i, j]]).sum::<f64>() / members.len() as f64;
                moved = moved.max((centers[[k, j]] - mean).abs());
                centers[[k, j]] = mean;
            }
        }
        if moved <= 1e-9 {
            break;
        }
    }
    Ok(centers)
}

fn row_dist2(alphas: &Array2<f64>, i: usize, centers: &Array2<f64>, k: usize) -> f64 {
    (0..alphas.ncols())
        .map(|j| (alphas[[i, j]] - centers[[k, j]]).powi(2))
        .sum()
}

fn nearest_center(alphas: &Array2<f64>, i: usize, centers: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut bd = f64::MAX;
    for k in 0..centers.nrows() {
        let d = row_dist2(alphas, i, centers, k);
        if d < bd {
            bd = d;
            best = k;
        }
    }
    best
}

/// Build interpolators for the decomposition
/// `exp(-j2pi phi(r,t)) ~ sum_l exp(-j2pi phi(r).beta_l) h_l(t)`.
/// Zero-order rows are one-hot at the nearest center; least-squares rows
/// minimize the fit over 1000 sampled voxels (real coefficients, ridge
/// 1e-8 against rank deficiency).
pub fn build_interpolators(
    alphas: &Array2<f64>,
    centers: &Array2<f64>,
    field: &FieldMap,
    mode: InterpMode,
    seed: u64,
) -> Result<TimeSegmentation> {
    let m = alphas.nrows();
    let l = centers.nrows();
    if alphas.ncols() != centers.ncols() || alphas.ncols() != field.num_terms() {
        return Err(Error::ShapeMismatch("alphas / centers / field P mismatch".into()));
    }
    let assignment: Vec<usize> = (0..m).map(|i| nearest_center(alphas, i, centers)).collect();
    let interpolators = match mode {
        InterpMode::ZeroOrder => {
            let mut h = Array2::zeros((m, l));
            for (i, &k) in assignment.iter().enumerate() {
                h[[i, k]] = 1.0;
            }
            h
        }
        InterpMode::LeastSquares => {
            let total = field.basis[0].len();
            let n_vox = total.min(1000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vox: Vec<usize> =
                (0..n_vox).map(|_| ((rng.gen::<f64>() * total as f64) as usize).min(total - 1)).collect();
            let basis_flat: Vec<Vec<f64>> =
                field.basis.iter().map(|b| b.iter().copied().collect()).collect();
            let p = field.num_terms();
            // B[v, k] = exp(-j 2 pi phi(r_v) . beta_k)
            let mut bmat = Array2::<Complex64>::zeros((n_vox, l));
            for (vi, &v) in vox.iter().enumerate() {
                for k in 0..l {
                    let mut ph = 0.0;
                    for q in 0..p {
                        ph += basis_flat[q][v] * centers[[k, q]];
                    }
                    bmat[[vi, k]] = Complex64::from_polar(1.0, -2.0 * PI * ph);
                }
            }
            // Real normal matrix Re(B^H B) + ridge.
            let mut ata = vec![vec![0f64; l]; l];
            for a in 0..l {
                for b in 0..l {
                    let mut acc = Complex64::default();
                    for vi in 0..n_vox {
                        acc += bmat[[vi, a]].conj() * bmat[[vi, b]];
                    }
                    ata[a][b] = acc.re;
                }
            }
            let ridge = 1e-8 * ata.iter().enumerate().map(|(i, r)| r[i]).fold(0.0f64, f64::max);
            for (a, row) in ata.iter_mut().enumerate() {
                row[a] += ridge;
            }
            let chol = cholesky(&ata)
                .ok_or_else(|| Error::Numerical("interpolator normal matrix not SPD".into()))?;
            let mut h = Array2::zeros((m, l));
            for i in 0..m {
                // rhs_k = Re(B_k^H e_i) with e_i the sampled phase vector at t_i.
                let mut rhs = vec![0f64; l];
                for (vi, &v) in vox.iter().enumerate() {
                    let mut ph = 0.0;
                    for q in 0..p {
                        ph += basis_flat[q][v] * alphas[[i, q]];
                    }
                    let e = Complex64::from_polar(1.0, -2.0 * PI * ph);
                    for k in 0..l {
                        rhs[k] += (bmat[[vi, k]].conj() * e).re;
                    }
                }
                let sol = chol_solve(&chol, &rhs);
                for k in 0..l {
                    h[[i, k]] = sol[k];
                }
            }
            h
        }
    };
    Ok(TimeSegmentation { centers: centers.clone(), interpolators, mode, assignment })
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0f64; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// `exp(-j 2 pi phi(r) . beta_l)` for every center.
pub fn segment_phase_maps(field: &FieldMap, centers: &Array2<f64>) -> Vec<ComplexArray> {
    (0..centers.nrows())
        .map(|l| {
            let row: Vec<f64> = (0..centers.ncols()).map(|p| centers[[l, p]]).collect();
            let phase = field.phase_map(&row);
            phase.mapv(|ph| Complex64::from_polar(1.0, -2.0 * PI * ph))
        })
        .collect()
}

/// Time-segmented SENSE operator:
/// `A x = sum_l diag(h_l) F_nufft (s_c e_l x)`, adjoint exact.
pub struct TsSenseOp {
    pub maps: CoilMaps,
    pub plan: NufftPlan,
    pub h: Array2<f64>,
    phase_maps: Vec<ComplexArray>,
    pub dcf: Option<Vec<f64>>,
    toeplitz: Option<Vec<ToeplitzPsf>>,
    mode: InterpMode,
}

impl TsSenseOp {
    pub fn new(
        maps: CoilMaps,
        plan: NufftPlan,
        ts: &TimeSegmentation,
        field: &FieldMap,
        dcf: Option<Vec<f64>>,
    ) -> Result<Self> {
        if ts.interpolators.nrows() != plan.num_samples() {
            return Err(Error::ShapeMismatch("interpolator rows vs plan samples".into()));
        }
        if maps.spatial_shape() != plan.grid.shape() {
            return Err(Error::ShapeMismatch("maps vs plan grid".into()));
        }
        let phase_maps = segment_phase_maps(field, &ts.centers);
        if phase_maps[0].shape() != plan.grid.shape().as_slice() {
            return Err(Error::ShapeMismatch("field basis vs grid".into()));
        }
        Ok(TsSenseOp {
            maps,
            plan,
            h: ts.interpolators.clone(),
            phase_maps,
            dcf,
            toeplitz: None,
            mode: ts.mode,
        })
    }

    /// Precompute one Toeplitz PSF per segment. Exact for zero-order
    /// interpolators, whose cross-segment products vanish.
    pub fn with_toeplitz(mut self) -> Result<Self> {
        if self.mode != InterpMode::ZeroOrder {
            return Err(Error::InvalidArgument(
                "per-segment Toeplitz normal requires zero-order interpolators".into(),
            ));
        }
        let m = self.plan.num_samples();
        let base: Vec<f64> = match &self.dcf {
            Some(w) => w.clone(),
            None => vec![1.0; m],
        };
        let mut psfs = Vec::with_capacity(self.h.ncols());
        for l in 0..self.h.ncols() {
            let w: Vec<f64> = (0..m).map(|i| base[i] * self.h[[i, l]] * self.h[[i, l]]).collect();
            psfs.push(toeplitz_psf(&self.plan, &w)?);
        }
        self.toeplitz = Some(psfs);
        Ok(self)
    }

    fn num_segments(&self) -> usize {
        self.h.ncols()
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

impl LinearOp for TsSenseOp {
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
        let c = self.maps.num_coils();
        let m = self.plan.num_samples();
        let mut out = Array2::zeros((c, m));
        for l in 0..self.num_segments() {
            let mut seg = img.clone();
            seg.zip_mut_with(&self.phase_maps[l], |v, &e| *v *= e);
            let coils = self.coil_images(&seg);
            let data = self.plan.forward(&coils).expect("shape checked");
            for ci in 0..c {
                for i in 0..m {
                    out[[ci, i]] += data[[ci, i]] * self.h[[i, l]];
                }
            }
        }
        out
    }

    fn adjoint(&self, data: &ComplexArray2) -> ComplexArray {
        let c = self.maps.num_coils();
        let m = self.plan.num_samples();
        let mut out = ArrayD::zeros(IxDyn(&self.domain_shape()));
        for l in 0..self.num_segments() {
            let mut seg_data = Array2::zeros((c, m));
            for ci in 0..c {
                for i in 0..m {
                    seg_data[[ci, i]] = data[[ci, i]] * self.h[[i, l]];
                }
            }
            let imgs = self.plan.adjoint(&seg_data, None).expect("shape checked");
            let mut combined = self.combine_coils(&imgs);
            combined.zip_mut_with(&self.phase_maps[l], |v, &e| *v *= e.conj());
            out += &combined;
        }
        out
    }

    fn normal(&self, img: &ComplexArray) -> ComplexArray {
        match &self.toeplitz {
            None => self.adjoint_weighted(&self.apply(img)),
            Some(psfs) => {
                let mut out = ArrayD::zeros(IxDyn(&self.domain_shape()));
                for (l, psf) in psfs.iter().enumerate() {
                    let mut seg = img.clone();
                    seg.zip_mut_with(&self.phase_maps[l], |v, &e| *v *= e);
                    let coils = self.coil_images(&seg);
                    let normed = psf.normal(&coils).expect("PSF shape fixed");
                    let mut combined = self.combine_coils(&normed);
                    combined.zip_mut_with(&self.phase_maps[l], |v, &e| *v *= e.conj());
                    out += &combined;
                }
                out
            }
        }
    }
}

/// Gridded SENSE operator with per-sample segment labels: segment l gathers
/// `FFT(s_c e_l x)` at its own integer coordinates. Collapses to the plain
/// gridded operator when L = 1 and the field is zero.
pub struct SenseGriddedSegmentedOp {
    pub maps: CoilMaps,
    pub grid: Grid,
    pub coords: Array2<i64>,
    pub segments: Vec<usize>,
    phase_maps: Vec<ComplexArray>,
    pub dcf: Option<Vec<f64>>,
    flat_idx: Vec<usize>,
}

impl SenseGriddedSegmentedOp {
    pub fn new(
        maps: CoilMaps,
        grid: Grid,
        coords: Array2<i64>,
        segments: Vec<usize>,
        field: &FieldMap,
        centers: &Array2<f64>,
        dcf: Option<Vec<f64>>,
    ) -> Result<Self> {
        if segments.len() != coords.nrows() {
            return Err(Error::ShapeMismatch("segments vs coords".into()));
        }
        let phase_maps = segment_phase_maps(field, centers);
        if segments.iter().any(|&s| s >= phase_maps.len()) {
            return Err(Error::InvalidArgument("segment label out of range".into()));
        }
        let n = grid.extent;
        let mut flat_idx = Vec::with_capacity(coords.nrows());
        for row in coords.rows() {
            let mut lin = 0usize;
            for &k in row {
                if k < grid.kmin() || k > grid.kmax() {
                    return Err(Error::InvalidArgument("integer coordinate outside grid".into()));
                }
                lin = lin * n + grid.index_of_wrapped(k);
            }
            flat_idx.push(lin);
        }
        Ok(SenseGriddedSegmentedOp { maps, grid, coords, segments, phase_maps, dcf, flat_idx })
    }
}

impl LinearOp for SenseGriddedSegmentedOp {
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
        for l in 0..self.phase_maps.len() {
            if !self.segments.contains(&l) {
                continue;
            }
            let mut seg = img.clone();
            seg.zip_mut_with(&self.phase_maps[l], |v, &e| *v *= e);
            for ci in 0..c {
                let mut coil = seg.clone();
                coil.zip_mut_with(&self.maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| {
                    *v *= s
                });
                let ksp = centered_fft(&coil, &axes);
                let flat = ksp.as_slice().expect("standard layout");
                for (i, &idx) in self.flat_idx.iter().enumerate() {
                    if self.segments[i] == l {
                        out[[ci, i]] = flat[idx];
                    }
                }
            }
        }
        out
    }

    fn adjoint(&self, data: &ComplexArray2) -> ComplexArray {
        let c = self.maps.num_coils();
        let axes: Vec<usize> = (0..self.grid.dim).collect();
        let mut out = ArrayD::zeros(IxDyn(&self.domain_shape()));
        for l in 0..self.phase_maps.len() {
            if !self.segments.contains(&l) {
                continue;
            }
            let mut seg_img = ArrayD::<Complex64>::zeros(IxDyn(&self.domain_shape()));
            for ci in 0..c {
                let mut ksp = ArrayD::<Complex64>::zeros(IxDyn(&self.domain_shape()));
                {
                    let flat = ksp.as_slice_mut().expect("standard layout");
                    for (i, &idx) in self.flat_idx.iter().enumerate() {
                        if self.segments[i] == l {
                            flat[idx] += data[[ci, i]];
                        }
                    }
                }
                let img = crate::fft::centered_ifft(&ksp, &axes);
                let maps = self.maps.maps.index_axis(Axis(0), ci);
                ndarray::Zip::from(&mut seg_img).and(&img).and(&maps).for_each(|o, &x, &s| {
                    *o += x * s.conj();
                });
            }
            seg_img.zip_mut_with(&self.phase_maps[l], |v, &e| *v *= e.conj());
            out += &seg_img;
        }
        out
    }
}

/// How acquisition time enters the kernel network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FieldFeatureMode {
    /// One feature: elapsed time from the nearest segment center (B0 case).
    DeltaT,
    /// L x P features: alpha(t) - beta_l for every center.
    CenterOffsets,
}

/// A kernel network conditioned on field state, bound to the segmentation it
/// was trained for.
#[derive(Debug, Clone)]
pub struct FieldKernelNet {
    pub net: KernelNet,
    pub centers: Array2<f64>,
    pub mode: FieldFeatureMode,
    /// Echo-time origin of the calibration phase state.
    pub te0: f64,
}

/// Estimate a B0 map (Hz) from the first two echoes of a multi-echo
/// calibration.
pub fn estimate_b0_from_echoes(cal: &Calibration) -> Result<FieldMap> {
    if cal.num_echoes() < 2 {
        return Err(Error::InvalidArgument("need at least two echoes".into()));
    }
    let axes: Vec<usize> = (0..cal.grid.dim).collect();
    let c = cal.num_coils();
    let dte = cal.te[1] - cal.te[0];
    let mut ratio = ArrayD::<Complex64>::zeros(IxDyn(&cal.grid.shape()));
    for ci in 0..c {
        let i0 = centered_ifft_norm(&cal.kdata[0].index_axis(Axis(0), ci).to_owned(), &axes);
        let i1 = centered_ifft_norm(&cal.kdata[1].index_axis(Axis(0), ci).to_owned(), &axes);
        ndarray::Zip::from(&mut ratio).and(&i1).and(&i0).for_each(|r, &a, &b| {
            *r += a * b.conj();
        });
    }
    // phase(I1 conj(I0)) = -2 pi B0 dte
    let b0 = ratio.mapv(|v| -v.arg() / (2.0 * PI * dte));
    FieldMap::new(vec![b0], AlphaModel::Linear)
}

/// Batch source for field-conditioned training. Each batch lives at one
/// drawn acquisition time: sources are interpolated from calibration k-space
/// with the full phase accrual at that time, targets carry only the phase of
/// the nearest segment center.
struct FieldCalibrationSampler {
    grid: Grid,
    field: FieldMap,
    centers: Array2<f64>,
    center_interps: Vec<KspaceInterpolator>,
    /// Accrued-state interpolators on a uniform grid of acquisition times
    /// (the time axis enters the network as a smooth feature, so a modest
    /// quantization of the sampled times loses nothing).
    time_interps: Vec<(f64, KspaceInterpolator)>,
    orientation_entries: Vec<(Vec<f64>, Vec<bool>, f64)>,
    te0: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
    dim: usize,
    num_sources: usize,
    w_max: f64,
    mode: FieldFeatureMode,
    extra_scale: f64,
    rng: ChaCha8Rng,
}

impl FieldCalibrationSampler {
    fn feature_count(&self) -> usize {
        match self.mode {
            FieldFeatureMode::DeltaT => 1,
            FieldFeatureMode::CenterOffsets => self.centers.nrows() * self.centers.ncols(),
        }
    }

    fn field_features(&self, t: f64, out: &mut Vec<f64>) -> usize {
        let alphas = self.field.alphas_at(&[t]);
        let a: Vec<f64> = (0..alphas.ncols()).map(|p| alphas[[0, p]]).collect();
        // nearest center
        let mut best = 0;
        let mut bd = f64::MAX;
        for k in 0..self.centers.nrows() {
            let d: f64 = (0..a.len()).map(|p| (a[p] - self.centers[[k, p]]).powi(2)).sum();
            if d < bd {
                bd = d;
                best = k;
            }
        }
        match self.mode {
            FieldFeatureMode::DeltaT => {
                out.push((a[0] - self.centers[[best, 0]]) / self.extra_scale);
            }
            FieldFeatureMode::CenterOffsets => {
                for k in 0..self.centers.nrows() {
                    for p in 0..a.len() {
                        out.push((a[p] - self.centers[[k, p]]) / self.extra_scale);
                    }
                }
            }
        }
        best
    }
}

impl BatchSource for FieldCalibrationSampler {
    fn num_coils(&self) -> usize {
        self.center_interps[0].num_coils()
    }
    fn num_sources(&self) -> usize {
        self.num_sources
    }
    fn feature_width(&self) -> usize {
        self.dim * self.num_sources + 1 + self.feature_count()
    }

    fn next_batch(&mut self, batch: usize) -> TrainingBatch {
        let c = self.num_coils();
        let d = self.dim;
        let ns = self.num_sources;
        // A handful of acquisition times per batch: one small FFT each, with
        // the batch split across them so gradients mix times.
        let groups = 16.min(batch.max(1));
        let group_len = batch.div_ceil(groups);

        let mut features = Array2::zeros((batch, self.feature_width()));
        let mut sources = Array2::zeros((batch, ns * c));
        let mut targets = Array2::zeros((batch, c));
        let mut buf = vec![Complex64::default(); c];
        for g in 0..groups {
            let (t, source_interp) = {
                let i = ((self.rng.gen::<f64>() * self.time_interps.len() as f64) as usize)
                    .min(self.time_interps.len() - 1);
                (self.time_interps[i].0, &self.time_interps[i].1)
            };
            let mut feat_tail = Vec::new();
            let center_idx = self.field_features(t, &mut feat_tail);
            let target_interp = &self.center_interps[center_idx];
            let j0 = g * group_len;
            let j1 = ((g + 1) * group_len).min(batch);
            for j in j0..j1 {
                let oi = ((self.rng.gen::<f64>() * self.orientation_entries.len() as f64)
                    as usize)
                    .min(self.orientation_entries.len() - 1);
                let (orient, valid, missing) = &self.orientation_entries[oi];
                let target: Vec<f64> = (0..d)
                    .map(|a| self.lo[a] + (self.hi[a] - self.lo[a]) * self.rng.gen::<f64>())
                    .collect();
                for (q, &v) in orient.iter().enumerate() {
                    features[[j, q]] = v / self.w_max;
                }
                features[[j, d * ns]] = *missing;
                for (q, &v) in feat_tail.iter().enumerate() {
                    features[[j, d * ns + 1 + q]] = v;
                }
                target_interp.eval(&target, &mut buf);
                for ci in 0..c {
                    targets[[j, ci]] = buf[ci];
                }
                for i in 0..ns {
                    if valid[i] {
                        let coord: Vec<f64> =
                            (0..d).map(|a| target[a] + orient[i * d + a]).collect();
                        source_interp.eval(&coord, &mut buf);
                        for ci in 0..c {
                            sources[[j, i * c + ci]] = buf[ci];
                        }
                    }
                }
            }
        }
        TrainingBatch { features, sources, targets }
    }
}

/// Train a field-conditioned kernel network: sources carry the full phase
/// accrual of their acquisition time, targets only the nearest segment
/// center's phase, so applying the kernels leaves a small per-segment
/// residual for the reconstruction.
pub fn train_field_kernelnet(
    cal: &Calibration,
    field: Option<&FieldMap>,
    plan: &GriddingPlan,
    ts: &TimeSegmentation,
    mode: FieldFeatureMode,
    config: &TrainConfig,
) -> Result<FieldKernelNet> {
    let owned_field;
    let field = match field {
        Some(f) => f,
        None => {
            owned_field = estimate_b0_from_echoes(cal)?;
            &owned_field
        }
    };
    if field.num_terms() != ts.centers.ncols() {
        return Err(Error::ShapeMismatch("field P vs segmentation centers".into()));
    }
    if mode == FieldFeatureMode::DeltaT && field.num_terms() != 1 {
        return Err(Error::InvalidArgument("DeltaT features require P = 1".into()));
    }
    let region = crate::usable_calibration_region(cal)?;
    let (clo, chi) = region.coord_bounds(&cal.grid);
    let dim = plan.dim;
    let orientation_entries = plan.orientation_set();
    let mut span = vec![0.0f64; dim];
    for (o, _, _) in &orientation_entries {
        for (i, &v) in o.iter().enumerate() {
            span[i % dim] = span[i % dim].max(v.abs());
        }
    }
    let lo: Vec<f64> = (0..dim).map(|a| clo + span[a]).collect();
    let hi: Vec<f64> = (0..dim).map(|a| chi - span[a]).collect();
    if lo.iter().zip(&hi).any(|(l, h)| l >= h) {
        return Err(Error::InvalidArgument("calibration too small for orientation span".into()));
    }

    let axes: Vec<usize> = (0..cal.grid.dim).collect();
    let c = cal.num_coils();
    let cal_images: Vec<ComplexArray> = (0..c)
        .map(|ci| centered_ifft_norm(&cal.kdata[0].index_axis(Axis(0), ci).to_owned(), &axes))
        .collect();
    let te0 = cal.te[0];

    let accrued_interp = |row: &[f64]| -> Result<KspaceInterpolator> {
        let phase = field.phase_map(row);
        let mut shape = vec![c];
        shape.extend(cal.grid.shape());
        let mut kdata = ArrayD::zeros(IxDyn(&shape));
        for ci in 0..c {
            let mut img = cal_images[ci].clone();
            img.zip_mut_with(&phase, |v, &ph| *v *= Complex64::from_polar(1.0, -2.0 * PI * ph));
            kdata.index_axis_mut(Axis(0), ci).assign(&centered_fft(&img, &axes));
        }
        KspaceInterpolator::new(&kdata, &cal.grid, 2.0, 6.0)
    };

    let times: Vec<f64> = plan.entries.iter().map(|e| e.time).collect();
    // Feature scale. DeltaT only ever sees nearest-center offsets, so scale
    // by their range; CenterOffsets sees every center.
    let alphas = field.alphas_at(&times);
    let mut extra_scale: f64 = 0.0;
    for i in 0..times.len() {
        match mode {
            FieldFeatureMode::DeltaT => {
                let l = nearest_center(&alphas, i, &ts.centers);
                extra_scale = extra_scale.max((alphas[[i, 0]] - ts.centers[[l, 0]]).abs());
            }
            FieldFeatureMode::CenterOffsets => {
                for k in 0..ts.centers.nrows() {
                    for p in 0..ts.centers.ncols() {
                        extra_scale = extra_scale.max((alphas[[i, p]] - ts.centers[[k, p]]).abs());
                    }
                }
            }
        }
    }
    if extra_scale == 0.0 {
        extra_scale = 1.0;
    }

    // Target-state interpolators, one per segment center.
    let alphas0 = field.alphas_at(&[te0]);
    let center_interps: Vec<KspaceInterpolator> = (0..ts.centers.nrows())
        .map(|k| {
            let row: Vec<f64> = (0..ts.centers.ncols())
                .map(|p| ts.centers[[k, p]] - alphas0[[0, p]])
                .collect();
            accrued_interp(&row)
        })
        .collect::<Result<_>>()?;

    // Accrued-state interpolators on a uniform time grid spanning the run.
    let (t_lo, t_hi) = times.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &t| {
        (lo.min(t), hi.max(t))
    });
    let n_grid = 64.min(times.len().max(2));
    let time_interps: Vec<(f64, KspaceInterpolator)> = (0..n_grid)
        .map(|i| {
            let t = t_lo + (t_hi - t_lo) * i as f64 / (n_grid - 1) as f64;
            let at = field.alphas_at(&[t]);
            let row: Vec<f64> = (0..at.ncols()).map(|p| at[[0, p]] - alphas0[[0, p]]).collect();
            Ok((t, accrued_interp(&row)?))
        })
        .collect::<Result<_>>()?;

    let mut sampler = FieldCalibrationSampler {
        grid: cal.grid,
        field: field.clone(),
        centers: ts.centers.clone(),
        center_interps,
        time_interps,
        orientation_entries,
        te0,
        lo,
        hi,
        dim,
        num_sources: plan.num_sources,
        w_max: plan.w_max,
        mode,
        extra_scale,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let extra = sampler.feature_count();
    let mut net = train_on_source(&mut sampler, config, extra, extra_scale)?;
    net.dim = dim;
    net.w_max = plan.w_max;
    Ok(FieldKernelNet { net, centers: ts.centers.clone(), mode, te0 })
}

/// Apply field-conditioned kernels and label every unique target with its
/// time segment. Collisions are only merged within a segment (different
/// segments carry different phase states).
pub fn correct_and_grid(
    data_up: &Array2<Complex64>,
    plan: &GriddingPlan,
    fnet: &FieldKernelNet,
    ts: &TimeSegmentation,
    field: &FieldMap,
    weights: Option<&[f64]>,
) -> Result<(GriddedKspace, Vec<usize>)> {
    if ts.centers != fnet.centers {
        return Err(Error::InvalidArgument(
            "segmentation does not match the one the network was trained for".into(),
        ));
    }
    if ts.assignment.len() != plan.entries.len() {
        return Err(Error::ShapeMismatch("segmentation samples vs plan entries".into()));
    }
    let c = data_up.nrows();
    if fnet.net.num_coils != c {
        return Err(Error::ShapeMismatch("network coils vs data".into()));
    }
    let d = plan.dim;
    let times: Vec<f64> = plan.entries.iter().map(|e| e.time).collect();
    let alphas = field.alphas_at(&times);
    let scale = fnet.net.extra_scale;

    // Query all kernels (batched).
    let m = plan.entries.len();
    let fw = fnet.net.feature_width();
    let mut features = Array2::zeros((m, fw));
    for (i, e) in plan.entries.iter().enumerate() {
        let base = plan.orientation_features(e);
        for (q, &v) in base.iter().enumerate() {
            features[[i, q]] = v;
        }
        let l = ts.assignment[i];
        match fnet.mode {
            FieldFeatureMode::DeltaT => {
                features[[i, base.len()]] = (alphas[[i, 0]] - ts.centers[[l, 0]]) / scale;
            }
            FieldFeatureMode::CenterOffsets => {
                let mut q = base.len();
                for k in 0..ts.centers.nrows() {
                    for p in 0..ts.centers.ncols() {
                        features[[i, q]] = (alphas[[i, p]] - ts.centers[[k, p]]) / scale;
                        q += 1;
                    }
                }
            }
        }
    }
    let kernels = fnet.net.query_batch(&features);

    let mut slots: std::collections::HashMap<(Vec<i64>, usize), usize> =
        std::collections::HashMap::new();
    let mut uniq: Vec<(Vec<i64>, usize)> = Vec::new();
    let mut acc: Vec<Vec<Complex64>> = Vec::new();
    let mut wsum: Vec<f64> = Vec::new();
    for (i, entry) in plan.entries.iter().enumerate() {
        let svec = entry_sources_pub(data_up, entry, c);
        let g = &kernels[i];
        let w = weights.map(|w| w[i]).unwrap_or(1.0);
        let key = (entry.target.clone(), ts.assignment[i]);
        let slot = *slots.entry(key.clone()).or_insert_with(|| {
            uniq.push(key.clone());
            acc.push(vec![Complex64::default(); c]);
            wsum.push(0.0);
            uniq.len() - 1
        });
        for ci in 0..c {
            let mut pred = Complex64::default();
            for q in 0..svec.len() {
                pred += g[[ci, q]] * svec[q];
            }
            acc[slot][ci] += pred * w;
        }
        wsum[slot] += w;
    }
    let mu = uniq.len();
    let mut out = Array2::zeros((c, mu));
    let mut coords = Array2::zeros((mu, d));
    let mut segments = Vec::with_capacity(mu);
    for (s, (uc, l)) in uniq.iter().enumerate() {
        for a in 0..d {
            coords[[s, a]] = uc[a];
        }
        segments.push(*l);
        let wn = if wsum[s] > 0.0 { wsum[s] } else { 1.0 };
        for ci in 0..c {
            out[[ci, s]] = acc[s][ci] / wn;
        }
    }
    Ok((
        GriddedKspace { grid: plan.grid, data: out, coords, weight_sum: wsum },
        segments,
    ))
}

/// Linear interpolation of one entry's source values from upsampled data
/// (shared with the plain gridding path).
fn entry_sources_pub(
    data_up: &Array2<Complex64>,
    entry: &crate::igrog::PlanEntry,
    c: usize,
) -> Vec<Complex64> {
    let ns = entry.source_pos.len();
    let m_up = data_up.ncols();
    let mut out = vec![Complex64::default(); ns * c];
    for i in 0..ns {
        if !entry.valid[i] {
            continue;
        }
        let pos = entry.source_pos[i];
        let i0 = (pos.floor() as usize).min(m_up - 2);
        let w = pos - i0 as f64;
        for ci in 0..c {
            out[i * c + ci] = data_up[[ci, i0]] * (1.0 - w) + data_up[[ci, i0 + 1]] * w;
        }
    }
    out
}

/// Persist a time segmentation (centers + interpolators + assignment).
pub fn save_time_segmentation(dir: &std::path::Path, ts: &TimeSegmentation) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let centers = ts.centers.mapv(|v| Complex64::new(v, 0.0)).into_dyn();
    crate::io::write_array(dir.join("centers.carr"), &centers, crate::io::Precision::C128)?;
    let h = ts.interpolators.mapv(|v| Complex64::new(v, 0.0)).into_dyn();
    crate::io::write_array(dir.join("interp.carr"), &h, crate::io::Precision::C128)?;
    crate::io::write_real_vec(
        dir.join("assignment.carr"),
        &ts.assignment.iter().map(|&v| v as f64).collect::<Vec<_>>(),
    )?;
    let meta = serde_json::json!({ "mode": ts.mode });
    std::fs::write(dir.join("ts.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}

pub fn load_time_segmentation(dir: &std::path::Path) -> Result<TimeSegmentation> {
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ts.json"))?)
            .map_err(|e| Error::Format(format!("ts.json: {e}")))?;
    let mode: InterpMode = serde_json::from_value(meta["mode"].clone())
        .map_err(|e| Error::Format(format!("ts mode: {e}")))?;
    let centers_c = crate::io::read_array(dir.join("centers.carr"))?;
    let centers = Array2::from_shape_fn((centers_c.shape()[0], centers_c.shape()[1]), |(i, j)| {
        centers_c[[i, j]].re
    });
    let h_c = crate::io::read_array(dir.join("interp.carr"))?;
    let interpolators =
        Array2::from_shape_fn((h_c.shape()[0], h_c.shape()[1]), |(i, j)| h_c[[i, j]].re);
    let assignment = crate::io::read_real_vec(dir.join("assignment.carr"))?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    Ok(TimeSegmentation { centers, interpolators, mode, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Trajectory;
    use crate::igrog::PlanEntry;
    use crate::mlp::mlp_init;
    use crate::nufft::plan;
    use crate::sim::{
        brute_force_forward, quadratic_field_map, synth_coil_maps, vds_spiral, QuadraticCoeffs,
    };

    fn grid2(n: usize) -> Grid {
        Grid::new(2, n, 1.0).unwrap()
    }

    fn ones_maps(grid: &Grid, c: usize) -> CoilMaps {
        let mut shape = vec![c];
        shape.extend(grid.shape());
        CoilMaps::new(ArrayD::from_elem(IxDyn(&shape), Complex64::new(1.0, 0.0))).unwrap()
    }

    fn random_img(shape: &[usize], seed: u64) -> ComplexArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        })
    }

    fn smooth_cal(n: usize, c: usize, seed: u64, scale: f64) -> Calibration {
        let grid = grid2(n);
        let maps = synth_coil_maps(&grid, c, seed).unwrap();
        let half = (n / 2) as f64;
        let img = ArrayD::from_shape_fn(IxDyn(&[n, n]), |idx| {
            let x = (idx[0] as f64 - half) / half;
            let y = (idx[1] as f64 - half) / half;
            Complex64::new(scale * ((-3.0 * (x * x + y * y)).exp()), 0.0)
        });
        let mut kdata = ArrayD::zeros(IxDyn(&[c, n, n]));
        for ci in 0..c {
            let mut coil = img.clone();
            coil.zip_mut_with(&maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
            kdata.index_axis_mut(Axis(0), ci).assign(&centered_fft(&coil, &[0, 1]));
        }
        Calibration::new(grid, vec![kdata], vec![0.0]).unwrap()
    }

    fn uniform_alphas(m: usize, t_max: f64) -> Array2<f64> {
        Array2::from_shape_fn((m, 1), |(i, _)| t_max * i as f64 / (m - 1) as f64)
    }

    #[test]
    fn kmeans_uniform_centers_near_quantile_midpoints() {
        let t_max = 0.06;
        let alphas = uniform_alphas(4096, t_max);
        let centers = cluster_centers(&alphas, 4, 0).unwrap();
        let mut got: Vec<f64> = (0..4).map(|k| centers[[k, 0]]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (g, want) in got.iter().zip([1.0 / 8.0, 3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0]) {
            let w = want * t_max;
            assert!((g - w).abs() <= 0.05 * t_max, "center {g} vs {w}");
        }
    }

    #[test]
    fn kmeans_l_equals_m_hits_points() {
        let alphas = Array2::from_shape_vec((5, 1), vec![0.1, 0.5, 0.9, 1.7, 2.4]).unwrap();
        let centers = cluster_centers(&alphas, 5, 0).unwrap();
        let mut got: Vec<f64> = (0..5).map(|k| centers[[k, 0]]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (g, w) in got.iter().zip([0.1, 0.5, 0.9, 1.7, 2.4]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_invariant_to_duplication() {
        let alphas = Array2::from_shape_fn((200, 1), |(i, _)| ((i * 37) % 101) as f64 / 101.0);
        let doubled = Array2::from_shape_fn((400, 1), |(i, _)| alphas[[i / 2, 0]]);
        let c1 = cluster_centers(&alphas, 5, 0).unwrap();
        let c2 = cluster_centers(&doubled, 5, 0).unwrap();
        let mut a: Vec<f64> = (0..5).map(|k| c1[[k, 0]]).collect();
        let mut b: Vec<f64> = (0..5).map(|k| c2[[k, 0]]).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_order_interpolators_are_one_hot() {
        let g = grid2(16);
        let field = quadratic_field_map(&g, &QuadraticCoeffs { constant: 30.0, ..Default::default() }).unwrap();
        let alphas = uniform_alphas(64, 0.05);
        let centers = cluster_centers(&alphas, 4, 0).unwrap();
        let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0).unwrap();
        for i in 0..64 {
            let row: Vec<f64> = (0..4).map(|k| ts.interpolators[[i, k]]).collect();
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 3);
            assert_eq!(row[ts.assignment[i]], 1.0);
        }
        // A time exactly at a center gets that center.
        let t_at = centers[[2, 0]];
        let single = Array2::from_shape_vec((1, 1), vec![t_at]).unwrap();
        let ts1 = build_interpolators(&single, &centers, &field, InterpMode::ZeroOrder, 0).unwrap();
        assert_eq!(ts1.interpolators[[0, 2]], 1.0);
    }

    #[test]
    fn zero_field_is_exact_with_one_segment() {
        let g = grid2(16);
        let field = quadratic_field_map(&g, &QuadraticCoeffs::default()).unwrap();
        let alphas = uniform_alphas(32, 0.05);
        let centers = cluster_centers(&alphas, 1, 0).unwrap();
        for mode in [InterpMode::ZeroOrder, InterpMode::LeastSquares] {
            let ts = build_interpolators(&alphas, &centers, &field, mode, 0).unwrap();
            // residual of 1 ~ h * 1 per time point
            for i in 0..32 {
                let r = (1.0 - ts.interpolators[[i, 0]]).abs();
                assert!(r <= 1e-6, "{mode:?} residual {r}");
            }
        }
    }

    #[test]
    fn least_squares_beats_zero_order_everywhere() {
        let g = grid2(24);
        let field = quadratic_field_map(
            &g,
            &QuadraticCoeffs { xx: 700.0, yy: 500.0, x: 40.0, constant: -20.0, ..Default::default() },
        )
        .unwrap();
        let alphas = uniform_alphas(48, 0.06);
        let centers = cluster_centers(&alphas, 3, 0).unwrap();
        let z = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0).unwrap();
        let ls = build_interpolators(&alphas, &centers, &field, InterpMode::LeastSquares, 0).unwrap();
        // Evaluate both residuals on a voxel sample.
        let total = g.num_voxels();
        let basis: Vec<f64> = field.basis[0].iter().copied().collect();
        for i in 0..48 {
            let t = alphas[[i, 0]];
            let mut rz = 0.0;
            let mut rls = 0.0;
            for v in (0..total).step_by(3) {
                let truth = Complex64::from_polar(1.0, -2.0 * PI * basis[v] * t);
                let mut az = Complex64::default();
                let mut als = Complex64::default();
                for k in 0..3 {
                    let e = Complex64::from_polar(1.0, -2.0 * PI * basis[v] * centers[[k, 0]]);
                    az += e * z.interpolators[[i, k]];
                    als += e * ls.interpolators[[i, k]];
                }
                rz += (truth - az).norm_sqr();
                rls += (truth - als).norm_sqr();
            }
            assert!(rls <= rz + 1e-9, "t index {i}: LS {rls} vs ZO {rz}");
        }
    }

    #[test]
    fn phase_decomposition_reconstructs_pointwise() {
        // P = 2 sampled model: phi(r, t) = phi_1(r) a_1(t) + phi_2(r) a_2(t).
        let b1 = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |idx| (idx[0] as f64) * 0.3);
        let b2 = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |idx| (idx[1] as f64) * -0.7 + 1.0);
        let times = vec![0.0, 0.01, 0.02, 0.03];
        let values = Array2::from_shape_vec(
            (4, 2),
            vec![0.0, 1.0, 0.5, 0.8, 1.0, 0.2, 2.0, -0.4],
        )
        .unwrap();
        let field = FieldMap::new(
            vec![b1.clone(), b2.clone()],
            AlphaModel::Sampled { times: times.clone(), values: values.clone() },
        )
        .unwrap();
        let alphas = field.alphas_at(&times);
        for (i, _) in times.iter().enumerate() {
            let row: Vec<f64> = (0..2).map(|p| alphas[[i, p]]).collect();
            let map = field.phase_map(&row);
            for idx in 0..64 {
                let (a, b) = (idx / 8, idx % 8);
                let want = b1[[a, b]] * values[[i, 0]] + b2[[a, b]] * values[[i, 1]];
                let got = map[[a, b]];
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ts_forward_zero_field_equals_plain_nufft() {
        let g = grid2(24);
        let traj = vds_spiral(&g, 2, 1.5, 1.5, 80, 1e-3).unwrap();
        let p = plan(&g, &traj, 1.5, 4.0).unwrap();
        let field = quadratic_field_map(&g, &QuadraticCoeffs::default()).unwrap();
        let alphas = field.alphas_at(&traj.times);
        let centers = cluster_centers(&alphas, 1, 0).unwrap();
        let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0).unwrap();
        let maps = synth_coil_maps(&g, 2, 1).unwrap();
        let op = TsSenseOp::new(maps.clone(), p.clone(), &ts, &field, None).unwrap();
        let plain = crate::recon::SenseNufftOp::new(maps, p, None).unwrap();
        let x = random_img(&[24, 24], 2);
        let a = op.apply(&x);
        let b = plain.apply(&x);
        let scale: f64 = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).norm() / scale <= 1e-12);
        }
    }

    #[test]
    fn ts_op_adjoint_test() {
        let g = grid2(16);
        let traj = vds_spiral(&g, 2, 1.5, 1.5, 50, 1e-3).unwrap();
        let p = plan(&g, &traj, 1.5, 4.0).unwrap();
        let field = quadratic_field_map(
            &g,
            &QuadraticCoeffs { xx: 900.0, yy: 600.0, constant: 10.0, ..Default::default() },
        )
        .unwrap();
        let alphas = field.alphas_at(&traj.times);
        let centers = cluster_centers(&alphas, 3, 0).unwrap();
        for mode in [InterpMode::ZeroOrder, InterpMode::LeastSquares] {
            let ts = build_interpolators(&alphas, &centers, &field, mode, 0).unwrap();
            let maps = synth_coil_maps(&g, 2, 3).unwrap();
            let op = TsSenseOp::new(maps, p.clone(), &ts, &field, None).unwrap();
            let x = random_img(&[16, 16], 4);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let y = Array2::from_shape_fn((2, traj.num_samples()), |_| {
                Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            });
            let ax = op.apply(&x);
            let aty = op.adjoint(&y);
            let lhs: Complex64 = ax.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum();
            let rhs: Complex64 = x.iter().zip(aty.iter()).map(|(a, b)| a.conj() * b).sum();
            let denom = ax.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
                * y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!((lhs - rhs).norm() / denom <= 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn ts_with_one_segment_per_sample_matches_oracle() {
        // Zero-order segmentation with L = M is exact up to NUFFT accuracy.
        let g = grid2(16);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 40;
        let coords = Array2::from_shape_fn((m, 2), |_| 7.5 * (rng.gen::<f64>() - 0.5));
        let times: Vec<f64> = (0..m).map(|i| 1e-3 * i as f64).collect();
        let traj = Trajectory::new(coords, times.clone(), vec![0; m]).unwrap();
        let p = plan(&g, &traj, 2.0, 6.0).unwrap();
        let field = quadratic_field_map(
            &g,
            &QuadraticCoeffs { xx: 500.0, yy: 300.0, constant: 15.0, ..Default::default() },
        )
        .unwrap();
        let alphas = field.alphas_at(&times);
        let centers = alphas.clone(); // L = M, centers at the sample alphas
        let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0).unwrap();
        let maps = ones_maps(&g, 1);
        let op = TsSenseOp::new(maps.clone(), p, &ts, &field, None).unwrap();
        let img = random_img(&[16, 16], 7);
        let fast = op.apply(&img);
        let exact = brute_force_forward(&img, &maps, &traj, Some(&field)).unwrap();
        let scale: f64 = exact.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (a, e) in fast.iter().zip(exact.iter()) {
            assert!((a - e).norm() / scale <= 1e-3);
        }
    }

    #[test]
    fn ts_error_nonincreasing_in_segments() {
        let g = grid2(32);
        let traj = vds_spiral(&g, 2, 1.5, 1.5, 150, 0.03).unwrap();
        let p = plan(&g, &traj, 2.0, 6.0).unwrap();
        let field = quadratic_field_map(
            &g,
            &QuadraticCoeffs { xx: 130.0, yy: 110.0, constant: -10.0, ..Default::default() },
        )
        .unwrap();
        let maps = synth_coil_maps(&g, 2, 8).unwrap();
        let img = crate::sim::shepp_logan(&g).unwrap().image;
        let exact = brute_force_forward(&img, &maps, &traj, Some(&field)).unwrap();
        let scale: f64 = exact.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let alphas = field.alphas_at(&traj.times);
        let mut prev = f64::MAX;
        for l in [1usize, 2, 4, 8] {
            let centers = cluster_centers(&alphas, l, 0).unwrap();
            let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0).unwrap();
            let op = TsSenseOp::new(maps.clone(), p.clone(), &ts, &field, None).unwrap();
            let fast = op.apply(&img);
            let err = fast
                .iter()
                .zip(exact.iter())
                .map(|(a, e)| (a - e).norm_sqr())
                .sum::<f64>()
                .sqrt()
                / scale;
            assert!(err <= prev * (1.0 + 1e-9), "L={l}: {err} vs {prev}");
            prev = err;
        }
    }

    #[test]
    fn ts_toeplitz_matches_direct_normal() {
        let g = grid2(24);
        let traj = vds_spiral(&g, 2, 1.5, 1.5, 90, 0.02).unwrap();
        let p = plan(&g, &traj, 2.0, 6.0).unwrap();
        let field = quadratic_field_map(
            &g,
            &QuadraticCoeffs { xx: 600.0, yy: 400.0, ..Default::default() },
        )
        .unwrap();
        let alphas = field.alphas_at(&traj.times);
        let centers = cluster_centers(&alphas, 3, 0).unwrap();
        let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0).unwrap();
        let maps = synth_coil_maps(&g, 2, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dcf: Vec<f64> = (0..traj.num_samples()).map(|_| rng.gen::<f64>()).collect();
        let slow = TsSenseOp::new(maps.clone(), p.clone(), &ts, &field, Some(dcf.clone())).unwrap();
        let fast = TsSenseOp::new(maps, p, &ts, &field, Some(dcf))
            .unwrap()
            .with_toeplitz()
            .unwrap();
        let x = random_img(&[24, 24], 11);
        let a = slow.adjoint_weighted(&slow.apply(&x));
        let b = fast.normal(&x);
        let num: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v).norm_sqr()).sum();
        let den: f64 = a.iter().map(|v| v.norm_sqr()).sum();
        assert!((num / den).sqrt() <= 1e-3, "rel {}", (num / den).sqrt());
    }

    #[test]
    fn uniform_b0_scalar_kernel_matches_analytic_phase() {
        // C=1, s=1, D=1, d1=0: the optimal kernel is exp(+j 2 pi f0 (t - t_l)).
        let f0 = 40.0;
        let n = 24;
        // Point-scatterer calibration: k-space magnitude stays O(1) across
        // the region, keeping the stochastic gradients well scaled.
        let cal = {
            let grid = grid2(n);
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let mut img = ArrayD::<Complex64>::zeros(IxDyn(&[n, n]));
            for _ in 0..15 {
                let i = rng.gen_range(4..n - 4);
                let j = rng.gen_range(4..n - 4);
                img[[i, j]] += Complex64::new(0.5 + rng.gen::<f64>(), 0.0);
            }
            let kdata = centered_fft(&img, &[0, 1]).insert_axis(Axis(0));
            Calibration::new(grid, vec![kdata], vec![0.0]).unwrap()
        };
        let g = grid2(n);
        let field = quadratic_field_map(&g, &QuadraticCoeffs { constant: f0, ..Default::default() })
            .unwrap();
        let t_max = 0.03;
        let m = 160;
        let entries: Vec<PlanEntry> = (0..m)
            .map(|i| PlanEntry {
                target: vec![0, 0],
                orientations: vec![0.0, 0.0],
                source_pos: vec![0.0],
                valid: vec![true],
                missing_frac: 0.0,
                time: t_max * i as f64 / (m - 1) as f64,
            })
            .collect();
        let plan = GriddingPlan {
            entries,
            grid: g,
            dim: 2,
            num_sources: 1,
            spacing: 0.5,
            w_max: crate::igrog::DEFAULT_W_MAX,
        };
        let times: Vec<f64> = plan.entries.iter().map(|e| e.time).collect();
        let alphas = field.alphas_at(&times);
        let centers = cluster_centers(&alphas, 3, 0).unwrap();
        let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0).unwrap();
        // Squared loss: the analytic optimum is checked to sub-percent level,
        // which the L1 subgradient's constant-step jitter cannot reach.
        let config = TrainConfig {
            lambda: 1e-6,
            lr: 1e-3,
            epochs: 3000,
            batch: 1024,
            hidden: vec![48, 48],
            loss: crate::mlp::Loss::L2,
            seed: 2,
        };
        let fnet =
            train_field_kernelnet(&cal, Some(&field), &plan, &ts, FieldFeatureMode::DeltaT, &config)
                .unwrap();
        // Query along the readout and compare with the analytic phase.
        let mut max_rel: f64 = 0.0;
        for i in (0..m).step_by(7) {
            let t = times[i];
            let l = ts.assignment[i];
            let dt = t - ts.centers[[l, 0]];
            let feat = vec![0.0, 0.0, 0.0, dt / fnet.net.extra_scale];
            let gk = fnet.net.query(&feat);
            let want = Complex64::from_polar(1.0, 2.0 * PI * f0 * dt);
            let rel = (gk[[0, 0]] - want).norm() / want.norm();
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel <= 1e-2, "max relative kernel error {max_rel}");
    }

    #[test]
    fn zero_field_correct_and_grid_matches_plain_gridding() {
        let n = 32;
        let g = grid2(n);
        let traj = {
            let coords = Array2::from_shape_fn((41, 2), |(i, a)| {
                if a == 0 {
                    -5.0 + 0.25 * i as f64
                } else {
                    0.3 + 0.11 * i as f64
                }
            });
            let times: Vec<f64> = (0..41).map(|i| i as f64 * 1e-4).collect();
            Trajectory::new(coords, times, vec![0; 41]).unwrap()
        };
        let data = random_img(&[2, 41], 3);
        let data2 = Array2::from_shape_fn((2, 41), |(c, i)| data[[c, i]]);
        let (up, traj_up) = crate::igrog::readout_interpolate(&data2, &traj, 4).unwrap();
        let plan = crate::igrog::build_gridding_plan(&traj_up, 4, &g, 3, 0.5).unwrap();

        // Plain random net and its field twin with a zeroed extra input.
        let fw = plan.feature_width();
        let plain = KernelNet {
            mlp: mlp_init(&[fw, 24, 2 * 3 * 2 * 2], 5).unwrap(),
            dim: 2,
            num_sources: 3,
            num_coils: 2,
            w_max: plan.w_max,
            extra_features: 0,
            extra_scale: 1.0,
            telemetry: vec![],
            telemetry_grad: vec![],
        };
        let mut field_mlp = mlp_init(&[fw + 1, 24, 2 * 3 * 2 * 2], 5).unwrap();
        // Copy weights, zero the extra input column.
        for (dst, src) in field_mlp.weights.iter_mut().zip(&plain.mlp.weights) {
            if dst.ncols() == src.ncols() + 1 {
                for i in 0..src.nrows() {
                    for j in 0..src.ncols() {
                        dst[[i, j]] = src[[i, j]];
                    }
                    dst[[i, src.ncols()]] = 0.0;
                }
            } else {
                dst.assign(src);
            }
        }
        for (dst, src) in field_mlp.biases.iter_mut().zip(&plain.mlp.biases) {
            dst.assign(src);
        }
        let fnet = FieldKernelNet {
            net: KernelNet {
                mlp: field_mlp,
                dim: 2,
                num_sources: 3,
                num_coils: 2,
                w_max: plan.w_max,
                extra_features: 1,
                extra_scale: 1.0,
                telemetry: vec![],
                telemetry_grad: vec![],
            },
            centers: Array2::zeros((1, 1)),
            mode: FieldFeatureMode::DeltaT,
            te0: 0.0,
        };
        let field = quadratic_field_map(&g, &QuadraticCoeffs::default()).unwrap();
        let times: Vec<f64> = plan.entries.iter().map(|e| e.time).collect();
        let alphas = field.alphas_at(&times);
        let ts = TimeSegmentation {
            centers: Array2::zeros((1, 1)),
            interpolators: Array2::from_elem((times.len(), 1), 1.0),
            mode: InterpMode::ZeroOrder,
            assignment: vec![0; times.len()],
        };
        let _ = alphas;
        let (corrected, segments) =
            correct_and_grid(&up, &plan, &fnet, &ts, &field, None).unwrap();
        let plain_out = crate::igrog::igrog_grid(&up, &plan, &plain, None).unwrap();
        assert!(segments.iter().all(|&s| s == 0));
        assert_eq!(corrected.coords, plain_out.coords);
        let scale: f64 = plain_out.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (a, b) in corrected.data.iter().zip(plain_out.data.iter()) {
            assert!((a - b).norm() / scale <= 1e-12);
        }
    }

    #[test]
    fn b0_estimation_from_echoes() {
        let n = 24;
        let g = grid2(n);
        let c = 2;
        let maps = synth_coil_maps(&g, c, 4).unwrap();
        let half = (n / 2) as f64;
        let img = ArrayD::from_shape_fn(IxDyn(&[n, n]), |idx| {
            let x = (idx[0] as f64 - half) / half;
            let y = (idx[1] as f64 - half) / half;
            Complex64::new((-2.0 * (x * x + y * y)).exp(), 0.0)
        });
        let field = quadratic_field_map(
            &g,
            &QuadraticCoeffs { constant: 25.0, xx: 300.0, ..Default::default() },
        )
        .unwrap();
        let te = [0.0, 2e-3];
        let kdata: Vec<ComplexArray> = te
            .iter()
            .map(|&t| {
                let mut all = ArrayD::zeros(IxDyn(&[c, n, n]));
                for ci in 0..c {
                    let mut coil = img.clone();
                    coil.zip_mut_with(&maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| {
                        *v *= s
                    });
                    coil.zip_mut_with(&field.basis[0], |v, &b| {
                        *v *= Complex64::from_polar(1.0, -2.0 * PI * b * t)
                    });
                    all.index_axis_mut(Axis(0), ci).assign(&centered_fft(&coil, &[0, 1]));
                }
                all
            })
            .collect();
        let cal = Calibration::new(g, kdata, te.to_vec()).unwrap();
        let est = estimate_b0_from_echoes(&cal).unwrap();
        // Compare inside the object support.
        let mut max_err: f64 = 0.0;
        for idx in 0..n * n {
            let (a, b) = (idx / n, idx % n);
            if img[[a, b]].re > 0.3 {
                max_err = max_err.max((est.basis[0][[a, b]] - field.basis[0][[a, b]]).abs());
            }
        }
        assert!(max_err <= 0.5, "max B0 error {max_err} Hz");
    }

    #[test]
    fn ts_roundtrip_serialization() {
        let g = grid2(16);
        let field = quadratic_field_map(&g, &QuadraticCoeffs { xx: 400.0, ..Default::default() }).unwrap();
        let alphas = uniform_alphas(24, 0.04);
        let centers = cluster_centers(&alphas, 3, 0).unwrap();
        let ts = build_interpolators(&alphas, &centers, &field, InterpMode::LeastSquares, 0).unwrap();
        let dir = std::env::temp_dir().join("igrog_ts_roundtrip");
        save_time_segmentation(&dir, &ts).unwrap();
        let back = load_time_segmentation(&dir).unwrap();
        assert_eq!(ts.centers, back.centers);
        assert_eq!(ts.interpolators, back.interpolators);
        assert_eq!(ts.assignment, back.assignment);
        assert_eq!(ts.mode, back.mode);
    }
}
