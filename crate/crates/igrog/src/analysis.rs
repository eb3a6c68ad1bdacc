//! Quantitative harness: error metrics, coil compression, pseudo-replica
//! g-factor maps, and the two simulation experiments (coil-count sweep and
//! time-segmentation sweep).

use crate::array::{CoilMaps, ComplexArray, Grid, Trajectory};
use crate::dcf::pipe_menon;
use crate::fieldcorr::{
    build_interpolators, cluster_centers, correct_and_grid, train_field_kernelnet,
    FieldFeatureMode, InterpMode, SenseGriddedSegmentedOp, TsSenseOp,
};
use crate::grog::{calibrate_axis_kernels, calibration_from_kspace, grog_grid, GriddedKspace};
use crate::igrog::{
    build_gridding_plan, igrog_grid_with_kernels, query_plan_kernels, readout_interpolate,
    train_kernelnet, TrainConfig,
};
use crate::nufft::plan;
use crate::recon::{cg_sense, SenseGriddedOp, SenseNufftOp};
use crate::sim::{
    add_noise, quadratic_field_map, shepp_logan, synth_coil_maps, vds_spiral, QuadraticCoeffs,
};
use crate::{Error, Result};
use faer::Mat;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rayon::prelude::*;

/// Normalized root-mean-square error over a mask (default: the reference
/// support, |ref| > 1e-12 max|ref|).
pub fn nrmse(x: &ComplexArray, reference: &ComplexArray, mask: Option<&ArrayD<bool>>) -> f64 {
    assert_eq!(x.shape(), reference.shape(), "nrmse shapes");
    let default_mask;
    let mask = match mask {
        Some(m) => m,
        None => {
            let peak = reference.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
            default_mask = reference.mapv(|v| v.norm() > 1e-12 * peak);
            &default_mask
        }
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for ((xv, rv), &m) in x.iter().zip(reference.iter()).zip(mask.iter()) {
        if m {
            num += (xv - rv).norm_sqr();
            den += rv.norm_sqr();
        }
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

/// SVD-based coil compression: project data and maps onto the top
/// `c_virtual` left singular vectors of the data matrix. Returns the
/// compressed data, compressed maps, and the `c_virtual x C` projection so
/// that other arrays (calibration) can be compressed consistently.
pub fn coil_compress(
    kdata: &Array2<Complex64>,
    maps: &CoilMaps,
    c_virtual: usize,
) -> Result<(Array2<Complex64>, CoilMaps, Array2<Complex64>)> {
    let c = kdata.nrows();
    if c_virtual == 0 || c_virtual > c {
        return Err(Error::InvalidArgument(format!(
            "c_virtual must lie in [1, {c}], got {c_virtual}"
        )));
    }
    if maps.num_coils() != c {
        return Err(Error::ShapeMismatch("maps coils vs data coils".into()));
    }
    let m = kdata.ncols();
    let mat = Mat::<Complex64>::from_fn(c, m, |i, j| kdata[[i, j]]);
    let svd = mat
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("svd failed: {e:?}")))?;
    let u = svd.U();
    // projection rows are conjugated left singular vectors
    let proj = Array2::from_shape_fn((c_virtual, c), |(v, ci)| u[(ci, v)].conj());
    let data_out = apply_compression(&proj, kdata);
    let maps_out = compress_maps(&proj, maps)?;
    Ok((data_out, maps_out, proj))
}

/// Apply a compression matrix to C x M data.
pub fn apply_compression(proj: &Array2<Complex64>, data: &Array2<Complex64>) -> Array2<Complex64> {
    let cv = proj.nrows();
    let c = proj.ncols();
    let m = data.ncols();
    assert_eq!(data.nrows(), c);
    let mut out = Array2::zeros((cv, m));
    for v in 0..cv {
        for j in 0..m {
            let mut acc = Complex64::default();
            for ci in 0..c {
                acc += proj[[v, ci]] * data[[ci, j]];
            }
            out[[v, j]] = acc;
        }
    }
    out
}

/// Apply a compression matrix voxel-wise to coil maps.
pub fn compress_maps(proj: &Array2<Complex64>, maps: &CoilMaps) -> Result<CoilMaps> {
    let cv = proj.nrows();
    let c = proj.ncols();
    if maps.num_coils() != c {
        return Err(Error::ShapeMismatch("projection vs maps".into()));
    }
    let spatial = maps.spatial_shape().to_vec();
    let mut shape = vec![cv];
    shape.extend(&spatial);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let total: usize = spatial.iter().product();
    let flat_in: Vec<Vec<Complex64>> = (0..c)
        .map(|ci| maps.maps.index_axis(Axis(0), ci).iter().copied().collect())
        .collect();
    for v in 0..cv {
        let mut coil = out.index_axis_mut(Axis(0), v);
        let flat = coil.as_slice_mut().expect("standard layout");
        for t in 0..total {
            let mut acc = Complex64::default();
            for ci in 0..c {
                acc += proj[[v, ci]] * flat_in[ci][t];
            }
            flat[t] = acc;
        }
    }
    CoilMaps::new(out)
}

/// Apply a compression matrix to multi-coil k-space `[C, N..]`.
pub fn compress_kspace(proj: &Array2<Complex64>, kspace: &ComplexArray) -> ComplexArray {
    let cv = proj.nrows();
    let c = proj.ncols();
    assert_eq!(kspace.shape()[0], c);
    let spatial = &kspace.shape()[1..];
    let mut shape = vec![cv];
    shape.extend(spatial);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let total: usize = spatial.iter().product();
    let flat_in: Vec<Vec<Complex64>> = (0..c)
        .map(|ci| kspace.index_axis(Axis(0), ci).iter().copied().collect())
        .collect();
    for v in 0..cv {
        let mut coil = out.index_axis_mut(Axis(0), v);
        let flat = coil.as_slice_mut().expect("standard layout");
        for t in 0..total {
            let mut acc = Complex64::default();
            for ci in 0..c {
                acc += proj[[v, ci]] * flat_in[ci][t];
            }
            flat[t] = acc;
        }
    }
    out
}

/// Pseudo-replica g-factor output.
#[derive(Debug, Clone)]
pub struct GfactorMaps {
    pub gmap: ArrayD<f64>,
    pub bias: ArrayD<f64>,
    /// Mean g over the evaluation mask.
    pub mean_g: f64,
    /// Set when sigma = 0 made the statistic undefined.
    pub degenerate: bool,
}

/// Monte-Carlo g-factor: per-voxel replica std of the accelerated
/// reconstruction over the std of an R=1 fully sampled reference with the
/// same noise level, normalized by sqrt(R). Per-replica seeds are
/// `seed + i` (accelerated) and `seed + n_replicas + i` (reference), so the
/// result is schedule-independent.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_replica_gfactor(
    recon: &(dyn Fn(&Array2<Complex64>) -> ComplexArray + Sync),
    clean_data: &Array2<Complex64>,
    reference_recon: &(dyn Fn(&Array2<Complex64>) -> ComplexArray + Sync),
    reference_clean: &Array2<Complex64>,
    accel: f64,
    sigma: f64,
    n_replicas: usize,
    seed: u64,
    mask: Option<&ArrayD<bool>>,
) -> Result<GfactorMaps> {
    if n_replicas < 10 {
        return Err(Error::InvalidArgument("need at least 10 replicas".into()));
    }
    let clean_recon = recon(clean_data);
    let shape = clean_recon.raw_dim();
    if sigma == 0.0 {
        return Ok(GfactorMaps {
            gmap: ArrayD::zeros(shape.clone()),
            bias: ArrayD::zeros(shape),
            mean_g: 0.0,
            degenerate: true,
        });
    }
    let stats = |recon_fn: &(dyn Fn(&Array2<Complex64>) -> ComplexArray + Sync),
                 data: &Array2<Complex64>,
                 seed0: u64|
     -> (ComplexArray, ArrayD<f64>) {
        let recons: Vec<ComplexArray> = (0..n_replicas)
            .into_par_iter()
            .map(|i| {
                let noisy = add_noise(data, sigma, seed0 + i as u64);
                recon_fn(&noisy)
            })
            .collect();
        let mut mean: ComplexArray = ArrayD::zeros(recons[0].raw_dim());
        for r in &recons {
            mean += r;
        }
        mean.mapv_inplace(|v| v / n_replicas as f64);
        let mut var = ArrayD::<f64>::zeros(recons[0].raw_dim());
        for r in &recons {
            ndarray::Zip::from(&mut var).and(r).and(&mean).for_each(|v, &x, &m| {
                *v += (x - m).norm_sqr();
            });
        }
        var.mapv_inplace(|v| v / (n_replicas - 1) as f64);
        (mean, var.mapv(f64::sqrt))
    };
    let (mean_acc, std_acc) = stats(recon, clean_data, seed);
    let (_, std_ref) = stats(reference_recon, reference_clean, seed + n_replicas as u64);

    let default_mask;
    let mask = match mask {
        Some(m) => m,
        None => {
            let peak = std_ref.iter().cloned().fold(0.0f64, f64::max);
            default_mask = std_ref.mapv(|v| v > 0.05 * peak);
            &default_mask
        }
    };
    let sqrt_r = accel.sqrt();
    let mut gmap = ArrayD::zeros(std_acc.raw_dim());
    let mut sum = 0.0;
    let mut count = 0usize;
    ndarray::Zip::from(&mut gmap)
        .and(&std_acc)
        .and(&std_ref)
        .and(mask)
        .for_each(|g, &sa, &sr, &m| {
            if m && sr > 0.0 {
                *g = sa / (sr * sqrt_r);
                sum += *g;
                count += 1;
            }
        });
    let mut bias = ArrayD::zeros(std_acc.raw_dim());
    ndarray::Zip::from(&mut bias).and(&mean_acc).and(&clean_recon).for_each(|b, &m, &c| {
        *b = (m - c).norm();
    });
    Ok(GfactorMaps {
        gmap,
        bias,
        mean_g: if count > 0 { sum / count as f64 } else { f64::NAN },
        degenerate: false,
    })
}

/// Shared simulation pieces of the figure-analog experiments.
pub struct SimSetup {
    pub grid: Grid,
    pub phantom: ComplexArray,
    pub maps: CoilMaps,
    pub traj: Trajectory,
    pub data: Array2<Complex64>,
    pub cal: crate::array::Calibration,
    pub full_kspace: ComplexArray,
}

/// Build phantom + coils + spiral and synthesize noiseless data with an
/// oracle-grade NUFFT (alpha = 2, W = 6).
#[allow(clippy::too_many_arguments)]
pub fn build_sim(
    n: usize,
    coils: usize,
    coil_seed: u64,
    shots: usize,
    accel: f64,
    density_power: f64,
    samples_per_shot: usize,
    duration: f64,
    cal_extent: usize,
) -> Result<SimSetup> {
    let grid = Grid::new(2, n, 1.0)?;
    let phantom = shepp_logan(&grid)?.image;
    let maps = synth_coil_maps(&grid, coils, coil_seed)?;
    let traj = vds_spiral(&grid, shots, accel, density_power, samples_per_shot, duration)?;
    let p = plan(&grid, &traj, 2.0, 6.0)?.with_precompute();
    let mut coil_imgs_shape = vec![coils];
    coil_imgs_shape.extend(grid.shape());
    let mut coil_imgs = ArrayD::zeros(IxDyn(&coil_imgs_shape));
    for ci in 0..coils {
        let mut img = phantom.clone();
        img.zip_mut_with(&maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
        coil_imgs.index_axis_mut(Axis(0), ci).assign(&img);
    }
    let data = p.forward(&coil_imgs)?;
    let full_kspace = crate::fft::centered_fft(&coil_imgs, &[1, 2]);
    let cal = calibration_from_kspace(&full_kspace, &grid, cal_extent)?;
    Ok(SimSetup { grid, phantom, maps, traj, data, cal, full_kspace })
}

/// Density compensation for a gridded (integer) trajectory.
pub fn gridded_dcf(grid: &Grid, coords: &Array2<i64>, iters: usize) -> Result<Vec<f64>> {
    let m = coords.nrows();
    let coords_f = Array2::from_shape_fn((m, coords.ncols()), |(i, a)| coords[[i, a]] as f64);
    let times: Vec<f64> = (0..m).map(|i| i as f64).collect();
    let traj = Trajectory::new(coords_f, times, (0..m).collect())?;
    let p = plan(grid, &traj, 1.5, 4.0)?;
    Ok(pipe_menon(&p, iters)?.weights)
}

/// CG-SENSE on a gridded data set.
pub fn recon_gridded(
    gridded: &GriddedKspace,
    maps: &CoilMaps,
    cg_iters: usize,
    dcf_iters: usize,
) -> Result<ComplexArray> {
    let dcf = gridded_dcf(&gridded.grid, &gridded.coords, dcf_iters)?;
    let op = SenseGriddedOp::new(maps.clone(), gridded.grid, gridded.coords.clone(), Some(dcf))?;
    let (img, _) = cg_sense(&op, &gridded.data, cg_iters, 1e-8, false)?;
    Ok(img)
}

/// Coil-sweep experiment config (figure-analog defaults at desk scale).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CoilSweepConfig {
    pub n: usize,
    pub base_coils: usize,
    pub coil_seed: u64,
    pub shots: usize,
    pub accel: f64,
    pub density_power: f64,
    pub samples_per_shot: usize,
    pub duration: f64,
    pub cal_extent: usize,
    pub c_virtual: Vec<usize>,
    pub grog_lambdas: Vec<f64>,
    pub igrog_train: TrainConfig,
    pub sources: usize,
    pub spacing: f64,
    pub upsample: usize,
    pub cg_iters: usize,
    pub dcf_iters: usize,
}

impl Default for CoilSweepConfig {
    fn default() -> Self {
        CoilSweepConfig {
            n: 128,
            base_coils: 24,
            coil_seed: 7,
            shots: 16,
            accel: 2.0,
            density_power: 1.5,
            samples_per_shot: 2400,
            duration: 5e-3,
            cal_extent: 32,
            c_virtual: vec![5, 8, 12, 19],
            grog_lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1],
            igrog_train: TrainConfig {
                epochs: 1200,
                batch: 256,
                hidden: vec![128, 128, 128],
                ..Default::default()
            },
            sources: 3,
            spacing: 0.5,
            upsample: 4,
            cg_iters: 15,
            dcf_iters: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoilSweepRow {
    pub c_virtual: usize,
    pub nrmse_grog: f64,
    pub nrmse_igrog: f64,
    pub grog_lambda: f64,
}

pub fn coil_sweep_csv(rows: &[CoilSweepRow]) -> String {
    let mut s = String::from("c_virtual,nrmse_grog,nrmse_igrog,grog_lambda\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.c_virtual, r.nrmse_grog, r.nrmse_igrog, r.grog_lambda
        ));
    }
    s
}

/// Coil-count sweep: GROG and implicit-kernel gridding reconstructions
/// against the NUFFT reference for each virtual coil count.
pub fn experiment_coil_sweep(cfg: &CoilSweepConfig) -> Result<Vec<CoilSweepRow>> {
    let sim = build_sim(
        cfg.n,
        cfg.base_coils,
        cfg.coil_seed,
        cfg.shots,
        cfg.accel,
        cfg.density_power,
        cfg.samples_per_shot,
        cfg.duration,
        cfg.cal_extent,
    )?;
    let recon_plan = plan(&sim.grid, &sim.traj, 1.5, 6.0)?.with_precompute();
    let dcf = pipe_menon(&recon_plan, cfg.dcf_iters)?.weights;

    let mut rows = Vec::new();
    for &cv in &cfg.c_virtual {
        let (data_cv, maps_cv, proj) = coil_compress(&sim.data, &sim.maps, cv)?;
        let cal_k = compress_kspace(&proj, &sim.cal.kdata[0]);
        let cal = crate::array::Calibration::new(sim.cal.grid, vec![cal_k], vec![0.0])?;

        // NUFFT reference.
        let op = SenseNufftOp::new(maps_cv.clone(), recon_plan.clone(), Some(dcf.clone()))?;
        let (reference, _) = cg_sense(&op, &data_cv, cfg.cg_iters, 1e-8, false)?;

        // GROG over the Tikhonov sweep, best NRMSE kept.
        let mut best: Option<(f64, f64)> = None;
        for &lam in &cfg.grog_lambdas {
            let kernels = calibrate_axis_kernels(&cal, lam)?;
            let gridded = grog_grid(&data_cv, &sim.traj.coords, &sim.grid, &kernels, Some(&dcf))?;
            let img = recon_gridded(&gridded, &maps_cv, cfg.cg_iters, cfg.dcf_iters)?;
            let e = nrmse(&img, &reference, None);
            if best.map(|(b, _)| e < b).unwrap_or(true) {
                best = Some((e, lam));
            }
        }
        let (nrmse_grog, grog_lambda) = best.unwrap();

        // Implicit kernels.
        let (data_up, traj_up) = readout_interpolate(&data_cv, &sim.traj, cfg.upsample)?;
        let gplan = build_gridding_plan(&traj_up, cfg.upsample, &sim.grid, cfg.sources, cfg.spacing)?;
        let net = train_kernelnet(&cal, &gplan, &cfg.igrog_train)?;
        let kernels = query_plan_kernels(&net, &gplan)?;
        let gridded = igrog_grid_with_kernels(&data_up, &gplan, &kernels, Some(&dcf))?;
        let img = recon_gridded(&gridded, &maps_cv, cfg.cg_iters, cfg.dcf_iters)?;
        let nrmse_igrog = nrmse(&img, &reference, None);

        rows.push(CoilSweepRow { c_virtual: cv, nrmse_grog, nrmse_igrog, grog_lambda });
    }
    Ok(rows)
}

/// G-factor experiment config.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GfactorConfig {
    pub n: usize,
    pub coils: usize,
    pub coil_seed: u64,
    pub shots: usize,
    pub accel: f64,
    pub density_power: f64,
    pub samples_per_shot: usize,
    pub duration: f64,
    pub cal_extent: usize,
    pub grog_lambda: f64,
    pub igrog_train: TrainConfig,
    pub sources: usize,
    pub spacing: f64,
    pub upsample: usize,
    pub cg_iters: usize,
    pub dcf_iters: usize,
    pub sigma_rel: f64,
    pub n_replicas: usize,
    pub seed: u64,
}

impl Default for GfactorConfig {
    fn default() -> Self {
        GfactorConfig {
            n: 128,
            coils: 12,
            coil_seed: 7,
            shots: 16,
            accel: 2.0,
            density_power: 1.5,
            samples_per_shot: 2400,
            duration: 5e-3,
            cal_extent: 32,
            grog_lambda: 1e-3,
            igrog_train: TrainConfig {
                epochs: 1200,
                batch: 256,
                hidden: vec![128, 128, 128],
                ..Default::default()
            },
            sources: 3,
            spacing: 0.5,
            upsample: 4,
            cg_iters: 15,
            dcf_iters: 30,
            sigma_rel: 0.02,
            n_replicas: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GfactorExperiment {
    pub igrog: GfactorMaps,
    pub grog: GfactorMaps,
}

/// Paired pseudo-replica g-factor of the two gridding estimators with shared
/// noise, kernels trained once on the noiseless calibration.
pub fn experiment_gfactor(cfg: &GfactorConfig) -> Result<GfactorExperiment> {
    let sim = build_sim(
        cfg.n,
        cfg.coils,
        cfg.coil_seed,
        cfg.shots,
        cfg.accel,
        cfg.density_power,
        cfg.samples_per_shot,
        cfg.duration,
        cfg.cal_extent,
    )?;
    let recon_plan = plan(&sim.grid, &sim.traj, 1.5, 6.0)?.with_precompute();
    let dcf = pipe_menon(&recon_plan, cfg.dcf_iters)?.weights;
    let rms = (sim.data.iter().map(|v| v.norm_sqr()).sum::<f64>() / sim.data.len() as f64).sqrt();
    let sigma = cfg.sigma_rel * rms;

    // Fixed kernels from the noiseless calibration.
    let grog_kernels = calibrate_axis_kernels(&sim.cal, cfg.grog_lambda)?;
    let (_, traj_up) = readout_interpolate(&sim.data, &sim.traj, cfg.upsample)?;
    let gplan = build_gridding_plan(&traj_up, cfg.upsample, &sim.grid, cfg.sources, cfg.spacing)?;
    let net = train_kernelnet(&sim.cal, &gplan, &cfg.igrog_train)?;
    let inet_kernels = query_plan_kernels(&net, &gplan)?;

    // Shared gridded geometry (from the clean data) so each replica reuses
    // the DCF and operator; only values change.
    let grog_clean = grog_grid(&sim.data, &sim.traj.coords, &sim.grid, &grog_kernels, Some(&dcf))?;
    let grog_dcf = gridded_dcf(&sim.grid, &grog_clean.coords, cfg.dcf_iters)?;
    let grog_op = SenseGriddedOp::new(
        sim.maps.clone(),
        sim.grid,
        grog_clean.coords.clone(),
        Some(grog_dcf),
    )?;
    let (data_up_clean, _) = readout_interpolate(&sim.data, &sim.traj, cfg.upsample)?;
    let ig_clean = igrog_grid_with_kernels(&data_up_clean, &gplan, &inet_kernels, Some(&dcf))?;
    let ig_dcf = gridded_dcf(&sim.grid, &ig_clean.coords, cfg.dcf_iters)?;
    let ig_op = SenseGriddedOp::new(
        sim.maps.clone(),
        sim.grid,
        ig_clean.coords.clone(),
        Some(ig_dcf),
    )?;

    // Reference: fully sampled Cartesian, unit weights.
    let n = cfg.n;
    let mut full_coords = Array2::zeros((n * n, 2));
    for (i, (a, b)) in (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).enumerate() {
        full_coords[[i, 0]] = a as i64 - (n / 2) as i64;
        full_coords[[i, 1]] = b as i64 - (n / 2) as i64;
    }
    let ref_op = SenseGriddedOp::new(sim.maps.clone(), sim.grid, full_coords, None)?;
    let ref_clean = {
        let mut d = Array2::zeros((cfg.coils, n * n));
        for ci in 0..cfg.coils {
            let flat: Vec<Complex64> =
                sim.full_kspace.index_axis(Axis(0), ci).iter().copied().collect();
            for (j, v) in flat.into_iter().enumerate() {
                d[[ci, j]] = v;
            }
        }
        d
    };
    // Shepp-Logan support for the mean-g statistic.
    let support = sim.phantom.mapv(|v| v.norm() > 1e-6);

    let grog_recon = |noisy: &Array2<Complex64>| -> ComplexArray {
        let gridded = grog_grid(noisy, &sim.traj.coords, &sim.grid, &grog_kernels, Some(&dcf))
            .expect("geometry fixed");
        cg_sense(&grog_op, &gridded.data, cfg.cg_iters, 1e-8, false).expect("recon").0
    };
    let ig_recon = |noisy: &Array2<Complex64>| -> ComplexArray {
        let (up, _) = readout_interpolate(noisy, &sim.traj, cfg.upsample).expect("fixed traj");
        let gridded =
            igrog_grid_with_kernels(&up, &gplan, &inet_kernels, Some(&dcf)).expect("geometry fixed");
        cg_sense(&ig_op, &gridded.data, cfg.cg_iters, 1e-8, false).expect("recon").0
    };
    let ref_recon = |noisy: &Array2<Complex64>| -> ComplexArray {
        cg_sense(&ref_op, noisy, cfg.cg_iters, 1e-8, false).expect("recon").0
    };

    let igrog_maps = pseudo_replica_gfactor(
        &ig_recon,
        &sim.data,
        &ref_recon,
        &ref_clean,
        cfg.accel,
        sigma,
        cfg.n_replicas,
        cfg.seed,
        Some(&support),
    )?;
    let grog_maps = pseudo_replica_gfactor(
        &grog_recon,
        &sim.data,
        &ref_recon,
        &ref_clean,
        cfg.accel,
        sigma,
        cfg.n_replicas,
        cfg.seed,
        Some(&support),
    )?;
    Ok(GfactorExperiment { igrog: igrog_maps, grog: grog_maps })
}

/// Time-segmentation sweep config.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TsegSweepConfig {
    pub n: usize,
    pub coils: usize,
    pub coil_seed: u64,
    pub shots: usize,
    pub samples_per_shot: usize,
    pub duration: f64,
    pub cal_extent: usize,
    pub field: QuadraticCoeffs,
    pub l_uncorrected: Vec<usize>,
    pub l_corrected: Vec<usize>,
    pub igrog_train: TrainConfig,
    pub sources: usize,
    pub spacing: f64,
    pub upsample: usize,
    pub cg_iters: usize,
    pub dcf_iters: usize,
}

impl Default for TsegSweepConfig {
    fn default() -> Self {
        TsegSweepConfig {
            n: 96,
            coils: 10,
            coil_seed: 7,
            shots: 4,
            samples_per_shot: 10000,
            duration: 0.060,
            cal_extent: 32,
            field: QuadraticCoeffs { xx: 110.0, yy: 90.0, x: 15.0, constant: -12.0, ..Default::default() },
            l_uncorrected: (1..=17).collect(),
            l_corrected: vec![2, 4],
            igrog_train: TrainConfig {
                epochs: 1200,
                batch: 256,
                hidden: vec![96, 96, 96],
                ..Default::default()
            },
            sources: 3,
            spacing: 0.5,
            upsample: 4,
            cg_iters: 15,
            dcf_iters: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsegRow {
    pub l: usize,
    pub corrected: bool,
    pub nrmse: f64,
}

pub fn tseg_csv(rows: &[TsegRow]) -> String {
    let mut s = String::from("l,corrected,nrmse\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.l, r.corrected, r.nrmse));
    }
    s
}

/// Time-segmentation sweep: NRMSE of the time-segmented NUFFT pipeline and
/// of the field-corrected gridded pipeline against a field-free reference
/// reconstruction, as a function of the segment count.
pub fn experiment_tseg_sweep(cfg: &TsegSweepConfig) -> Result<Vec<TsegRow>> {
    let grid = Grid::new(2, cfg.n, 1.0)?;
    let phantom = shepp_logan(&grid)?.image;
    let maps = synth_coil_maps(&grid, cfg.coils, cfg.coil_seed)?;
    let traj = vds_spiral(&grid, cfg.shots, 1.0, 1.5, cfg.samples_per_shot, cfg.duration)?;
    let field = quadratic_field_map(&grid, &cfg.field)?;

    // Exact field-corrupted data from the brute-force oracle.
    let data = crate::sim::brute_force_forward(&phantom, &maps, &traj, Some(&field))?;
    // Field-free data for the reference reconstruction.
    let recon_plan = plan(&grid, &traj, 1.5, 6.0)?.with_precompute();
    let dcf = pipe_menon(&recon_plan, cfg.dcf_iters)?.weights;
    let mut coil_shape = vec![cfg.coils];
    coil_shape.extend(grid.shape());
    let mut coil_imgs = ArrayD::zeros(IxDyn(&coil_shape));
    for ci in 0..cfg.coils {
        let mut img = phantom.clone();
        img.zip_mut_with(&maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
        coil_imgs.index_axis_mut(Axis(0), ci).assign(&img);
    }
    let clean_data = plan(&grid, &traj, 2.0, 6.0)?.with_precompute().forward(&coil_imgs)?;
    let ref_op = SenseNufftOp::new(maps.clone(), recon_plan.clone(), Some(dcf.clone()))?;
    let (reference, _) = cg_sense(&ref_op, &clean_data, cfg.cg_iters, 1e-8, false)?;

    // Calibration (field-free center k-space) for kernel training.
    let full_kspace = crate::fft::centered_fft(&coil_imgs, &[1, 2]);
    let cal = calibration_from_kspace(&full_kspace, &grid, cfg.cal_extent)?;

    let alphas = field.alphas_at(&traj.times);
    let mut rows = Vec::new();

    for &l in &cfg.l_uncorrected {
        let centers = cluster_centers(&alphas, l, 0)?;
        let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0)?;
        let op = TsSenseOp::new(maps.clone(), recon_plan.clone(), &ts, &field, Some(dcf.clone()))?;
        let (img, _) = cg_sense(&op, &data, cfg.cg_iters, 1e-8, false)?;
        rows.push(TsegRow { l, corrected: false, nrmse: nrmse(&img, &reference, None) });
    }

    let (data_up, traj_up) = readout_interpolate(&data, &traj, cfg.upsample)?;
    let gplan = build_gridding_plan(&traj_up, cfg.upsample, &grid, cfg.sources, cfg.spacing)?;
    for &l in &cfg.l_corrected {
        let centers = cluster_centers(&alphas, l, 0)?;
        let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0)?;
        let fnet = train_field_kernelnet(
            &cal,
            Some(&field),
            &gplan,
            &ts,
            FieldFeatureMode::DeltaT,
            &cfg.igrog_train,
        )?;
        let (gridded, segments) = correct_and_grid(&data_up, &gplan, &fnet, &ts, &field, Some(&dcf))?;
        let gdcf = gridded_dcf(&grid, &gridded.coords, cfg.dcf_iters)?;
        let op = SenseGriddedSegmentedOp::new(
            maps.clone(),
            grid,
            gridded.coords.clone(),
            segments,
            &field,
            &ts.centers,
            Some(gdcf),
        )?;
        let (img, _) = cg_sense(&op, &gridded.data, cfg.cg_iters, 1e-8, false)?;
        rows.push(TsegRow { l, corrected: true, nrmse: nrmse(&img, &reference, None) });
    }
    Ok(rows)
}
