//! The ten CLI commands. Each one is a pure function of (config, seed,
//! input files): outputs land under the run directory together with a
//! manifest; wall-clock numbers go to a separate timings file.

use crate::imgout;
use crate::runctx::RunContext;
use igrog::analysis::{
    coil_sweep_csv, experiment_coil_sweep, experiment_gfactor, experiment_tseg_sweep,
    gridded_dcf, tseg_csv, CoilSweepConfig, GfactorConfig, TsegSweepConfig,
};
use igrog::array::{Calibration, CoilMaps, Grid, Trajectory};
use igrog::dcf::pipe_menon;
use igrog::fieldcorr::{
    build_interpolators, cluster_centers, correct_and_grid, load_time_segmentation,
    save_time_segmentation, train_field_kernelnet, FieldFeatureMode, FieldKernelNet, InterpMode,
    SenseGriddedSegmentedOp, TsSenseOp,
};
use igrog::grog::{calibrate_axis_kernels, grog_grid, load_axis_kernels, save_axis_kernels};
use igrog::igrog::{
    build_gridding_plan, igrog_grid, load_kernelnet, readout_interpolate, save_kernelnet,
    train_kernelnet, TrainConfig,
};
use igrog::io::{
    load_calibration, load_trajectory, read_array, read_real_vec, save_calibration,
    save_trajectory, write_array, write_real_vec, Precision,
};
use igrog::nufft::{plan, toeplitz_psf};
use igrog::recon::{cg_sense, fista_l1, max_eigen, LinearOp, SenseGriddedOp, SenseNufftOp};
use igrog::sim::{
    add_noise, brute_force_forward, quadratic_field_map, shepp_logan, synth_coil_maps,
    vds_spiral, QuadraticCoeffs,
};
use igrog::{Error, Result};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use serde::Deserialize;
use std::time::Instant;

fn coil_images(phantom: &igrog::ComplexArray, maps: &CoilMaps) -> igrog::ComplexArray {
    let c = maps.num_coils();
    let mut shape = vec![c];
    shape.extend(phantom.shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for ci in 0..c {
        let mut img = phantom.clone();
        img.zip_mut_with(&maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
        out.index_axis_mut(Axis(0), ci).assign(&img);
    }
    out
}

fn data_to_matrix(arr: &igrog::ComplexArray) -> Result<Array2<Complex64>> {
    if arr.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected a C x M array, got shape {:?}",
            arr.shape()
        )));
    }
    Ok(Array2::from_shape_fn((arr.shape()[0], arr.shape()[1]), |(i, j)| arr[[i, j]]))
}

fn matrix_to_array(m: &Array2<Complex64>) -> igrog::ComplexArray {
    ArrayD::from_shape_fn(IxDyn(&[m.nrows(), m.ncols()]), |idx| m[[idx[0], idx[1]]])
}

// ---------------------------------------------------------------- simulate

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateCfg {
    n: usize,
    coils: usize,
    #[serde(default = "default_seed")]
    seed: u64,
    shots: usize,
    #[serde(default = "default_accel")]
    accel: f64,
    #[serde(default = "default_density")]
    density_power: f64,
    samples_per_shot: usize,
    duration: f64,
    cal_extent: usize,
    #[serde(default)]
    field: Option<QuadraticCoeffs>,
    #[serde(default)]
    echo_times: Option<Vec<f64>>,
    #[serde(default)]
    noise_sigma: f64,
}

fn default_seed() -> u64 {
    0
}
fn default_accel() -> f64 {
    1.0
}
fn default_density() -> f64 {
    1.5
}

pub fn simulate(ctx: &RunContext) -> Result<()> {
    let cfg: SimulateCfg = ctx.config()?;
    let seed = ctx.seed_override.unwrap_or(cfg.seed);
    let grid = Grid::new(2, cfg.n, 1.0)?;
    let phantom = shepp_logan(&grid)?.image;
    let maps = synth_coil_maps(&grid, cfg.coils, seed)?;
    let traj = vds_spiral(
        &grid,
        cfg.shots,
        cfg.accel,
        cfg.density_power,
        cfg.samples_per_shot,
        cfg.duration,
    )?;
    let field = cfg.field.as_ref().map(|c| quadratic_field_map(&grid, c)).transpose()?;

    let imgs = coil_images(&phantom, &maps);
    let data = ctx.time("forward", || {
        if let Some(f) = &field {
            brute_force_forward(&phantom, &maps, &traj, Some(f))
        } else {
            plan(&grid, &traj, 2.0, 6.0)?.with_precompute().forward(&imgs)
        }
    })?;
    let data = if cfg.noise_sigma > 0.0 {
        add_noise(&data, cfg.noise_sigma, seed.wrapping_add(1))
    } else {
        data
    };

    let full_kspace = igrog::fft::centered_fft(&imgs, &[1, 2]);
    let cal = match (&field, &cfg.echo_times) {
        (Some(f), Some(te)) => {
            // Multi-echo calibration: phase accrual applied at each echo time.
            let mut kdata = Vec::new();
            for &t in te {
                let alphas = f.alphas_at(&[t]);
                let row: Vec<f64> = (0..alphas.ncols()).map(|p| alphas[[0, p]]).collect();
                let ph = f.phase_map(&row);
                let mut accrued = imgs.clone();
                for ci in 0..cfg.coils {
                    let mut coil = accrued.index_axis_mut(Axis(0), ci);
                    ndarray::Zip::from(&mut coil).and(&ph).for_each(|v, &p| {
                        *v *= Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * p)
                    });
                }
                let k = igrog::fft::centered_fft(&accrued, &[1, 2]);
                kdata.push(igrog::fft::crop_center(
                    &k,
                    &[cfg.coils, cfg.cal_extent, cfg.cal_extent],
                ));
            }
            Calibration::new(
                Grid { dim: 2, extent: cfg.cal_extent, fov: grid.fov },
                kdata,
                te.clone(),
            )?
        }
        _ => igrog::grog::calibration_from_kspace(&full_kspace, &grid, cfg.cal_extent)?,
    };

    write_array(ctx.out.join("phantom.carr"), &phantom, Precision::C128)?;
    write_array(ctx.out.join("maps.carr"), &maps.maps, Precision::C128)?;
    write_array(ctx.out.join("data.carr"), &matrix_to_array(&data), Precision::C128)?;
    write_array(ctx.out.join("full_kspace.carr"), &full_kspace, Precision::C128)?;
    save_trajectory(&ctx.out.join("traj"), &traj)?;
    save_calibration(&ctx.out.join("cal"), &cal)?;
    if let Some(f) = &field {
        write_array(
            ctx.out.join("field.carr"),
            &f.basis[0].mapv(|v| Complex64::new(v, 0.0)),
            Precision::C128,
        )?;
    }
    imgout::write_png(&ctx.out.join("phantom.png"), &phantom, ctx.window, ctx.level)?;
    ctx.finish()
}

// --------------------------------------------------------------------- dcf

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DcfCfg {
    traj: String,
    n: usize,
    #[serde(default = "default_dcf_alpha")]
    alpha: f64,
    #[serde(default = "default_dcf_width")]
    width: f64,
    #[serde(default = "default_dcf_iters")]
    iters: usize,
}

fn default_dcf_alpha() -> f64 {
    1.5
}
fn default_dcf_width() -> f64 {
    4.0
}
fn default_dcf_iters() -> usize {
    30
}

pub fn dcf(ctx: &RunContext) -> Result<()> {
    let cfg: DcfCfg = ctx.config()?;
    let traj = load_trajectory(&ctx.input(&cfg.traj, "traj")?)?;
    let grid = Grid::new(2, cfg.n, 1.0)?;
    let p = plan(&grid, &traj, cfg.alpha, cfg.width)?.with_precompute();
    let weights = ctx.time("pipe_menon", || pipe_menon(&p, cfg.iters))?;
    write_real_vec(ctx.out.join("weights.carr"), &weights.weights)?;
    ctx.finish()
}

// ----------------------------------------------------------- calibrate-grog

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrateGrogCfg {
    cal: String,
    #[serde(default = "default_lambda")]
    lambda: f64,
}

fn default_lambda() -> f64 {
    1e-3
}

pub fn calibrate_grog(ctx: &RunContext) -> Result<()> {
    let cfg: CalibrateGrogCfg = ctx.config()?;
    let cal = load_calibration(&ctx.input(&cfg.cal, "cal")?)?;
    let kernels = ctx.time("calibrate", || calibrate_axis_kernels(&cal, cfg.lambda))?;
    for (a, k) in kernels.kernels.iter().enumerate() {
        if k.near_branch_cut() {
            eprintln!("warning: axis {a} kernel has eigenvalues near the branch cut");
        }
        if k.eig_cond > 1e8 {
            eprintln!("warning: axis {a} eigenvector condition {:.2e}", k.eig_cond);
        }
    }
    save_axis_kernels(&ctx.out.join("kernels"), &kernels)?;
    ctx.finish()
}

// -------------------------------------------------------------- train-igrog

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldTrainCfg {
    /// Spatial field map coefficients (Hz); omitted means estimate B0 from
    /// the calibration echoes.
    #[serde(default)]
    coeffs: Option<QuadraticCoeffs>,
    segments: usize,
    #[serde(default = "default_interp_mode")]
    interp: String,
}

fn default_interp_mode() -> String {
    "zero-order".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainIgrogCfg {
    cal: String,
    traj: String,
    n: usize,
    #[serde(default = "default_upsample")]
    upsample: usize,
    #[serde(default = "default_sources")]
    sources: usize,
    #[serde(default = "default_spacing")]
    spacing: f64,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    field: Option<FieldTrainCfg>,
}

fn default_upsample() -> usize {
    4
}
fn default_sources() -> usize {
    3
}
fn default_spacing() -> f64 {
    0.5
}

pub fn train_igrog(ctx: &RunContext) -> Result<()> {
    let cfg: TrainIgrogCfg = ctx.config()?;
    let cal = load_calibration(&ctx.input(&cfg.cal, "cal")?)?;
    let traj = load_trajectory(&ctx.input(&cfg.traj, "traj")?)?;
    let grid = Grid::new(2, cfg.n, 1.0)?;
    let mut train = cfg.train.clone();
    if let Some(seed) = ctx.seed_override {
        train.seed = seed;
    }

    let dummy = Array2::zeros((1, traj.num_samples()));
    let (_, traj_up) = readout_interpolate(&dummy, &traj, cfg.upsample)?;
    let gplan = build_gridding_plan(&traj_up, cfg.upsample, &grid, cfg.sources, cfg.spacing)?;

    match &cfg.field {
        None => {
            let net = ctx.time("train", || train_kernelnet(&cal, &gplan, &train))?;
            save_kernelnet(&ctx.out.join("net"), &net)?;
            write_telemetry_csv(&ctx.out.join("telemetry.csv"), &net)?;
        }
        Some(fcfg) => {
            let field = fcfg.coeffs.as_ref().map(|c| quadratic_field_map(&grid, c)).transpose()?;
            let mode = match fcfg.interp.as_str() {
                "zero-order" => InterpMode::ZeroOrder,
                "least-squares" => InterpMode::LeastSquares,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "field.interp must be zero-order or least-squares, got {other:?}"
                    )))
                }
            };
            let field_ref = match &field {
                Some(f) => f.clone(),
                None => igrog::fieldcorr::estimate_b0_from_echoes(&cal)?,
            };
            let alphas = field_ref.alphas_at(&traj.times);
            let centers = cluster_centers(&alphas, fcfg.segments, 0)?;
            let ts = build_interpolators(&alphas, &centers, &field_ref, mode, 0)?;
            let fnet = ctx.time("train", || {
                train_field_kernelnet(&cal, Some(&field_ref), &gplan, &ts, FieldFeatureMode::DeltaT, &train)
            })?;
            save_kernelnet(&ctx.out.join("net"), &fnet.net)?;
            write_telemetry_csv(&ctx.out.join("telemetry.csv"), &fnet.net)?;
            save_time_segmentation(&ctx.out.join("ts"), &ts)?;
            write_array(
                ctx.out.join("field.carr"),
                &field_ref.basis[0].mapv(|v| Complex64::new(v, 0.0)),
                Precision::C128,
            )?;
        }
    }
    ctx.finish()
}

fn write_telemetry_csv(path: &std::path::Path, net: &igrog::igrog::KernelNet) -> Result<()> {
    let mut s = String::from("epoch,loss,grad_norm\n");
    for (e, (l, g)) in net.telemetry.iter().zip(&net.telemetry_grad).enumerate() {
        s.push_str(&format!("{e},{l},{g}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

// --------------------------------------------------------------------- grid

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridCfg {
    data: String,
    traj: String,
    n: usize,
    method: String,
    #[serde(default)]
    kernels: Option<String>,
    #[serde(default)]
    net: Option<String>,
    #[serde(default)]
    ts: Option<String>,
    #[serde(default)]
    field: Option<QuadraticCoeffs>,
    #[serde(default)]
    dcf: Option<String>,
    #[serde(default = "default_upsample")]
    upsample: usize,
    #[serde(default = "default_sources")]
    sources: usize,
    #[serde(default = "default_spacing")]
    spacing: f64,
    #[serde(default = "default_dcf_iters")]
    gridded_dcf_iters: usize,
}

pub fn grid(ctx: &RunContext) -> Result<()> {
    let cfg: GridCfg = ctx.config()?;
    let data = data_to_matrix(&read_array(ctx.input(&cfg.data, "data")?)?)?;
    let traj = load_trajectory(&ctx.input(&cfg.traj, "traj")?)?;
    let grid = Grid::new(2, cfg.n, 1.0)?;
    let weights = match &cfg.dcf {
        Some(p) => Some(read_real_vec(ctx.input(p, "dcf")?)?),
        None => None,
    };

    let gridded = match cfg.method.as_str() {
        "grog" => {
            let dir = cfg.kernels.as_ref().ok_or_else(|| {
                Error::InvalidArgument("method grog needs 'kernels' (calibrate-grog output)".into())
            })?;
            let kernels = load_axis_kernels(&ctx.input(dir, "kernels")?)?;
            let out = ctx.time("grid", || {
                grog_grid(&data, &traj.coords, &grid, &kernels, weights.as_deref())
            })?;
            write_real_vec(ctx.out.join("segments.carr"), &vec![0.0; out.coords.nrows()])?;
            out
        }
        "igrog" => {
            let dir = cfg.net.as_ref().ok_or_else(|| {
                Error::InvalidArgument("method igrog needs 'net' (train-igrog output)".into())
            })?;
            let net = load_kernelnet(&ctx.input(dir, "net")?)?;
            let (data_up, traj_up) = readout_interpolate(&data, &traj, cfg.upsample)?;
            let gplan =
                build_gridding_plan(&traj_up, cfg.upsample, &grid, cfg.sources, cfg.spacing)?;
            let ood = igrog::igrog::out_of_distribution_count(&gplan);
            if ood > 0 {
                eprintln!("warning: {ood} samples have orientations outside [-1, 1] features");
            }
            if net.extra_features == 0 {
                let out = ctx.time("grid", || igrog_grid(&data_up, &gplan, &net, weights.as_deref()))?;
                write_real_vec(ctx.out.join("segments.carr"), &vec![0.0; out.coords.nrows()])?;
                out
            } else {
                let ts_dir = cfg.ts.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("field-conditioned net needs 'ts'".into())
                })?;
                let ts = load_time_segmentation(&ctx.input(ts_dir, "ts")?)?;
                let coeffs = cfg.field.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("field-conditioned gridding needs 'field'".into())
                })?;
                let field = quadratic_field_map(&grid, coeffs)?;
                let fnet = FieldKernelNet {
                    net,
                    centers: ts.centers.clone(),
                    mode: FieldFeatureMode::DeltaT,
                    te0: 0.0,
                };
                let (out, segments) = ctx.time("grid", || {
                    correct_and_grid(&data_up, &gplan, &fnet, &ts, &field, weights.as_deref())
                })?;
                write_real_vec(
                    ctx.out.join("segments.carr"),
                    &segments.iter().map(|&s| s as f64).collect::<Vec<_>>(),
                )?;
                out
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "method must be grog or igrog, got {other:?}"
            )))
        }
    };

    write_array(ctx.out.join("gridded.carr"), &matrix_to_array(&gridded.data), Precision::C128)?;
    let coords = ArrayD::from_shape_fn(IxDyn(&[gridded.coords.nrows(), 2]), |idx| {
        Complex64::new(gridded.coords[[idx[0], idx[1]]] as f64, 0.0)
    });
    write_array(ctx.out.join("coords.carr"), &coords, Precision::C128)?;
    let gdcf = gridded_dcf(&grid, &gridded.coords, cfg.gridded_dcf_iters)?;
    write_real_vec(ctx.out.join("gridded_dcf.carr"), &gdcf)?;
    ctx.finish()
}

// -------------------------------------------------------------------- recon

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReconCfg {
    maps: String,
    /// Non-Cartesian input: raw data + trajectory.
    #[serde(default)]
    data: Option<String>,
    #[serde(default)]
    traj: Option<String>,
    /// Cartesian input: a grid command's output directory.
    #[serde(default)]
    gridded: Option<String>,
    n: usize,
    #[serde(default = "default_recon_method")]
    method: String,
    #[serde(default = "default_cg_iters")]
    iters: usize,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default)]
    lambda_reg: f64,
    #[serde(default = "default_levels")]
    wavelet_levels: usize,
    #[serde(default)]
    dcf: Option<String>,
    #[serde(default = "default_recon_alpha")]
    alpha: f64,
    #[serde(default = "default_recon_width")]
    width: f64,
    #[serde(default)]
    field: Option<QuadraticCoeffs>,
    #[serde(default)]
    segments: Option<usize>,
    #[serde(default)]
    toeplitz: bool,
    #[serde(default)]
    trace_objective: bool,
}

fn default_recon_method() -> String {
    "cg".into()
}
fn default_cg_iters() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-8
}
fn default_levels() -> usize {
    3
}
fn default_recon_alpha() -> f64 {
    1.5
}
fn default_recon_width() -> f64 {
    6.0
}

pub fn recon(ctx: &RunContext) -> Result<()> {
    let cfg: ReconCfg = ctx.config()?;
    let maps = CoilMaps::new(read_array(ctx.input(&cfg.maps, "maps")?)?)?;
    let grid = Grid::new(2, cfg.n, 1.0)?;

    // Assemble the operator and the data.
    let (op, data): (Box<dyn LinearOp>, Array2<Complex64>) = if let Some(gdir) = &cfg.gridded {
        let gdir = ctx.input(gdir, "gridded")?;
        let data = data_to_matrix(&read_array(gdir.join("gridded.carr"))?)?;
        let coords_c = read_array(gdir.join("coords.carr"))?;
        let mu = coords_c.shape()[0];
        let coords = Array2::from_shape_fn((mu, 2), |(i, a)| coords_c[[i, a]].re as i64);
        let dcf = match &cfg.dcf {
            Some(p) => Some(read_real_vec(ctx.input(p, "dcf")?)?),
            None => Some(read_real_vec(gdir.join("gridded_dcf.carr"))?),
        };
        let segments: Vec<usize> = read_real_vec(gdir.join("segments.carr"))?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        if segments.iter().any(|&s| s > 0) {
            let coeffs = cfg.field.as_ref().ok_or_else(|| {
                Error::InvalidArgument("segmented gridded recon needs 'field'".into())
            })?;
            let field = quadratic_field_map(&grid, coeffs)?;
            let ts = load_time_segmentation(&gdir.join("../ts"))
                .or_else(|_| load_time_segmentation(&gdir.join("ts")))?;
            let op = SenseGriddedSegmentedOp::new(
                maps, grid, coords, segments, &field, &ts.centers, dcf,
            )?;
            (Box::new(op), data)
        } else {
            let op = SenseGriddedOp::new(maps, grid, coords, dcf)?;
            (Box::new(op), data)
        }
    } else {
        let dpath = cfg.data.as_ref().ok_or_else(|| {
            Error::InvalidArgument("recon needs either 'gridded' or 'data' + 'traj'".into())
        })?;
        let tpath = cfg.traj.as_ref().ok_or_else(|| {
            Error::InvalidArgument("recon with 'data' also needs 'traj'".into())
        })?;
        let data = data_to_matrix(&read_array(ctx.input(dpath, "data")?)?)?;
        let traj = load_trajectory(&ctx.input(tpath, "traj")?)?;
        let p = plan(&grid, &traj, cfg.alpha, cfg.width)?.with_precompute();
        let dcf = match &cfg.dcf {
            Some(p) => Some(read_real_vec(ctx.input(p, "dcf")?)?),
            None => None,
        };
        if let (Some(coeffs), Some(l)) = (&cfg.field, cfg.segments) {
            let field = quadratic_field_map(&grid, coeffs)?;
            let alphas = field.alphas_at(&traj.times);
            let centers = cluster_centers(&alphas, l, 0)?;
            let ts = build_interpolators(&alphas, &centers, &field, InterpMode::ZeroOrder, 0)?;
            let mut op = TsSenseOp::new(maps, p, &ts, &field, dcf)?;
            if cfg.toeplitz {
                op = op.with_toeplitz()?;
            }
            (Box::new(op), data)
        } else {
            let mut op = SenseNufftOp::new(maps, p, dcf)?;
            if cfg.toeplitz {
                op = op.with_toeplitz()?;
            }
            (Box::new(op), data)
        }
    };

    let (image, trace) = match cfg.method.as_str() {
        "cg" => ctx.time("solve", || {
            cg_sense(op.as_ref(), &data, cfg.iters, cfg.tol, cfg.trace_objective)
        })?,
        "fista" => {
            let lip = max_eigen(op.as_ref(), 30, 0);
            ctx.time("solve", || {
                fista_l1(
                    op.as_ref(),
                    &data,
                    cfg.lambda_reg,
                    cfg.wavelet_levels,
                    cfg.iters,
                    lip,
                    cfg.trace_objective,
                )
            })?
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "method must be cg or fista, got {other:?}"
            )))
        }
    };

    write_array(ctx.out.join("image.carr"), &image, Precision::C128)?;
    imgout::write_png(&ctx.out.join("image.png"), &image, ctx.window, ctx.level)?;
    imgout::write_pgm(&ctx.out.join("image.pgm"), &image, ctx.window, ctx.level)?;
    std::fs::write(ctx.out.join("trace.csv"), trace.to_csv())?;
    ctx.finish()
}

// ------------------------------------------------------------------ gfactor

pub fn gfactor(ctx: &RunContext) -> Result<()> {
    let mut cfg: GfactorConfig = ctx.config()?;
    if let Some(seed) = ctx.seed_override {
        cfg.seed = seed;
    }
    let result = ctx.time("experiment", || experiment_gfactor(&cfg))?;
    for (name, maps) in [("igrog", &result.igrog), ("grog", &result.grog)] {
        write_array(
            ctx.out.join(format!("gmap_{name}.carr")),
            &maps.gmap.mapv(|v| Complex64::new(v, 0.0)),
            Precision::C128,
        )?;
        write_array(
            ctx.out.join(format!("bias_{name}.carr")),
            &maps.bias.mapv(|v| Complex64::new(v, 0.0)),
            Precision::C128,
        )?;
        imgout::write_png_real(&ctx.out.join(format!("gmap_{name}.png")), &maps.gmap, Some(2.0))?;
    }
    let summary = serde_json::json!({
        "mean_g_igrog": result.igrog.mean_g,
        "mean_g_grog": result.grog.mean_g,
    });
    std::fs::write(ctx.out.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap())?;
    println!(
        "mean g: igrog {:.4}, grog {:.4}",
        result.igrog.mean_g, result.grog.mean_g
    );
    ctx.finish()
}

// --------------------------------------------------------------- coil-sweep

pub fn coil_sweep(ctx: &RunContext) -> Result<()> {
    let mut cfg: CoilSweepConfig = ctx.config()?;
    if let Some(seed) = ctx.seed_override {
        cfg.igrog_train.seed = seed;
    }
    let rows = ctx.time("experiment", || experiment_coil_sweep(&cfg))?;
    std::fs::write(ctx.out.join("coil_sweep.csv"), coil_sweep_csv(&rows))?;
    for r in &rows {
        println!(
            "C_virtual {:2}: grog {:.4} (lambda {:.0e}), igrog {:.4}",
            r.c_virtual, r.nrmse_grog, r.grog_lambda, r.nrmse_igrog
        );
    }
    ctx.finish()
}

// --------------------------------------------------------------- tseg-sweep

pub fn tseg_sweep(ctx: &RunContext) -> Result<()> {
    let mut cfg: TsegSweepConfig = ctx.config()?;
    if let Some(seed) = ctx.seed_override {
        cfg.igrog_train.seed = seed;
    }
    let rows = ctx.time("experiment", || experiment_tseg_sweep(&cfg))?;
    std::fs::write(ctx.out.join("tseg_sweep.csv"), tseg_csv(&rows))?;
    for r in &rows {
        println!(
            "L {:2} {}: NRMSE {:.4}",
            r.l,
            if r.corrected { "corrected  " } else { "uncorrected" },
            r.nrmse
        );
    }
    ctx.finish()
}

// -------------------------------------------------------------------- bench

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchCfg {
    #[serde(default = "default_bench_n")]
    n: usize,
    #[serde(default = "default_bench_coils")]
    coils: usize,
    #[serde(default = "default_bench_samples")]
    samples: usize,
    #[serde(default = "default_bench_runs")]
    runs: usize,
    #[serde(default = "default_bench_iters")]
    cg_iters: usize,
}

fn default_bench_n() -> usize {
    256
}
fn default_bench_coils() -> usize {
    12
}
fn default_bench_samples() -> usize {
    200_000
}
fn default_bench_runs() -> usize {
    5
}
fn default_bench_iters() -> usize {
    3
}

pub fn bench(ctx: &RunContext) -> Result<()> {
    let cfg: BenchCfg = ctx.config()?;
    let grid = Grid::new(2, cfg.n, 1.0)?;
    let shots = 16;
    let per_shot = cfg.samples / shots;
    let traj = vds_spiral(&grid, shots, 2.0, 1.5, per_shot, 5e-3)?;
    let m = traj.num_samples();
    let maps = synth_coil_maps(&grid, cfg.coils, 1)?;
    let phantom = shepp_logan(&grid)?.image;
    let imgs = coil_images(&phantom, &maps);

    let p_fast = plan(&grid, &traj, 1.5, 6.0)?.with_precompute();
    let data = p_fast.forward(&imgs)?;
    let dcf = pipe_menon(&p_fast, 10)?.weights;

    let mut csv = String::from("op,n,m,alpha,w,wall_ms\n");
    let mut push = |op: &str, alpha: f64, w: f64, ms: f64| {
        csv.push_str(&format!("{op},{},{m},{alpha},{w},{ms}\n", cfg.n));
    };

    // Forward / adjoint NUFFT.
    let t0 = Instant::now();
    let _ = p_fast.forward(&imgs)?;
    push("nufft_forward", 1.5, 6.0, t0.elapsed().as_secs_f64() * 1e3);
    let t0 = Instant::now();
    let _ = p_fast.adjoint(&data, Some(&dcf))?;
    push("nufft_adjoint", 1.5, 6.0, t0.elapsed().as_secs_f64() * 1e3);

    // Toeplitz normal vs forward+adjoint (amortized over 8 applications).
    let t0 = Instant::now();
    let psf = toeplitz_psf(&p_fast, &dcf)?;
    let build_ms = t0.elapsed().as_secs_f64() * 1e3;
    push("toeplitz_build", 2.0, 6.0, build_ms);
    let t0 = Instant::now();
    for _ in 0..8 {
        let _ = psf.normal(&imgs)?;
    }
    let normal_ms = t0.elapsed().as_secs_f64() * 1e3 / 8.0;
    push("toeplitz_normal", 2.0, 6.0, normal_ms);
    let t0 = Instant::now();
    for _ in 0..8 {
        let _ = p_fast.adjoint(&p_fast.forward(&imgs)?, Some(&dcf))?;
    }
    push("forward_adjoint", 1.5, 6.0, t0.elapsed().as_secs_f64() * 1e3 / 8.0);

    // Per-iteration CG cost: NUFFT vs gridded, median of `runs`.
    let nufft_op = SenseNufftOp::new(maps.clone(), p_fast.clone(), Some(dcf.clone()))?;
    let cal = igrog::grog::calibration_from_kspace(
        &igrog::fft::centered_fft(&imgs, &[1, 2]),
        &grid,
        32,
    )?;
    let kernels = calibrate_axis_kernels(&cal, 1e-3)?;
    let gridded = grog_grid(&data, &traj.coords, &grid, &kernels, Some(&dcf))?;
    let gdcf = gridded_dcf(&grid, &gridded.coords, 10)?;
    let gridded_op = SenseGriddedOp::new(maps, grid, gridded.coords.clone(), Some(gdcf))?;

    let median = |xs: &mut Vec<f64>| -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    };
    let mut nufft_ms = Vec::new();
    let mut grid_ms = Vec::new();
    for _ in 0..cfg.runs {
        let t0 = Instant::now();
        let _ = cg_sense(&nufft_op, &data, cfg.cg_iters, 0.0, false)?;
        nufft_ms.push(t0.elapsed().as_secs_f64() * 1e3 / cfg.cg_iters as f64);
        let t0 = Instant::now();
        let _ = cg_sense(&gridded_op, &gridded.data, cfg.cg_iters, 0.0, false)?;
        grid_ms.push(t0.elapsed().as_secs_f64() * 1e3 / cfg.cg_iters as f64);
    }
    let nufft_iter = median(&mut nufft_ms);
    let grid_iter = median(&mut grid_ms);
    push("cg_iter_nufft", 1.5, 6.0, nufft_iter);
    push("cg_iter_gridded", 0.0, 0.0, grid_iter);
    push("gridded_over_nufft_ratio", 0.0, 0.0, grid_iter / nufft_iter);
    println!(
        "per-iteration: nufft {nufft_iter:.1} ms, gridded {grid_iter:.1} ms (ratio {:.3})",
        grid_iter / nufft_iter
    );

    std::fs::write(ctx.out.join("bench.csv"), csv)?;
    ctx.finish()
}
