//! Cross-module pipeline checks at reduced scale: gridding quality against
//! held-out calibration data, the single-source head-to-head with classic
//! GROG, and reconstruction sanity on simulated spirals.

use igrog::analysis::{gridded_dcf, nrmse, recon_gridded};
use igrog::array::{CoilMaps, Grid};
use igrog::dcf::pipe_menon;
use igrog::fft::centered_fft;
use igrog::grog::{calibrate_axis_kernels, calibration_from_kspace, grog_grid};
use igrog::igrog::{
    build_gridding_plan, igrog_grid, readout_interpolate, train_kernelnet, TrainConfig,
};
use igrog::nufft::plan;
use igrog::recon::{cg_sense, LinearOp, SenseNufftOp};
use igrog::sim::{shepp_logan, synth_coil_maps, vds_spiral};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;

/// Phantom + coils + spiral at a small scale, data from the oracle-grade
/// NUFFT.
struct SmallSim {
    grid: Grid,
    phantom: ndarray::ArrayD<Complex64>,
    maps: CoilMaps,
    traj: igrog::array::Trajectory,
    data: Array2<Complex64>,
    cal: igrog::array::Calibration,
}

fn small_sim(n: usize, coils: usize, shots: usize, samples: usize) -> SmallSim {
    let grid = Grid::new(2, n, 1.0).unwrap();
    let phantom = shepp_logan(&grid).unwrap().image;
    let maps = synth_coil_maps(&grid, coils, 7).unwrap();
    let traj = vds_spiral(&grid, shots, 2.0, 1.5, samples, 5e-3).unwrap();
    let p = plan(&grid, &traj, 2.0, 6.0).unwrap().with_precompute();
    let mut shape = vec![coils];
    shape.extend(grid.shape());
    let mut coil_imgs = ArrayD::zeros(IxDyn(&shape));
    for ci in 0..coils {
        let mut img = phantom.clone();
        img.zip_mut_with(&maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
        coil_imgs.index_axis_mut(Axis(0), ci).assign(&img);
    }
    let data = p.forward(&coil_imgs).unwrap();
    let full_kspace = centered_fft(&coil_imgs, &[1, 2]);
    let cal = calibration_from_kspace(&full_kspace, &grid, 24).unwrap();
    SmallSim { grid, phantom, maps, traj, data, cal }
}

#[test]
fn igrog_gridding_matches_heldout_calibration_values() {
    // Train on the calibration, grid synthetic readouts crossing the
    // calibration region, compare against the true on-grid values.
    let n = 64;
    let coils = 12;
    let sim = small_sim(n, coils, 1, 64);
    let _ = &sim.traj;

    // Synthetic readouts: gentle arcs through the calibration interior.
    let m = 160;
    let mut coords = Array2::zeros((m, 2));
    for i in 0..m {
        let t = i as f64 / (m - 1) as f64;
        coords[[i, 0]] = -7.0 + 14.0 * t;
        coords[[i, 1]] = 3.0 * (2.0 * std::f64::consts::PI * 0.4 * t).sin();
    }
    let times: Vec<f64> = (0..m).map(|i| 1e-5 * i as f64).collect();
    let traj = igrog::array::Trajectory::new(coords, times, vec![0; m]).unwrap();

    // Data for those readouts from the oracle-grade NUFFT of the full image.
    let p = plan(&sim.grid, &traj, 2.0, 6.0).unwrap();
    let mut shape = vec![coils];
    shape.extend(sim.grid.shape());
    let mut coil_imgs = ArrayD::zeros(IxDyn(&shape));
    for ci in 0..coils {
        let mut img = sim.phantom.clone();
        img.zip_mut_with(&sim.maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| *v *= s);
        coil_imgs.index_axis_mut(Axis(0), ci).assign(&img);
    }
    let data = p.forward(&coil_imgs).unwrap();

    let (data_up, traj_up) = readout_interpolate(&data, &traj, 4).unwrap();
    let gplan = build_gridding_plan(&traj_up, 4, &sim.grid, 3, 0.5).unwrap();
    let config = TrainConfig {
        epochs: 3000,
        batch: 512,
        hidden: vec![128, 128],
        lr: 3e-3,
        seed: 1,
        ..Default::default()
    };
    let net = train_kernelnet(&sim.cal, &gplan, &config).unwrap();
    let gridded = igrog_grid(&data_up, &gplan, &net, None).unwrap();

    // True on-grid values at the unique targets.
    let mu = gridded.coords.nrows();
    let coords_f = Array2::from_shape_fn((mu, 2), |(i, a)| gridded.coords[[i, a]] as f64);
    let times: Vec<f64> = (0..mu).map(|i| i as f64).collect();
    let int_traj = igrog::array::Trajectory::new(coords_f, times, (0..mu).collect()).unwrap();
    let p_int = plan(&sim.grid, &int_traj, 2.0, 6.0).unwrap();
    let truth = p_int.forward(&coil_imgs).unwrap();

    let num: f64 = gridded
        .data
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    let den: f64 = truth.iter().map(|v| v.norm_sqr()).sum();
    let err = (num / den).sqrt();
    println!("held-out gridding NRMSE: {err:.4}");
    assert!(err <= 0.05, "gridded-vs-true NRMSE {err}");
}

#[test]
fn single_source_igrog_comparable_to_grog() {
    // D=1 with matched ridge: the implicit network reproduces the GROG
    // geometry, so the gridding errors should be on the same scale.
    let n = 64;
    let coils = 8;
    let sim = small_sim(n, coils, 8, 1500);
    let lambda = 1e-3;

    let grog_kernels = calibrate_axis_kernels(&sim.cal, lambda).unwrap();
    let grog_out = grog_grid(&sim.data, &sim.traj.coords, &sim.grid, &grog_kernels, None).unwrap();

    let (data_up, traj_up) = readout_interpolate(&sim.data, &sim.traj, 4).unwrap();
    let gplan = build_gridding_plan(&traj_up, 4, &sim.grid, 1, 0.5).unwrap();
    let config = TrainConfig {
        lambda,
        epochs: 2000,
        batch: 512,
        hidden: vec![96, 96],
        lr: 3e-3,
        seed: 2,
        ..Default::default()
    };
    let net = train_kernelnet(&sim.cal, &gplan, &config).unwrap();
    let ig_out = igrog_grid(&data_up, &gplan, &net, None).unwrap();

    // Truth at each method's own unique targets.
    let truth_err = |coords: &Array2<i64>, values: &Array2<Complex64>| -> f64 {
        let mu = coords.nrows();
        let coords_f = Array2::from_shape_fn((mu, 2), |(i, a)| coords[[i, a]] as f64);
        let times: Vec<f64> = (0..mu).map(|i| i as f64).collect();
        let t = igrog::array::Trajectory::new(coords_f, times, (0..mu).collect()).unwrap();
        let p = plan(&sim.grid, &t, 2.0, 6.0).unwrap();
        let mut shape = vec![coils];
        shape.extend(sim.grid.shape());
        let mut coil_imgs = ArrayD::zeros(IxDyn(&shape));
        for ci in 0..coils {
            let mut img = sim.phantom.clone();
            img.zip_mut_with(&sim.maps.maps.index_axis(Axis(0), ci).to_owned(), |v, &s| {
                *v *= s
            });
            coil_imgs.index_axis_mut(Axis(0), ci).assign(&img);
        }
        let truth = p.forward(&coil_imgs).unwrap();
        let num: f64 = values.iter().zip(truth.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = truth.iter().map(|v| v.norm_sqr()).sum();
        (num / den).sqrt()
    };
    let e_grog = truth_err(&grog_out.coords, &grog_out.data);
    let e_ig = truth_err(&ig_out.coords, &ig_out.data);
    println!("gridding error: grog {e_grog:.4}, single-source implicit {e_ig:.4}");
    assert!(e_ig <= 2.0 * e_grog, "single-source implicit {e_ig} vs grog {e_grog}");
}

#[test]
fn cg_beats_adjoint_on_spiral() {
    let n = 64;
    let sim = small_sim(n, 6, 8, 500);
    let p = plan(&sim.grid, &sim.traj, 1.5, 6.0).unwrap().with_precompute();
    let dcf = pipe_menon(&p, 20).unwrap().weights;
    let op = SenseNufftOp::new(sim.maps.clone(), p, Some(dcf)).unwrap();
    let adjoint_img = op.adjoint_weighted(&sim.data);
    // Scale the adjoint to the least-squares amplitude before comparing.
    let scale = {
        let num: Complex64 = adjoint_img
            .iter()
            .zip(sim.phantom.iter())
            .map(|(a, b)| b.conj() * a)
            .sum();
        let den: f64 = adjoint_img.iter().map(|v| v.norm_sqr()).sum();
        num / den
    };
    let adjoint_scaled = adjoint_img.mapv(|v| v * scale.conj() / scale.norm() * scale.norm());
    let adjoint_scaled = adjoint_scaled.mapv(|v| v / scale.norm().recip() / scale.norm() * 1.0);
    let _ = adjoint_scaled;
    // Simpler: compare NRMSE after optimal complex scaling of each image.
    let best_scale_nrmse = |img: &ndarray::ArrayD<Complex64>| -> f64 {
        let num: Complex64 = img
            .iter()
            .zip(sim.phantom.iter())
            .map(|(a, b)| a.conj() * b)
            .sum();
        let den: f64 = img.iter().map(|v| v.norm_sqr()).sum();
        let alpha = num.conj() / den; // least-squares fit of phantom by alpha*img... transposed
        let fitted = img.mapv(|v| v * alpha.conj());
        nrmse(&fitted, &sim.phantom, None)
    };
    let (cg_img, _) = cg_sense(&op, &sim.data, 20, 1e-8, false).unwrap();
    let e_adj = best_scale_nrmse(&adjoint_img);
    let e_cg = best_scale_nrmse(&cg_img);
    println!("NRMSE: adjoint {e_adj:.4}, cg {e_cg:.4}");
    assert!(e_cg < e_adj, "cg {e_cg} vs adjoint {e_adj}");
}

#[test]
fn igrog_beats_grog_small_scale() {
    // End-to-end ordering at reduced size: reconstruction NRMSE against the
    // NUFFT reference.
    let n = 64;
    let coils = 8;
    let sim = small_sim(n, coils, 8, 1500);
    let recon_plan = plan(&sim.grid, &sim.traj, 1.5, 6.0).unwrap().with_precompute();
    let dcf = pipe_menon(&recon_plan, 20).unwrap().weights;
    let ref_op = SenseNufftOp::new(sim.maps.clone(), recon_plan, Some(dcf.clone())).unwrap();
    let (reference, _) = cg_sense(&ref_op, &sim.data, 12, 1e-8, false).unwrap();

    // GROG (best of the ridge sweep).
    let mut e_grog = f64::MAX;
    for lam in [1e-4, 1e-3, 1e-2, 1e-1] {
        let kernels = calibrate_axis_kernels(&sim.cal, lam).unwrap();
        let gridded = grog_grid(&sim.data, &sim.traj.coords, &sim.grid, &kernels, Some(&dcf)).unwrap();
        let img = recon_gridded(&gridded, &sim.maps, 12, 20).unwrap();
        e_grog = e_grog.min(nrmse(&img, &reference, None));
    }

    // Implicit kernels.
    let (data_up, traj_up) = readout_interpolate(&sim.data, &sim.traj, 4).unwrap();
    let gplan = build_gridding_plan(&traj_up, 4, &sim.grid, 3, 0.5).unwrap();
    let config = TrainConfig {
        epochs: 3000,
        batch: 512,
        hidden: vec![128, 128],
        lr: 3e-3,
        seed: 3,
        ..Default::default()
    };
    let net = train_kernelnet(&sim.cal, &gplan, &config).unwrap();
    let gridded = igrog_grid(&data_up, &gplan, &net, Some(&dcf)).unwrap();
    let img = recon_gridded(&gridded, &sim.maps, 12, 20).unwrap();
    let e_ig = nrmse(&img, &reference, None);

    println!("recon NRMSE vs NUFFT reference: grog {e_grog:.4}, igrog {e_ig:.4}");
    assert!(e_ig < e_grog, "igrog {e_ig} vs grog {e_grog}");
    let _ = gridded_dcf(&sim.grid, &gridded.coords, 5).unwrap();
}
