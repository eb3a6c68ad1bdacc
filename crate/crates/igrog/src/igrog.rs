//! Implicit GRAPPA-kernel gridding: an MLP maps a source-point geometry
//! (orientation) to the multi-source GRAPPA kernel that estimates the nearest
//! Cartesian sample, trained self-supervised on calibration k-space.
//!
//! Pipeline: upsample each readout (sinc in the data, linear in the
//! coordinates), build a gridding plan (nearest integer target, D source
//! points at constant arc length along the readout), train the kernel network
//! on calibration data, then apply it sample by sample.

use crate::array::{Calibration, Grid, Trajectory};
use crate::grog::GriddedKspace;
use crate::mlp::{mlp_init, AdamState, Loss, Mlp};
use crate::nufft::KspaceInterpolator;
use crate::{usable_calibration_region, Error, Result};
use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Default cap on source offsets, used to scale orientation features to
/// [-1, 1].
pub const DEFAULT_W_MAX: f64 = 2.0;

/// Half-width of the interpolation filter in original-sample units.
const SINC_HALF_WIDTH: usize = 8;

/// Kaiser-windowed sinc tap at offset `t` (original-sample units).
fn sinc_tap(t: f64) -> f64 {
    let half = SINC_HALF_WIDTH as f64;
    if t.abs() >= half {
        return 0.0;
    }
    let sinc = if t.abs() < 1e-12 {
        1.0
    } else {
        let pt = std::f64::consts::PI * t;
        pt.sin() / pt
    };
    let beta = 8.0;
    let win = crate::nufft::bessel_i0(beta * (1.0 - (t / half).powi(2)).sqrt())
        / crate::nufft::bessel_i0(beta);
    sinc * win
}

/// Sinc-upsample every readout by `factor` (windowed-sinc polyphase filter
/// with reflected ends and normalized taps, so original samples and constant
/// signals pass through exactly; coordinates and times interpolate
/// linearly). Each readout of n samples becomes `(n-1) * factor + 1`
/// samples, keeping every upsampled position inside the acquired extent.
/// Readouts are assumed time-oversampled, as scanner ADCs provide; a
/// periodic frequency-domain zero-pad would ring across the whole readout
/// from the large center-of-k-space to readout-end discontinuity.
pub fn readout_interpolate(
    data: &Array2<Complex64>,
    traj: &Trajectory,
    factor: usize,
) -> Result<(Array2<Complex64>, Trajectory)> {
    if factor == 0 {
        return Err(Error::InvalidArgument("factor must be >= 1".into()));
    }
    if data.ncols() != traj.num_samples() {
        return Err(Error::ShapeMismatch("data columns vs trajectory samples".into()));
    }
    if factor == 1 {
        return Ok((data.clone(), traj.clone()));
    }
    let c = data.nrows();
    let d = traj.dim();
    let ranges = traj.readout_ranges();
    for r in &ranges {
        if r.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "readout with {} samples is too short to interpolate (need >= 4)",
                r.len()
            )));
        }
    }
    let m_up: usize = ranges.iter().map(|r| (r.len() - 1) * factor + 1).sum();
    let mut out = Array2::zeros((c, m_up));
    let mut coords = Array2::zeros((m_up, d));
    let mut times = Vec::with_capacity(m_up);
    let mut readout_id = Vec::with_capacity(m_up);

    // Polyphase taps: for each sub-position p/factor the normalized windowed
    // sinc evaluated at p/factor + j for j in [-half, half).
    let half = SINC_HALF_WIDTH as i64;
    let phases: Vec<Vec<f64>> = (0..factor)
        .map(|p| {
            let frac = p as f64 / factor as f64;
            let mut taps: Vec<f64> =
                (-half..=half).map(|j| sinc_tap(frac + j as f64)).collect();
            let sum: f64 = taps.iter().sum();
            for t in taps.iter_mut() {
                *t /= sum;
            }
            taps
        })
        .collect();

    let mut col = 0;
    for r in &ranges {
        let n = r.len();
        let keep = (n - 1) * factor + 1;
        let reflect = |idx: i64| -> usize {
            let n = n as i64;
            let mut i = idx;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * n - 2 - i;
            }
            i.clamp(0, n - 1) as usize
        };
        for ci in 0..c {
            let lane: Vec<Complex64> = (r.clone()).map(|i| data[[ci, i]]).collect();
            for u in 0..keep {
                let base = (u / factor) as i64;
                let p = u % factor;
                if p == 0 {
                    out[[ci, col + u]] = lane[base as usize];
                    continue;
                }
                // position = base + p/factor; taps cover base + p/factor + j
                let taps = &phases[p];
                let mut acc = Complex64::default();
                for (ti, j) in (-half..=half).enumerate() {
                    acc += lane[reflect(base - j)] * taps[ti];
                }
                out[[ci, col + u]] = acc;
            }
        }
        for u in 0..keep {
            let pos = u as f64 / factor as f64; // fractional original index
            let i0 = (pos.floor() as usize).min(n - 2);
            let w = pos - i0 as f64;
            let g0 = r.start + i0;
            for a in 0..d {
                coords[[col + u, a]] =
                    traj.coords[[g0, a]] * (1.0 - w) + traj.coords[[g0 + 1, a]] * w;
            }
            times.push(traj.times[g0] * (1.0 - w) + traj.times[g0 + 1] * w);
            readout_id.push(traj.readout_id[r.start]);
        }
        col += keep;
    }
    let mut up = Trajectory::new(coords, times, readout_id)?;
    up.accel = traj.accel;
    Ok((out, up))
}

/// One original sample's gridding geometry.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    /// Wrapped integer target coordinate.
    pub target: Vec<i64>,
    /// Source offsets relative to the (unwrapped) target, D x d, flattened.
    pub orientations: Vec<f64>,
    /// Global fractional upsampled indices to interpolate source values from.
    pub source_pos: Vec<f64>,
    /// Which requested sources stayed inside the readout extent.
    pub valid: Vec<bool>,
    /// Fraction of missing sources (the truncation indicator feature).
    pub missing_frac: f64,
    /// Acquisition time of the original sample.
    pub time: f64,
}

/// Per-sample source geometry for a whole trajectory.
#[derive(Debug, Clone)]
pub struct GriddingPlan {
    pub entries: Vec<PlanEntry>,
    pub grid: Grid,
    pub dim: usize,
    pub num_sources: usize,
    pub spacing: f64,
    pub w_max: f64,
}

impl GriddingPlan {
    /// Orientation feature block for one entry: offsets scaled by `w_max`,
    /// then the truncation indicator.
    pub fn orientation_features(&self, entry: &PlanEntry) -> Vec<f64> {
        let mut f: Vec<f64> = entry.orientations.iter().map(|&v| v / self.w_max).collect();
        f.push(entry.missing_frac);
        f
    }

    pub fn feature_width(&self) -> usize {
        self.dim * self.num_sources + 1
    }

    /// The stored orientation set (step 1 of training): one tuple per entry.
    pub fn orientation_set(&self) -> Vec<(Vec<f64>, Vec<bool>, f64)> {
        self.entries
            .iter()
            .map(|e| (e.orientations.clone(), e.valid.clone(), e.missing_frac))
            .collect()
    }
}

/// Build the gridding plan from an upsampled trajectory. For every original
/// sample (every `factor`-th upsampled position) the target is the nearest
/// integer point; D sources sit on the readout polyline at constant arc
/// length `spacing`, centered on the arc point closest to the target.
pub fn build_gridding_plan(
    traj_up: &Trajectory,
    factor: usize,
    grid: &Grid,
    num_sources: usize,
    spacing: f64,
) -> Result<GriddingPlan> {
    if num_sources == 0 || num_sources % 2 == 0 {
        return Err(Error::InvalidArgument("source count must be odd (centered stencil)".into()));
    }
    if spacing <= 0.0 {
        return Err(Error::InvalidArgument("spacing must be positive".into()));
    }
    let d = grid.dim;
    if traj_up.dim() != d {
        return Err(Error::ShapeMismatch("trajectory dim vs grid".into()));
    }
    let half_span = (num_sources as f64 - 1.0) / 2.0;
    let mut entries = Vec::new();
    for r in traj_up.readout_ranges() {
        let n_up = r.len();
        // Cumulative arc length along the polyline.
        let mut arclen = vec![0.0f64; n_up];
        for u in 1..n_up {
            let mut seg = 0.0;
            for a in 0..d {
                let dv = traj_up.coords[[r.start + u, a]] - traj_up.coords[[r.start + u - 1, a]];
                seg += dv * dv;
            }
            arclen[u] = arclen[u - 1] + seg.sqrt();
        }
        let s_max = arclen[n_up - 1];

        let coord_at = |s: f64| -> Vec<f64> {
            let s = s.clamp(0.0, s_max);
            let j = match arclen.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
                Ok(j) => j,
                Err(j) => j.saturating_sub(1),
            }
            .min(n_up - 2);
            let seg = (arclen[j + 1] - arclen[j]).max(1e-300);
            let w = ((s - arclen[j]) / seg).clamp(0.0, 1.0);
            (0..d)
                .map(|a| {
                    traj_up.coords[[r.start + j, a]] * (1.0 - w)
                        + traj_up.coords[[r.start + j + 1, a]] * w
                })
                .collect()
        };
        let index_at = |s: f64| -> f64 {
            let s = s.clamp(0.0, s_max);
            let j = match arclen.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
                Ok(j) => j,
                Err(j) => j.saturating_sub(1),
            }
            .min(n_up - 2);
            let seg = (arclen[j + 1] - arclen[j]).max(1e-300);
            (r.start + j) as f64 + ((s - arclen[j]) / seg).clamp(0.0, 1.0)
        };

        let originals = (n_up - 1) / factor + 1;
        for m in 0..originals {
            let u0 = m * factor;
            let k: Vec<f64> = (0..d).map(|a| traj_up.coords[[r.start + u0, a]]).collect();
            let target_unwrapped: Vec<f64> = k.iter().map(|&v| v.round()).collect();

            // Arc point nearest to the target, searched on the polyline in a
            // local window around the sample.
            let lo = u0.saturating_sub(2 * factor);
            let hi = (u0 + 2 * factor).min(n_up - 1);
            let mut best_s = arclen[u0];
            let mut best_d2 = f64::MAX;
            for j in lo..hi {
                // Projection of the target onto segment (j, j+1).
                let mut dot = 0.0;
                let mut len2 = 0.0;
                for a in 0..d {
                    let p = traj_up.coords[[r.start + j, a]];
                    let q = traj_up.coords[[r.start + j + 1, a]];
                    dot += (target_unwrapped[a] - p) * (q - p);
                    len2 += (q - p) * (q - p);
                }
                let t = if len2 > 0.0 { (dot / len2).clamp(0.0, 1.0) } else { 0.0 };
                let mut d2 = 0.0;
                for a in 0..d {
                    let p = traj_up.coords[[r.start + j, a]];
                    let q = traj_up.coords[[r.start + j + 1, a]];
                    let x = p + t * (q - p);
                    d2 += (x - target_unwrapped[a]) * (x - target_unwrapped[a]);
                }
                if d2 < best_d2 {
                    best_d2 = d2;
                    best_s = arclen[j] + t * (arclen[j + 1] - arclen[j]);
                }
            }

            let mut orientations = Vec::with_capacity(num_sources * d);
            let mut source_pos = Vec::with_capacity(num_sources);
            let mut valid = Vec::with_capacity(num_sources);
            for i in 0..num_sources {
                let s = best_s + (i as f64 - half_span) * spacing;
                let inside = (0.0..=s_max).contains(&s);
                valid.push(inside);
                let c = coord_at(s);
                for a in 0..d {
                    orientations.push(c[a] - target_unwrapped[a]);
                }
                source_pos.push(index_at(s));
            }
            let missing = valid.iter().filter(|v| !**v).count();
            let target: Vec<i64> = target_unwrapped
                .iter()
                .map(|&t| {
                    let n = grid.extent as i64;
                    (t as i64 + n / 2).rem_euclid(n) - n / 2
                })
                .collect();
            entries.push(PlanEntry {
                target,
                orientations,
                source_pos,
                valid,
                missing_frac: missing as f64 / num_sources as f64,
                time: traj_up.times[r.start + u0],
            });
        }
    }
    Ok(GriddingPlan {
        entries,
        grid: *grid,
        dim: d,
        num_sources,
        spacing,
        w_max: DEFAULT_W_MAX,
    })
}

/// One batch of kernel-training data.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// B x feature_width inputs.
    pub features: Array2<f64>,
    /// B x (D C) source values (invalid sources zeroed).
    pub sources: Array2<Complex64>,
    /// B x C target values.
    pub targets: Array2<Complex64>,
}

/// Anything that can stream training batches.
pub trait BatchSource {
    fn num_coils(&self) -> usize;
    fn num_sources(&self) -> usize;
    fn feature_width(&self) -> usize;
    fn next_batch(&mut self, batch: usize) -> TrainingBatch;
}

/// Self-supervised sampler over a calibration region: random continuous
/// target coordinates inside the usable bounds (shrunk by the orientation
/// span), orientation tuples drawn uniformly from the stored set, values by
/// Kaiser-Bessel interpolation (alpha = 2, W = 6).
pub struct CalibrationSampler {
    interp: KspaceInterpolator,
    orientation_set: Vec<(Vec<f64>, Vec<bool>, f64)>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    dim: usize,
    num_sources: usize,
    w_max: f64,
    rng: ChaCha8Rng,
}

impl CalibrationSampler {
    pub fn new(
        cal: &Calibration,
        orientation_set: Vec<(Vec<f64>, Vec<bool>, f64)>,
        dim: usize,
        num_sources: usize,
        w_max: f64,
        seed: u64,
    ) -> Result<Self> {
        if orientation_set.is_empty() {
            return Err(Error::InvalidArgument("empty orientation set".into()));
        }
        let region = usable_calibration_region(cal)?;
        let (clo, chi) = region.coord_bounds(&cal.grid);
        // Per-axis orientation span over the whole set.
        let mut span = vec![0.0f64; dim];
        for (o, _, _) in &orientation_set {
            for (i, &v) in o.iter().enumerate() {
                let a = i % dim;
                span[a] = span[a].max(v.abs());
            }
        }
        let lo: Vec<f64> = (0..dim).map(|a| clo + span[a]).collect();
        let hi: Vec<f64> = (0..dim).map(|a| chi - span[a]).collect();
        if lo.iter().zip(&hi).any(|(l, h)| l >= h) {
            return Err(Error::InvalidArgument(
                "usable calibration region too small for the orientation span".into(),
            ));
        }
        let interp = KspaceInterpolator::new(&cal.kdata[0], &cal.grid, 2.0, 6.0)?;
        Ok(CalibrationSampler {
            interp,
            orientation_set,
            lo,
            hi,
            dim,
            num_sources,
            w_max,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl BatchSource for CalibrationSampler {
    fn num_coils(&self) -> usize {
        self.interp.num_coils()
    }
    fn num_sources(&self) -> usize {
        self.num_sources
    }
    fn feature_width(&self) -> usize {
        self.dim * self.num_sources + 1
    }

    fn next_batch(&mut self, batch: usize) -> TrainingBatch {
        let c = self.num_coils();
        let d = self.dim;
        let ns = self.num_sources;
        let mut features = Array2::zeros((batch, self.feature_width()));
        let mut sources = Array2::zeros((batch, ns * c));
        let mut targets = Array2::zeros((batch, c));
        let mut buf = vec![Complex64::default(); c];
        for j in 0..batch {
            let oi = self.rng.gen_range(0..self.orientation_set.len());
            let (orient, valid, missing) = &self.orientation_set[oi];
            let target: Vec<f64> = (0..d)
                .map(|a| self.lo[a] + (self.hi[a] - self.lo[a]) * self.rng.gen::<f64>())
                .collect();
            for (q, &v) in orient.iter().enumerate() {
                features[[j, q]] = v / self.w_max;
            }
            features[[j, d * ns]] = *missing;
            self.interp.eval(&target, &mut buf);
            for ci in 0..c {
                targets[[j, ci]] = buf[ci];
            }
            for i in 0..ns {
                if valid[i] {
                    let coord: Vec<f64> =
                        (0..d).map(|a| target[a] + orient[i * d + a]).collect();
                    self.interp.eval(&coord, &mut buf);
                    for ci in 0..c {
                        sources[[j, i * c + ci]] = buf[ci];
                    }
                }
                // invalid sources stay zero, matching application
            }
        }
        TrainingBatch { features, sources, targets }
    }
}

/// Deterministically cycling sampler over a frozen set of batches (used by
/// the linear special case whose ridge optimum has a closed form).
pub struct FixedSetSampler {
    pub set: TrainingBatch,
    cursor: usize,
    num_coils: usize,
    num_sources: usize,
}

impl FixedSetSampler {
    pub fn new(set: TrainingBatch, num_coils: usize, num_sources: usize) -> Self {
        FixedSetSampler { set, cursor: 0, num_coils, num_sources }
    }
}

impl BatchSource for FixedSetSampler {
    fn num_coils(&self) -> usize {
        self.num_coils
    }
    fn num_sources(&self) -> usize {
        self.num_sources
    }
    fn feature_width(&self) -> usize {
        self.set.features.ncols()
    }
    fn next_batch(&mut self, batch: usize) -> TrainingBatch {
        let n = self.set.features.nrows();
        let mut features = Array2::zeros((batch, self.set.features.ncols()));
        let mut sources = Array2::zeros((batch, self.set.sources.ncols()));
        let mut targets = Array2::zeros((batch, self.set.targets.ncols()));
        for j in 0..batch {
            let i = (self.cursor + j) % n;
            features.row_mut(j).assign(&self.set.features.row(i));
            sources.row_mut(j).assign(&self.set.sources.row(i));
            targets.row_mut(j).assign(&self.set.targets.row(i));
        }
        self.cursor = (self.cursor + batch) % n;
        TrainingBatch { features, sources, targets }
    }
}

/// One public-facing batch draw (steps 2-4 of the training procedure).
pub fn gen_training_batch(
    cal: &Calibration,
    orientation_set: Vec<(Vec<f64>, Vec<bool>, f64)>,
    batch: usize,
    seed: u64,
) -> Result<TrainingBatch> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let dim = cal.grid.dim;
    let ns = orientation_set[0].1.len();
    let mut sampler = CalibrationSampler::new(cal, orientation_set, dim, ns, DEFAULT_W_MAX, seed)?;
    Ok(sampler.next_batch(batch))
}

/// Training hyperparameters. Defaults follow the reference configuration
/// (Adam 1e-3, L1, 5000 epochs of batch 1024, four hidden layers of 256).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    /// Total learning-rate decay over the run (exponential ramp from `lr` to
    /// `lr * lr_decay`); 1.0 keeps the reference constant-rate schedule.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub loss: Loss,
    pub seed: u64,
}

fn default_lr_decay() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-3,
            lr: 1e-3,
            lr_decay: 1.0,
            epochs: 5000,
            batch: 1024,
            hidden: vec![256, 256, 256, 256],
            loss: Loss::L1,
            seed: 0,
        }
    }
}

/// A trained implicit kernel network.
#[derive(Debug, Clone)]
pub struct KernelNet {
    pub mlp: Mlp,
    pub dim: usize,
    pub num_sources: usize,
    pub num_coils: usize,
    pub w_max: f64,
    /// Extra feature count beyond orientations + indicator (field features).
    pub extra_features: usize,
    /// Scale applied to extra features before the network.
    pub extra_scale: f64,
    /// Per-epoch mean training loss.
    pub telemetry: Vec<f64>,
    /// Per-epoch gradient L2 norm.
    pub telemetry_grad: Vec<f64>,
}

impl KernelNet {
    pub fn feature_width(&self) -> usize {
        self.dim * self.num_sources + 1 + self.extra_features
    }

    /// Kernel for one feature vector: C x (D C).
    pub fn query(&self, features: &[f64]) -> Array2<Complex64> {
        let x = Array2::from_shape_vec((1, features.len()), features.to_vec()).unwrap();
        let out = self.mlp.forward(&x);
        self.reshape_kernel(out.row(0).as_slice().unwrap())
    }

    /// Kernels for a feature matrix (one row per query).
    pub fn query_batch(&self, features: &Array2<f64>) -> Vec<Array2<Complex64>> {
        let out = self.mlp.forward(features);
        (0..features.nrows())
            .map(|j| self.reshape_kernel(out.row(j).as_slice().unwrap()))
            .collect()
    }

    fn reshape_kernel(&self, flat: &[f64]) -> Array2<Complex64> {
        let c = self.num_coils;
        let dc = self.num_sources * c;
        Array2::from_shape_fn((c, dc), |(i, q)| {
            let base = 2 * (i * dc + q);
            Complex64::new(flat[base], flat[base + 1])
        })
    }
}

/// Shared training loop: stochastic minimization of
/// `sum_j loss(G_j s_j - t_j) + lambda ||G_j||_F^2` with `G_j` emitted by the
/// network. Gradients flow through the kernel application into the MLP.
pub fn train_on_source(
    source: &mut dyn BatchSource,
    config: &TrainConfig,
    extra_features: usize,
    extra_scale: f64,
) -> Result<KernelNet> {
    let c = source.num_coils();
    let ns = source.num_sources();
    let feat = source.feature_width();
    let out_width = 2 * ns * c * c;
    let mut arch = vec![feat];
    arch.extend(&config.hidden);
    arch.push(out_width);
    let mut mlp = mlp_init(&arch, config.seed)?;
    let mut adam = AdamState::new(&mlp, config.lr);
    let mut telemetry = Vec::with_capacity(config.epochs);
    let mut telemetry_grad = Vec::with_capacity(config.epochs);

    // Fixed chunking keeps gradient reduction order independent of threads.
    let chunks = 4.min(config.batch.max(1));
    for epoch in 0..config.epochs {
        let batch = source.next_batch(config.batch);
        let b = batch.features.nrows();
        let chunk_len = b.div_ceil(chunks);
        let bounds: Vec<(usize, usize)> = (0..chunks)
            .map(|k| (k * chunk_len, ((k + 1) * chunk_len).min(b)))
            .filter(|(s, e)| s < e)
            .collect();
        let results: Vec<(crate::mlp::Gradients, f64)> = bounds
            .par_iter()
            .map(|&(s, e)| {
                let f = batch.features.slice(ndarray::s![s..e, ..]).to_owned();
                let src = batch.sources.slice(ndarray::s![s..e, ..]).to_owned();
                let tgt = batch.targets.slice(ndarray::s![s..e, ..]).to_owned();
                chunk_grad(&mlp, &f, &src, &tgt, c, ns, config.lambda, config.loss)
            })
            .collect();
        let mut grads = mlp.zeros_like_grad();
        let mut loss_sum = 0.0;
        for (g, l) in &results {
            grads.add_assign(g);
            loss_sum += l;
        }
        if !loss_sum.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch}; config: {config:?}"
            )));
        }
        if config.lr_decay != 1.0 && config.epochs > 1 {
            adam.lr = config.lr
                * config.lr_decay.powf(epoch as f64 / (config.epochs - 1) as f64);
        }
        telemetry.push(loss_sum / b as f64);
        let gnorm: f64 = grads
            .weights
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>())
            .chain(grads.biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()))
            .sum::<f64>()
            .sqrt();
        telemetry_grad.push(gnorm);
        adam.step(&mut mlp, &grads);
    }
    Ok(KernelNet {
        mlp,
        dim: 0, // set by callers that know the geometry
        num_sources: ns,
        num_coils: c,
        w_max: DEFAULT_W_MAX,
        extra_features,
        extra_scale,
        telemetry,
        telemetry_grad,
    })
}

fn chunk_grad(
    mlp: &Mlp,
    features: &Array2<f64>,
    sources: &Array2<Complex64>,
    targets: &Array2<Complex64>,
    c: usize,
    ns: usize,
    lambda: f64,
    loss: Loss,
) -> (crate::mlp::Gradients, f64) {
    let b = features.nrows();
    let dc = ns * c;
    let (out, cache) = mlp.forward_cached(features);
    let mut grad_out = Array2::zeros(out.raw_dim());
    let mut loss_sum = 0.0;
    for j in 0..b {
        let flat = out.row(j);
        // G s - t and the loss subgradient u (complex, per coil).
        for i in 0..c {
            let mut pred = Complex64::default();
            for q in 0..dc {
                let g = Complex64::new(flat[2 * (i * dc + q)], flat[2 * (i * dc + q) + 1]);
                pred += g * sources[[j, q]];
            }
            let r = pred - targets[[j, i]];
            let u = match loss {
                Loss::L1 => {
                    loss_sum += r.re.abs() + r.im.abs();
                    Complex64::new(
                        if r.re > 0.0 { 1.0 } else if r.re < 0.0 { -1.0 } else { 0.0 },
                        if r.im > 0.0 { 1.0 } else if r.im < 0.0 { -1.0 } else { 0.0 },
                    )
                }
                Loss::L2 => {
                    loss_sum += r.norm_sqr();
                    2.0 * r
                }
            };
            // dL/dG[i,q] = u conj(s_q); ridge adds 2 lambda G.
            for q in 0..dc {
                let s = sources[[j, q]];
                let g = Complex64::new(flat[2 * (i * dc + q)], flat[2 * (i * dc + q) + 1]);
                let dg = u * s.conj() + 2.0 * lambda * g;
                grad_out[[j, 2 * (i * dc + q)]] = dg.re;
                grad_out[[j, 2 * (i * dc + q) + 1]] = dg.im;
                loss_sum += lambda * g.norm_sqr();
            }
        }
    }
    (mlp.backward(&cache, &grad_out), loss_sum)
}

/// Loss and parameter gradients of the kernel-training objective on one
/// batch (diagnostics; the training loop uses the same path).
pub fn training_loss_and_grads(
    mlp: &Mlp,
    batch: &TrainingBatch,
    num_coils: usize,
    num_sources: usize,
    lambda: f64,
    loss: Loss,
) -> (f64, crate::mlp::Gradients) {
    let (g, l) = chunk_grad(
        mlp,
        &batch.features,
        &batch.sources,
        &batch.targets,
        num_coils,
        num_sources,
        lambda,
        loss,
    );
    (l, g)
}

/// Train the implicit kernel network on a calibration region for the
/// orientation set of a gridding plan.
pub fn train_kernelnet(
    cal: &Calibration,
    plan: &GriddingPlan,
    config: &TrainConfig,
) -> Result<KernelNet> {
    let mut sampler = CalibrationSampler::new(
        cal,
        plan.orientation_set(),
        plan.dim,
        plan.num_sources,
        plan.w_max,
        config.seed,
    )?;
    let mut net = train_on_source(&mut sampler, config, 0, 1.0)?;
    net.dim = plan.dim;
    net.w_max = plan.w_max;
    Ok(net)
}

/// Query the kernels for every plan entry (cacheable: the expensive part of
/// application, independent of the data).
pub fn query_plan_kernels(net: &KernelNet, plan: &GriddingPlan) -> Result<Vec<Array2<Complex64>>> {
    if net.extra_features != 0 {
        return Err(Error::InvalidArgument(
            "field-conditioned networks need correct_and_grid".into(),
        ));
    }
    if net.feature_width() != plan.feature_width() {
        return Err(Error::ShapeMismatch("network feature width vs plan".into()));
    }
    let m = plan.entries.len();
    let chunk = 512;
    let kernels: Vec<Vec<Array2<Complex64>>> = (0..m)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idxs| {
            let mut features = Array2::zeros((idxs.len(), plan.feature_width()));
            for (row, &i) in idxs.iter().enumerate() {
                let f = plan.orientation_features(&plan.entries[i]);
                for (q, &v) in f.iter().enumerate() {
                    features[[row, q]] = v;
                }
            }
            net.query_batch(&features)
        })
        .collect();
    Ok(kernels.into_iter().flatten().collect())
}

/// Count of plan entries whose scaled features leave [-1, 1] (orientations
/// outside the training distribution; logged, not fatal).
pub fn out_of_distribution_count(plan: &GriddingPlan) -> usize {
    plan.entries
        .iter()
        .filter(|e| {
            plan.orientation_features(e)
                .iter()
                .any(|&v| v.abs() > 1.0 + 1e-9)
        })
        .count()
}

/// Interpolate the D source values of one entry from the upsampled data.
fn entry_sources(
    data_up: &Array2<Complex64>,
    entry: &PlanEntry,
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

/// Apply precomputed kernels: estimate each entry's Cartesian target and
/// average collisions (same policy as classic GROG).
pub fn igrog_grid_with_kernels(
    data_up: &Array2<Complex64>,
    plan: &GriddingPlan,
    kernels: &[Array2<Complex64>],
    weights: Option<&[f64]>,
) -> Result<GriddedKspace> {
    let c = data_up.nrows();
    if kernels.len() != plan.entries.len() {
        return Err(Error::ShapeMismatch("kernel count vs plan entries".into()));
    }
    if let Some(w) = weights {
        if w.len() != plan.entries.len() {
            return Err(Error::ShapeMismatch("weights vs plan entries".into()));
        }
    }
    let d = plan.dim;
    let mut slots: std::collections::HashMap<Vec<i64>, usize> = std::collections::HashMap::new();
    let mut uniq: Vec<Vec<i64>> = Vec::new();
    let mut acc: Vec<Vec<Complex64>> = Vec::new();
    let mut wsum: Vec<f64> = Vec::new();
    for (i, entry) in plan.entries.iter().enumerate() {
        let svec = entry_sources(data_up, entry, c);
        let g = &kernels[i];
        let w = weights.map(|w| w[i]).unwrap_or(1.0);
        let slot = *slots.entry(entry.target.clone()).or_insert_with(|| {
            uniq.push(entry.target.clone());
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
    for (s, uc) in uniq.iter().enumerate() {
        for a in 0..d {
            coords[[s, a]] = uc[a];
        }
        let wn = if wsum[s] > 0.0 { wsum[s] } else { 1.0 };
        for ci in 0..c {
            out[[ci, s]] = acc[s][ci] / wn;
        }
    }
    Ok(GriddedKspace { grid: plan.grid, data: out, coords, weight_sum: wsum })
}

/// Query kernels and grid in one call.
pub fn igrog_grid(
    data_up: &Array2<Complex64>,
    plan: &GriddingPlan,
    net: &KernelNet,
    weights: Option<&[f64]>,
) -> Result<GriddedKspace> {
    let kernels = query_plan_kernels(net, plan)?;
    igrog_grid_with_kernels(data_up, plan, &kernels, weights)
}

/// Persist a kernel network: weight/bias arrays plus a JSON descriptor.
pub fn save_kernelnet(dir: &std::path::Path, net: &KernelNet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (l, (w, b)) in net.mlp.weights.iter().zip(&net.mlp.biases).enumerate() {
        let warr = w
            .mapv(|v| Complex64::new(v, 0.0))
            .into_dyn();
        crate::io::write_array(dir.join(format!("w{l}.carr")), &warr, crate::io::Precision::C128)?;
        let barr = b.mapv(|v| Complex64::new(v, 0.0)).insert_axis(Axis(0)).into_dyn();
        crate::io::write_array(dir.join(format!("b{l}.carr")), &barr, crate::io::Precision::C128)?;
    }
    let meta = serde_json::json!({
        "layers": net.mlp.num_layers(),
        "dim": net.dim,
        "num_sources": net.num_sources,
        "num_coils": net.num_coils,
        "w_max": net.w_max,
        "extra_features": net.extra_features,
        "extra_scale": net.extra_scale,
    });
    std::fs::write(dir.join("net.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    crate::io::write_real_vec(dir.join("telemetry.carr"), &net.telemetry)?;
    crate::io::write_real_vec(dir.join("telemetry_grad.carr"), &net.telemetry_grad)?;
    Ok(())
}

pub fn load_kernelnet(dir: &std::path::Path) -> Result<KernelNet> {
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("net.json"))?)
            .map_err(|e| Error::Format(format!("net.json: {e}")))?;
    let layers = meta["layers"].as_u64().ok_or_else(|| Error::Format("missing layers".into()))? as usize;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        let w = crate::io::read_array(dir.join(format!("w{l}.carr")))?;
        let rows = w.shape()[0];
        let cols = w.shape()[1];
        weights.push(Array2::from_shape_fn((rows, cols), |(i, j)| w[[i, j]].re));
        let b = crate::io::read_array(dir.join(format!("b{l}.carr")))?;
        biases.push(ndarray::Array1::from_shape_fn(b.shape()[1], |i| b[[0, i]].re));
    }
    let telemetry = crate::io::read_real_vec(dir.join("telemetry.carr")).unwrap_or_default();
    let telemetry_grad =
        crate::io::read_real_vec(dir.join("telemetry_grad.carr")).unwrap_or_default();
    Ok(KernelNet {
        mlp: Mlp { weights, biases, activation: crate::mlp::Activation::Relu },
        dim: meta["dim"].as_u64().unwrap_or(2) as usize,
        num_sources: meta["num_sources"].as_u64().unwrap_or(3) as usize,
        num_coils: meta["num_coils"].as_u64().unwrap_or(1) as usize,
        w_max: meta["w_max"].as_f64().unwrap_or(DEFAULT_W_MAX),
        extra_features: meta["extra_features"].as_u64().unwrap_or(0) as usize,
        extra_scale: meta["extra_scale"].as_f64().unwrap_or(1.0),
        telemetry,
        telemetry_grad,
    })
}


#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::mlp::{mlp_init, Loss};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pipeline loss for finite differences: forward -> kernel reshape ->
    /// apply to sources -> loss + ridge.
    fn pipeline_loss(
        mlp: &crate::mlp::Mlp,
        features: &Array2<f64>,
        sources: &Array2<Complex64>,
        targets: &Array2<Complex64>,
        c: usize,
        ns: usize,
        lambda: f64,
        loss: Loss,
    ) -> f64 {
        let out = mlp.forward(features);
        let dc = ns * c;
        let mut total = 0.0;
        for j in 0..features.nrows() {
            let flat = out.row(j);
            for i in 0..c {
                let mut pred = Complex64::default();
                for q in 0..dc {
                    let g = Complex64::new(flat[2 * (i * dc + q)], flat[2 * (i * dc + q) + 1]);
                    pred += g * sources[[j, q]];
                }
                let r = pred - targets[[j, i]];
                total += match loss {
                    Loss::L1 => r.re.abs() + r.im.abs(),
                    Loss::L2 => r.norm_sqr(),
                };
                for q in 0..dc {
                    let g = Complex64::new(flat[2 * (i * dc + q)], flat[2 * (i * dc + q) + 1]);
                    total += lambda * g.norm_sqr();
                }
            }
        }
        total
    }

    #[test]
    fn full_pipeline_gradient_matches_finite_differences() {
        let (c, ns, d) = (2usize, 2usize, 2usize);
        let feat_w = d * ns + 1;
        let out_w = 2 * ns * c * c;
        let mlp = mlp_init(&[feat_w, 12, 10, out_w], 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let b = 6;
        let features = Array2::from_shape_fn((b, feat_w), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let sources = Array2::from_shape_fn((b, ns * c), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let targets = Array2::from_shape_fn((b, c), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let lambda = 3e-3;
        for loss in [Loss::L1, Loss::L2] {
            let (grads, _) = super::chunk_grad(&mlp, &features, &sources, &targets, c, ns, lambda, loss);
            let h = 1e-6;
            let mut checked = 0;
            let mut max_rel: f64 = 0.0;
            let mut trial = 0;
            while checked < 50 && trial < 500 {
                trial += 1;
                let l = rng.gen_range(0..mlp.num_layers());
                let i = rng.gen_range(0..mlp.weights[l].nrows());
                let j = rng.gen_range(0..mlp.weights[l].ncols());
                let mut plus = mlp.clone();
                plus.weights[l][[i, j]] += h;
                let mut minus = mlp.clone();
                minus.weights[l][[i, j]] -= h;
                let fp = pipeline_loss(&plus, &features, &sources, &targets, c, ns, lambda, loss);
                let fm = pipeline_loss(&minus, &features, &sources, &targets, c, ns, lambda, loss);
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.weights[l][[i, j]];
                if fd.abs() < 1e-7 && an.abs() < 1e-7 {
                    continue; // dead path
                }
                let rel = (fd - an).abs() / an.abs().max(1e-10);
                max_rel = max_rel.max(rel);
                checked += 1;
            }
            assert_eq!(checked, 50, "not enough live parameters");
            assert!(max_rel <= 1e-4, "{loss:?}: max relative FD error {max_rel}");
        }
    }
}
