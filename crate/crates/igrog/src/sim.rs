//! Ground-truth generators and the brute-force forward-model oracle.
//!
//! `brute_force_forward` evaluates the signal equation by direct summation
//! over every voxel and sample, with exact per-sample field phase (no
//! segmentation). It is deliberately slow and approximation-free: every fast
//! operator in the crate is tested against it.

use crate::array::{CoilMaps, ComplexArray, Grid, Trajectory};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

/// One ellipse of an analytic phantom: center and half-axes in normalized
/// coordinates ([-1, 1] spans the FOV), angle in radians, additive intensity.
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let (s, c) = self.angle.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.axes[0]).powi(2) + (yr / self.axes[1]).powi(2) <= 1.0
    }
}

/// Analytic ellipse phantom plus its rendering on a grid.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub ellipses: Vec<Ellipse>,
    pub image: ComplexArray,
}

/// The canonical 10-ellipse head phantom table (original intensities, so
/// rendered values lie in [0, 2]).
pub fn shepp_logan_ellipses() -> Vec<Ellipse> {
    let deg = PI / 180.0;
    let t = [
        (2.00, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.98, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        (-0.02, 0.11, 0.31, 0.22, 0.0, -18.0),
        (-0.02, 0.16, 0.41, -0.22, 0.0, 18.0),
        (0.01, 0.21, 0.25, 0.0, 0.35, 0.0),
        (0.01, 0.046, 0.046, 0.0, 0.1, 0.0),
        (0.01, 0.046, 0.046, 0.0, -0.1, 0.0),
        (0.01, 0.046, 0.023, -0.08, -0.605, 0.0),
        (0.01, 0.023, 0.023, 0.0, -0.605, 0.0),
        (0.01, 0.023, 0.046, 0.06, -0.605, 0.0),
    ];
    t.iter()
        .map(|&(i, a, b, x0, y0, ang)| Ellipse {
            center: [x0, y0],
            axes: [a, b],
            angle: ang * deg,
            intensity: i,
        })
        .collect()
}

/// Render the Shepp-Logan phantom on a 2D grid. The value at a voxel is the
/// sum of intensities of the ellipses containing its center.
pub fn shepp_logan(grid: &Grid) -> Result<Phantom> {
    if grid.dim != 2 {
        return Err(Error::InvalidArgument("shepp_logan requires a 2D grid".into()));
    }
    let ellipses = shepp_logan_ellipses();
    let n = grid.extent;
    let half = (n / 2) as f64;
    let image = ArrayD::from_shape_fn(IxDyn(&[n, n]), |idx| {
        let x = (idx[0] as f64 - half) / half;
        let y = (idx[1] as f64 - half) / half;
        let v: f64 = ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum();
        Complex64::new(v, 0.0)
    });
    Ok(Phantom { ellipses, image })
}

/// Synthetic smooth coil maps: Gaussian magnitude profiles centered on a
/// circle (d=2) or Fibonacci sphere (d=3) of radius 0.45 FOV, gentle linear
/// phase ramps, root-sum-of-squares normalized to 1. A single coil reduces to
/// the identity map.
pub fn synth_coil_maps(grid: &Grid, num_coils: usize, seed: u64) -> Result<CoilMaps> {
    if num_coils < 1 {
        return Err(Error::InvalidArgument("need at least one coil".into()));
    }
    let n = grid.extent;
    let nf = n as f64;
    let d = grid.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let radius = 0.45 * nf;
    let centers: Vec<Vec<f64>> = (0..num_coils)
        .map(|c| {
            if d == 2 {
                let ang = 2.0 * PI * c as f64 / num_coils as f64;
                vec![radius * ang.cos(), radius * ang.sin()]
            } else {
                // Fibonacci sphere points.
                let golden = PI * (3.0 - 5.0_f64.sqrt());
                let z = if num_coils == 1 { 0.0 } else { 1.0 - 2.0 * c as f64 / (num_coils - 1) as f64 };
                let rho = (1.0 - z * z).max(0.0).sqrt();
                let ang = golden * c as f64;
                vec![radius * rho * ang.cos(), radius * rho * ang.sin(), radius * z]
            }
        })
        .collect();
    // Phase ramps in cycles per FOV, zero for a single coil.
    let ramps: Vec<Vec<f64>> = (0..num_coils)
        .map(|_| {
            (0..d)
                .map(|_| if num_coils == 1 { 0.0 } else { rng.gen::<f64>() - 0.5 })
                .collect()
        })
        .collect();

    let sigma = 0.4 * nf;
    let half = (n / 2) as f64;
    let mut shape = vec![num_coils];
    shape.extend(vec![n; d]);
    let mut maps = ArrayD::<Complex64>::zeros(IxDyn(&shape));
    let spatial: Vec<usize> = vec![n; d];
    let total: usize = spatial.iter().product();
    for v in 0..total {
        let mut rem = v;
        let mut r = vec![0f64; d];
        for a in (0..d).rev() {
            r[a] = (rem % n) as f64 - half;
            rem /= n;
        }
        let mut mags = vec![0f64; num_coils];
        let mut rss = 0.0;
        for c in 0..num_coils {
            let d2: f64 = r.iter().zip(&centers[c]).map(|(ri, ci)| (ri - ci).powi(2)).sum();
            let g = (-d2 / (2.0 * sigma * sigma)).exp();
            mags[c] = g;
            rss += g * g;
        }
        let rss = rss.sqrt();
        for c in 0..num_coils {
            let phase: f64 = 2.0 * PI * r.iter().zip(&ramps[c]).map(|(ri, wi)| ri * wi).sum::<f64>() / nf;
            let val = Complex64::from_polar(mags[c] / rss, phase);
            let mut idx = vec![c];
            let mut rem = v;
            let mut ii = vec![0usize; d];
            for a in (0..d).rev() {
                ii[a] = rem % n;
                rem /= n;
            }
            idx.extend(ii);
            maps[IxDyn(&idx)] = val;
        }
    }
    CoilMaps::new(maps)
}

/// Variable-density spiral: radius `(N/2) tau^p`, interleaved shots, turns
/// chosen so the edge radial gap of the combined shot set equals `R delta_k`.
pub fn vds_spiral(
    grid: &Grid,
    shots: usize,
    undersampling: f64,
    density_power: f64,
    samples_per_shot: usize,
    duration: f64,
) -> Result<Trajectory> {
    if grid.dim != 2 {
        return Err(Error::InvalidArgument("vds_spiral generates 2D trajectories".into()));
    }
    if shots < 1 || samples_per_shot < 4 {
        return Err(Error::InvalidArgument("need shots >= 1 and samples_per_shot >= 4".into()));
    }
    if undersampling < 1.0 || density_power <= 0.0 || duration <= 0.0 {
        return Err(Error::InvalidArgument("need R >= 1, density_power > 0, duration > 0".into()));
    }
    let n = grid.extent as f64;
    let rmax = 0.5 * n * (1.0 - 1e-7);
    let turns = n * density_power / (2.0 * undersampling * shots as f64);

    let m = shots * samples_per_shot;
    let mut coords = Array2::zeros((m, 2));
    let mut times = Vec::with_capacity(m);
    let mut readout_id = Vec::with_capacity(m);
    let mut row = 0;
    for s in 0..shots {
        for i in 0..samples_per_shot {
            let tau = i as f64 / (samples_per_shot - 1) as f64;
            let r = rmax * tau.powf(density_power);
            let theta = 2.0 * PI * (turns * tau + s as f64 / shots as f64);
            coords[[row, 0]] = r * theta.cos();
            coords[[row, 1]] = r * theta.sin();
            times.push(tau * duration);
            readout_id.push(s);
            row += 1;
        }
    }
    let mut traj = Trajectory::new(coords, times, readout_id)?;
    traj.accel = undersampling;
    traj.validate_within(grid)?;
    Ok(traj)
}

/// Temporal model of the phase decomposition `phi(r, t) = phi(r) . alpha(t)`.
#[derive(Debug, Clone)]
pub enum AlphaModel {
    /// P = 1, alpha(t) = t. Spatial basis in Hz (B0-type maps).
    Linear,
    /// Sampled alpha rows, linearly interpolated in time.
    Sampled { times: Vec<f64>, values: Array2<f64> },
}

/// Field imperfection model: P spatial basis maps and temporal coefficients,
/// with `phi(r, t) = sum_p phi_p(r) alpha_p(t)` in cycles.
#[derive(Debug, Clone)]
pub struct FieldMap {
    pub basis: Vec<ArrayD<f64>>,
    pub alpha: AlphaModel,
}

impl FieldMap {
    pub fn new(basis: Vec<ArrayD<f64>>, alpha: AlphaModel) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::InvalidArgument("field map needs at least one basis term".into()));
        }
        if let AlphaModel::Linear = alpha {
            if basis.len() != 1 {
                return Err(Error::InvalidArgument("linear alpha model implies P = 1".into()));
            }
        }
        if let AlphaModel::Sampled { times, values } = &alpha {
            if values.nrows() != times.len() || values.ncols() != basis.len() {
                return Err(Error::ShapeMismatch("sampled alphas must be times x P".into()));
            }
        }
        Ok(FieldMap { basis, alpha })
    }

    pub fn num_terms(&self) -> usize {
        self.basis.len()
    }

    /// Temporal coefficient rows at the requested times (M x P).
    pub fn alphas_at(&self, times: &[f64]) -> Array2<f64> {
        let p = self.num_terms();
        match &self.alpha {
            AlphaModel::Linear => {
                Array2::from_shape_fn((times.len(), 1), |(i, _)| times[i])
            }
            AlphaModel::Sampled { times: ts, values } => {
                Array2::from_shape_fn((times.len(), p), |(i, j)| {
                    interp_linear(ts, &values.column(j).to_vec(), times[i])
                })
            }
        }
    }

    /// Pointwise phase map (cycles) for one temporal coefficient row.
    pub fn phase_map(&self, alpha_row: &[f64]) -> ArrayD<f64> {
        let mut out = ArrayD::zeros(self.basis[0].raw_dim());
        for (p, b) in self.basis.iter().enumerate() {
            out.zip_mut_with(b, |o, &v| *o += alpha_row[p] * v);
        }
        out
    }
}

fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let j = xs.partition_point(|&v| v <= x).min(xs.len() - 1);
    let (x0, x1) = (xs[j - 1], xs[j]);
    let w = (x - x0) / (x1 - x0);
    ys[j - 1] * (1.0 - w) + ys[j] * w
}

/// Coefficients of a spatial polynomial up to order 2, evaluated on physical
/// coordinates (units of FOV; the most negative corner sits exactly at
/// -FOV/2). All coefficients in Hz.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct QuadraticCoeffs {
    pub constant: f64,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
    #[serde(default)]
    pub z: f64,
    #[serde(default)]
    pub xx: f64,
    #[serde(default)]
    pub xy: f64,
    #[serde(default)]
    pub yy: f64,
    #[serde(default)]
    pub xz: f64,
    #[serde(default)]
    pub yz: f64,
    #[serde(default)]
    pub zz: f64,
}

/// Static polynomial field map: P = 1, `phi_1(r)` the polynomial in Hz,
/// `alpha_1(t) = t`.
pub fn quadratic_field_map(grid: &Grid, coeffs: &QuadraticCoeffs) -> Result<FieldMap> {
    let n = grid.extent;
    let half = (n / 2) as f64;
    let scale = grid.fov / n as f64;
    let shape = grid.shape();
    let d = grid.dim;
    let map = ArrayD::from_shape_fn(IxDyn(&shape), |idx| {
        let x = (idx[0] as f64 - half) * scale;
        let y = (idx[1] as f64 - half) * scale;
        let z = if d == 3 { (idx[2] as f64 - half) * scale } else { 0.0 };
        coeffs.constant
            + coeffs.x * x
            + coeffs.y * y
            + coeffs.z * z
            + coeffs.xx * x * x
            + coeffs.xy * x * y
            + coeffs.yy * y * y
            + coeffs.xz * x * z
            + coeffs.yz * y * z
            + coeffs.zz * z * z
    });
    FieldMap::new(vec![map], AlphaModel::Linear)
}

/// Direct evaluation of the signal equation:
/// `b_c(t_i) = sum_r m(r) s_c(r) exp(-j 2 pi k(t_i).r / N) exp(-j 2 pi phi(r, t_i))`.
///
/// O(C M N^d); parallel over samples, each sample summed in fixed voxel order
/// so results are run-to-run identical.
pub fn brute_force_forward(
    img: &ComplexArray,
    maps: &CoilMaps,
    traj: &Trajectory,
    field: Option<&FieldMap>,
) -> Result<Array2<Complex64>> {
    let d = img.ndim();
    if maps.spatial_shape() != img.shape() {
        return Err(Error::ShapeMismatch(format!(
            "maps spatial shape {:?} vs image {:?}",
            maps.spatial_shape(),
            img.shape()
        )));
    }
    if traj.dim() != d {
        return Err(Error::ShapeMismatch("trajectory dim vs image dim".into()));
    }
    let n = img.shape()[0];
    let half = (n / 2) as f64;
    let num_coils = maps.num_coils();
    let m = traj.num_samples();
    let total = img.len();

    let img_flat: Vec<Complex64> = img.iter().copied().collect();
    let maps_flat: Vec<Vec<Complex64>> = (0..num_coils)
        .map(|c| maps.maps.index_axis(ndarray::Axis(0), c).iter().copied().collect())
        .collect();
    // Voxel coordinates per axis, decoded once.
    let coords_per_voxel: Vec<Vec<f64>> = {
        let mut v = vec![vec![0f64; d]; total];
        for (lin, rv) in v.iter_mut().enumerate() {
            let mut rem = lin;
            for a in (0..d).rev() {
                rv[a] = (rem % n) as f64 - half;
                rem /= n;
            }
        }
        v
    };
    let alphas = field.map(|f| f.alphas_at(&traj.times));
    let basis_flat: Option<Vec<Vec<f64>>> =
        field.map(|f| f.basis.iter().map(|b| b.iter().copied().collect()).collect());

    let mut out = Array2::zeros((num_coils, m));
    let cols: Vec<Vec<Complex64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let k = traj.coords.row(i);
            let mut acc = vec![Complex64::default(); num_coils];
            for v in 0..total {
                let mv = img_flat[v];
                if mv == Complex64::default() && field.is_none() {
                    // still cheap enough to skip exact zeros
                }
                let rv = &coords_per_voxel[v];
                let mut phase: f64 = 0.0;
                for a in 0..d {
                    phase += k[a] * rv[a];
                }
                phase /= n as f64;
                if let (Some(basis), Some(al)) = (&basis_flat, &alphas) {
                    for (p, b) in basis.iter().enumerate() {
                        phase += b[v] * al[[i, p]];
                    }
                }
                let e = Complex64::from_polar(1.0, -2.0 * PI * phase);
                let me = mv * e;
                for c in 0..num_coils {
                    acc[c] += me * maps_flat[c][v];
                }
            }
            acc
        })
        .collect();
    for (i, col) in cols.into_iter().enumerate() {
        for c in 0..num_coils {
            out[[c, i]] = col[c];
        }
    }
    Ok(out)
}

/// Add i.i.d. circular complex Gaussian noise, std `sigma` per real/imag
/// component, deterministic under `seed`.
pub fn add_noise(data: &Array2<Complex64>, sigma: f64, seed: u64) -> Array2<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    for v in out.iter_mut() {
        let (n1, n2) = gauss_pair(&mut rng);
        *v += Complex64::new(sigma * n1, sigma * n2);
    }
    out
}

/// One Box-Muller pair of standard normals.
pub fn gauss_pair(rng: &mut impl Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * PI * u2).sin_cos();
    (r * c, r * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Grid;

    fn grid2(n: usize) -> Grid {
        Grid::new(2, n, 1.0).unwrap()
    }

    fn ones_maps(grid: &Grid, c: usize) -> CoilMaps {
        let mut shape = vec![c];
        shape.extend(grid.shape());
        CoilMaps::new(ArrayD::from_elem(IxDyn(&shape), Complex64::new(1.0, 0.0))).unwrap()
    }

    #[test]
    fn shepp_logan_background_and_center() {
        let g = grid2(64);
        let p = shepp_logan(&g).unwrap();
        // Corner voxel is outside the outer ellipse.
        assert_eq!(p.image[[0, 0]], Complex64::default());
        // Independent point-in-ellipse evaluation at the exact center.
        let expect: f64 = shepp_logan_ellipses()
            .iter()
            .filter(|e| e.contains(0.0, 0.0))
            .map(|e| e.intensity)
            .sum();
        assert!((expect - 1.02).abs() < 1e-12, "table check");
        let center = p.image[[32, 32]];
        assert!((center.re - expect).abs() < 1e-12);
    }

    #[test]
    fn shepp_logan_two_resolution_consistency() {
        let hi = shepp_logan(&grid2(256)).unwrap().image;
        let lo = shepp_logan(&grid2(128)).unwrap().image;
        let mut max_diff_interior: f64 = 0.0;
        let mut max_diff_edge: f64 = 0.0;
        for i in 0..128 {
            for j in 0..128 {
                let block = (hi[[2 * i, 2 * j]]
                    + hi[[2 * i + 1, 2 * j]]
                    + hi[[2 * i, 2 * j + 1]]
                    + hi[[2 * i + 1, 2 * j + 1]])
                    / 4.0;
                let d = (block - lo[[i, j]]).norm();
                // Edge pixels are those whose 2x2 block is not uniform.
                let vals = [
                    hi[[2 * i, 2 * j]].re,
                    hi[[2 * i + 1, 2 * j]].re,
                    hi[[2 * i, 2 * j + 1]].re,
                    hi[[2 * i + 1, 2 * j + 1]].re,
                ];
                let uniform = vals.iter().all(|&v| (v - vals[0]).abs() < 1e-15);
                if uniform {
                    max_diff_interior = max_diff_interior.max(d);
                } else {
                    max_diff_edge = max_diff_edge.max(d);
                }
            }
        }
        // Away from ellipse boundaries the two renders agree exactly.
        assert!(max_diff_interior <= 1e-12, "interior diff {max_diff_interior}");
        // Boundary pixels differ by at most the largest local intensity step.
        assert!(max_diff_edge <= 2.0, "edge diff {max_diff_edge}");
    }

    #[test]
    fn coil_maps_rss_and_smoothness() {
        let g = grid2(128);
        let maps = synth_coil_maps(&g, 8, 7).unwrap();
        let c = maps.num_coils();
        // RSS over coils is 1 at every voxel.
        for v in 0..g.num_voxels() {
            let i = v / 128;
            let j = v % 128;
            let rss: f64 = (0..c).map(|ci| maps.maps[[ci, i, j]].norm_sqr()).sum();
            assert!((rss.sqrt() - 1.0).abs() < 1e-12);
        }
        // Smoothness: voxel-to-voxel magnitude step stays small.
        let mut max_step: f64 = 0.0;
        for ci in 0..c {
            for i in 0..128 {
                for j in 0..127 {
                    let a = maps.maps[[ci, i, j]].norm();
                    let b = maps.maps[[ci, i, j + 1]].norm();
                    max_step = max_step.max((a - b).abs());
                    let a2 = maps.maps[[ci, j, i]].norm();
                    let b2 = maps.maps[[ci, j + 1, i]].norm();
                    max_step = max_step.max((a2 - b2).abs());
                }
            }
        }
        assert!(max_step <= 0.1, "max step {max_step}");
    }

    #[test]
    fn single_coil_map_is_identity() {
        let g = grid2(32);
        let maps = synth_coil_maps(&g, 1, 3).unwrap();
        for v in maps.maps.iter() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn spiral_geometry() {
        let g = Grid::new(2, 256, 1.0).unwrap();
        let shots = 16;
        let traj = vds_spiral(&g, shots, 2.0, 1.5, 600, 5e-3).unwrap();
        // First sample of every shot is the k-space center.
        for r in traj.readout_ranges() {
            let k = traj.coords.row(r.start);
            assert!(k[0].abs() < 1e-12 && k[1].abs() < 1e-12);
        }
        // Max radius reaches (N/2)(1 - eps), eps <= 1e-6.
        let rmax = traj
            .coords
            .rows()
            .into_iter()
            .map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt())
            .fold(0.0f64, f64::max);
        assert!(rmax <= 128.0 && rmax >= 128.0 * (1.0 - 1e-6), "rmax {rmax}");

        // Radial gap near the edge ~ R delta_k: collect the radii where each
        // arc crosses a fixed ray, then difference adjacent crossings around
        // r = 0.9 N/2. A dense trajectory keeps the crossing interpolation
        // accurate.
        let dense = vds_spiral(&g, shots, 2.0, 1.5, 4000, 5e-3).unwrap();
        let ray = 0.3f64;
        let mut crossings = Vec::new();
        for range in dense.readout_ranges() {
            let mut prev: Option<(f64, f64)> = None; // (angle - ray) mod 2pi centered, radius
            for i in range {
                let (x, y) = (dense.coords[[i, 0]], dense.coords[[i, 1]]);
                let r = (x * x + y * y).sqrt();
                if r < 1.0 {
                    continue;
                }
                let mut da = (y.atan2(x) - ray) % (2.0 * PI);
                if da > PI {
                    da -= 2.0 * PI;
                }
                if da < -PI {
                    da += 2.0 * PI;
                }
                if let Some((pda, pr)) = prev {
                    if pda < 0.0 && da >= 0.0 && da - pda < 1.0 {
                        let w = -pda / (da - pda);
                        crossings.push(pr * (1.0 - w) + r * w);
                    }
                }
                prev = Some((da, r));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gaps: Vec<f64> = crossings
            .windows(2)
            .filter(|w| w[0] > 0.85 * 128.0 && w[1] < 0.95 * 128.0)
            .map(|w| w[1] - w[0])
            .collect();
        assert!(gaps.len() > 3, "not enough crossings: {}", gaps.len());
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean - 2.0).abs() <= 0.4, "mean radial gap {mean}");
    }

    #[test]
    fn quadratic_map_values() {
        let g = Grid::new(2, 64, 0.24).unwrap();
        let zero = quadratic_field_map(&g, &QuadraticCoeffs::default()).unwrap();
        assert!(zero.basis[0].iter().all(|&v| v == 0.0));

        let uni = quadratic_field_map(&g, &QuadraticCoeffs { constant: 50.0, ..Default::default() }).unwrap();
        assert!(uni.basis[0].iter().all(|&v| (v - 50.0).abs() < 1e-12));

        let a = 120.0;
        let q = quadratic_field_map(&g, &QuadraticCoeffs { xx: a, yy: a, ..Default::default() }).unwrap();
        let corner = q.basis[0][[0, 0]];
        let expect = 2.0 * a * (0.24f64 / 2.0).powi(2);
        assert!((corner - expect).abs() < 1e-12, "{corner} vs {expect}");
    }

    #[test]
    fn brute_force_delta_and_dc() {
        let g = grid2(16);
        let maps = ones_maps(&g, 1);
        // Delta at the grid center: b(k) = 1 for all samples.
        let mut img = ArrayD::zeros(IxDyn(&[16, 16]));
        img[[8, 8]] = Complex64::new(1.0, 0.0);
        let coords = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 3.2, -1.7, -7.9, 7.3]).unwrap();
        let traj = Trajectory::new(coords, vec![0.0, 1e-5, 2e-5], vec![0, 0, 0]).unwrap();
        let b = brute_force_forward(&img, &maps, &traj, None).unwrap();
        for v in b.iter() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        // Constant image sampled at k = 0: b = N^d.
        let img1 = ArrayD::from_elem(IxDyn(&[16, 16]), Complex64::new(1.0, 0.0));
        let coords = Array2::zeros((1, 2));
        let traj = Trajectory::new(coords, vec![0.0], vec![0]).unwrap();
        let b = brute_force_forward(&img1, &maps, &traj, None).unwrap();
        assert!((b[[0, 0]] - Complex64::new(256.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn brute_force_linearity() {
        let g = grid2(12);
        let maps = synth_coil_maps(&g, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m1 = ArrayD::from_shape_fn(IxDyn(&[12, 12]), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let m2 = ArrayD::from_shape_fn(IxDyn(&[12, 12]), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let coords = Array2::from_shape_fn((20, 2), |_| 5.9 * (rng.gen::<f64>() - 0.5));
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 1e-5).collect();
        let traj = Trajectory::new(coords, times, vec![0; 20]).unwrap();
        let sum = &m1 + &m2;
        let b1 = brute_force_forward(&m1, &maps, &traj, None).unwrap();
        let b2 = brute_force_forward(&m2, &maps, &traj, None).unwrap();
        let bs = brute_force_forward(&sum, &maps, &traj, None).unwrap();
        let mut max_rel: f64 = 0.0;
        for ((a, b), s) in b1.iter().zip(b2.iter()).zip(bs.iter()) {
            max_rel = max_rel.max((a + b - s).norm() / s.norm().max(1e-12));
        }
        assert!(max_rel < 1e-12);
    }

    #[test]
    fn shift_theorem() {
        // Translating the image by one voxel multiplies sample k by
        // exp(-j 2 pi k . e / N) (circular shift, exact).
        let g = grid2(12);
        let maps = ones_maps(&g, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Zero a two-voxel boundary ring so the circular shift below is a
        // pure translation (no wrap-around content) for non-integer k.
        let img = ArrayD::from_shape_fn(IxDyn(&[12, 12]), |idx| {
            if idx[0] < 2 || idx[0] >= 10 || idx[1] < 2 || idx[1] >= 10 {
                Complex64::default()
            } else {
                Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            }
        });
        // Shift along axis 0 by +1 voxel, wrapping.
        let shifted = ArrayD::from_shape_fn(IxDyn(&[12, 12]), |idx| {
            img[[(idx[0] + 11) % 12, idx[1]]]
        });
        let coords = Array2::from_shape_fn((15, 2), |_| 5.9 * (rng.gen::<f64>() - 0.5));
        let times: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let traj = Trajectory::new(coords.clone(), times, vec![0; 15]).unwrap();
        let b0 = brute_force_forward(&img, &maps, &traj, None).unwrap();
        let b1 = brute_force_forward(&shifted, &maps, &traj, None).unwrap();
        let mut max_rel: f64 = 0.0;
        for i in 0..15 {
            let k = coords.row(i);
            let expect = b0[[0, i]] * Complex64::from_polar(1.0, -2.0 * PI * k[0] / 12.0);
            max_rel = max_rel.max((b1[[0, i]] - expect).norm() / expect.norm().max(1e-12));
        }
        assert!(max_rel <= 1e-10, "shift theorem violated: {max_rel}");
    }

    #[test]
    fn parseval_full_cartesian() {
        let g = grid2(8);
        let maps = synth_coil_maps(&g, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let mut coords = Array2::zeros((64, 2));
        for (i, (kx, ky)) in (0..8).flat_map(|a| (0..8).map(move |b| (a, b))).enumerate() {
            coords[[i, 0]] = kx as f64 - 4.0;
            coords[[i, 1]] = ky as f64 - 4.0;
        }
        let times: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let traj = Trajectory::new(coords, times, vec![0; 64]).unwrap();
        let b = brute_force_forward(&img, &maps, &traj, None).unwrap();
        let lhs: f64 = b.iter().map(|v| v.norm_sqr()).sum::<f64>() / 64.0;
        let rhs: f64 = (0..2)
            .map(|c| {
                img.iter()
                    .zip(maps.maps.index_axis(ndarray::Axis(0), c).iter())
                    .map(|(m, s)| (m * s).norm_sqr())
                    .sum::<f64>()
            })
            .sum();
        assert!((lhs - rhs).abs() / rhs <= 1e-10, "parseval {lhs} vs {rhs}");
    }

    #[test]
    fn field_phase_is_exact_per_sample() {
        // Uniform 50 Hz off-resonance is a pure time-dependent phase.
        let g = grid2(8);
        let maps = ones_maps(&g, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let field = quadratic_field_map(&g, &QuadraticCoeffs { constant: 50.0, ..Default::default() }).unwrap();
        let coords = Array2::from_shape_fn((6, 2), |_| 3.9 * (rng.gen::<f64>() - 0.5));
        let times: Vec<f64> = (0..6).map(|i| 1e-3 * (i as f64 + 1.0)).collect();
        let traj = Trajectory::new(coords, times.clone(), vec![0; 6]).unwrap();
        let b0 = brute_force_forward(&img, &maps, &traj, None).unwrap();
        let bf = brute_force_forward(&img, &maps, &traj, Some(&field)).unwrap();
        for i in 0..6 {
            let expect = b0[[0, i]] * Complex64::from_polar(1.0, -2.0 * PI * 50.0 * times[i]);
            assert!((bf[[0, i]] - expect).norm() < 1e-10);
        }
    }

    #[test]
    fn noise_determinism_and_std() {
        let data = Array2::from_elem((2, 500_000), Complex64::new(1.0, -2.0));
        let a = add_noise(&data, 0.0, 1);
        assert_eq!(a, data);
        let b1 = add_noise(&data, 0.3, 42);
        let b2 = add_noise(&data, 0.3, 42);
        assert_eq!(b1, b2);
        let n = 2.0 * data.len() as f64;
        let var: f64 = b1
            .iter()
            .zip(data.iter())
            .map(|(x, y)| {
                let d = x - y;
                d.re * d.re + d.im * d.im
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!((std - 0.3).abs() / 0.3 < 0.01, "std {std}");
    }
}
