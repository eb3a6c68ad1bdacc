//! Shared domain types and coordinate conventions.

use crate::{Error, Result};
use ndarray::{Array2, ArrayD};
use num_complex::Complex64;

/// Universal carrier for images, k-space, maps and kernels: an N-dimensional
/// complex tensor, row-major, last axis fastest.
pub type ComplexArray = ArrayD<Complex64>;

/// Isotropic Cartesian grid. Integer k-space coordinates live in
/// `[-N/2, N/2)` in units of delta_k = 1 (cycles per FOV); the voxel at index
/// `i` has spatial coordinate `i - floor(N/2)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub extent: usize,
    pub fov: f64,
}

impl Grid {
    pub fn new(dim: usize, extent: usize, fov: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidArgument(format!("grid dim must be 2 or 3, got {dim}")));
        }
        if extent < 8 {
            return Err(Error::InvalidArgument(format!("grid extent must be >= 8, got {extent}")));
        }
        if !(fov > 0.0) {
            return Err(Error::InvalidArgument("grid fov must be positive".into()));
        }
        Ok(Grid { dim, extent, fov })
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.extent; self.dim]
    }

    pub fn num_voxels(&self) -> usize {
        self.extent.pow(self.dim as u32)
    }

    /// Spatial/frequency coordinate of an array index.
    pub fn coord(&self, index: usize) -> f64 {
        index as f64 - (self.extent / 2) as f64
    }

    /// Array index of an integer coordinate, wrapping modulo N (the DFT grid
    /// is N-periodic, so coordinate +N/2 is the same sample as -N/2).
    pub fn index_of_wrapped(&self, k: i64) -> usize {
        let n = self.extent as i64;
        (((k + n / 2) % n + n) % n) as usize
    }

    /// Smallest / largest stored integer coordinate.
    pub fn kmin(&self) -> i64 {
        -((self.extent / 2) as i64)
    }
    pub fn kmax(&self) -> i64 {
        self.kmin() + self.extent as i64 - 1
    }
}

/// Non-Cartesian sampling pattern: M coordinates in delta_k units paired with
/// sample times, grouped into readouts.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub coords: Array2<f64>,
    pub times: Vec<f64>,
    pub readout_id: Vec<usize>,
    /// Nominal acceleration factor of the sampling pattern, used by the
    /// g-factor normalization. 1.0 when unspecified.
    pub accel: f64,
}

impl Trajectory {
    pub fn new(coords: Array2<f64>, times: Vec<f64>, readout_id: Vec<usize>) -> Result<Self> {
        let m = coords.nrows();
        if times.len() != m || readout_id.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "trajectory: {} coords, {} times, {} readout ids",
                m,
                times.len(),
                readout_id.len()
            )));
        }
        for i in 1..m {
            if readout_id[i] == readout_id[i - 1] && !(times[i] > times[i - 1]) {
                return Err(Error::InvalidArgument(format!(
                    "times not strictly increasing within readout {} at sample {}",
                    readout_id[i], i
                )));
            }
        }
        Ok(Trajectory { coords, times, readout_id, accel: 1.0 })
    }

    pub fn num_samples(&self) -> usize {
        self.coords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    /// All samples inside the grid's coordinate range `[-N/2, N/2)`.
    pub fn validate_within(&self, grid: &Grid) -> Result<()> {
        if self.dim() != grid.dim {
            return Err(Error::ShapeMismatch(format!(
                "trajectory dim {} vs grid dim {}",
                self.dim(),
                grid.dim
            )));
        }
        let half = grid.extent as f64 / 2.0;
        for (i, row) in self.coords.rows().into_iter().enumerate() {
            for &k in row {
                if !(k >= -half && k < half) || !k.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "trajectory sample {i} coordinate {k} outside grid [{}, {half})",
                        -half
                    )));
                }
            }
        }
        Ok(())
    }

    /// Index ranges of each readout in sample order.
    pub fn readout_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let m = self.num_samples();
        let mut start = 0;
        for i in 1..=m {
            if i == m || self.readout_id[i] != self.readout_id[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

/// Complex spatial sensitivity maps, one per coil: shape `[C, N, ..]`.
#[derive(Debug, Clone)]
pub struct CoilMaps {
    pub maps: ComplexArray,
}

impl CoilMaps {
    pub fn new(maps: ComplexArray) -> Result<Self> {
        if maps.ndim() < 3 {
            return Err(Error::ShapeMismatch("coil maps must be [C, spatial..]".into()));
        }
        if maps.shape()[0] < 1 {
            return Err(Error::InvalidArgument("need at least one coil".into()));
        }
        Ok(CoilMaps { maps })
    }

    pub fn num_coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.maps.shape()[1..]
    }
}

/// Fully sampled Cartesian center k-space used to train GRAPPA kernels.
/// Multi-echo calibrations carry one k-space block per echo time.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub grid: Grid,
    /// One `[C, N_cal, ..]` block per echo.
    pub kdata: Vec<ComplexArray>,
    /// Echo times in seconds, strictly increasing, same length as `kdata`.
    pub te: Vec<f64>,
}

impl Calibration {
    pub fn new(grid: Grid, kdata: Vec<ComplexArray>, te: Vec<f64>) -> Result<Self> {
        if kdata.is_empty() || kdata.len() != te.len() {
            return Err(Error::ShapeMismatch(format!(
                "calibration: {} echoes, {} echo times",
                kdata.len(),
                te.len()
            )));
        }
        for w in te.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidArgument("echo times must be strictly increasing".into()));
            }
        }
        let want: Vec<usize> = std::iter::once(kdata[0].shape()[0])
            .chain(grid.shape())
            .collect();
        for (e, k) in kdata.iter().enumerate() {
            if k.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "calibration echo {e}: shape {:?}, expected {:?}",
                    k.shape(),
                    want
                )));
            }
        }
        Ok(Calibration { grid, kdata, te })
    }

    pub fn num_coils(&self) -> usize {
        self.kdata[0].shape()[0]
    }

    pub fn num_echoes(&self) -> usize {
        self.kdata.len()
    }
}

/// Inclusive per-axis index bounds of the usable calibration interior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalRegion {
    pub lo: usize,
    pub hi: usize,
}

impl CalRegion {
    /// Coordinate bounds (delta_k units) of the usable region on `grid`.
    pub fn coord_bounds(&self, grid: &Grid) -> (f64, f64) {
        (grid.coord(self.lo), grid.coord(self.hi))
    }
}

/// Index bounds of the calibration region shrunk by a 2 delta_k margin on
/// every face; kernel training must sample sources and targets inside these
/// bounds. The region must span at least two points per axis so that
/// unit-shift pairs exist.
pub fn usable_calibration_region(cal: &Calibration) -> Result<CalRegion> {
    let n = cal.grid.extent;
    if n < 6 {
        return Err(Error::InvalidArgument(format!(
            "calibration too small: {n} points per axis, need at least 6"
        )));
    }
    Ok(CalRegion { lo: 2, hi: n - 3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn cal_with_extent(n: usize, d: usize) -> Calibration {
        // Grid::new rejects n < 8, so build small test calibrations directly.
        let grid = Grid { dim: d, extent: n, fov: 1.0 };
        let mut shape = vec![1usize];
        shape.extend(vec![n; d]);
        Calibration { grid, kdata: vec![ArrayD::zeros(IxDyn(&shape))], te: vec![0.0] }
    }

    #[test]
    fn usable_region_bounds() {
        let r = usable_calibration_region(&cal_with_extent(32, 2)).unwrap();
        assert_eq!(r, CalRegion { lo: 2, hi: 29 });
        let r = usable_calibration_region(&cal_with_extent(24, 3)).unwrap();
        assert_eq!(r, CalRegion { lo: 2, hi: 21 });
    }

    #[test]
    fn usable_region_too_small() {
        let err = usable_calibration_region(&cal_with_extent(5, 2)).unwrap_err();
        assert!(err.to_string().contains("calibration too small"));
    }

    #[test]
    fn trajectory_times_must_increase_within_readout() {
        let coords = Array2::zeros((3, 2));
        let err = Trajectory::new(coords.clone(), vec![0.0, 0.0, 1.0], vec![0, 0, 0]);
        assert!(err.is_err());
        let ok = Trajectory::new(coords, vec![0.0, 0.0, 1.0], vec![0, 1, 1]);
        assert!(ok.is_ok());
    }

    #[test]
    fn grid_wrapping_at_edge() {
        let g = Grid::new(2, 16, 1.0).unwrap();
        assert_eq!(g.kmin(), -8);
        assert_eq!(g.kmax(), 7);
        assert_eq!(g.index_of_wrapped(-8), 0);
        assert_eq!(g.index_of_wrapped(0), 8);
        assert_eq!(g.index_of_wrapped(8), 0); // +N/2 aliases to -N/2
        assert_eq!(g.index_of_wrapped(7), 15);
    }

    #[test]
    fn readout_ranges_group_samples() {
        let coords = Array2::zeros((5, 2));
        let t = Trajectory::new(coords, vec![0., 1., 0., 1., 2.], vec![0, 0, 1, 1, 1]).unwrap();
        assert_eq!(t.readout_ranges(), vec![0..2, 2..5]);
    }
}
