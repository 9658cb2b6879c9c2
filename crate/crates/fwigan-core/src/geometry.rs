//! Spatial grid, velocity model container, and surface acquisition layout.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("grid too small: {nz}x{nx} (minimum 8x8)")]
    GridTooSmall { nz: usize, nx: usize },
    #[error("grid spacing must be positive, got {0} km")]
    BadSpacing(f64),
    #[error("need at least one shot")]
    NoShots,
    #[error("{n_shots} shots exceed lateral width nx={nx}")]
    TooManyShots { n_shots: usize, nx: usize },
    #[error("shot depth {depth} outside grid of {nz} rows")]
    BadShotDepth { depth: usize, nz: usize },
    #[error("velocity bounds invalid: v_min={v_min}, v_max={v_max} (need 0 < v_min <= v_max)")]
    BadBounds { v_min: f64, v_max: f64 },
    #[error("velocity array has {got} cells, grid needs {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("velocity {value} at cell ({iz},{ix}) outside [{v_min}, {v_max}]")]
    OutOfBounds {
        value: f64,
        iz: usize,
        ix: usize,
        v_min: f64,
        v_max: f64,
    },
}

/// Uniform 2D grid: `nz` depth rows by `nx` lateral columns of `dx` km cells.
/// Storage convention everywhere is row-major [depth][lateral].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nz: usize,
    pub nx: usize,
    pub dx: f64,
}

impl Grid2D {
    pub fn new(nz: usize, nx: usize, dx: f64) -> Result<Self, GeometryError> {
        if nz < 8 || nx < 8 {
            return Err(GeometryError::GridTooSmall { nz, nx });
        }
        if !(dx > 0.0) {
            return Err(GeometryError::BadSpacing(dx));
        }
        Ok(Grid2D { nz, nx, dx })
    }

    pub fn cells(&self) -> usize {
        self.nz * self.nx
    }

    /// Cell size in meters (dx is stored in km).
    pub fn dx_m(&self) -> f64 {
        self.dx * 1000.0
    }
}

/// P-wave speed per grid cell (m/s) with the clamp bounds the optimizer
/// must respect.
#[derive(Clone, Debug)]
pub struct VelocityModel<T> {
    pub grid: Grid2D,
    pub values: Vec<T>,
    pub v_min: f64,
    pub v_max: f64,
}

impl<T: Scalar> VelocityModel<T> {
    /// Builds a model, rejecting values outside the bounds.
    pub fn new(
        grid: Grid2D,
        values: Vec<T>,
        v_min: f64,
        v_max: f64,
    ) -> Result<Self, GeometryError> {
        if !(v_min > 0.0) || v_min > v_max {
            return Err(GeometryError::BadBounds { v_min, v_max });
        }
        if values.len() != grid.cells() {
            return Err(GeometryError::ShapeMismatch {
                got: values.len(),
                want: grid.cells(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            let v = v.f64();
            if !(v >= v_min && v <= v_max) {
                return Err(GeometryError::OutOfBounds {
                    value: v,
                    iz: i / grid.nx,
                    ix: i % grid.nx,
                    v_min,
                    v_max,
                });
            }
        }
        Ok(VelocityModel {
            grid,
            values,
            v_min,
            v_max,
        })
    }

    pub fn at(&self, iz: usize, ix: usize) -> T {
        self.values[iz * self.grid.nx + ix]
    }

    /// Largest speed in the model (for stability checks).
    pub fn max_speed(&self) -> f64 {
        self.values
            .iter()
            .fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()))
    }

    /// Replaces the clamp bounds, re-validating the stored values.
    pub fn with_bounds(self, v_min: f64, v_max: f64) -> Result<Self, GeometryError> {
        VelocityModel::new(self.grid, self.values, v_min, v_max)
    }
}

/// Per-shot source cells and the shared receiver line, as
/// (depth_index, lateral_index) pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    pub source_cells: Vec<(usize, usize)>,
    pub receiver_cells: Vec<(usize, usize)>,
    pub n_s: usize,
    pub n_g: usize,
}

impl AcquisitionGeometry {
    pub fn new(
        grid: &Grid2D,
        source_cells: Vec<(usize, usize)>,
        receiver_cells: Vec<(usize, usize)>,
    ) -> Result<Self, GeometryError> {
        if source_cells.is_empty() {
            return Err(GeometryError::NoShots);
        }
        for &(iz, ix) in source_cells.iter().chain(receiver_cells.iter()) {
            if iz >= grid.nz || ix >= grid.nx {
                return Err(GeometryError::BadShotDepth {
                    depth: iz.max(ix),
                    nz: grid.nz,
                });
            }
        }
        let n_s = source_cells.len();
        let n_g = receiver_cells.len();
        Ok(AcquisitionGeometry {
            source_cells,
            receiver_cells,
            n_s,
            n_g,
        })
    }

    /// Geometry restricted to a subset of shots (receivers unchanged).
    pub fn subset(&self, shots: &[usize]) -> AcquisitionGeometry {
        let source_cells: Vec<_> = shots.iter().map(|&s| self.source_cells[s]).collect();
        AcquisitionGeometry {
            n_s: source_cells.len(),
            source_cells,
            receiver_cells: self.receiver_cells.clone(),
            n_g: self.n_g,
        }
    }
}

/// Evenly spaced sources along row `shot_depth`, one receiver per lateral
/// column at the same depth. Source i of n sits at column
/// floor(i*(nx-1)/(n-1)); a single source sits at the lateral center.
pub fn surface_layout(
    grid: &Grid2D,
    n_shots: usize,
    shot_depth: usize,
) -> Result<AcquisitionGeometry, GeometryError> {
    if n_shots == 0 {
        return Err(GeometryError::NoShots);
    }
    if n_shots > grid.nx {
        return Err(GeometryError::TooManyShots {
            n_shots,
            nx: grid.nx,
        });
    }
    if shot_depth >= grid.nz {
        return Err(GeometryError::BadShotDepth {
            depth: shot_depth,
            nz: grid.nz,
        });
    }
    let source_cells: Vec<(usize, usize)> = if n_shots == 1 {
        vec![(shot_depth, (grid.nx - 1) / 2)]
    } else {
        (0..n_shots)
            .map(|i| (shot_depth, i * (grid.nx - 1) / (n_shots - 1)))
            .collect()
    };
    let receiver_cells: Vec<(usize, usize)> = (0..grid.nx).map(|ix| (shot_depth, ix)).collect();
    AcquisitionGeometry::new(grid, source_cells, receiver_cells)
}

/// Clamps every cell into [v_min, v_max]; idempotent.
pub fn clamp_model<T: Scalar>(m: &VelocityModel<T>) -> VelocityModel<T> {
    let lo = T::fl(m.v_min);
    let hi = T::fl(m.v_max);
    let values = m.values.iter().map(|&v| v.max(lo).min(hi)).collect();
    VelocityModel {
        grid: m.grid,
        values,
        v_min: m.v_min,
        v_max: m.v_max,
    }
}

/// Clamps in place (training inner loop).
pub fn clamp_in_place<T: Scalar>(values: &mut [T], v_min: f64, v_max: f64) {
    let lo = T::fl(v_min);
    let hi = T::fl(v_max);
    for v in values {
        *v = (*v).max(lo).min(hi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(nz: usize, nx: usize) -> Grid2D {
        Grid2D::new(nz, nx, 0.03).unwrap()
    }

    #[test]
    fn layout_thirty_shots_spans_width() {
        let g = grid(90, 300);
        let acq = surface_layout(&g, 30, 0).unwrap();
        assert_eq!(acq.n_s, 30);
        assert_eq!(acq.n_g, 300);
        assert_eq!(acq.source_cells[0], (0, 0));
        assert_eq!(acq.source_cells[29], (0, 299));
        // Evenly spaced: strides differ by at most one cell.
        let strides: Vec<usize> = acq
            .source_cells
            .windows(2)
            .map(|w| w[1].1 - w[0].1)
            .collect();
        assert!(strides.iter().all(|&s| s == 10 || s == 11));
    }

    #[test]
    fn layout_single_shot_centered() {
        let g = grid(10, 10);
        let acq = surface_layout(&g, 1, 0).unwrap();
        assert_eq!(acq.source_cells, vec![(0, 4)]);
        assert_eq!(acq.n_g, 10);
    }

    #[test]
    fn layout_three_shots_on_seven_columns() {
        // Narrow grid built directly: exercises the spacing formula on a
        // width below the validated-constructor minimum.
        let g = Grid2D {
            nz: 10,
            nx: 7,
            dx: 0.03,
        };
        let acq = surface_layout(&g, 3, 0).unwrap();
        let cols: Vec<usize> = acq.source_cells.iter().map(|c| c.1).collect();
        assert_eq!(cols, vec![0, 3, 6]);
    }

    #[test]
    fn layout_rejects_too_many_shots() {
        let g = grid(10, 10);
        assert!(matches!(
            surface_layout(&g, 11, 0),
            Err(GeometryError::TooManyShots { .. })
        ));
    }

    #[test]
    fn clamp_moves_outliers_to_bounds() {
        let g = grid(8, 8);
        let mut vals = vec![2000.0f64; 64];
        vals[0] = 1400.0;
        vals[1] = 3501.0;
        let m = VelocityModel {
            grid: g,
            values: vals,
            v_min: 1500.0,
            v_max: 3500.0,
        };
        let c = clamp_model(&m);
        assert_eq!(c.values[0], 1500.0);
        assert_eq!(c.values[1], 3500.0);
        assert_eq!(c.values[2], 2000.0);
    }

    #[test]
    fn model_constructor_reports_offending_cell() {
        let g = grid(8, 8);
        let mut vals = vec![2000.0f64; 64];
        vals[8 + 3] = 100.0;
        let err = VelocityModel::new(g, vals, 1400.0, 3500.0).unwrap_err();
        match err {
            GeometryError::OutOfBounds { iz, ix, value, .. } => {
                assert_eq!((iz, ix), (1, 3));
                assert_eq!(value, 100.0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(vals in proptest::collection::vec(500.0f64..5000.0, 64)) {
            let g = grid(8, 8);
            let m = VelocityModel { grid: g, values: vals, v_min: 1500.0, v_max: 3500.0 };
            let once = clamp_model(&m);
            let twice = clamp_model(&once);
            prop_assert_eq!(&once.values, &twice.values);
            prop_assert!(once.values.iter().all(|&v| (1500.0..=3500.0).contains(&v)));
        }

        #[test]
        fn layout_strictly_increasing_and_spans(nx in 8usize..400, n in 2usize..50) {
            prop_assume!(n <= nx);
            let g = grid(16, nx);
            let acq = surface_layout(&g, n, 0).unwrap();
            let cols: Vec<usize> = acq.source_cells.iter().map(|c| c.1).collect();
            for w in cols.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            prop_assert_eq!(cols[0], 0);
            prop_assert_eq!(*cols.last().unwrap(), nx - 1);
        }
    }
}
