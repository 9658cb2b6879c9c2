//! Procedural velocity models, initial-model constructors, and raw-grid
//! ingestion for externally supplied models.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{Grid2D, VelocityModel};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ZooError {
    #[error("interfaces must be strictly increasing inside (0,1)")]
    BadInterfaces,
    #[error("need one velocity per layer: {layers} layers, {velocities} velocities")]
    LayerCountMismatch { layers: usize, velocities: usize },
    #[error("layer velocities must be positive")]
    BadVelocity,
    #[error("smoothing width must be non-negative and finite")]
    BadSigma,
    #[error("file holds {got} bytes, grid needs {want} (nz*nx*4)")]
    SizeMismatch { got: u64, want: u64 },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Piecewise-constant-in-depth model. `interfaces` are depth fractions in
/// (0,1); layer j occupies rows [floor(f_{j-1}*nz), floor(f_j*nz)). Bounds
/// are the extreme layer speeds.
pub fn layered<T: Scalar>(
    grid: Grid2D,
    interfaces: &[f64],
    velocities: &[f64],
) -> Result<VelocityModel<T>, ZooError> {
    if velocities.len() != interfaces.len() + 1 {
        return Err(ZooError::LayerCountMismatch {
            layers: interfaces.len() + 1,
            velocities: velocities.len(),
        });
    }
    if velocities.iter().any(|&v| !(v > 0.0)) {
        return Err(ZooError::BadVelocity);
    }
    let mut prev = 0.0;
    for &f in interfaces {
        if !(f > prev && f < 1.0) {
            return Err(ZooError::BadInterfaces);
        }
        prev = f;
    }
    let mut boundaries: Vec<usize> = interfaces
        .iter()
        .map(|f| (f * grid.nz as f64).floor() as usize)
        .collect();
    boundaries.push(grid.nz);
    let mut values = Vec::with_capacity(grid.cells());
    let mut layer = 0;
    for iz in 0..grid.nz {
        while iz >= boundaries[layer] {
            layer += 1;
        }
        let v = T::fl(velocities[layer]);
        values.extend(std::iter::repeat(v).take(grid.nx));
    }
    let v_min = velocities.iter().cloned().fold(f64::INFINITY, f64::min);
    let v_max = velocities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(VelocityModel::new(grid, values, v_min, v_max)?)
}

/// The desk-scale reference model used throughout the test suite: 40x80
/// cells of 0.03 km, three flat layers at 1500/2500/3500 m/s with
/// interfaces a third and two thirds of the way down.
pub fn three_layer_desk<T: Scalar>() -> VelocityModel<T> {
    let grid = Grid2D::new(40, 80, 0.03).expect("static grid");
    layered(grid, &[1.0 / 3.0, 2.0 / 3.0], &[1500.0, 2500.0, 3500.0]).expect("static model")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    // Truncated at 4 sigma, matching common image-processing practice.
    let radius = (4.0 * sigma + 0.5) as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    for i in -(radius as isize)..=(radius as isize) {
        let x = i as f64;
        k.push(if sigma > 0.0 { (-x * x / denom).exp() } else { 1.0 });
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Index into [0, n) reflected at the edges with edge samples repeated
/// (i.e. -1 -> 0, n -> n-1), applied repeatedly for deep kernels.
fn reflect(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflective edge handling; the result is
/// clamped back into the model's bounds. `sigma` is in cells.
pub fn gaussian_smooth<T: Scalar>(
    m: &VelocityModel<T>,
    sigma: f64,
) -> Result<VelocityModel<T>, ZooError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ZooError::BadSigma);
    }
    let (nz, nx) = (m.grid.nz, m.grid.nx);
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let src: Vec<f64> = m.values.iter().map(|v| v.f64()).collect();
    // Horizontal pass.
    let mut mid = vec![0.0f64; nz * nx];
    for iz in 0..nz {
        let row = &src[iz * nx..(iz + 1) * nx];
        for ix in 0..nx {
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                let s = reflect(ix as isize + j as isize - radius, nx as isize);
                acc += w * row[s];
            }
            mid[iz * nx + ix] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![T::zero(); nz * nx];
    for ix in 0..nx {
        for iz in 0..nz {
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                let s = reflect(iz as isize + j as isize - radius, nz as isize);
                acc += w * mid[s * nx + ix];
            }
            out[iz * nx + ix] = T::fl(acc.clamp(m.v_min, m.v_max));
        }
    }
    Ok(VelocityModel {
        grid: m.grid,
        values: out,
        v_min: m.v_min,
        v_max: m.v_max,
    })
}

/// v(z) = v0 + beta * depth_km, constant along each row. Bounds are the
/// top/bottom row speeds.
pub fn linear_model<T: Scalar>(
    grid: Grid2D,
    v0: f64,
    beta_per_km: f64,
) -> Result<VelocityModel<T>, ZooError> {
    let mut values = Vec::with_capacity(grid.cells());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for iz in 0..grid.nz {
        let v = v0 + beta_per_km * iz as f64 * grid.dx;
        lo = lo.min(v);
        hi = hi.max(v);
        values.extend(std::iter::repeat(T::fl(v)).take(grid.nx));
    }
    if !(lo > 0.0) {
        return Err(ZooError::BadVelocity);
    }
    Ok(VelocityModel::new(grid, values, lo, hi)?)
}

/// JSON sidecar stored next to a raw model grid.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format_version: u32,
    pub nz: usize,
    pub nx: usize,
    pub dx_km: f64,
    pub v_min: f64,
    pub v_max: f64,
}

/// Reads a little-endian 32-bit float row-major grid of exactly nz*nx
/// cells, validating every value against the clamp bounds.
pub fn load_raw_grid<T: Scalar>(
    path: &Path,
    nz: usize,
    nx: usize,
    dx: f64,
    v_min: f64,
    v_max: f64,
) -> Result<VelocityModel<T>, ZooError> {
    let meta = std::fs::metadata(path)?;
    let want = (nz * nx * 4) as u64;
    if meta.len() != want {
        return Err(ZooError::SizeMismatch {
            got: meta.len(),
            want,
        });
    }
    let mut bytes = Vec::with_capacity(want as usize);
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::fl(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let grid = Grid2D::new(nz, nx, dx)?;
    Ok(VelocityModel::new(grid, values, v_min, v_max)?)
}

/// Writes the grid as little-endian f32 plus a `.json` sidecar describing
/// shape, spacing, and bounds.
pub fn save_raw_grid<T: Scalar>(m: &VelocityModel<T>, path: &Path) -> Result<(), ZooError> {
    let mut f = std::fs::File::create(path)?;
    let mut bytes = Vec::with_capacity(m.values.len() * 4);
    for v in &m.values {
        bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    f.write_all(&bytes)?;
    let sidecar = ModelSidecar {
        format_version: 1,
        nz: m.grid.nz,
        nx: m.grid.nx,
        dx_km: m.grid.dx,
        v_min: m.v_min,
        v_max: m.v_max,
    };
    let sc_path = sidecar_path(path);
    std::fs::write(sc_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Loads a grid described by its own sidecar.
pub fn load_with_sidecar<T: Scalar>(path: &Path) -> Result<VelocityModel<T>, ZooError> {
    let sc: ModelSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    load_raw_grid(path, sc.nz, sc.nx, sc.dx_km, sc.v_min, sc.v_max)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::path::PathBuf::from(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_layer_is_constant() {
        let g = Grid2D::new(8, 8, 0.03).unwrap();
        let m = layered::<f64>(g, &[], &[2000.0]).unwrap();
        assert!(m.values.iter().all(|&v| v == 2000.0));
    }

    #[test]
    fn half_split_on_forty_rows() {
        let g = Grid2D::new(40, 8, 0.03).unwrap();
        let m = layered::<f64>(g, &[0.5], &[1500.0, 3000.0]).unwrap();
        assert_eq!(m.at(19, 0), 1500.0);
        assert_eq!(m.at(20, 0), 3000.0);
        assert_eq!(m.at(39, 7), 3000.0);
        assert_eq!(m.v_min, 1500.0);
        assert_eq!(m.v_max, 3000.0);
    }

    #[test]
    fn three_layers_monotone_down() {
        let m = three_layer_desk::<f64>();
        for ix in 0..m.grid.nx {
            for iz in 1..m.grid.nz {
                assert!(m.at(iz, ix) >= m.at(iz - 1, ix));
            }
        }
        assert_eq!(m.at(12, 0), 1500.0);
        assert_eq!(m.at(13, 0), 2500.0);
        assert_eq!(m.at(25, 0), 2500.0);
        assert_eq!(m.at(26, 0), 3500.0);
    }

    #[test]
    fn smooth_constant_unchanged() {
        let g = Grid2D::new(16, 16, 0.03).unwrap();
        let m = layered::<f64>(g, &[], &[2222.0]).unwrap();
        let s = gaussian_smooth(&m, 3.0).unwrap();
        for &v in &s.values {
            assert!((v - 2222.0).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_zero_sigma_is_identity() {
        let m = three_layer_desk::<f64>();
        let s = gaussian_smooth(&m, 0.0).unwrap();
        for (a, b) in s.values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn smooth_step_midpoint_is_mean() {
        let g = Grid2D::new(64, 8, 0.03).unwrap();
        let m = layered::<f64>(g, &[0.5], &[1500.0, 2500.0]).unwrap();
        let s = gaussian_smooth(&m, 3.0).unwrap();
        // The step sits between rows 31 and 32; their average approximates
        // the continuous midpoint value.
        let mid = 0.5 * (s.at(31, 4) + s.at(32, 4));
        let mean = 2000.0;
        assert!((mid - mean).abs() / mean < 0.01, "midpoint {mid}");
    }

    #[test]
    fn smooth_preserves_mean() {
        let m = three_layer_desk::<f64>();
        let s = gaussian_smooth(&m, 2.0).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let m0 = mean(&m.values);
        let m1 = mean(&s.values);
        assert!((m0 - m1).abs() / m0 < 1e-3, "{m0} vs {m1}");
    }

    #[test]
    fn linear_model_profile() {
        let g = Grid2D::new(101, 8, 0.03).unwrap();
        let m = linear_model::<f64>(g, 1500.0, 500.0).unwrap();
        assert_eq!(m.at(0, 0), 1500.0);
        // 3 km down: row 100 at dx 0.03 km.
        assert!((m.at(100, 0) - 3000.0).abs() < 1e-9);
        for ix in 0..8 {
            for iz in 1..101 {
                assert!(m.at(iz, ix) >= m.at(iz - 1, ix));
            }
        }
    }

    #[test]
    fn raw_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.f32");
        let m = three_layer_desk::<f64>();
        save_raw_grid(&m, &path).unwrap();
        let back = load_raw_grid::<f64>(&path, 40, 80, 0.03, 1500.0, 3500.0).unwrap();
        assert_eq!(m.values, back.values);
        let side = load_with_sidecar::<f64>(&path).unwrap();
        assert_eq!(m.values, side.values);
    }

    #[test]
    fn raw_grid_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.f32");
        std::fs::write(&path, [0u8; 100]).unwrap();
        assert!(matches!(
            load_raw_grid::<f64>(&path, 40, 80, 0.03, 1500.0, 3500.0),
            Err(ZooError::SizeMismatch { got: 100, .. })
        ));
    }

    #[test]
    fn raw_grid_bounds_error_names_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.f32");
        let mut bytes = Vec::new();
        for i in 0..64 {
            let v: f32 = if i == 10 { 100.0 } else { 2000.0 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let err = load_raw_grid::<f64>(&path, 8, 8, 0.03, 1400.0, 3500.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1,2)"), "message: {msg}");
        assert!(msg.contains("100"), "message: {msg}");
    }

    proptest! {
        #[test]
        fn linear_monotone_for_positive_beta(v0 in 1000.0f64..3000.0, beta in 0.0f64..800.0) {
            let g = Grid2D::new(20, 8, 0.05).unwrap();
            let m = linear_model::<f64>(g, v0, beta).unwrap();
            for ix in 0..8 {
                for iz in 1..20 {
                    prop_assert!(m.at(iz, ix) >= m.at(iz - 1, ix));
                }
            }
            prop_assert_eq!(m.at(0, 0), v0);
        }
    }
}
