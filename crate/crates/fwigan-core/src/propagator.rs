//! Differentiable 2D constant-density acoustic modeling.
//!
//! Forward: leapfrog time stepping with a 4th-order-in-space Laplacian and
//! a quadratic damping sponge on all four grid edges,
//!
//! u[t+1] = (2 - s*dt) u[t] - (1 - s*dt) u[t-1]
//!          + (v*dt)^2 (lap(u[t]) + w[t]/dx^2 at the source cell),
//!
//! with quiescent start u[0] = u[1] = 0. Receivers sample u at their cells
//! every step.
//!
//! Reverse: `vjp` computes the exact gradient of <adjoint_source, gathers>
//! with respect to velocity and source peak frequency by running the
//! discrete adjoint recursion backward in time against stored forward
//! snapshots. The adjoint is the exact transpose of the discrete forward
//! map (the sponge terms are diagonal, the Laplacian symmetric under the
//! zero boundary), so gradients hold to machine precision rather than
//! discretization order.

use rayon::prelude::*;

use crate::geometry::{AcquisitionGeometry, Grid2D, VelocityModel};
use crate::scalar::Scalar;
use crate::source::{ricker_df, Wavelet};

/// Courant limit for 4th-order space / 2nd-order time in 2D is
/// 2/sqrt(32/3) ~ 0.612; we keep a 1% margin.
pub const CFL_LIMIT: f64 = 0.606;

/// Laplacian tap weights per axis at offsets -2..=2 (before 1/h^2).
const LAP: [f64; 5] = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];

#[derive(Debug, thiserror::Error)]
pub enum PropagatorError {
    #[error("CFL violated: v_max*dt/dx = {ratio:.4} exceeds {CFL_LIMIT}")]
    Cfl { ratio: f64 },
    #[error("sponge was built for a {want_nz}x{want_nx} grid, model is {got_nz}x{got_nx}")]
    SpongeMismatch {
        want_nz: usize,
        want_nx: usize,
        got_nz: usize,
        got_nx: usize,
    },
    #[error("acquisition cell ({iz},{ix}) outside {nz}x{nx} grid")]
    CellOutsideGrid {
        iz: usize,
        ix: usize,
        nz: usize,
        nx: usize,
    },
    #[error("non-finite amplitude at time step {step}: simulation unstable")]
    Unstable { step: usize },
    #[error("adjoint source shape ({n_s},{nt},{n_g}) does not match run ({want_s},{want_t},{want_g})")]
    AdjointShape {
        n_s: usize,
        nt: usize,
        n_g: usize,
        want_s: usize,
        want_t: usize,
        want_g: usize,
    },
    #[error("velocity perturbation has {got} cells, grid has {want}")]
    PerturbationShape { got: usize, want: usize },
    #[error(transparent)]
    Source(#[from] crate::source::SourceError),
}

/// Stability guard: ok iff v_max*dt/dx <= 0.606. Returns the Courant ratio.
pub fn check_cfl(v_max_ms: f64, dx_m: f64, dt_s: f64) -> Result<f64, PropagatorError> {
    let ratio = v_max_ms * dt_s / dx_m;
    if ratio <= CFL_LIMIT {
        Ok(ratio)
    } else {
        Err(PropagatorError::Cfl { ratio })
    }
}

/// Absorbing boundary: damping coefficients on the padded grid, zero in the
/// interior and growing quadratically across `width` cells toward every
/// edge, sigma(d) = sigma_max*(d/width)^2.
#[derive(Clone, Debug)]
pub struct SpongeProfile<T> {
    pub width: usize,
    pub sigma_max: f64,
    /// Per-cell damping over the padded grid (including the ghost ring).
    damping: Vec<T>,
    grid_nz: usize,
    grid_nx: usize,
}

/// Ghost ring thickness for the 5-point stencil.
const GHOST: usize = 2;

impl<T: Scalar> SpongeProfile<T> {
    /// Quadratic profile; sigma_max = 3 v_max ln(1000) / (2 width dx_m)
    /// gives a nominal round-trip amplitude reduction of 1000x.
    pub fn quadratic(grid: &Grid2D, width: usize, v_max_ms: f64) -> Self {
        let sigma_max = if width == 0 {
            0.0
        } else {
            3.0 * v_max_ms * 1000.0f64.ln() / (2.0 * width as f64 * grid.dx_m())
        };
        Self::build(grid, width, sigma_max)
    }

    /// No damping: waves reflect off the grid edges.
    pub fn none(grid: &Grid2D) -> Self {
        Self::build(grid, 0, 0.0)
    }

    fn build(grid: &Grid2D, width: usize, sigma_max: f64) -> Self {
        let ext = width + GHOST;
        let (pnz, pnx) = (grid.nz + 2 * ext, grid.nx + 2 * ext);
        let mut damping = vec![T::zero(); pnz * pnx];
        if width > 0 {
            for iz in 0..pnz {
                for ix in 0..pnx {
                    // Distance in cells into the sponge band (0 in the
                    // interior; ghost cells carry the edge value unused).
                    let d = |i: usize, n: usize| -> usize {
                        if i < ext {
                            (ext - i).min(width)
                        } else if i >= ext + n {
                            (i - (ext + n) + 1).min(width)
                        } else {
                            0
                        }
                    };
                    let dep = d(iz, grid.nz).max(d(ix, grid.nx));
                    if dep > 0 {
                        let frac = dep as f64 / width as f64;
                        damping[iz * pnx + ix] = T::fl(sigma_max * frac * frac);
                    }
                }
            }
        }
        SpongeProfile {
            width,
            sigma_max,
            damping,
            grid_nz: grid.nz,
            grid_nx: grid.nx,
        }
    }

    pub fn damping(&self) -> &[T] {
        &self.damping
    }

    fn check(&self, grid: &Grid2D) -> Result<(), PropagatorError> {
        if self.grid_nz != grid.nz || self.grid_nx != grid.nx {
            return Err(PropagatorError::SpongeMismatch {
                want_nz: self.grid_nz,
                want_nx: self.grid_nx,
                got_nz: grid.nz,
                got_nx: grid.nx,
            });
        }
        Ok(())
    }
}

/// Recorded seismograms: [shot][time][receiver], row-major.
#[derive(Clone, Debug)]
pub struct ShotGathers<T> {
    pub data: Vec<T>,
    pub n_s: usize,
    pub nt: usize,
    pub n_g: usize,
    pub dt: f64,
    pub geometry: AcquisitionGeometry,
}

impl<T: Scalar> ShotGathers<T> {
    pub fn zeros(n_s: usize, nt: usize, n_g: usize, dt: f64, geometry: AcquisitionGeometry) -> Self {
        ShotGathers {
            data: vec![T::zero(); n_s * nt * n_g],
            n_s,
            nt,
            n_g,
            dt,
            geometry,
        }
    }

    pub fn at(&self, s: usize, t: usize, g: usize) -> T {
        self.data[(s * self.nt + t) * self.n_g + g]
    }

    /// One shot's [time][receiver] block.
    pub fn shot(&self, s: usize) -> &[T] {
        &self.data[s * self.nt * self.n_g..(s + 1) * self.nt * self.n_g]
    }

    /// Gathers restricted to the given shots, in the given order.
    pub fn select(&self, shots: &[usize]) -> ShotGathers<T> {
        let mut data = Vec::with_capacity(shots.len() * self.nt * self.n_g);
        for &s in shots {
            data.extend_from_slice(self.shot(s));
        }
        ShotGathers {
            data,
            n_s: shots.len(),
            nt: self.nt,
            n_g: self.n_g,
            dt: self.dt,
            geometry: self.geometry.subset(shots),
        }
    }
}

/// All wavefield snapshots of one shot, cropped to the user grid.
#[derive(Clone, Debug)]
pub struct Wavefields<T> {
    pub nt: usize,
    pub nz: usize,
    pub nx: usize,
    /// [time][depth][lateral], row-major.
    pub snapshots: Vec<T>,
}

impl<T: Scalar> Wavefields<T> {
    pub fn at(&self, t: usize, iz: usize, ix: usize) -> T {
        self.snapshots[(t * self.nz + iz) * self.nx + ix]
    }
}

/// Precomputed padded-grid coefficient fields shared by forward and adjoint
/// sweeps.
struct Engine<T> {
    pnz: usize,
    pnx: usize,
    ext: usize,
    nz: usize,
    nx: usize,
    /// 2 - sigma*dt
    a: Vec<T>,
    /// 1 - sigma*dt
    b: Vec<T>,
    /// (v*dt)^2 on the padded grid (edge-replicated velocity)
    cf: Vec<T>,
    /// v on the padded grid
    v_pad: Vec<T>,
    inv_dx2: T,
    dt: f64,
    lap: [T; 5],
}

impl<T: Scalar> Engine<T> {
    fn new(m: &VelocityModel<T>, sponge: &SpongeProfile<T>, dt: f64) -> Result<Self, PropagatorError> {
        sponge.check(&m.grid)?;
        check_cfl(m.max_speed(), m.grid.dx_m(), dt)?;
        let ext = sponge.width + GHOST;
        let (nz, nx) = (m.grid.nz, m.grid.nx);
        let (pnz, pnx) = (nz + 2 * ext, nx + 2 * ext);
        let n = pnz * pnx;
        let mut a = vec![T::zero(); n];
        let mut b = vec![T::zero(); n];
        let mut cf = vec![T::zero(); n];
        let mut v_pad = vec![T::zero(); n];
        let dt_t = T::fl(dt);
        let two = T::fl(2.0);
        let one = T::one();
        for iz in 0..pnz {
            // Edge replication of the velocity into sponge and ghost cells.
            let uz = iz.saturating_sub(ext).min(nz - 1);
            for ix in 0..pnx {
                let ux = ix.saturating_sub(ext).min(nx - 1);
                let i = iz * pnx + ix;
                let v = m.values[uz * nx + ux];
                let sdt = sponge.damping()[i] * dt_t;
                a[i] = two - sdt;
                b[i] = one - sdt;
                let vdt = v * dt_t;
                cf[i] = vdt * vdt;
                v_pad[i] = v;
            }
        }
        let h2 = m.grid.dx_m() * m.grid.dx_m();
        let lap = [
            T::fl(LAP[0] / h2),
            T::fl(LAP[1] / h2),
            T::fl(LAP[2] / h2 * 2.0),
            T::fl(LAP[3] / h2),
            T::fl(LAP[4] / h2),
        ];
        Ok(Engine {
            pnz,
            pnx,
            ext,
            nz,
            nx,
            a,
            b,
            cf,
            v_pad,
            inv_dx2: T::fl(1.0 / h2),
            dt,
            lap,
        })
    }

    fn cells(&self) -> usize {
        self.pnz * self.pnx
    }

    fn pad_index(&self, cell: (usize, usize)) -> usize {
        (cell.0 + self.ext) * self.pnx + cell.1 + self.ext
    }

    /// out[i] = lap(u)[i] over the compute region (ghost ring untouched).
    fn laplacian(&self, u: &[T], out: &mut [T]) {
        let pnx = self.pnx;
        let [l0, l1, lc, _, _] = self.lap;
        for iz in GHOST..self.pnz - GHOST {
            let r = iz * pnx;
            for ix in GHOST..pnx - GHOST {
                let i = r + ix;
                out[i] = lc * u[i]
                    + l1 * (u[i - pnx] + u[i + pnx] + u[i - 1] + u[i + 1])
                    + l0 * (u[i - 2 * pnx] + u[i + 2 * pnx] + u[i - 2] + u[i + 2]);
            }
        }
    }

    /// One leapfrog step: u_next from (u_prev, u) with source sample w_t.
    fn step(&self, u_prev: &[T], u: &[T], u_next: &mut [T], w_t: T, src: usize) {
        let pnx = self.pnx;
        let [l0, l1, lc, _, _] = self.lap;
        for iz in GHOST..self.pnz - GHOST {
            let r = iz * pnx;
            for ix in GHOST..pnx - GHOST {
                let i = r + ix;
                let lap = lc * u[i]
                    + l1 * (u[i - pnx] + u[i + pnx] + u[i - 1] + u[i + 1])
                    + l0 * (u[i - 2 * pnx] + u[i + 2 * pnx] + u[i - 2] + u[i + 2]);
                u_next[i] = self.a[i] * u[i] - self.b[i] * u_prev[i] + self.cf[i] * lap;
            }
        }
        u_next[src] += self.cf[src] * w_t * self.inv_dx2;
    }

    fn crop_to_user(&self, u: &[T], out: &mut [T]) {
        for iz in 0..self.nz {
            let src = (iz + self.ext) * self.pnx + self.ext;
            out[iz * self.nx..(iz + 1) * self.nx].copy_from_slice(&u[src..src + self.nx]);
        }
    }
}

fn validate_geometry(g: &AcquisitionGeometry, grid: &Grid2D) -> Result<(), PropagatorError> {
    for &(iz, ix) in g.source_cells.iter().chain(g.receiver_cells.iter()) {
        if iz >= grid.nz || ix >= grid.nx {
            return Err(PropagatorError::CellOutsideGrid {
                iz,
                ix,
                nz: grid.nz,
                nx: grid.nx,
            });
        }
    }
    Ok(())
}

/// How often the stability check scans the field.
const FINITE_CHECK_STRIDE: usize = 64;

/// Runs one shot forward; records the gather and optionally every padded
/// snapshot (for the adjoint) into `keep_padded`.
fn forward_one_shot<T: Scalar>(
    eng: &Engine<T>,
    wavelet: &[T],
    src: usize,
    receivers: &[usize],
    gather: &mut [T],
    mut keep_padded: Option<&mut Vec<T>>,
) -> Result<(), PropagatorError> {
    let nt = wavelet.len();
    let n_g = receivers.len();
    let cells = eng.cells();
    let mut u_prev = vec![T::zero(); cells];
    let mut u = vec![T::zero(); cells];
    let mut u_next = vec![T::zero(); cells];
    if let Some(store) = keep_padded.as_deref_mut() {
        store.clear();
        store.resize(nt * cells, T::zero());
    }
    // Gather rows 0 and 1 are the quiescent start; stepping fills t+1.
    for t in 1..nt.saturating_sub(1) {
        eng.step(&u_prev, &u, &mut u_next, wavelet[t], src);
        let row = &mut gather[(t + 1) * n_g..(t + 2) * n_g];
        for (o, &r) in row.iter_mut().zip(receivers) {
            *o = u_next[r];
        }
        if let Some(store) = keep_padded.as_deref_mut() {
            store[(t + 1) * cells..(t + 2) * cells].copy_from_slice(&u_next);
        }
        if (t + 1) % FINITE_CHECK_STRIDE == 0 || t + 1 == nt - 1 {
            if u_next.iter().any(|x| !x.is_finite()) {
                return Err(PropagatorError::Unstable { step: t + 1 });
            }
        }
        std::mem::swap(&mut u_prev, &mut u);
        std::mem::swap(&mut u, &mut u_next);
    }
    Ok(())
}

/// Simulates every shot in the geometry. Returns gathers [shot][time][rcv]
/// and, when requested, all wavefield snapshots per shot (user grid crop).
/// Shots run in parallel; outputs are identical to a serial run.
pub fn forward<T: Scalar>(
    m: &VelocityModel<T>,
    w: &Wavelet<T>,
    g: &AcquisitionGeometry,
    sponge: &SpongeProfile<T>,
    keep_wavefields: bool,
) -> Result<(ShotGathers<T>, Option<Vec<Wavefields<T>>>), PropagatorError> {
    validate_geometry(g, &m.grid)?;
    let eng = Engine::new(m, sponge, w.dt)?;
    let nt = w.nt();
    let receivers: Vec<usize> = g.receiver_cells.iter().map(|&c| eng.pad_index(c)).collect();
    let mut gathers = ShotGathers::zeros(g.n_s, nt, g.n_g, w.dt, g.clone());
    let block = nt * g.n_g;

    let results: Result<Vec<Option<Wavefields<T>>>, PropagatorError> = gathers
        .data
        .par_chunks_mut(block)
        .zip(g.source_cells.par_iter())
        .map(|(gather, &src_cell)| {
            let src = eng.pad_index(src_cell);
            let mut padded = keep_wavefields.then(Vec::new);
            forward_one_shot(&eng, &w.samples, src, &receivers, gather, padded.as_mut())?;
            Ok(padded.map(|store| {
                let mut snapshots = vec![T::zero(); nt * eng.nz * eng.nx];
                for t in 0..nt {
                    let cells = eng.cells();
                    let mut crop = vec![T::zero(); eng.nz * eng.nx];
                    eng.crop_to_user(&store[t * cells..(t + 1) * cells], &mut crop);
                    snapshots[t * eng.nz * eng.nx..(t + 1) * eng.nz * eng.nx]
                        .copy_from_slice(&crop);
                }
                Wavefields {
                    nt,
                    nz: eng.nz,
                    nx: eng.nx,
                    snapshots,
                }
            }))
        })
        .collect();
    let fields = results?;
    let wavefields = if keep_wavefields {
        Some(fields.into_iter().map(|f| f.expect("kept")).collect())
    } else {
        None
    };
    Ok((gathers, wavefields))
}

/// Per-shot linearized sweep: propagates the base field and its tangent
/// together, recording the tangent at the receivers.
fn linearized_one_shot<T: Scalar>(
    eng: &Engine<T>,
    dcf: &[T],
    wavelet: &[T],
    src: usize,
    receivers: &[usize],
    dgather: &mut [T],
) -> Result<(), PropagatorError> {
    let nt = wavelet.len();
    let n_g = receivers.len();
    let cells = eng.cells();
    let mut u_prev = vec![T::zero(); cells];
    let mut u = vec![T::zero(); cells];
    let mut u_next = vec![T::zero(); cells];
    let mut du_prev = vec![T::zero(); cells];
    let mut du = vec![T::zero(); cells];
    let mut du_next = vec![T::zero(); cells];
    let mut lap_u = vec![T::zero(); cells];
    let pnx = eng.pnx;
    let [l0, l1, lc, _, _] = eng.lap;
    for t in 1..nt.saturating_sub(1) {
        // The tangent of the update rule: same stencil on du plus the
        // coefficient perturbation acting on the base field.
        eng.laplacian(&u, &mut lap_u);
        for iz in GHOST..eng.pnz - GHOST {
            let r = iz * pnx;
            for ix in GHOST..pnx - GHOST {
                let i = r + ix;
                let lap_du = lc * du[i]
                    + l1 * (du[i - pnx] + du[i + pnx] + du[i - 1] + du[i + 1])
                    + l0 * (du[i - 2 * pnx] + du[i + 2 * pnx] + du[i - 2] + du[i + 2]);
                du_next[i] = eng.a[i] * du[i] - eng.b[i] * du_prev[i]
                    + eng.cf[i] * lap_du
                    + dcf[i] * lap_u[i];
            }
        }
        du_next[src] += dcf[src] * wavelet[t] * eng.inv_dx2;
        eng.step(&u_prev, &u, &mut u_next, wavelet[t], src);
        let row = &mut dgather[(t + 1) * n_g..(t + 2) * n_g];
        for (o, &r) in row.iter_mut().zip(receivers) {
            *o = du_next[r];
        }
        if (t + 1) % FINITE_CHECK_STRIDE == 0 || t + 1 == nt - 1 {
            if u_next.iter().chain(du_next.iter()).any(|x| !x.is_finite()) {
                return Err(PropagatorError::Unstable { step: t + 1 });
            }
        }
        std::mem::swap(&mut u_prev, &mut u);
        std::mem::swap(&mut u, &mut u_next);
        std::mem::swap(&mut du_prev, &mut du);
        std::mem::swap(&mut du, &mut du_next);
    }
    Ok(())
}

/// Directional derivative of `forward`'s gathers with respect to the
/// velocity grid: the linearized (Born) propagator applied to the
/// perturbation `dv` (one value per user-grid cell). Exact to rounding,
/// so together with [`vjp`] it supports transpose consistency checks:
/// <forward_linearized(dv), y> = <dv, vjp(y).0> for any dv, y.
pub fn forward_linearized<T: Scalar>(
    m: &VelocityModel<T>,
    w: &Wavelet<T>,
    g: &AcquisitionGeometry,
    sponge: &SpongeProfile<T>,
    dv: &[T],
) -> Result<ShotGathers<T>, PropagatorError> {
    validate_geometry(g, &m.grid)?;
    if dv.len() != m.grid.cells() {
        return Err(PropagatorError::PerturbationShape {
            got: dv.len(),
            want: m.grid.cells(),
        });
    }
    let eng = Engine::new(m, sponge, w.dt)?;
    let nt = w.nt();
    // d(cf)/dv in direction dv on the padded grid, with the same edge
    // replication the coefficients use: cf = (v dt)^2 => dcf = 2 v dt^2 dv.
    let two_dt2 = T::fl(2.0 * eng.dt * eng.dt);
    let mut dcf = vec![T::zero(); eng.cells()];
    for iz in 0..eng.pnz {
        let uz = iz.saturating_sub(eng.ext).min(eng.nz - 1);
        for ix in 0..eng.pnx {
            let ux = ix.saturating_sub(eng.ext).min(eng.nx - 1);
            let i = iz * eng.pnx + ix;
            dcf[i] = two_dt2 * eng.v_pad[i] * dv[uz * eng.nx + ux];
        }
    }
    let receivers: Vec<usize> = g.receiver_cells.iter().map(|&c| eng.pad_index(c)).collect();
    let mut dgathers = ShotGathers::zeros(g.n_s, nt, g.n_g, w.dt, g.clone());
    let block = nt * g.n_g;
    let results: Result<Vec<()>, PropagatorError> = dgathers
        .data
        .par_chunks_mut(block)
        .zip(g.source_cells.par_iter())
        .map(|(dgather, &src_cell)| {
            let src = eng.pad_index(src_cell);
            linearized_one_shot(&eng, &dcf, &w.samples, src, &receivers, dgather)
        })
        .collect();
    results?;
    Ok(dgathers)
}

/// Per-shot adjoint sweep. Returns (grad over padded c, grad_f contribution).
fn adjoint_one_shot<T: Scalar>(
    eng: &Engine<T>,
    wavelet: &[T],
    dwdf: &[T],
    src: usize,
    receivers: &[usize],
    y: &[T],
) -> Result<(Vec<T>, T), PropagatorError> {
    let nt = wavelet.len();
    let n_g = receivers.len();
    let cells = eng.cells();

    // Forward pass storing all padded snapshots.
    let mut us = Vec::new();
    let mut scratch_gather = vec![T::zero(); nt * n_g];
    forward_one_shot(eng, wavelet, src, receivers, &mut scratch_gather, Some(&mut us))?;

    let mut grad_c = vec![T::zero(); cells];
    let mut grad_f = T::zero();
    let mut lam_p1: Vec<T> = vec![T::zero(); cells]; // lambda[t+1]
    let mut lam_p2: Vec<T> = vec![T::zero(); cells]; // lambda[t+2]
    let mut lam = vec![T::zero(); cells];
    let mut tmp = vec![T::zero(); cells];
    let mut lap_buf = vec![T::zero(); cells];

    // lambda[t] = R^T y[t] + a.lam[t+1] + L(c.lam[t+1]) - b.lam[t+2],
    // with each recursion term present only where the forward equation it
    // transposes exists. Gradients need lambda[t] for t = nt-1 .. 2.
    for t in (2..nt).rev() {
        lam.iter_mut().for_each(|x| *x = T::zero());
        let yrow = &y[t * n_g..(t + 1) * n_g];
        for (g_i, &r) in receivers.iter().enumerate() {
            lam[r] += yrow[g_i];
        }
        if t + 1 < nt {
            for i in 0..cells {
                tmp[i] = eng.cf[i] * lam_p1[i];
            }
            eng.laplacian(&tmp, &mut lap_buf);
            let pnx = eng.pnx;
            for iz in GHOST..eng.pnz - GHOST {
                for i in iz * pnx + GHOST..iz * pnx + eng.pnx - GHOST {
                    lam[i] += eng.a[i] * lam_p1[i] + lap_buf[i];
                }
            }
        }
        if t + 2 < nt {
            for i in 0..cells {
                lam[i] -= eng.b[i] * lam_p2[i];
            }
        }
        // This lambda[t] multiplies the equation that built u[t] from
        // u[t-1]: accumulate d/dc and the wavelet gradient at tau = t-1.
        let u_tm1 = &us[(t - 1) * cells..t * cells];
        eng.laplacian(u_tm1, &mut lap_buf);
        let pnx = eng.pnx;
        for iz in GHOST..eng.pnz - GHOST {
            for i in iz * pnx + GHOST..iz * pnx + eng.pnx - GHOST {
                grad_c[i] += lam[i] * lap_buf[i];
            }
        }
        let w_tm1 = wavelet[t - 1];
        grad_c[src] += lam[src] * w_tm1 * eng.inv_dx2;
        let grad_w = lam[src] * eng.cf[src] * eng.inv_dx2;
        grad_f += grad_w * dwdf[t - 1];

        std::mem::swap(&mut lam_p2, &mut lam_p1);
        std::mem::swap(&mut lam_p1, &mut lam);
    }
    Ok((grad_c, grad_f))
}

/// Gradient of <adjoint_source, forward(m, w, g)> with respect to the
/// velocity grid and the source peak frequency. Sums over shots; shots run
/// in parallel with a fixed-order reduction.
pub fn vjp<T: Scalar>(
    m: &VelocityModel<T>,
    w: &Wavelet<T>,
    g: &AcquisitionGeometry,
    sponge: &SpongeProfile<T>,
    adjoint_source: &ShotGathers<T>,
) -> Result<(Vec<T>, T), PropagatorError> {
    validate_geometry(g, &m.grid)?;
    let eng = Engine::new(m, sponge, w.dt)?;
    let nt = w.nt();
    if adjoint_source.n_s != g.n_s || adjoint_source.nt != nt || adjoint_source.n_g != g.n_g {
        return Err(PropagatorError::AdjointShape {
            n_s: adjoint_source.n_s,
            nt: adjoint_source.nt,
            n_g: adjoint_source.n_g,
            want_s: g.n_s,
            want_t: nt,
            want_g: g.n_g,
        });
    }
    let dwdf = ricker_df::<T>(w.f_peak, nt, w.dt, Some(w.t0))?;
    let receivers: Vec<usize> = g.receiver_cells.iter().map(|&c| eng.pad_index(c)).collect();

    let per_shot: Result<Vec<(Vec<T>, T)>, PropagatorError> = (0..g.n_s)
        .into_par_iter()
        .map(|s| {
            let src = eng.pad_index(g.source_cells[s]);
            adjoint_one_shot(
                &eng,
                &w.samples,
                &dwdf.samples,
                src,
                &receivers,
                adjoint_source.shot(s),
            )
        })
        .collect();
    let per_shot = per_shot?;

    // Fixed-order reduction over shots, then chain rule c = (v*dt)^2 and
    // fold the edge-replicated padding back onto the user grid.
    let cells = eng.cells();
    let mut grad_c = vec![T::zero(); cells];
    let mut grad_f = T::zero();
    for (gc, gf) in &per_shot {
        for i in 0..cells {
            grad_c[i] += gc[i];
        }
        grad_f += *gf;
    }
    let two_dt2 = T::fl(2.0 * eng.dt * eng.dt);
    let mut grad_v = vec![T::zero(); eng.nz * eng.nx];
    for iz in 0..eng.pnz {
        let uz = iz.saturating_sub(eng.ext).min(eng.nz - 1);
        for ix in 0..eng.pnx {
            let ux = ix.saturating_sub(eng.ext).min(eng.nx - 1);
            let i = iz * eng.pnx + ix;
            grad_v[uz * eng.nx + ux] += two_dt2 * eng.v_pad[i] * grad_c[i];
        }
    }
    Ok((grad_v, grad_f))
}
