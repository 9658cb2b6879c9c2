//! Physical sanity of the wave propagator: kinematics, reciprocity,
//! discrete energy conservation, absorbing boundaries, and thread-count
//! independence.

use fwigan_core::geometry::{surface_layout, AcquisitionGeometry, Grid2D};
use fwigan_core::modelzoo::{layered, three_layer_desk};
use fwigan_core::propagator::forward;
use fwigan_core::source::ricker;
use fwigan_core::SpongeProfile;

/// Direct-arrival kinematics at 2000 m/s. In two dimensions the response
/// trails the geometric arrival by a wavelet-dependent wake delay that is
/// nearly independent of offset, so the check compares the peak-time
/// difference between two receivers against the extra 600 m of path.
#[test]
fn travel_time_matches_straight_ray() {
    let grid = Grid2D::new(40, 80, 0.03).unwrap();
    let model = layered::<f64>(grid, &[], &[2000.0]).unwrap();
    // Mid-depth line keeps the geometry away from every boundary.
    let geom = AcquisitionGeometry::new(
        &grid,
        vec![(20, 10)],
        (0..grid.nx).map(|ix| (20, ix)).collect(),
    )
    .unwrap();
    let sponge = SpongeProfile::quadratic(&grid, 20, model.v_max);
    let dt = 0.003;
    let w = ricker(7.0, 300, dt, None).unwrap();
    let (gathers, _) = forward(&model, &w, &geom, &sponge, false).unwrap();

    let peak_time = |rcv: usize| {
        let trace: Vec<f64> = (0..gathers.nt)
            .map(|t| gathers.shot(0)[t * gathers.n_g + rcv])
            .collect();
        let peak = trace
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        peak as f64 * dt
    };

    // Receivers 600 m and 1200 m from the source: 0.3 s apart at 2000 m/s.
    let got = peak_time(50) - peak_time(30);
    let expected = 0.6 / 2.0;
    assert!(
        (got - expected).abs() <= 3.0 * dt,
        "differential arrival {got:.4} s, expected {expected:.4} s"
    );
}

/// Swapping source and receiver leaves the recorded trace unchanged: the
/// update operator is a diagonal conjugation of a symmetric stencil, and
/// the source injection carries the local speed factor that completes the
/// symmetry.
#[test]
fn reciprocity_holds_in_a_heterogeneous_medium() {
    let model = three_layer_desk::<f64>();
    let grid = model.grid;
    let a = (0, 10);
    let b = (0, 60);
    let geom = AcquisitionGeometry::new(
        &grid,
        vec![a, b],
        (0..grid.nx).map(|ix| (0, ix)).collect(),
    )
    .unwrap();
    let sponge = SpongeProfile::quadratic(&grid, 20, model.v_max);
    let w = ricker(7.0, 400, 0.003, None).unwrap();
    let (g, _) = forward(&model, &w, &geom, &sponge, false).unwrap();

    let trace_ab: Vec<f64> = (0..g.nt).map(|t| g.shot(0)[t * g.n_g + b.1]).collect();
    let trace_ba: Vec<f64> = (0..g.nt).map(|t| g.shot(1)[t * g.n_g + a.1]).collect();
    let num: f64 = trace_ab
        .iter()
        .zip(&trace_ba)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let den: f64 = trace_ab.iter().map(|x| x * x).sum();
    assert!(den > 0.0, "trace is silent");
    let rel = (num / den).sqrt();
    assert!(rel < 1e-9, "reciprocity violated: rel {rel:.3e}");
}

/// Without absorbing layers the leapfrog scheme conserves its discrete
/// energy once the source has died out. The energy at the half step is
/// E = 1/2 |du/dt|^2 - 1/2 <A u_n, u_{n+1}>, where A u_n is recovered
/// exactly from three consecutive snapshots.
#[test]
fn energy_is_conserved_without_absorption() {
    let grid = Grid2D::new(80, 80, 0.03).unwrap();
    let model = layered::<f64>(grid, &[], &[2000.0]).unwrap();
    let geom = AcquisitionGeometry::new(&grid, vec![(40, 40)], vec![(40, 41)]).unwrap();
    let sponge = SpongeProfile::none(&grid);
    let dt = 0.003;
    let nt = 100;
    let w = ricker(10.0, nt, dt, None).unwrap();
    let (_, wf) = forward(&model, &w, &geom, &sponge, true).unwrap();
    let wf = &wf.unwrap()[0];
    let cells = wf.nz * wf.nx;
    let snap = |n: usize| &wf.snapshots[n * cells..(n + 1) * cells];

    let energy = |n: usize| -> f64 {
        let (um, u0, up) = (snap(n - 1), snap(n), snap(n + 1));
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for i in 0..cells {
            let v = (up[i] - u0[i]) / dt;
            let au = (up[i] - 2.0 * u0[i] + um[i]) / (dt * dt);
            kinetic += v * v;
            potential -= au * up[i];
        }
        0.5 * (kinetic + potential)
    };

    // The 10 Hz source has decayed below 1e-11 of its peak by sample 85.
    let window: Vec<f64> = (86..nt - 1).map(energy).collect();
    let max = window.iter().cloned().fold(f64::MIN, f64::max);
    let min = window.iter().cloned().fold(f64::MAX, f64::min);
    assert!(max > 0.0, "wavefield is empty");
    let drift = (max - min) / max;
    assert!(drift < 1e-6, "energy drift {drift:.3e} over the quiet window");
}

/// With the sponge on, reflections off the domain edges are absorbed: the
/// tail of a trace is orders of magnitude below its first-arrival peak,
/// while the undamped run keeps bouncing.
#[test]
fn sponge_absorbs_edge_reflections() {
    let grid = Grid2D::new(40, 40, 0.03).unwrap();
    let model = layered::<f64>(grid, &[], &[2000.0]).unwrap();
    let geom = AcquisitionGeometry::new(&grid, vec![(20, 20)], vec![(20, 26)]).unwrap();
    let w = ricker(10.0, 300, 0.003, None).unwrap();

    let tail_over_peak = |sponge: &SpongeProfile<f64>| -> f64 {
        let (g, _) = forward(&model, &w, &geom, sponge, false).unwrap();
        let trace: Vec<f64> = (0..g.nt).map(|t| g.shot(0)[t * g.n_g]).collect();
        let peak = trace.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tail = trace[250..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        tail / peak
    };

    let damped = tail_over_peak(&SpongeProfile::quadratic(&grid, 20, model.v_max));
    let undamped = tail_over_peak(&SpongeProfile::none(&grid));
    assert!(damped < 1e-2, "sponge leaves tail at {damped:.3e} of peak");
    assert!(
        undamped > 20.0 * damped,
        "undamped tail {undamped:.3e} not clearly above damped {damped:.3e}"
    );
}

/// Shot-level parallelism must not change a single bit of the output.
#[test]
fn thread_count_does_not_change_results() {
    let model = three_layer_desk::<f64>();
    let geom = surface_layout(&model.grid, 3, 0).unwrap();
    let sponge = SpongeProfile::quadratic(&model.grid, 20, model.v_max);
    let w = ricker(7.0, 300, 0.003, None).unwrap();

    let run = |threads: usize| -> Vec<u64> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let (g, _) = pool
            .install(|| forward(&model, &w, &geom, &sponge, false))
            .unwrap();
        g.data.iter().map(|v| v.to_bits()).collect()
    };

    assert_eq!(run(1), run(4));
}
