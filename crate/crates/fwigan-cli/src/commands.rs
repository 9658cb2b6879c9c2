//! Implementations of the `fwigan` subcommands.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use fwigan_core::geometry::{surface_layout, Grid2D};
use fwigan_core::io::{
    header_path, load_gathers, render_gather_heatmap, render_model_heatmap, save_gathers,
    sha256_file, Manifest,
};
use fwigan_core::losses::add_awgn;
use fwigan_core::metrics::{rel_error, snr_db, ssim};
use fwigan_core::modelzoo::{
    gaussian_smooth, linear_model, load_with_sidecar, save_raw_grid, three_layer_desk,
};
use fwigan_core::optimize::{
    run_fwi, run_fwigan, EpochRecord, MetricSample, TrainConfig, TrainError, SPONGE_WIDTH,
};
use fwigan_core::propagator::{forward, PropagatorError};
use fwigan_core::source::ricker;
use fwigan_core::{ShotGathers64, SpongeProfile, VelocityModel64};

use crate::{
    AddNoiseArgs, CliError, InvertArgs, MetricsArgs, ModeArg, RenderArgs, SimulateArgs,
};

// ------------------------------------------------------------ error mapping

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn failure<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Failure(e.to_string())
}

/// A propagation failure is a usage problem (unstable step, bad geometry)
/// unless the simulation itself blew up mid-run.
fn prop_err(e: PropagatorError) -> CliError {
    match e {
        PropagatorError::Unstable { .. } => CliError::Failure(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

/// Training errors caused by the caller's inputs exit with the usage code;
/// mid-run numerical failures are internal.
fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::BatchMismatch { .. } | TrainError::BadConfig(_) | TrainError::Source(_) => {
            CliError::Usage(e.to_string())
        }
        TrainError::Propagation { ref source, .. } => match source {
            PropagatorError::Unstable { .. } => CliError::Failure(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        },
        other => CliError::Failure(other.to_string()),
    }
}

// ------------------------------------------------------------------ threads

/// Resolves the worker-thread count (FWIGAN_THREADS beats --threads beats
/// the core count) and pins the global thread pool when an override is set.
pub fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match std::env::var("FWIGAN_THREADS") {
        Ok(s) => Some(s.trim().parse::<usize>().map_err(|_| {
            CliError::Usage(format!("FWIGAN_THREADS must be a positive integer, got {s:?}"))
        })?),
        Err(_) => flag,
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failure(format!("thread pool: {e}")))?;
    }
    Ok(())
}

// ------------------------------------------------------------ model parsing

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, spec: &str) -> Result<T, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad {name} {s:?} in model spec {spec:?}")))
}

/// Self-contained model spec for `simulate` and `render` inputs. Returns
/// the model plus the file path when it was loaded from disk.
fn parse_model_spec(spec: &str) -> Result<(VelocityModel64, Option<PathBuf>), CliError> {
    if spec == "three-layer" {
        return Ok((three_layer_desk(), None));
    }
    if let Some(rest) = spec.strip_prefix("linear:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 5 {
            return Err(CliError::Usage(
                "linear model spec is linear:v0,beta,nz,nx,dx (m/s, m/s per km, cells, cells, km)"
                    .into(),
            ));
        }
        let v0: f64 = parse_field(parts[0], "v0", spec)?;
        let beta: f64 = parse_field(parts[1], "beta", spec)?;
        let nz: usize = parse_field(parts[2], "nz", spec)?;
        let nx: usize = parse_field(parts[3], "nx", spec)?;
        let dx: f64 = parse_field(parts[4], "dx", spec)?;
        let grid = Grid2D::new(nz, nx, dx).map_err(usage)?;
        return Ok((linear_model(grid, v0, beta).map_err(usage)?, None));
    }
    let path = PathBuf::from(spec);
    let model = load_with_sidecar(&path)
        .map_err(|e| CliError::Usage(format!("model {spec}: {e}")))?;
    Ok((model, Some(path)))
}

/// Starting model for `invert`. "smoothed" and "linear:v0,beta" both derive
/// their grid (and clamp bounds) from the reference model.
fn resolve_init(
    spec: &str,
    sigma: f64,
    truth: Option<&VelocityModel64>,
) -> Result<(VelocityModel64, Option<PathBuf>), CliError> {
    if spec == "smoothed" {
        let t = truth.ok_or_else(|| {
            CliError::Usage("--init-model smoothed needs --truth to supply the model".into())
        })?;
        return Ok((gaussian_smooth(t, sigma).map_err(usage)?, None));
    }
    if let Some(rest) = spec.strip_prefix("linear:") {
        let t = truth.ok_or_else(|| {
            CliError::Usage(
                "--init-model linear:v0,beta takes its grid and bounds from --truth".into(),
            )
        })?;
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(CliError::Usage(
                "starting-model spec is linear:v0,beta (m/s at the surface, m/s per km)".into(),
            ));
        }
        let v0: f64 = parse_field(parts[0], "v0", spec)?;
        let beta: f64 = parse_field(parts[1], "beta", spec)?;
        let m = linear_model(t.grid, v0, beta)
            .map_err(usage)?
            .with_bounds(t.v_min, t.v_max)
            .map_err(usage)?;
        return Ok((m, None));
    }
    let path = PathBuf::from(spec);
    let model = load_with_sidecar(&path)
        .map_err(|e| CliError::Usage(format!("starting model {spec}: {e}")))?;
    Ok((model, Some(path)))
}

// ---------------------------------------------------------------- manifests

#[derive(serde::Serialize)]
struct CommandManifest {
    format_version: u32,
    command: &'static str,
    args: serde_json::Value,
    input_sha256: BTreeMap<String, String>,
    output_sha256: String,
}

/// `<out>.manifest.json`, holding everything needed to reproduce the file.
fn manifest_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

fn write_command_manifest(
    out_file: &Path,
    command: &'static str,
    args: serde_json::Value,
    input_sha256: BTreeMap<String, String>,
) -> Result<(), CliError> {
    let doc = CommandManifest {
        format_version: 1,
        command,
        args,
        input_sha256,
        output_sha256: sha256_file(out_file).map_err(failure)?,
    };
    let bytes = serde_json::to_vec_pretty(&doc).map_err(failure)?;
    std::fs::write(manifest_path(out_file), bytes).map_err(failure)
}

// ----------------------------------------------------------------- simulate

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let (model, model_path) = parse_model_spec(&a.model)?;
    let geom = surface_layout(&model.grid, a.shots, a.shot_depth).map_err(usage)?;
    let sponge = SpongeProfile::quadratic(&model.grid, SPONGE_WIDTH, model.v_max);
    let wavelet = ricker(a.wavelet_f, a.nt, a.dt, None).map_err(usage)?;
    let (gathers, _) = forward(&model, &wavelet, &geom, &sponge, false).map_err(prop_err)?;
    save_gathers(&a.out, &gathers).map_err(failure)?;
    if let Some(p) = &a.save_model {
        save_raw_grid(&model, p).map_err(failure)?;
    }

    let mut inputs = BTreeMap::new();
    if let Some(p) = &model_path {
        inputs.insert("model".to_string(), sha256_file(p).map_err(usage)?);
    }
    write_command_manifest(
        &a.out,
        "simulate",
        serde_json::json!({
            "model": a.model,
            "wavelet_f": a.wavelet_f,
            "shots": a.shots,
            "shot_depth": a.shot_depth,
            "nt": a.nt,
            "dt": a.dt,
            "seed": a.seed,
            "save_model": a.save_model,
        }),
        inputs,
    )?;
    println!(
        "wrote {} shots x {} samples x {} receivers to {}",
        gathers.n_s,
        gathers.nt,
        gathers.n_g,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- add-noise

pub fn add_noise(a: AddNoiseArgs) -> Result<(), CliError> {
    let clean: ShotGathers64 = load_gathers(&a.input)
        .map_err(|e| CliError::Usage(format!("gathers {}: {e}", a.input.display())))?;
    let noisy = add_awgn(&clean, a.snr_db, a.seed);
    save_gathers(&a.out, &noisy).map_err(failure)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("in".to_string(), sha256_file(&a.input).map_err(usage)?);
    write_command_manifest(
        &a.out,
        "add-noise",
        serde_json::json!({ "snr_db": a.snr_db, "seed": a.seed }),
        inputs,
    )?;
    match snr_db(&clean, &noisy) {
        Some(m) => println!("target {:.2} dB, measured {:.2} dB", a.snr_db, m),
        None => println!("target {:.2} dB (input is silent; output unchanged)", a.snr_db),
    }
    Ok(())
}

// ------------------------------------------------------------------- invert

fn write_losses_csv(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut s = String::from("epoch,critic_loss,gen_loss,lr_v,snr_db\n");
    for r in history {
        use std::fmt::Write as _;
        let critic = r.critic_loss.map(|v| v.to_string()).unwrap_or_default();
        let snr = r.snr_db.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, critic, r.gen_loss, r.lr_v, snr);
    }
    std::fs::write(path, s)
}

fn write_metrics_csv(path: &Path, samples: &[MetricSample]) -> std::io::Result<()> {
    let mut s = String::from("epoch,ssim,error\n");
    for m in samples {
        use std::fmt::Write as _;
        let _ = writeln!(s, "{},{},{}", m.epoch, m.ssim, m.error);
    }
    std::fs::write(path, s)
}

pub fn invert(a: InvertArgs) -> Result<(), CliError> {
    let obs: ShotGathers64 = load_gathers(&a.obs)
        .map_err(|e| CliError::Usage(format!("observed gathers {}: {e}", a.obs.display())))?;
    let truth = a
        .truth
        .as_ref()
        .map(|p| {
            load_with_sidecar::<f64>(p)
                .map_err(|e| CliError::Usage(format!("truth {}: {e}", p.display())))
        })
        .transpose()?;
    let (init, init_path) = resolve_init(&a.init_model, a.init_sigma, truth.as_ref())?;

    let mut cfg = match a.mode {
        ModeArg::Fwi => TrainConfig::fwi_default(),
        ModeArg::Fwigan => TrainConfig::fwigan_default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.n_critic {
        cfg.n_critic = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.lr_v {
        cfg.lr_v = v;
    }
    if let Some(v) = a.lr_c {
        cfg.lr_c = v;
    }
    if let Some(v) = a.lr_f {
        cfg.lr_f = v;
    }
    if let Some(v) = &a.milestones {
        cfg.milestones = v.clone();
    }
    cfg.seed = a.seed;
    if a.learn_noise {
        if a.mode == ModeArg::Fwi {
            return Err(CliError::Usage(
                "--learn-noise requires --mode fwigan".into(),
            ));
        }
        cfg = cfg.with_noisy_clips();
    }
    if obs.n_s % cfg.batch_size != 0 {
        return Err(CliError::Usage(format!(
            "batch size {} does not divide the shot count {}",
            cfg.batch_size, obs.n_s
        )));
    }

    std::fs::create_dir_all(&a.out_dir).map_err(failure)?;

    // Stream one JSON line per epoch to stderr for live progress.
    let mut progress = std::io::stderr();
    let run = match a.mode {
        ModeArg::Fwi => run_fwi(
            &cfg,
            &obs,
            &init,
            a.wavelet_f,
            truth.as_ref(),
            Some(&mut progress as &mut dyn Write),
        ),
        ModeArg::Fwigan => run_fwigan(
            &cfg,
            &obs,
            &init,
            a.wavelet_f,
            a.learn_noise.then_some(a.snr_init),
            truth.as_ref(),
            Some(&mut progress as &mut dyn Write),
        ),
    }
    .map_err(train_err)?;

    save_raw_grid(&run.model, &a.out_dir.join("model.f32")).map_err(failure)?;
    save_raw_grid(&init, &a.out_dir.join("init.f32")).map_err(failure)?;
    write_losses_csv(&a.out_dir.join("losses.csv"), &run.history).map_err(failure)?;
    if truth.is_some() {
        write_metrics_csv(&a.out_dir.join("metrics.csv"), &run.metric_history)
            .map_err(failure)?;
    }
    render_model_heatmap(&run.model, &a.out_dir.join("model.pgm")).map_err(failure)?;
    render_model_heatmap(&init, &a.out_dir.join("init.pgm")).map_err(failure)?;
    if let Some(t) = &truth {
        render_model_heatmap(t, &a.out_dir.join("truth.pgm")).map_err(failure)?;
    }

    let mut input_hashes = BTreeMap::new();
    input_hashes.insert("obs".to_string(), sha256_file(&a.obs).map_err(usage)?);
    if let Some(p) = &a.truth {
        input_hashes.insert("truth".to_string(), sha256_file(p).map_err(usage)?);
    }
    if let Some(p) = &init_path {
        input_hashes.insert("init".to_string(), sha256_file(p).map_err(usage)?);
    }
    let manifest = Manifest::from_run(
        &cfg,
        a.wavelet_f,
        a.learn_noise.then_some(a.snr_init),
        input_hashes,
        &run,
    );
    manifest.save(&a.out_dir.join("manifest.json")).map_err(failure)?;

    println!("final source frequency {:.4} Hz", run.f_peak);
    if let Some(s) = run.snr_db {
        println!("learned noise level {:.2} dB", s);
    }
    if let Some(m) = run.metric_history.last() {
        println!("final ssim {:.4}, relative error {:.4}", m.ssim, m.error);
    }
    println!("outputs in {}", a.out_dir.display());
    Ok(())
}

// ------------------------------------------------------------------ metrics

pub fn metrics_cmd(a: MetricsArgs) -> Result<(), CliError> {
    let truth: VelocityModel64 = load_with_sidecar(&a.truth)
        .map_err(|e| CliError::Usage(format!("truth {}: {e}", a.truth.display())))?;
    let cand: VelocityModel64 = load_with_sidecar(&a.candidate)
        .map_err(|e| CliError::Usage(format!("candidate {}: {e}", a.candidate.display())))?;
    if truth.grid != cand.grid {
        return Err(CliError::Usage(format!(
            "grid mismatch: truth is {}x{} (dx {}), candidate is {}x{} (dx {})",
            truth.grid.nz,
            truth.grid.nx,
            truth.grid.dx,
            cand.grid.nz,
            cand.grid.nx,
            cand.grid.dx
        )));
    }
    let doc = serde_json::json!({
        "ssim": ssim(&cand, &truth),
        "error": rel_error(&cand, &truth),
    });
    println!("{doc}");
    Ok(())
}

// ------------------------------------------------------------------- render

pub fn render(a: RenderArgs) -> Result<(), CliError> {
    let header = header_path(&a.input);
    let raw = std::fs::read(&header).map_err(|e| {
        CliError::Usage(format!("no JSON header next to {}: {e}", a.input.display()))
    })?;
    let doc: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| CliError::Usage(format!("header {}: {e}", header.display())))?;

    if doc.get("nz").is_some() {
        let m: VelocityModel64 = load_with_sidecar(&a.input)
            .map_err(|e| CliError::Usage(format!("model {}: {e}", a.input.display())))?;
        render_model_heatmap(&m, &a.out).map_err(failure)?;
    } else if doc.get("n_s").is_some() {
        let g: ShotGathers64 = load_gathers(&a.input)
            .map_err(|e| CliError::Usage(format!("gathers {}: {e}", a.input.display())))?;
        if a.shot >= g.n_s {
            return Err(CliError::Usage(format!(
                "shot {} out of range: file holds {} shots",
                a.shot, g.n_s
            )));
        }
        render_gather_heatmap(&g, a.shot, &a.out).map_err(failure)?;
    } else {
        return Err(CliError::Usage(format!(
            "{} is neither a model sidecar nor a gather header",
            header.display()
        )));
    }

    let mut inputs = BTreeMap::new();
    inputs.insert("in".to_string(), sha256_file(&a.input).map_err(usage)?);
    write_command_manifest(
        &a.out,
        "render",
        serde_json::json!({ "shot": a.shot }),
        inputs,
    )?;
    println!("wrote {}", a.out.display());
    Ok(())
}
