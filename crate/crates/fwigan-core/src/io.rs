//! Persistence: shot-gather files, run manifests, grayscale heatmaps, and
//! depth-profile CSV export.
//!
//! Binary payloads are little-endian 32-bit floats; every header or
//! document is JSON carrying `"format_version": 1`. Artifacts are plain
//! formats (PGM, CSV) so they stay diffable without extra codecs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{AcquisitionGeometry, VelocityModel};
use crate::optimize::{EpochRecord, InversionRun, MetricSample, TrainConfig};
use crate::propagator::ShotGathers;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format_version {got} (expected {FORMAT_VERSION})")]
    Version { got: u32 },
    #[error("payload holds {got} bytes, header implies {want}")]
    PayloadMismatch { got: u64, want: u64 },
    #[error("gather header geometry disagrees with counts: {0}")]
    BadHeader(String),
    #[error("lateral position {pos} km outside [0, {max}] km")]
    PositionOutOfRange { pos: f64, max: f64 },
    #[error("models must share one grid: {0}")]
    GridMismatch(String),
    #[error("nothing to export")]
    Empty,
    #[error("heatmap dimensions {rows}x{cols} do not match {len} samples")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
}

/// Sidecar path: the JSON header/document living next to a binary payload.
pub fn header_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

// ---------------------------------------------------------------- gathers

/// JSON header stored next to a gather payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct GatherHeader {
    pub format_version: u32,
    pub n_s: usize,
    pub nt: usize,
    pub n_g: usize,
    pub dt_s: f64,
    pub source_cells: Vec<(usize, usize)>,
    pub receiver_cells: Vec<(usize, usize)>,
}

/// Writes the samples as little-endian f32 in [shot][time][receiver] order
/// plus the JSON header at `path`.json. Values are narrowed to f32, so a
/// reload reproduces the file bytes exactly (and the values exactly when
/// the element type is f32).
pub fn save_gathers<T: Scalar>(path: &Path, g: &ShotGathers<T>) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(g.data.len() * 4);
    for v in &g.data {
        bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let header = GatherHeader {
        format_version: FORMAT_VERSION,
        n_s: g.n_s,
        nt: g.nt,
        n_g: g.n_g,
        dt_s: g.dt,
        source_cells: g.geometry.source_cells.clone(),
        receiver_cells: g.geometry.receiver_cells.clone(),
    };
    std::fs::write(header_path(path), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

/// Loads a gather file written by [`save_gathers`], validating the header
/// version, the payload length, and the geometry counts.
pub fn load_gathers<T: Scalar>(path: &Path) -> Result<ShotGathers<T>, IoError> {
    let header: GatherHeader = serde_json::from_slice(&std::fs::read(header_path(path))?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(IoError::Version { got: header.format_version });
    }
    if header.source_cells.len() != header.n_s {
        return Err(IoError::BadHeader(format!(
            "{} source cells for n_s {}",
            header.source_cells.len(),
            header.n_s
        )));
    }
    if header.receiver_cells.len() != header.n_g {
        return Err(IoError::BadHeader(format!(
            "{} receiver cells for n_g {}",
            header.receiver_cells.len(),
            header.n_g
        )));
    }
    let bytes = std::fs::read(path)?;
    let want = (header.n_s * header.nt * header.n_g * 4) as u64;
    if bytes.len() as u64 != want {
        return Err(IoError::PayloadMismatch { got: bytes.len() as u64, want });
    }
    let data: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::fl(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let geometry = AcquisitionGeometry {
        n_s: header.n_s,
        n_g: header.n_g,
        source_cells: header.source_cells,
        receiver_cells: header.receiver_cells,
    };
    Ok(ShotGathers {
        data,
        n_s: header.n_s,
        nt: header.nt,
        n_g: header.n_g,
        dt: header.dt_s,
        geometry,
    })
}

// ---------------------------------------------------------------- manifest

/// One epoch's losses as stored in a manifest: [`EpochRecord`] minus the
/// wall-clock field, so reruns of the same configuration serialize
/// identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub critic_loss: Option<f64>,
    pub gen_loss: f64,
    pub lr_v: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr_db: Option<f64>,
}

impl From<&EpochRecord> for LossRow {
    fn from(r: &EpochRecord) -> Self {
        LossRow {
            epoch: r.epoch,
            critic_loss: r.critic_loss,
            gen_loss: r.gen_loss,
            lr_v: r.lr_v,
            snr_db: r.snr_db,
        }
    }
}

/// Everything needed to reproduce and audit one training run: the full
/// configuration (seed included), content hashes of the input files, and
/// the loss/metric histories.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub init_f: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub init_snr: Option<f64>,
    /// Hex SHA-256 of each input file, keyed by role (e.g. "observed").
    pub input_hashes: BTreeMap<String, String>,
    pub final_f: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_snr: Option<f64>,
    pub loss_history: Vec<LossRow>,
    pub metric_history: Vec<MetricSample>,
}

impl Manifest {
    pub fn from_run<T: Scalar>(
        config: &TrainConfig,
        init_f: f64,
        init_snr: Option<f64>,
        input_hashes: BTreeMap<String, String>,
        run: &InversionRun<T>,
    ) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            init_f,
            init_snr,
            input_hashes,
            final_f: run.f_peak,
            final_snr: run.snr_db,
            loss_history: run.history.iter().map(LossRow::from).collect(),
            metric_history: run.metric_history.clone(),
        }
    }

    /// Hex SHA-256 over the canonical serialization of both histories;
    /// bit-identical reruns produce equal hashes.
    pub fn history_hash(&self) -> String {
        let doc = serde_json::to_vec(&(&self.loss_history, &self.metric_history))
            .expect("histories serialize");
        hex(&Sha256::digest(&doc))
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Loads and validates a manifest; a document without a seed (or any
    /// other configuration field) is rejected.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.format_version != FORMAT_VERSION {
            return Err(IoError::Version { got: m.format_version });
        }
        Ok(m)
    }
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ---------------------------------------------------------------- heatmap

/// Writes a rows x cols field as a binary 8-bit grayscale PGM (P5), mapping
/// the value range linearly to [0, 255] with round-half-up; a constant
/// field (degenerate range) maps to 0.
pub fn render_heatmap<T: Scalar>(
    data: &[T],
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<(), IoError> {
    if data.len() != rows * cols {
        return Err(IoError::ShapeMismatch { rows, cols, len: data.len() });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in data {
        lo = lo.min(v.f64());
        hi = hi.max(v.f64());
    }
    let span = hi - lo;
    let mut out = Vec::with_capacity(32 + data.len());
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    for v in data {
        let q = if span > 0.0 {
            let t = (v.f64() - lo) / span;
            (t * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.push(q);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Velocity model heatmap (depth rows, lateral columns).
pub fn render_model_heatmap<T: Scalar>(m: &VelocityModel<T>, path: &Path) -> Result<(), IoError> {
    render_heatmap(&m.values, m.grid.nz, m.grid.nx, path)
}

/// One shot's gather heatmap (time rows, receiver columns).
pub fn render_gather_heatmap<T: Scalar>(
    g: &ShotGathers<T>,
    shot: usize,
    path: &Path,
) -> Result<(), IoError> {
    render_heatmap(g.shot(shot), g.nt, g.n_g, path)
}

// ---------------------------------------------------------------- profiles

/// Writes depth profiles as CSV: first column `depth_km`, then one column
/// per (model, lateral position) pair, the position snapped to the nearest
/// grid column. Positions outside the lateral extent are rejected. All
/// models must share one grid.
pub fn export_profiles<T: Scalar>(
    models: &[(&str, &VelocityModel<T>)],
    positions_km: &[f64],
    path: &Path,
) -> Result<(), IoError> {
    let Some((_, first)) = models.first() else {
        return Err(IoError::Empty);
    };
    if positions_km.is_empty() {
        return Err(IoError::Empty);
    }
    let grid = first.grid;
    for (name, m) in models {
        if m.grid != grid {
            return Err(IoError::GridMismatch(format!(
                "{name} is {}x{} dx {}, expected {}x{} dx {}",
                m.grid.nz, m.grid.nx, m.grid.dx, grid.nz, grid.nx, grid.dx
            )));
        }
    }
    let max_km = (grid.nx - 1) as f64 * grid.dx;
    let mut cols: Vec<usize> = Vec::with_capacity(positions_km.len());
    for &pos in positions_km {
        if !(0.0..=max_km).contains(&pos) {
            return Err(IoError::PositionOutOfRange { pos, max: max_km });
        }
        cols.push((pos / grid.dx).round() as usize);
    }
    let mut out = String::from("depth_km");
    for (name, _) in models {
        for &ix in &cols {
            out.push_str(&format!(",{name}@{:.3}km", ix as f64 * grid.dx));
        }
    }
    out.push('\n');
    for iz in 0..grid.nz {
        out.push_str(&format!("{:.6}", iz as f64 * grid.dx));
        for (_, m) in models {
            for &ix in &cols {
                out.push_str(&format!(",{}", m.at(iz, ix).f64()));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{surface_layout, Grid2D};
    use crate::modelzoo;
    use crate::optimize::run_fwi;
    use crate::propagator::{forward, SpongeProfile};
    use crate::source::ricker;

    fn sample_gathers() -> ShotGathers<f32> {
        let grid = Grid2D::new(10, 12, 0.03).unwrap();
        let geo = surface_layout(&grid, 3, 0).unwrap();
        let mut g = ShotGathers::zeros(3, 5, 12, 0.004, geo);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = (i as f32) * 0.25 - 7.0;
        }
        g
    }

    #[test]
    fn gathers_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.f32");
        let g = sample_gathers();
        save_gathers(&path, &g).unwrap();
        let back = load_gathers::<f32>(&path).unwrap();
        assert_eq!(g.data, back.data);
        assert_eq!(back.n_s, 3);
        assert_eq!(back.nt, 5);
        assert_eq!(back.n_g, 12);
        assert_eq!(back.dt, 0.004);
        assert_eq!(back.geometry, g.geometry);
        // Cross-check one sample against the flattened index arithmetic:
        // element (shot 2, time 3, receiver 7) sits at (2*5+3)*12+7 = 163.
        assert_eq!(back.at(2, 3, 7), g.data[163]);
        assert_eq!(back.at(2, 3, 7), 163.0 * 0.25 - 7.0);
        // Saving the reload reproduces the payload byte-for-byte.
        let path2 = dir.path().join("obs2.f32");
        save_gathers(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn gathers_payload_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.f32");
        let g = sample_gathers();
        save_gathers(&path, &g).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_gathers::<f32>(&path),
            Err(IoError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn gathers_bad_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.f32");
        save_gathers(&path, &sample_gathers()).unwrap();
        let hp = header_path(&path);
        let text = std::fs::read_to_string(&hp).unwrap();
        std::fs::write(&hp, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(matches!(load_gathers::<f32>(&path), Err(IoError::Version { got: 9 })));
    }

    fn tiny_run() -> (TrainConfig, InversionRun<f64>) {
        let grid = Grid2D::new(12, 16, 0.03).unwrap();
        let truth = modelzoo::layered(grid, &[0.5], &[1500.0, 2500.0]).unwrap();
        let geo = surface_layout(&grid, 2, 0).unwrap();
        let sponge = SpongeProfile::quadratic(&grid, 20, truth.v_max);
        let wav = ricker::<f64>(7.0, 100, 0.003, Some(1.0 / 7.0)).unwrap();
        let (obs, _) = forward(&truth, &wav, &geo, &sponge, false).unwrap();
        let init = modelzoo::gaussian_smooth(&truth, 3.0).unwrap();
        let mut cfg = TrainConfig::fwi_default();
        cfg.epochs = 3;
        cfg.seed = 11;
        let run = run_fwi(&cfg, &obs, &init, 7.0, Some(&truth), None).unwrap();
        (cfg, run)
    }

    #[test]
    fn manifest_round_trip_and_rerun_hash() {
        let dir = tempfile::tempdir().unwrap();
        let obs_path = dir.path().join("obs.f32");
        save_gathers(&obs_path, &sample_gathers()).unwrap();
        let mut hashes = BTreeMap::new();
        hashes.insert("observed".to_string(), sha256_file(&obs_path).unwrap());
        let (cfg, run) = tiny_run();
        let man = Manifest::from_run(&cfg, 7.0, None, hashes.clone(), &run);
        let path = dir.path().join("manifest.json");
        man.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.config.seed, 11);
        assert_eq!(back.loss_history, man.loss_history);
        assert_eq!(back.history_hash(), man.history_hash());
        // A rerun of the identical configuration reproduces the histories,
        // wall time excluded, so the manifest hash matches.
        let (_, run2) = tiny_run();
        let man2 = Manifest::from_run(&cfg, 7.0, None, hashes, &run2);
        assert_eq!(man.history_hash(), man2.history_hash());
        // Any history change shows up in the hash.
        let mut man3 = Manifest::load(&path).unwrap();
        man3.loss_history[0].gen_loss += 1.0;
        assert_ne!(man.history_hash(), man3.history_hash());
    }

    #[test]
    fn manifest_missing_seed_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, run) = tiny_run();
        let man = Manifest::from_run(&cfg, 7.0, None, BTreeMap::new(), &run);
        let path = dir.path().join("manifest.json");
        man.save(&path).unwrap();
        let mut doc: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        doc["config"].as_object_mut().unwrap().remove("seed");
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("seed"), "error was: {err}");
    }

    #[test]
    fn heatmap_quantization_and_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.pgm");
        render_heatmap(&[0.0f64, 1.0, 0.5, 1.0], 2, 2, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 4);
        assert_eq!(px[0], 0);
        assert_eq!(px[1], 255);
        assert!(px[2] == 127 || px[2] == 128, "midpoint pixel {}", px[2]);
        assert_eq!(px[3], 255);
        // Round-half-up at the midpoint gives 128 with this rule.
        assert_eq!(px[2], 128);
        // Constant field: degenerate range maps to 0.
        let flat = dir.path().join("flat.pgm");
        render_heatmap(&[3.5f64; 6], 2, 3, &flat).unwrap();
        let bytes = std::fs::read(&flat).unwrap();
        assert!(bytes.ends_with(&[0, 0, 0, 0, 0, 0]));
    }

    #[test]
    fn heatmap_shape_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        assert!(matches!(
            render_heatmap(&[1.0f64; 5], 2, 3, &path),
            Err(IoError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn model_heatmap_renders() {
        let dir = tempfile::tempdir().unwrap();
        let m = modelzoo::three_layer_desk::<f64>();
        let path = dir.path().join("model.pgm");
        render_model_heatmap(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..3], b"P5\x0a");
        // 40x80 grid: header then 3200 pixels; the three speeds map to
        // 0 / 128 / 255.
        let px = &bytes[bytes.len() - 3200..];
        assert_eq!(px[0], 0);
        assert_eq!(px[3199], 255);
        assert_eq!(px[20 * 80], 128);
    }

    #[test]
    fn profiles_columns_and_snap() {
        let dir = tempfile::tempdir().unwrap();
        let m = modelzoo::three_layer_desk::<f64>();
        let path = dir.path().join("profiles.csv");
        // 1.0 km / 0.03 km = 33.33 -> snaps to column 33.
        export_profiles(&[("true", &m)], &[1.0], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 41);
        assert_eq!(lines[0], "depth_km,true@0.990km");
        let row1: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(row1.len(), 2);
        assert_eq!(row1[0], "0.000000");
        assert_eq!(row1[1], "1500");
        // Bottom row is in the third layer.
        let last: Vec<&str> = lines[40].split(',').collect();
        assert_eq!(last[1], "3500");
    }

    #[test]
    fn profiles_out_of_range_rejected() {
        let m = modelzoo::three_layer_desk::<f64>();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.csv");
        // Lateral extent is (80-1)*0.03 = 2.37 km.
        assert!(matches!(
            export_profiles(&[("true", &m)], &[2.4], &path),
            Err(IoError::PositionOutOfRange { .. })
        ));
        assert!(matches!(
            export_profiles(&[("true", &m)], &[-0.1], &path),
            Err(IoError::PositionOutOfRange { .. })
        ));
        // The boundary itself is allowed.
        export_profiles(&[("true", &m)], &[2.37], &path).unwrap();
    }

    #[test]
    fn profiles_two_models_two_positions() {
        let dir = tempfile::tempdir().unwrap();
        let truth = modelzoo::three_layer_desk::<f64>();
        let smooth = modelzoo::gaussian_smooth(&truth, 4.0).unwrap();
        let path = dir.path().join("profiles.csv");
        export_profiles(&[("true", &truth), ("smooth", &smooth)], &[0.0, 1.2], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let head: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        assert_eq!(head.len(), 5);
        assert_eq!(head[1], "true@0.000km");
        assert_eq!(head[2], "true@1.200km");
        assert_eq!(head[3], "smooth@0.000km");
        assert_eq!(head[4], "smooth@1.200km");
    }

    #[test]
    fn profiles_grid_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = modelzoo::three_layer_desk::<f64>();
        let g = Grid2D::new(12, 16, 0.03).unwrap();
        let b = modelzoo::layered::<f64>(g, &[], &[2000.0]).unwrap();
        let path = dir.path().join("profiles.csv");
        assert!(matches!(
            export_profiles(&[("a", &a), ("b", &b)], &[0.1], &path),
            Err(IoError::GridMismatch(_))
        ));
    }
}
