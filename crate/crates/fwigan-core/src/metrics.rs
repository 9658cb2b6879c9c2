//! Quantitative evaluation of inverted models: structural similarity,
//! relative L2 error, and signal-to-noise ratio.

use serde::{Deserialize, Serialize};

use crate::geometry::VelocityModel;
use crate::propagator::ShotGathers;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 1e-4;
const C2: f64 = 9e-4;

fn gaussian_window() -> [f64; WIN * WIN] {
    let mut w = [0.0; WIN * WIN];
    let mid = (WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let dz = (i / WIN) as f64 - mid;
        let dx = (i % WIN) as f64 - mid;
        *v = (-(dz * dz + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over 11x11 Gaussian-weighted windows
/// (sigma 1.5), both models rescaled to [0,1] by the true model's value
/// range. Window statistics use weighted (population) moments and the
/// cross-covariance numerator.
pub fn ssim<T: Scalar>(v_hat: &VelocityModel<T>, v: &VelocityModel<T>) -> f64 {
    assert_eq!(
        (v_hat.grid.nz, v_hat.grid.nx),
        (v.grid.nz, v.grid.nx),
        "ssim needs identical shapes"
    );
    let (nz, nx) = (v.grid.nz, v.grid.nx);
    assert!(nz >= WIN && nx >= WIN, "ssim needs at least an 11x11 grid");
    let lo = v.values.iter().fold(f64::INFINITY, |a, x| a.min(x.f64()));
    let hi = v
        .values
        .iter()
        .fold(f64::NEG_INFINITY, |a, x| a.max(x.f64()));
    let scale = if hi > lo { hi - lo } else { 1.0 };
    let re = |x: T| (x.f64() - lo) / scale;
    let a: Vec<f64> = v_hat.values.iter().map(|&x| re(x)).collect();
    let b: Vec<f64> = v.values.iter().map(|&x| re(x)).collect();

    let w = gaussian_window();
    let half = WIN / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for cz in half..nz - half {
        for cx in half..nx - half {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wz in 0..WIN {
                let iz = cz + wz - half;
                for wx in 0..WIN {
                    let ix = cx + wx - half;
                    let wt = w[wz * WIN + wx];
                    let xa = a[iz * nx + ix];
                    let xb = b[iz * nx + ix];
                    ma += wt * xa;
                    mb += wt * xb;
                    saa += wt * xa * xa;
                    sbb += wt * xb * xb;
                    sab += wt * xa * xb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let s = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// ||v - v_hat||_2 / ||v||_2.
pub fn rel_error<T: Scalar>(v_hat: &VelocityModel<T>, v: &VelocityModel<T>) -> f64 {
    assert_eq!(v_hat.values.len(), v.values.len(), "shape mismatch");
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in v_hat.values.iter().zip(&v.values) {
        let d = b.f64() - a.f64();
        num += d * d;
        den += b.f64() * b.f64();
    }
    (num / den).sqrt()
}

/// 20 log10(||reference|| / ||noisy - reference||); None when the two are
/// identical (infinite SNR).
pub fn snr_db<T: Scalar>(reference: &ShotGathers<T>, noisy: &ShotGathers<T>) -> Option<f64> {
    assert_eq!(reference.data.len(), noisy.data.len(), "shape mismatch");
    let mut sig = 0.0;
    let mut noise = 0.0;
    for (&d, &n) in reference.data.iter().zip(&noisy.data) {
        sig += d.f64() * d.f64();
        let e = n.f64() - d.f64();
        noise += e * e;
    }
    if noise == 0.0 {
        None
    } else {
        Some(10.0 * (sig / noise).log10())
    }
}

/// SSIM and relative error of a candidate against the truth.
pub fn report<T: Scalar>(v_hat: &VelocityModel<T>, truth: &VelocityModel<T>) -> MetricReport {
    MetricReport {
        ssim: ssim(v_hat, truth),
        error: rel_error(v_hat, truth),
        snr_db: None,
    }
}
