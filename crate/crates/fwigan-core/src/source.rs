//! Ricker source wavelet and its analytic derivative with respect to the
//! peak frequency, which feeds simultaneous source estimation.

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("peak frequency must be positive, got {0} Hz")]
    BadFrequency(f64),
    #[error("f*dt = {0} puts the peak frequency at or above Nyquist (limit 0.5)")]
    AboveNyquist(f64),
    #[error("delay t0 must be non-negative, got {0} s")]
    BadDelay(f64),
    #[error("need at least one sample")]
    Empty,
    #[error("sample interval must be positive, got {0} s")]
    BadInterval(f64),
}

/// Sampled source time function. Amplitudes are dimensionless; physical
/// scaling happens at injection inside the propagator.
#[derive(Clone, Debug)]
pub struct Wavelet<T> {
    pub dt: f64,
    pub f_peak: f64,
    pub t0: f64,
    pub samples: Vec<T>,
}

impl<T> Wavelet<T> {
    pub fn nt(&self) -> usize {
        self.samples.len()
    }
}

fn validate(f: f64, nt: usize, dt: f64, t0: Option<f64>) -> Result<f64, SourceError> {
    if !(f > 0.0) {
        return Err(SourceError::BadFrequency(f));
    }
    if !(dt > 0.0) {
        return Err(SourceError::BadInterval(dt));
    }
    if nt == 0 {
        return Err(SourceError::Empty);
    }
    if f * dt >= 0.5 {
        return Err(SourceError::AboveNyquist(f * dt));
    }
    let t0 = t0.unwrap_or(1.0 / f);
    if t0 < 0.0 {
        return Err(SourceError::BadDelay(t0));
    }
    Ok(t0)
}

/// Ricker wavelet w(t) = (1 - 2a) e^{-a}, a = pi^2 f^2 (t-t0)^2, sampled at
/// t = k*dt. The delay defaults to 1/f so the wavelet ramps up from near
/// zero instead of starting mid-lobe.
pub fn ricker<T: Scalar>(
    f: f64,
    nt: usize,
    dt: f64,
    t0: Option<f64>,
) -> Result<Wavelet<T>, SourceError> {
    let t0 = validate(f, nt, dt, t0)?;
    let pf = std::f64::consts::PI * f;
    let samples = (0..nt)
        .map(|k| {
            let tau = k as f64 * dt - t0;
            let a = pf * pf * tau * tau;
            T::fl((1.0 - 2.0 * a) * (-a).exp())
        })
        .collect();
    Ok(Wavelet {
        dt,
        f_peak: f,
        t0,
        samples,
    })
}

/// Analytic dw/df, sampled on the same grid as `ricker`:
/// dw/df = -2 pi^2 f tau^2 (3 - 2a) e^{-a}.
pub fn ricker_df<T: Scalar>(
    f: f64,
    nt: usize,
    dt: f64,
    t0: Option<f64>,
) -> Result<Wavelet<T>, SourceError> {
    let t0 = validate(f, nt, dt, t0)?;
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let samples = (0..nt)
        .map(|k| {
            let tau = k as f64 * dt - t0;
            let a = pi2 * f * f * tau * tau;
            T::fl(-2.0 * pi2 * f * tau * tau * (3.0 - 2.0 * a) * (-a).exp())
        })
        .collect();
    Ok(Wavelet {
        dt,
        f_peak: f,
        t0,
        samples,
    })
}
