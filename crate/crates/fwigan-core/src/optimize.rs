//! Training loops: classical least-squares inversion and the adversarial
//! variant, plus the optimizer pieces they share (Adam, clipping, stepped
//! learning-rate decay).
//!
//! The generator's gradient chain is assembled explicitly — critic input
//! gradient, then the normalization pullback, then the wave-equation
//! adjoint — rather than taping the physics; only the critic itself is
//! differentiated on a graph.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{Critic, CriticConfig, CriticError};
use crate::geometry::{clamp_in_place, VelocityModel};
use crate::losses::{
    choose_c, critic_wgan_step, generator_wgan_upstream, l2_misfit, normalize, normalize_vjp,
    sample_learned_noise, LossError, NormalizationConstant,
};
use crate::metrics;
use crate::propagator::{forward, vjp, PropagatorError, ShotGathers, SpongeProfile};
use crate::rng::{derive_seed, Stream};
use crate::scalar::Scalar;
use crate::source::{ricker, SourceError};

/// Absorbing band width (cells) used by the training loops.
pub const SPONGE_WIDTH: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch size {batch} does not divide the shot count {n_s}")]
    BatchMismatch { batch: usize, n_s: usize },
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Propagation { epoch: usize, batch: usize, source: PropagatorError },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Loss { epoch: usize, batch: usize, source: LossError },
    #[error("wavelet: {0}")]
    Source(#[from] SourceError),
    #[error("critic: {0}")]
    Critic(#[from] CriticError),
    #[error("log write: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------- optimizer

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.9;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias-corrected moments (beta1 = 0.5, beta2 = 0.9, eps = 1e-8).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }

    /// One update: param -= lr * m_hat / (sqrt(v_hat) + eps).
    pub fn step(&mut self, param: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(param.len(), self.m.len(), "adam length mismatch");
        assert_eq!(grad.len(), self.m.len(), "adam grad length mismatch");
        self.step += 1;
        let b1 = T::fl(ADAM_BETA1);
        let b2 = T::fl(ADAM_BETA2);
        let one = T::one();
        let c1 = one - T::fl(ADAM_BETA1.powi(self.step as i32));
        let c2 = one - T::fl(ADAM_BETA2.powi(self.step as i32));
        let lr_t = T::fl(lr);
        let eps = T::fl(ADAM_EPS);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            param[i] -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
}

/// Adam for a single scalar unknown (source frequency, noise level).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub step: u64,
}

impl ScalarAdam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, param: &mut f64, grad: f64, lr: f64) {
        self.step += 1;
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad;
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad;
        let mh = self.m / (1.0 - ADAM_BETA1.powi(self.step as i32));
        let vh = self.v / (1.0 - ADAM_BETA2.powi(self.step as i32));
        *param -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Gradient limiting: elementwise clamp to [-k, k], or rescale so the
/// 2-norm does not exceed k.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClipRule {
    Value(f64),
    Norm(f64),
}

/// Applies a clip rule to one gradient array in place.
pub fn clip<T: Scalar>(grad: &mut [T], rule: ClipRule) {
    match rule {
        ClipRule::Value(k) => {
            let k = T::fl(k);
            for g in grad.iter_mut() {
                if *g > k {
                    *g = k;
                } else if *g < -k {
                    *g = -k;
                }
            }
        }
        ClipRule::Norm(k) => {
            let mut n2 = T::zero();
            for &g in grad.iter() {
                n2 += g * g;
            }
            let n = n2.sqrt();
            let kk = T::fl(k);
            if n > kk {
                let s = kk / n;
                for g in grad.iter_mut() {
                    *g *= s;
                }
            }
        }
    }
}

/// Rescales a set of gradient arrays jointly so their combined 2-norm does
/// not exceed k (the critic update treats all its parameters as one vector).
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], k: f64) {
    let mut n2 = T::zero();
    for g in grads.iter() {
        for &x in g {
            n2 += x * x;
        }
    }
    let n = n2.sqrt();
    let kk = T::fl(k);
    if n > kk {
        let s = kk / n;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Stepped decay: the base rate is multiplied by `gamma` once for every
/// milestone the 1-based epoch has passed.
pub fn lr_at(epoch: usize, base: f64, milestones: &[usize], gamma: f64) -> f64 {
    let decays = milestones.iter().filter(|&&m| epoch > m).count();
    base * gamma.powi(decays as i32)
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fwi,
    Fwigan,
}

/// Everything that pins a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Critic updates per generator update (adversarial mode only).
    pub n_critic: usize,
    pub lr_v: f64,
    pub lr_c: f64,
    pub lr_f: f64,
    pub lr_snr: f64,
    pub lambda: f64,
    /// Applied to the velocity gradient each generator step.
    pub clip_v: ClipRule,
    /// Applied jointly to the critic's parameter gradients.
    pub clip_c: ClipRule,
    /// Epochs after which the generator-side learning rates halve.
    pub milestones: Vec<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Adversarial defaults: 300 epochs, batches of 5, six critic updates
    /// per generator update, lr_v 5, lr_c 1e-3, lambda 10.
    pub fn fwigan_default() -> Self {
        TrainConfig {
            mode: Mode::Fwigan,
            epochs: 300,
            batch_size: 5,
            n_critic: 6,
            lr_v: 5.0,
            lr_c: 1e-3,
            lr_f: 1e-3,
            lr_snr: 1.0,
            lambda: 10.0,
            clip_v: ClipRule::Value(10.0),
            clip_c: ClipRule::Norm(1e3),
            milestones: vec![100, 200],
            seed: 0,
        }
    }

    /// Least-squares defaults: 800 epochs, single-shot batches, lr_v 50,
    /// halved after epochs 100 and 200.
    pub fn fwi_default() -> Self {
        TrainConfig {
            mode: Mode::Fwi,
            epochs: 800,
            batch_size: 1,
            n_critic: 0,
            lr_v: 50.0,
            lr_c: 0.0,
            lr_f: 1e-3,
            lr_snr: 0.0,
            lambda: 0.0,
            clip_v: ClipRule::Value(10.0),
            clip_c: ClipRule::Norm(1e3),
            milestones: vec![100, 200],
            seed: 0,
        }
    }

    /// Clip bounds loosened for noisy data (velocity value clip 1e3,
    /// critic norm clip 1e6).
    pub fn with_noisy_clips(mut self) -> Self {
        self.clip_v = ClipRule::Value(1e3);
        self.clip_c = ClipRule::Norm(1e6);
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_v", self.lr_v),
            ("lr_c", self.lr_c),
            ("lr_f", self.lr_f),
            ("lr_snr", self.lr_snr),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TrainError::BadConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.mode == Mode::Fwigan && self.n_critic == 0 {
            return Err(TrainError::BadConfig(
                "adversarial mode needs at least one critic update per batch".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- records

/// One epoch's summary, also emitted as a JSON line when a log sink is
/// given. `wall_ms` is excluded from reproducibility comparisons.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Adversarial mode: summed critic loss over the epoch's updates.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub critic_loss: Option<f64>,
    /// Adversarial mode: summed generator loss; least-squares mode: summed
    /// data misfit.
    pub gen_loss: f64,
    pub lr_v: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr_db: Option<f64>,
    pub wall_ms: u64,
}

/// Per-epoch evaluation against a reference model, when one is supplied.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricSample {
    pub epoch: usize,
    pub ssim: f64,
    pub error: f64,
}

/// Final state and histories of one training run.
pub struct InversionRun<T> {
    pub model: VelocityModel<T>,
    pub f_peak: f64,
    pub snr_db: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub metric_history: Vec<MetricSample>,
}

fn emit(log: &mut Option<&mut dyn Write>, rec: &EpochRecord) -> Result<(), TrainError> {
    if let Some(w) = log.as_deref_mut() {
        serde_json::to_writer(&mut *w, rec).map_err(std::io::Error::other)?;
        writeln!(w)?;
    }
    Ok(())
}

fn record_metrics<T: Scalar>(
    samples: &mut Vec<MetricSample>,
    epoch: usize,
    model: &VelocityModel<T>,
    truth: Option<&VelocityModel<T>>,
) {
    if let Some(t) = truth {
        samples.push(MetricSample {
            epoch,
            ssim: metrics::ssim(model, t),
            error: metrics::rel_error(model, t),
        });
    }
}

/// Content hash used to assert the generator's state is untouched while the
/// critic trains.
fn state_fingerprint<T: Scalar>(values: &[T], f: f64, snr: Option<f64>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x100000001b3);
    };
    for v in values {
        eat(v.f64().to_bits());
    }
    eat(f.to_bits());
    if let Some(s) = snr {
        eat(s.to_bits());
    }
    h
}

/// Shot indices shuffled for one epoch, derived from the run seed.
fn epoch_order(seed: u64, epoch: usize, n_s: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_s).collect();
    let mut s = Stream::derived(seed, "shuffle", &[epoch as u64]);
    s.shuffle(&mut order);
    order
}

// ---------------------------------------------------------------- least squares

/// Classical inversion: per mini-batch, simulate, scale both sides by the
/// batch's max absolute observed amplitude, take half the squared residual,
/// pull it back through the wave equation, clip, and Adam-step v and f.
pub fn run_fwi<T: Scalar>(
    cfg: &TrainConfig,
    observed: &ShotGathers<T>,
    init_model: &VelocityModel<T>,
    init_f: f64,
    truth: Option<&VelocityModel<T>>,
    mut log: Option<&mut dyn Write>,
) -> Result<InversionRun<T>, TrainError> {
    cfg.validate()?;
    let n_s = observed.n_s;
    if n_s % cfg.batch_size != 0 {
        return Err(TrainError::BatchMismatch { batch: cfg.batch_size, n_s });
    }
    let nt = observed.nt;
    let dt = observed.dt;
    let sponge = SpongeProfile::quadratic(&init_model.grid, SPONGE_WIDTH, init_model.v_max);
    let mut model = init_model.clone();
    let mut f = init_f;
    // The wavelet delay stays pinned to the initial frequency so the
    // frequency unknown only reshapes the pulse, not its arrival time.
    let t0 = 1.0 / init_f;
    let mut adam_v = AdamState::<T>::new(model.values.len());
    let mut adam_f = ScalarAdam::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut metric_history = Vec::new();
    record_metrics(&mut metric_history, 0, &model, truth);
    for epoch in 1..=cfg.epochs {
        let t_start = Instant::now();
        let order = epoch_order(cfg.seed, epoch, n_s);
        let lr_v = lr_at(epoch, cfg.lr_v, &cfg.milestones, 0.5);
        let lr_f = lr_at(epoch, cfg.lr_f, &cfg.milestones, 0.5);
        let mut misfit_ep = 0.0f64;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let obs_b = observed.select(batch);
            let sub_geo = &obs_b.geometry;
            let wav = ricker::<T>(f, nt, dt, Some(t0))?;
            let (sim, _) = forward(&model, &wav, sub_geo, &sponge, false)
                .map_err(|source| TrainError::Propagation { epoch, batch: bi, source })?;
            // Scale both sides by the batch's max |obs| so the misfit is
            // amplitude-free; the raw-data adjoint picks up 1/scale^2.
            let mut sc = T::zero();
            for &v in &obs_b.data {
                if v.abs() > sc {
                    sc = v.abs();
                }
            }
            if sc == T::zero() {
                sc = T::one();
            }
            let mut sim_s = sim;
            for v in sim_s.data.iter_mut() {
                *v /= sc;
            }
            let mut obs_s = obs_b.clone();
            for v in obs_s.data.iter_mut() {
                *v /= sc;
            }
            let (loss, mut adj) = l2_misfit(&sim_s, &obs_s)
                .map_err(|source| TrainError::Loss { epoch, batch: bi, source })?;
            for a in adj.data.iter_mut() {
                *a /= sc;
            }
            let (mut grad_v, grad_f) = vjp(&model, &wav, sub_geo, &sponge, &adj)
                .map_err(|source| TrainError::Propagation { epoch, batch: bi, source })?;
            clip(&mut grad_v, cfg.clip_v);
            adam_v.step(&mut model.values, &grad_v, lr_v);
            adam_f.step(&mut f, grad_f.f64(), lr_f);
            clamp_in_place(&mut model.values, model.v_min, model.v_max);
            misfit_ep += loss.f64();
        }
        let rec = EpochRecord {
            epoch,
            critic_loss: None,
            gen_loss: misfit_ep,
            lr_v,
            snr_db: None,
            wall_ms: t_start.elapsed().as_millis() as u64,
        };
        emit(&mut log, &rec)?;
        history.push(rec);
        record_metrics(&mut metric_history, epoch, &model, truth);
    }
    Ok(InversionRun { model, f_peak: f, snr_db: None, history, metric_history })
}

// ---------------------------------------------------------------- adversarial

/// Adversarial inversion. Per batch: `n_critic` critic updates on data
/// simulated from the frozen generator state (with fresh noise and mixing
/// draws each update), then one generator update whose gradient flows
/// critic -> normalization -> wave-equation adjoint into v, f, and (in
/// noisy mode) the learned noise level.
pub fn run_fwigan<T: Scalar>(
    cfg: &TrainConfig,
    observed: &ShotGathers<T>,
    init_model: &VelocityModel<T>,
    init_f: f64,
    init_snr: Option<f64>,
    truth: Option<&VelocityModel<T>>,
    mut log: Option<&mut dyn Write>,
) -> Result<InversionRun<T>, TrainError> {
    cfg.validate()?;
    let n_s = observed.n_s;
    let b = cfg.batch_size;
    if n_s % b != 0 {
        return Err(TrainError::BatchMismatch { batch: b, n_s });
    }
    let nt = observed.nt;
    let n_g = observed.n_g;
    let dt = observed.dt;
    let chan = nt * n_g;
    let sponge = SpongeProfile::quadratic(&init_model.grid, SPONGE_WIDTH, init_model.v_max);
    // The shift constant comes from the observed data once, then stays
    // frozen for the whole run.
    let c = choose_c(observed);
    let mut critic = Critic::<T>::build(CriticConfig::new(b, nt, n_g), cfg.seed)?;
    let mut adam_c: Vec<AdamState<T>> =
        critic.store.iter().map(|p| AdamState::new(p.shape.len())).collect();
    let mut model = init_model.clone();
    let mut f = init_f;
    let mut snr = init_snr;
    let t0 = 1.0 / init_f;
    let mut adam_v = AdamState::<T>::new(model.values.len());
    let mut adam_f = ScalarAdam::new();
    let mut adam_snr = ScalarAdam::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut metric_history = Vec::new();
    record_metrics(&mut metric_history, 0, &model, truth);
    for epoch in 1..=cfg.epochs {
        let t_start = Instant::now();
        let order = epoch_order(cfg.seed, epoch, n_s);
        let lr_v = lr_at(epoch, cfg.lr_v, &cfg.milestones, 0.5);
        let lr_f = lr_at(epoch, cfg.lr_f, &cfg.milestones, 0.5);
        let lr_snr = lr_at(epoch, cfg.lr_snr, &cfg.milestones, 0.5);
        let mut closs_ep = 0.0f64;
        let mut gloss_ep = 0.0f64;
        for (bi, batch) in order.chunks(b).enumerate() {
            let obs_b = observed.select(batch);
            let sub_geo = &obs_b.geometry;
            // Reference amplitude for the learned-noise scale: the observed
            // batch's 2-norm.
            let mut r2 = T::zero();
            for &v in &obs_b.data {
                r2 += v * v;
            }
            let ref_norm = r2.sqrt();
            let mut real_norm = vec![T::zero(); b * chan];
            for (ch, gather) in obs_b.data.chunks(chan).enumerate() {
                let p = normalize(gather, c)
                    .map_err(|source| TrainError::Loss { epoch, batch: bi, source })?;
                real_norm[ch * chan..(ch + 1) * chan].copy_from_slice(&p);
            }
            // v and f are frozen until the generator step, and the solver is
            // deterministic, so one simulation serves every critic update
            // and the generator update of this batch.
            let wav = ricker::<T>(f, nt, dt, Some(t0))?;
            let (clean, _) = forward(&model, &wav, sub_geo, &sponge, false)
                .map_err(|source| TrainError::Propagation { epoch, batch: bi, source })?;
            let frozen = state_fingerprint(&model.values, f, snr);
            // --- critic phase ---
            for it in 0..cfg.n_critic {
                let mut fake = clean.data.clone();
                if let Some(s) = snr {
                    let noise_seed =
                        derive_seed(cfg.seed, "noise", &[epoch as u64, bi as u64, it as u64]);
                    let (noise, _) =
                        sample_learned_noise(fake.len(), T::fl(s), ref_norm, noise_seed);
                    for (d, n) in fake.iter_mut().zip(noise) {
                        *d += n;
                    }
                }
                let mut fake_norm = vec![T::zero(); b * chan];
                for (ch, gather) in fake.chunks(chan).enumerate() {
                    let p = normalize(gather, c)
                        .map_err(|source| TrainError::Loss { epoch, batch: bi, source })?;
                    fake_norm[ch * chan..(ch + 1) * chan].copy_from_slice(&p);
                }
                let mut mu_rng =
                    Stream::derived(cfg.seed, "mu", &[epoch as u64, bi as u64, it as u64]);
                let mu: Vec<T> = (0..b).map(|_| T::fl(mu_rng.uniform())).collect();
                let step =
                    critic_wgan_step(&critic, &real_norm, &fake_norm, &mu, T::fl(cfg.lambda))
                        .map_err(|source| TrainError::Loss { epoch, batch: bi, source })?;
                let mut grads = step.param_grads;
                match cfg.clip_c {
                    ClipRule::Norm(k) => clip_global_norm(&mut grads, k),
                    rule => {
                        for g in grads.iter_mut() {
                            clip(g, rule);
                        }
                    }
                }
                for ((param, state), grad) in
                    critic.store.iter_mut().zip(adam_c.iter_mut()).zip(&grads)
                {
                    state.step(param.values_mut(), grad, cfg.lr_c);
                }
                closs_ep += step.critic_loss.f64();
            }
            debug_assert_eq!(
                state_fingerprint(&model.values, f, snr),
                frozen,
                "generator state mutated during critic updates"
            );
            // --- generator phase: one update of v, f (and snr) ---
            let mut fake = clean.data.clone();
            let mut dnoise = Vec::new();
            if let Some(s) = snr {
                let noise_seed = derive_seed(
                    cfg.seed,
                    "noise",
                    &[epoch as u64, bi as u64, cfg.n_critic as u64],
                );
                let (noise, dn) = sample_learned_noise(fake.len(), T::fl(s), ref_norm, noise_seed);
                for (d, n) in fake.iter_mut().zip(noise) {
                    *d += n;
                }
                dnoise = dn;
            }
            let mut fake_norm = vec![T::zero(); b * chan];
            for (ch, gather) in fake.chunks(chan).enumerate() {
                let p = normalize(gather, c)
                    .map_err(|source| TrainError::Loss { epoch, batch: bi, source })?;
                fake_norm[ch * chan..(ch + 1) * chan].copy_from_slice(&p);
            }
            let (d_fake, upstream) = generator_wgan_upstream(&critic, &fake_norm)
                .map_err(|source| TrainError::Loss { epoch, batch: bi, source })?;
            // Pull the critic's input gradient back through each gather's
            // normalization onto the raw simulated-plus-noise data.
            let mut adj = ShotGathers::zeros(b, nt, n_g, dt, sub_geo.clone());
            for ch in 0..b {
                let x = &fake[ch * chan..(ch + 1) * chan];
                let up = &upstream[ch * chan..(ch + 1) * chan];
                let g = normalize_vjp(x, c, up)
                    .map_err(|source| TrainError::Loss { epoch, batch: bi, source })?;
                adj.data[ch * chan..(ch + 1) * chan].copy_from_slice(&g);
            }
            // Noise-level gradient: the raw-data adjoint dotted with the
            // per-sample derivative of the noise draw.
            let grad_snr = if snr.is_some() {
                let mut s = T::zero();
                for (a, dn) in adj.data.iter().zip(&dnoise) {
                    s += *a * *dn;
                }
                Some(s.f64())
            } else {
                None
            };
            let (mut grad_v, grad_f) = vjp(&model, &wav, sub_geo, &sponge, &adj)
                .map_err(|source| TrainError::Propagation { epoch, batch: bi, source })?;
            clip(&mut grad_v, cfg.clip_v);
            adam_v.step(&mut model.values, &grad_v, lr_v);
            adam_f.step(&mut f, grad_f.f64(), lr_f);
            if let (Some(s), Some(gs)) = (snr.as_mut(), grad_snr) {
                adam_snr.step(s, gs, lr_snr);
            }
            clamp_in_place(&mut model.values, model.v_min, model.v_max);
            gloss_ep += -d_fake.f64();
        }
        let rec = EpochRecord {
            epoch,
            critic_loss: Some(closs_ep),
            gen_loss: gloss_ep,
            lr_v,
            snr_db: snr,
            wall_ms: t_start.elapsed().as_millis() as u64,
        };
        emit(&mut log, &rec)?;
        history.push(rec);
        record_metrics(&mut metric_history, epoch, &model, truth);
    }
    Ok(InversionRun { model, f_peak: f, snr_db: snr, history, metric_history })
}

/// Normalizes a full gather set channel-by-channel with one shared offset;
/// convenience for tests and tooling.
pub fn normalize_all<T: Scalar>(
    gathers: &ShotGathers<T>,
    c: NormalizationConstant<T>,
) -> Result<Vec<T>, LossError> {
    let chan = gathers.nt * gathers.n_g;
    let mut out = vec![T::zero(); gathers.data.len()];
    for (ch, gather) in gathers.data.chunks(chan).enumerate() {
        let p = normalize(gather, c)?;
        out[ch * chan..(ch + 1) * chan].copy_from_slice(&p);
    }
    Ok(out)
}
