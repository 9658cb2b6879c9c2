//! Objectives: gather normalization, least-squares misfit, the adversarial
//! critic/generator losses with gradient penalty, and additive noise models
//! (fixed and learnable).

use thiserror::Error;

use crate::critic::Scorer;
use crate::nn::{Graph, Shape};
use crate::propagator::ShotGathers;
use crate::rng::Stream;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shifted entry {index} is non-positive ({value}); offset {c} too small")]
    NonPositiveShift { index: usize, value: f64, c: f64 },
    #[error("gather shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need one mixing coefficient per channel: got {got}, want {want}")]
    MuCount { got: usize, want: usize },
    #[error("data must be finite")]
    NonFinite,
}

/// Additive offset making shifted gathers strictly positive. Computed once
/// from the observed data and reused, unchanged, for every simulated gather
/// of the run.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct NormalizationConstant<T> {
    pub c: T,
}

/// Learnable noise level in decibels, plus the seed namespace its draws
/// come from.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct NoiseParam<T> {
    pub snr_db: T,
    pub rng_seed: u64,
}

/// c = 1.1 |min(observed)|. A zero minimum would make the shift degenerate,
/// so that case falls back to a small positive offset scaled to the data.
pub fn choose_c<T: Scalar>(observed: &ShotGathers<T>) -> NormalizationConstant<T> {
    let mut min = T::infinity();
    let mut max_abs = T::zero();
    for &v in &observed.data {
        if v < min {
            min = v;
        }
        if v.abs() > max_abs {
            max_abs = v.abs();
        }
    }
    let factor = T::fl(1.1);
    let c = if min == T::zero() {
        factor * max_abs * T::fl(1e-6) + T::epsilon()
    } else {
        factor * min.abs()
    };
    NormalizationConstant { c }
}

/// Shifts one gather by `c` and rescales it to sum to one, so the critic
/// compares distributions rather than raw amplitudes.
pub fn normalize<T: Scalar>(x: &[T], c: NormalizationConstant<T>) -> Result<Vec<T>, LossError> {
    let mut s = T::zero();
    for (i, &v) in x.iter().enumerate() {
        let sh = v + c.c;
        if sh <= T::zero() {
            return Err(LossError::NonPositiveShift {
                index: i,
                value: sh.f64(),
                c: c.c.f64(),
            });
        }
        s += sh;
    }
    Ok(x.iter().map(|&v| (v + c.c) / s).collect())
}

/// Pulls a gradient back through [`normalize`]:
/// g_j = (upstream_j - <upstream, P(x)>) / S with S = sum(x + c).
pub fn normalize_vjp<T: Scalar>(
    x: &[T],
    c: NormalizationConstant<T>,
    upstream: &[T],
) -> Result<Vec<T>, LossError> {
    assert_eq!(x.len(), upstream.len(), "upstream length mismatch");
    let p = normalize(x, c)?;
    let mut s = T::zero();
    for &v in x {
        s += v + c.c;
    }
    let mut inner = T::zero();
    for (u, pv) in upstream.iter().zip(&p) {
        inner += *u * *pv;
    }
    Ok(upstream.iter().map(|&u| (u - inner) / s).collect())
}

/// Half the squared sample-wise difference, with its adjoint source
/// (sim - obs) ready to drive the reverse-time pass.
pub fn l2_misfit<T: Scalar>(
    sim: &ShotGathers<T>,
    obs: &ShotGathers<T>,
) -> Result<(T, ShotGathers<T>), LossError> {
    if (sim.n_s, sim.nt, sim.n_g) != (obs.n_s, obs.nt, obs.n_g) {
        return Err(LossError::ShapeMismatch(format!(
            "sim {}x{}x{} vs obs {}x{}x{}",
            sim.n_s, sim.nt, sim.n_g, obs.n_s, obs.nt, obs.n_g
        )));
    }
    let mut adj = ShotGathers::zeros(sim.n_s, sim.nt, sim.n_g, sim.dt, sim.geometry.clone());
    let half = T::fl(0.5);
    let mut loss = T::zero();
    for (a, (&s, &o)) in adj.data.iter_mut().zip(sim.data.iter().zip(&obs.data)) {
        let d = s - o;
        loss += half * d * d;
        *a = d;
    }
    Ok((loss, adj))
}

/// Everything one adversarial evaluation produces.
pub struct WganOutput<T> {
    /// D(fake) - D(real) + penalty; descent direction for the critic.
    pub critic_loss: T,
    pub d_fake: T,
    pub d_real: T,
    pub penalty: T,
    /// d(-D(fake))/d(fake): upstream gradient for the generator's chain.
    pub generator_upstream: Vec<T>,
    /// d(critic_loss)/d(theta), one entry per attached parameter in order.
    pub param_grads: Vec<Vec<T>>,
}

/// Critic-side outputs only (no generator upstream).
pub struct CriticStep<T> {
    pub critic_loss: T,
    pub d_fake: T,
    pub d_real: T,
    pub penalty: T,
    pub param_grads: Vec<Vec<T>>,
}

fn channel_count(shape: Shape) -> usize {
    match shape {
        Shape::Chw(c, _, _) => c,
        _ => 1,
    }
}

/// Mixes real and fake with one coefficient per channel:
/// u[ch] = mu[ch] * real[ch] + (1 - mu[ch]) * fake[ch].
fn mix_per_channel<T: Scalar>(real: &[T], fake: &[T], mu: &[T], n_ch: usize) -> Vec<T> {
    let chunk = real.len() / n_ch;
    let mut u = vec![T::zero(); real.len()];
    for ch in 0..n_ch {
        let m = mu[ch];
        let om = T::one() - m;
        for p in ch * chunk..(ch + 1) * chunk {
            u[p] = m * real[p] + om * fake[p];
        }
    }
    u
}

struct WganGraph<T: Scalar> {
    graph: Graph<T>,
    params: Vec<crate::nn::Tensor>,
    fake: crate::nn::Tensor,
    d_fake: crate::nn::Tensor,
    d_real: crate::nn::Tensor,
    penalty: crate::nn::Tensor,
    critic_loss: crate::nn::Tensor,
}

/// Builds the full critic objective on one graph: score branches for fake
/// and real, plus the gradient-norm penalty at the mixed point (held as a
/// fresh leaf: the penalty regularizes the critic, so no gradient from it
/// reaches the fake data).
fn build_wgan_graph<T: Scalar, S: Scorer<T>>(
    scorer: &S,
    real_norm: &[T],
    fake_norm: &[T],
    mu: &[T],
    lambda: T,
) -> Result<WganGraph<T>, LossError> {
    let shape = scorer.input_shape();
    if real_norm.len() != shape.len() || fake_norm.len() != shape.len() {
        return Err(LossError::ShapeMismatch(format!(
            "real {} / fake {} vs scorer input {}",
            real_norm.len(),
            fake_norm.len(),
            shape.len()
        )));
    }
    let n_ch = channel_count(shape);
    if mu.len() != n_ch {
        return Err(LossError::MuCount { got: mu.len(), want: n_ch });
    }
    let g = Graph::new();
    let params = scorer.attach(&g);
    let fake = g.leaf(fake_norm.to_vec(), shape);
    let real = g.constant(real_norm.to_vec(), shape);
    let d_fake = scorer.forward(&g, &params, fake);
    let d_real = scorer.forward(&g, &params, real);
    let u_vals = mix_per_channel(real_norm, fake_norm, mu, n_ch);
    let u_hat = g.leaf(u_vals, shape);
    let d_hat = scorer.forward(&g, &params, u_hat);
    let grad_u = g.grad_nodes(d_hat, &[u_hat])[0].expect("score depends on its input");
    let sq = g.mul(grad_u, grad_u);
    let norm = g.sqrt(g.sum(sq));
    let nm1 = g.add_scalar(norm, -T::one());
    let pen_sq = g.mul(nm1, nm1);
    let penalty = g.mul_scalar(pen_sq, lambda);
    let diff = g.sub(d_fake, d_real);
    let critic_loss = g.add(diff, penalty);
    Ok(WganGraph { graph: g, params, fake, d_fake, d_real, penalty, critic_loss })
}

/// Full adversarial evaluation: critic loss (with penalty), parameter
/// gradients, and the generator's upstream gradient, all from one graph.
pub fn wgan_losses<T: Scalar, S: Scorer<T>>(
    scorer: &S,
    real_norm: &[T],
    fake_norm: &[T],
    mu: &[T],
    lambda: T,
) -> Result<WganOutput<T>, LossError> {
    let wg = build_wgan_graph(scorer, real_norm, fake_norm, mu, lambda)?;
    let g = &wg.graph;
    let mut targets = wg.params.clone();
    targets.push(wg.fake);
    g.backward_wrt(wg.critic_loss, &targets).expect("scalar loss");
    let param_grads = wg
        .params
        .iter()
        .map(|p| g.take_grad(*p).unwrap_or_else(|| vec![T::zero(); p.shape.len()]))
        .collect();
    // d(critic_loss)/d(fake) = d(D(fake))/d(fake); the generator wants the
    // gradient of -D(fake).
    let mut upstream = g
        .take_grad(wg.fake)
        .unwrap_or_else(|| vec![T::zero(); wg.fake.shape.len()]);
    for v in &mut upstream {
        *v = -*v;
    }
    Ok(WganOutput {
        critic_loss: g.scalar(wg.critic_loss),
        d_fake: g.scalar(wg.d_fake),
        d_real: g.scalar(wg.d_real),
        penalty: g.scalar(wg.penalty),
        generator_upstream: upstream,
        param_grads,
    })
}

/// Critic-update fast path: same objective, gradients for parameters only.
pub fn critic_wgan_step<T: Scalar, S: Scorer<T>>(
    scorer: &S,
    real_norm: &[T],
    fake_norm: &[T],
    mu: &[T],
    lambda: T,
) -> Result<CriticStep<T>, LossError> {
    let wg = build_wgan_graph(scorer, real_norm, fake_norm, mu, lambda)?;
    let g = &wg.graph;
    g.backward_wrt(wg.critic_loss, &wg.params).expect("scalar loss");
    let param_grads = wg
        .params
        .iter()
        .map(|p| g.take_grad(*p).unwrap_or_else(|| vec![T::zero(); p.shape.len()]))
        .collect();
    Ok(CriticStep {
        critic_loss: g.scalar(wg.critic_loss),
        d_fake: g.scalar(wg.d_fake),
        d_real: g.scalar(wg.d_real),
        penalty: g.scalar(wg.penalty),
        param_grads,
    })
}

/// Generator-update fast path: scores the fake batch alone and returns
/// (D(fake), d(-D(fake))/d(fake)).
pub fn generator_wgan_upstream<T: Scalar, S: Scorer<T>>(
    scorer: &S,
    fake_norm: &[T],
) -> Result<(T, Vec<T>), LossError> {
    let shape = scorer.input_shape();
    if fake_norm.len() != shape.len() {
        return Err(LossError::ShapeMismatch(format!(
            "fake {} vs scorer input {}",
            fake_norm.len(),
            shape.len()
        )));
    }
    let g = Graph::new();
    let params = scorer.attach(&g);
    let fake = g.leaf(fake_norm.to_vec(), shape);
    let d_fake = scorer.forward(&g, &params, fake);
    g.backward_wrt(d_fake, &[fake]).expect("scalar score");
    let mut upstream = g.take_grad(fake).unwrap_or_else(|| vec![T::zero(); shape.len()]);
    for v in &mut upstream {
        *v = -*v;
    }
    Ok((g.scalar(d_fake), upstream))
}

/// Adds white Gaussian noise scaled so the realized 20 log10(|d|/|n|)
/// equals `snr_db` exactly. A non-finite `snr_db` means "no noise".
pub fn add_awgn<T: Scalar>(d: &ShotGathers<T>, snr_db: f64, seed: u64) -> ShotGathers<T> {
    if !snr_db.is_finite() {
        return d.clone();
    }
    let mut out = d.clone();
    let mut rng = Stream::derived(seed, "awgn", &[]);
    let eps: Vec<T> = rng.normal_vec(d.data.len());
    let mut d2 = T::zero();
    let mut e2 = T::zero();
    for (&x, &e) in d.data.iter().zip(&eps) {
        d2 += x * x;
        e2 += e * e;
    }
    let scale = d2.sqrt() / (T::fl(10f64.powf(snr_db / 20.0)) * e2.sqrt());
    for (o, e) in out.data.iter_mut().zip(eps) {
        *o += scale * e;
    }
    out
}

/// Draws reparameterized noise n = alpha * eps with eps standard normal and
/// alpha = ref_norm * 10^(-snr/20) / sqrt(len), so the draw's expected norm
/// matches the target level. Returns the noise and its derivative with
/// respect to the dB parameter, d n / d snr = n * (-ln 10 / 20).
pub fn sample_learned_noise<T: Scalar>(
    len: usize,
    snr_db: T,
    ref_norm: T,
    seed: u64,
) -> (Vec<T>, Vec<T>) {
    let mut rng = Stream::derived(seed, "learned-noise", &[]);
    let eps: Vec<T> = rng.normal_vec(len);
    let alpha = ref_norm * T::fl(10f64.powf(-snr_db.f64() / 20.0)) / T::fl(len as f64).sqrt();
    let dfac = T::fl(-std::f64::consts::LN_10 / 20.0);
    let noise: Vec<T> = eps.iter().map(|&e| alpha * e).collect();
    let dnoise: Vec<T> = noise.iter().map(|&n| n * dfac).collect();
    (noise, dnoise)
}
