//! Convolutional critic scoring batches of normalized shot gathers.
//!
//! The critic sees a batch as one multi-channel image (one channel per
//! gather, height = time samples, width = receivers), runs a fixed stack of
//! strided conv/pool blocks, and emits a single unbounded score. No sigmoid:
//! the score is a Wasserstein-style witness value, not a probability.

use thiserror::Error;

use crate::nn::{Graph, Param, ParamStore, Shape, Tensor};
use crate::rng::Stream;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("in_channels must be at least 1, got {0}")]
    NoChannels(usize),
    #[error("input dims must be positive, got {0}x{1}")]
    EmptyInput(usize, usize),
    #[error("n_blocks must be at least 1, got {0}")]
    NoBlocks(usize),
}

/// Anything that can attach parameters to a graph and score an input image.
pub trait Scorer<T: Scalar> {
    /// Shape the scorer expects its input in.
    fn input_shape(&self) -> Shape;
    /// Creates differentiable leaves for the parameters, in a fixed order.
    fn attach(&self, graph: &Graph<T>) -> Vec<Tensor>;
    /// Builds the scoring head; returns a single-element tensor.
    fn forward(&self, graph: &Graph<T>, params: &[Tensor], x: Tensor) -> Tensor;
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CriticConfig {
    /// Channels of the input image (= gathers per batch).
    pub in_channels: usize,
    /// Input height (time samples per gather).
    pub input_h: usize,
    /// Input width (receivers per gather).
    pub input_w: usize,
    /// Output channels of the first block; doubles each block.
    pub base_channels: usize,
    /// Number of conv/pool/activation blocks.
    pub n_blocks: usize,
    /// Width of the first dense layer.
    pub fc_width: usize,
}

impl CriticConfig {
    pub fn new(in_channels: usize, input_h: usize, input_w: usize) -> Self {
        CriticConfig {
            in_channels,
            input_h,
            input_w,
            base_channels: 32,
            n_blocks: 6,
            fc_width: 2000,
        }
    }

    pub fn validate(&self) -> Result<(), CriticError> {
        if self.in_channels < 1 {
            return Err(CriticError::NoChannels(self.in_channels));
        }
        if self.input_h == 0 || self.input_w == 0 {
            return Err(CriticError::EmptyInput(self.input_h, self.input_w));
        }
        if self.n_blocks < 1 {
            return Err(CriticError::NoBlocks(self.n_blocks));
        }
        Ok(())
    }

    /// Input dims zero-padded up (trailing edge) to a multiple of
    /// 2^n_blocks so every pooling stage halves exactly.
    pub fn padded(&self) -> (usize, usize) {
        let m = 1usize << self.n_blocks;
        let up = |v: usize| v.div_ceil(m) * m;
        (up(self.input_h), up(self.input_w))
    }

    /// Output channels of block `i` (0-based).
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Shape of the feature map after the last block.
    pub fn feature_map_shape(&self) -> Shape {
        let (hp, wp) = self.padded();
        Shape::Chw(
            self.block_channels(self.n_blocks - 1),
            hp >> self.n_blocks,
            wp >> self.n_blocks,
        )
    }

    /// Flattened length entering the first dense layer.
    pub fn flat_len(&self) -> usize {
        self.feature_map_shape().len()
    }

    /// Total trainable values, in closed form.
    pub fn param_count(&self) -> usize {
        let mut total = 0usize;
        let mut c_in = self.in_channels;
        for i in 0..self.n_blocks {
            let c_out = self.block_channels(i);
            total += c_out * (c_in * 9 + 1);
            c_in = c_out;
        }
        total += self.fc_width * (self.flat_len() + 1);
        total += self.fc_width + 1;
        total
    }
}

/// The critic: a config plus its parameter store.
pub struct Critic<T> {
    pub cfg: CriticConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Critic<T> {
    /// Builds a critic with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights
    /// and zero biases, drawn from a stream derived from `seed`. Identical
    /// seeds give identical parameters.
    pub fn build(cfg: CriticConfig, seed: u64) -> Result<Self, CriticError> {
        cfg.validate()?;
        let mut rng = Stream::derived(seed, "critic", &[]);
        let mut store = ParamStore::new();
        let mut uniform_init = |n: usize, fan_in: usize| -> Vec<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| T::fl(rng.uniform_in(-bound, bound))).collect()
        };
        let mut c_in = cfg.in_channels;
        for i in 0..cfg.n_blocks {
            let c_out = cfg.block_channels(i);
            let w = uniform_init(c_out * c_in * 9, c_in * 9);
            store
                .push(Param::new(format!("conv{}.weight", i + 1), Shape::Knl(c_out, c_in), w))
                .expect("unique name");
            store
                .push(Param::new(
                    format!("conv{}.bias", i + 1),
                    Shape::Vec(c_out),
                    vec![T::zero(); c_out],
                ))
                .expect("unique name");
            c_in = c_out;
        }
        let flat = cfg.flat_len();
        let w1 = uniform_init(cfg.fc_width * flat, flat);
        store
            .push(Param::new("fc1.weight", Shape::Mat(cfg.fc_width, flat), w1))
            .expect("unique name");
        store
            .push(Param::new("fc1.bias", Shape::Vec(cfg.fc_width), vec![T::zero(); cfg.fc_width]))
            .expect("unique name");
        let w2 = uniform_init(cfg.fc_width, cfg.fc_width);
        store
            .push(Param::new("fc2.weight", Shape::Mat(1, cfg.fc_width), w2))
            .expect("unique name");
        store.push(Param::new("fc2.bias", Shape::Vec(1), vec![T::zero()])).expect("unique name");
        let critic = Critic { cfg, store };
        debug_assert_eq!(critic.store.total_len(), cfg.param_count());
        Ok(critic)
    }

    /// Scores one input image. Builds a throwaway graph.
    pub fn score(&self, x: &[T]) -> T {
        let g = Graph::new();
        let params = self.attach(&g);
        let xt = g.constant(x.to_vec(), self.input_shape());
        let y = self.forward(&g, &params, xt);
        g.scalar(y)
    }

    /// Gradient of the score with respect to the input.
    pub fn input_gradient(&self, x: &[T]) -> Vec<T> {
        let g = Graph::new();
        let params = self.attach(&g);
        let xt = g.leaf(x.to_vec(), self.input_shape());
        let y = self.forward(&g, &params, xt);
        g.backward_wrt(y, &[xt]).expect("scalar score");
        g.take_grad(xt).expect("input reachable")
    }
}

impl<T: Scalar> Scorer<T> for Critic<T> {
    fn input_shape(&self) -> Shape {
        Shape::Chw(self.cfg.in_channels, self.cfg.input_h, self.cfg.input_w)
    }

    fn attach(&self, graph: &Graph<T>) -> Vec<Tensor> {
        self.store.attach_all(graph)
    }

    fn forward(&self, g: &Graph<T>, params: &[Tensor], x: Tensor) -> Tensor {
        assert_eq!(x.shape, self.input_shape(), "critic input shape mismatch");
        assert_eq!(params.len(), 2 * self.cfg.n_blocks + 4, "wrong param tensor count");
        let slope = T::fl(0.1);
        let (hp, wp) = self.cfg.padded();
        let mut cur = if (hp, wp) == (self.cfg.input_h, self.cfg.input_w) {
            x
        } else {
            g.pad_hw(x, hp, wp)
        };
        for i in 0..self.cfg.n_blocks {
            let w = params[2 * i];
            let b = params[2 * i + 1];
            let y = g.conv2d(cur, w, b);
            let p = g.maxpool2(y);
            cur = g.leaky_relu(p, slope);
        }
        let flat = g.reshape(cur, Shape::Vec(self.cfg.flat_len()));
        let n = 2 * self.cfg.n_blocks;
        let h1 = g.dense(flat, params[n], params[n + 1]);
        let a1 = g.leaky_relu(h1, slope);
        g.dense(a1, params[n + 2], params[n + 3])
    }
}

/// Fixed linear functional D(x) = <w, x>. Used to exercise the adversarial
/// loss with hand-computable scores and gradients.
pub struct LinearScorer<T> {
    pub weights: Vec<T>,
    pub shape: Shape,
}

impl<T: Scalar> LinearScorer<T> {
    pub fn new(weights: Vec<T>, shape: Shape) -> Self {
        assert_eq!(weights.len(), shape.len());
        LinearScorer { weights, shape }
    }
}

impl<T: Scalar> Scorer<T> for LinearScorer<T> {
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn attach(&self, graph: &Graph<T>) -> Vec<Tensor> {
        vec![graph.leaf(self.weights.clone(), Shape::Mat(1, self.weights.len()))]
    }

    fn forward(&self, g: &Graph<T>, params: &[Tensor], x: Tensor) -> Tensor {
        let flat = g.reshape(x, Shape::Vec(self.shape.len()));
        g.matvec(params[0], flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use tempfile::tempdir;

    fn small_cfg() -> CriticConfig {
        CriticConfig::new(1, 64, 64)
    }

    #[test]
    fn config_validation() {
        assert!(CriticConfig::new(0, 8, 8).validate().is_err());
        assert!(CriticConfig::new(1, 0, 8).validate().is_err());
        assert!(CriticConfig::new(5, 2048, 320).validate().is_ok());
    }

    #[test]
    fn padded_dims_and_feature_maps() {
        let cfg = CriticConfig::new(5, 2048, 320);
        assert_eq!(cfg.padded(), (2048, 320));
        assert_eq!(cfg.feature_map_shape(), Shape::Chw(1024, 32, 5));
        let cfg = small_cfg();
        assert_eq!(cfg.padded(), (64, 64));
        assert_eq!(cfg.feature_map_shape(), Shape::Chw(1024, 1, 1));
        assert_eq!(cfg.flat_len(), 1024);
        // Ragged input pads up.
        let cfg = CriticConfig::new(4, 1000, 80);
        assert_eq!(cfg.padded(), (1024, 128));
        assert_eq!(cfg.feature_map_shape(), Shape::Chw(1024, 16, 2));
    }

    #[test]
    fn param_count_closed_form_matches_enumeration() {
        for cfg in [small_cfg(), CriticConfig::new(3, 128, 192)] {
            let critic = Critic::<f64>::build(cfg, 1).unwrap();
            assert_eq!(critic.store.total_len(), cfg.param_count());
            // Spot-check the closed form by hand for the small config:
            // conv1 32*(1*9+1), conv2 64*(32*9+1), ..., fc1 2000*(flat+1),
            // fc2 (2000+1).
            if cfg.in_channels == 1 && cfg.input_h == 64 {
                let mut want = 0;
                let mut c_in = 1;
                for i in 0..6 {
                    let c_out = 32 << i;
                    want += c_out * (c_in * 9 + 1);
                    c_in = c_out;
                }
                want += 2000 * (1024 + 1) + 2001;
                assert_eq!(cfg.param_count(), want);
            }
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = Critic::<f64>::build(small_cfg(), 42).unwrap();
        let b = Critic::<f64>::build(small_cfg(), 42).unwrap();
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let c = Critic::<f64>::build(small_cfg(), 43).unwrap();
        assert_ne!(a.store.get("conv1.weight").unwrap().value, c.store.get("conv1.weight").unwrap().value);
    }

    #[test]
    fn init_respects_fan_in_bounds_and_zero_biases() {
        let critic = Critic::<f64>::build(small_cfg(), 7).unwrap();
        for p in critic.store.iter() {
            if p.name.ends_with(".bias") {
                assert!(p.value.iter().all(|&v| v == 0.0), "{} not zero", p.name);
            }
        }
        let w = critic.store.get("conv2.weight").unwrap();
        let bound = 1.0 / ((32.0 * 9.0) as f64).sqrt();
        assert!(w.value.iter().all(|&v| v > -bound && v < bound));
        assert!(w.value.iter().any(|&v| v.abs() > bound * 0.5), "suspiciously small spread");
    }

    #[test]
    fn score_finite_and_checkpoint_reproducible() {
        let critic = Critic::<f64>::build(small_cfg(), 5).unwrap();
        let zeros = vec![0.0; 64 * 64];
        // All-zero input with zero biases scores exactly zero.
        assert_eq!(critic.score(&zeros), 0.0);
        let mut s = Stream::new(8);
        let probe: Vec<f64> = s.normal_vec(64 * 64);
        let s0 = critic.score(&probe);
        assert!(s0.is_finite());
        assert_eq!(s0, critic.score(&probe), "score must be deterministic");
        // Round-trip through a checkpoint preserves the score exactly.
        let dir = tempdir().unwrap();
        let path = dir.path().join("critic.ckpt");
        critic.store.save(&path).unwrap();
        let mut other = Critic::<f64>::build(small_cfg(), 999).unwrap();
        assert_ne!(other.score(&probe), s0);
        other.store.load(&path).unwrap();
        assert_eq!(other.score(&probe), s0);
    }

    #[test]
    fn channel_permutation_changes_score() {
        let cfg = CriticConfig::new(2, 64, 64);
        let critic = Critic::<f64>::build(cfg, 11).unwrap();
        let mut s = Stream::new(3);
        let a: Vec<f64> = s.normal_vec(64 * 64);
        let b: Vec<f64> = s.normal_vec(64 * 64);
        let mut ab = a.clone();
        ab.extend_from_slice(&b);
        let mut ba = b.clone();
        ba.extend_from_slice(&a);
        let sa = critic.score(&ab);
        let sb = critic.score(&ba);
        assert!((sa - sb).abs() > 1e-9, "critic should not be channel-symmetric");
    }

    #[test]
    fn input_gradient_matches_fd() {
        let critic = Critic::<f64>::build(small_cfg(), 13).unwrap();
        let mut s = Stream::new(4);
        let x: Vec<f64> = s.normal_vec(64 * 64);
        let grad = critic.input_gradient(&x);
        let eps = 1e-6;
        for &i in &[0usize, 77, 801, 2048, 4095] {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (critic.score(&xp) - critic.score(&xm)) / (2.0 * eps);
            let rel = (fd - grad[i]).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-5, "coord {i}: fd {fd} vs grad {}", grad[i]);
        }
    }

    #[test]
    fn lipschitz_probe_is_bounded() {
        // Not a proof, just a sanity probe: small input perturbations move
        // the score proportionally, with ratio bounded by the product of
        // layer norms (loosely), never NaN/inf.
        let critic = Critic::<f64>::build(small_cfg(), 17).unwrap();
        let mut s = Stream::new(6);
        let x: Vec<f64> = s.normal_vec(64 * 64);
        let base = critic.score(&x);
        for k in 0..3 {
            let d: Vec<f64> = s.normal_vec(64 * 64);
            let dn: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let y: Vec<f64> = x.iter().zip(&d).map(|(&a, &b)| a + 1e-3 * b / dn).collect();
            let sy = critic.score(&y);
            assert!(sy.is_finite());
            let ratio = (sy - base).abs() / 1e-3;
            assert!(ratio < 1e6, "probe {k}: unreasonable local slope {ratio}");
        }
    }

    #[test]
    fn linear_scorer_is_exact_dot_product() {
        let w = vec![1.0, -2.0, 3.0, 0.5];
        let sc = LinearScorer::new(w.clone(), Shape::Vec(4));
        let g = Graph::<f64>::new();
        let params = sc.attach(&g);
        let x = g.constant(vec![2.0, 1.0, 0.0, -4.0], Shape::Vec(4));
        let y = sc.forward(&g, &params, x);
        assert_eq!(g.scalar(y), 2.0 - 2.0 - 2.0);
    }

    #[test]
    fn ragged_input_is_padded_not_rejected() {
        let cfg = CriticConfig::new(1, 70, 50);
        let critic = Critic::<f64>::build(cfg, 19).unwrap();
        let x = vec![0.25; 70 * 50];
        assert!(critic.score(&x).is_finite());
    }
}
