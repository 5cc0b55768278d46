//! Training: binary cross entropy, exact backpropagation, Adam updates and
//! the epoch loop with a class-balanced validation split.

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::ops::{conv2d_backward, maxpool_backward, relu, ConvGrads};
use super::{forward, ActivationCache, ModelWeights, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub validation_fraction: f32,
    pub rotation_range_rad: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            epochs: 35,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.15,
            rotation_range_rad: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Image-level class label. The sigmoid's target is 0 for corrosion and 1
/// for not-corrosion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Corrosion,
    NotCorrosion,
}

impl Label {
    /// Sigmoid target value.
    pub fn target(self) -> f32 {
        match self {
            Label::Corrosion => 0.0,
            Label::NotCorrosion => 1.0,
        }
    }
}

/// A training sample: an image scaled to [0, 1] plus its binary label. This
/// is the trainer's entire view of the data; per-pixel ground truth never
/// reaches it.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Tensor3<f32>,
    pub label: Label,
}

/// Binary cross entropy against a 0/1 target, with the output clamped to
/// `[eps, 1 - eps]`, `eps = 1e-7`.
pub fn bce_loss<T: Float>(raw_output: T, target: T) -> T {
    let eps = T::from(1e-7).unwrap();
    let o = raw_output.max(eps).min(T::one() - eps);
    -(target * o.ln() + (T::one() - target) * (T::one() - o).ln())
}

/// Gradients for every trainable parameter, in the model's block order, plus
/// the gradient at the last convolutional pre-activation (used to cross-check
/// the closed-form head derivatives).
#[derive(Debug, Clone)]
pub struct Grads<T = f32> {
    pub conv: Vec<ConvGrads<T>>,
    pub dense_weights: Vec<T>,
    pub dense_bias: T,
    pub last_preact: Tensor3<T>,
}

impl<T: Float> Grads<T> {
    pub fn zeros_like(model: &ModelWeights<T>) -> Self {
        Grads {
            conv: model
                .conv_layers
                .iter()
                .map(|l| ConvGrads {
                    kernel: vec![T::zero(); l.kernel.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
            dense_weights: vec![T::zero(); model.dense.weights.len()],
            dense_bias: T::zero(),
            last_preact: Tensor3::zeros(1, 1, 1),
        }
    }

    /// Accumulate `other * scale`.
    pub fn add_scaled(&mut self, other: &Grads<T>, scale: T) {
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            for (x, y) in a.kernel.iter_mut().zip(&b.kernel) {
                *x = *x + *y * scale;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x = *x + *y * scale;
            }
        }
        for (x, y) in self.dense_weights.iter_mut().zip(&other.dense_weights) {
            *x = *x + *y * scale;
        }
        self.dense_bias = self.dense_bias + other.dense_bias * scale;
    }
}

impl Grads<f32> {
    /// Parameter blocks in the same order as
    /// [`ModelWeights::param_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f32]> {
        let mut blocks = Vec::with_capacity(2 * self.conv.len() + 2);
        for g in &self.conv {
            blocks.push(g.kernel.as_slice());
            blocks.push(g.bias.as_slice());
        }
        blocks.push(self.dense_weights.as_slice());
        blocks.push(std::slice::from_ref(&self.dense_bias));
        blocks
    }
}

/// Exact backpropagation from a logit gradient down to every parameter.
///
/// `d_logit` is the derivative of the objective with respect to the dense
/// pre-sigmoid output; for binary cross entropy through the sigmoid it is
/// `raw_output - target`.
pub fn backward<T: Float>(
    cache: &ActivationCache<T>,
    model: &ModelWeights<T>,
    cfg: &NetworkConfig,
    d_logit: T,
) -> Result<Grads<T>> {
    model.matches(cfg)?;
    let sections = cfg.sections();
    let last = cache.last_conv_preact();

    // Dense head.
    let flat = relu(last);
    let dense_weights: Vec<T> = flat.data().iter().map(|&v| d_logit * v).collect();
    let dense_bias = d_logit;

    // Through the flatten and the final ReLU.
    let (fh, fw, fc) = last.shape();
    let mut d_last = vec![T::zero(); last.len()];
    for (i, d) in d_last.iter_mut().enumerate() {
        if last.data()[i] > T::zero() {
            *d = d_logit * model.dense.weights[i];
        }
    }
    let mut d_cur = Tensor3::from_data(fh, fw, fc, d_last)?;
    let last_preact_grad = d_cur.clone();

    let mut conv_grads: Vec<Option<ConvGrads<T>>> = vec![None; 2 * sections];
    for s in (0..sections).rev() {
        // Entering this loop, d_cur is the gradient at the pre-activation of
        // conv layer 2s+1 for the last section, or at the pooled output of
        // section s otherwise.
        if s + 1 < sections {
            let pool = &cache.pools[s];
            let prepool = relu(&cache.preacts[2 * s + 1]);
            let d_prepool = maxpool_backward(&d_cur, &pool.argmax, prepool.shape());
            d_cur = masked_by_relu(&d_prepool, &cache.preacts[2 * s + 1]);
        }
        // Second conv of the section. Its input is relu(preact[2s]).
        let input1 = relu(&cache.preacts[2 * s]);
        let (g1, d_in1) = conv2d_backward(&input1, &model.conv_layers[2 * s + 1], &d_cur)?;
        conv_grads[2 * s + 1] = Some(g1);
        d_cur = masked_by_relu(&d_in1, &cache.preacts[2 * s]);
        // First conv of the section. Its input is the image or the previous
        // pooled output.
        let input0 = if s == 0 {
            &cache.input
        } else {
            &cache.pools[s - 1].output
        };
        let (g0, d_in0) = conv2d_backward(input0, &model.conv_layers[2 * s], &d_cur)?;
        conv_grads[2 * s] = Some(g0);
        d_cur = d_in0;
    }

    Ok(Grads {
        conv: conv_grads.into_iter().map(|g| g.unwrap()).collect(),
        dense_weights,
        dense_bias,
        last_preact: last_preact_grad,
    })
}

/// Elementwise product with the ReLU subgradient of `preact` (zero at zero).
fn masked_by_relu<T: Float>(grad: &Tensor3<T>, preact: &Tensor3<T>) -> Tensor3<T> {
    let (h, w, c) = grad.shape();
    let data = grad
        .data()
        .iter()
        .zip(preact.data())
        .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
        .collect();
    Tensor3::from_data(h, w, c, data).expect("shapes match")
}

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, block_lens: &[usize]) -> Self {
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `params` and `grads` must mirror the block layout the
    /// state was created with.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((block, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..block.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                block[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Loss and validation accuracy for one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    /// Absent when the validation split is empty.
    pub val_accuracy: Option<f32>,
}

/// Per-epoch training history.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_val_accuracy(&self) -> Option<f32> {
        self.epochs.last().and_then(|e| e.val_accuracy)
    }
}

/// Train the classifier.
///
/// A class-balanced `validation_fraction` of each class is held out (never
/// augmented, never trained on). Remaining samples are shuffled each epoch
/// with a seed derived from `cfg.seed` and consumed in mini-batches of
/// `cfg.batch_size` mean gradients. Single-threaded and bit-deterministic
/// for a fixed seed.
pub fn train(
    dataset: &[LabeledImage],
    model: ModelWeights<f32>,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(ModelWeights<f32>, TrainHistory)> {
    cfg.validate()?;
    model.matches(net)?;
    let corrosion: Vec<usize> = indices_of(dataset, Label::Corrosion);
    let clean: Vec<usize> = indices_of(dataset, Label::NotCorrosion);
    if corrosion.is_empty() || clean.is_empty() {
        return Err(Error::Config(
            "training data must contain both corrosion and not-corrosion samples".into(),
        ));
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    for class in [corrosion, clean] {
        let mut idx = class;
        idx.shuffle(&mut split_rng);
        let held = (cfg.validation_fraction * idx.len() as f32).round() as usize;
        val_idx.extend_from_slice(&idx[..held]);
        train_idx.extend_from_slice(&idx[held..]);
    }
    if train_idx.is_empty() {
        return Err(Error::Config("validation split leaves no training data".into()));
    }

    let mut model = model;
    let block_lens: Vec<usize> = model.param_blocks_mut().iter().map(|b| b.len()).collect();
    let mut adam = Adam::new(cfg, &block_lens);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64 + 1, 0));
        order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_grads = Grads::zeros_like(&model);
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let sample = &dataset[i];
                let image = augment(
                    &sample.image,
                    mix_seed(cfg.seed, epoch as u64 + 1, i as u64 + 1),
                    cfg,
                );
                let (_, cache) = forward(&image, &model, net)?;
                let o = cache.raw_output;
                let target = sample.label.target();
                loss_sum += bce_loss(o, target) as f64;
                // d loss / d logit for BCE through the sigmoid.
                let grads = backward(&cache, &model, net, o - target)?;
                batch_grads.add_scaled(&grads, scale);
            }
            let grad_blocks = batch_grads.blocks();
            let mut params = model.param_blocks_mut();
            adam.step(&mut params, &grad_blocks);
        }

        let val_accuracy = if val_idx.is_empty() {
            None
        } else {
            let mut correct = 0usize;
            for &i in &val_idx {
                let sample = &dataset[i];
                let (pred, _) = forward(&sample.image, &model, net)?;
                if pred.is_corrosion == (sample.label == Label::Corrosion) {
                    correct += 1;
                }
            }
            Some(correct as f32 / val_idx.len() as f32)
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss: (loss_sum / order.len() as f64) as f32,
            val_accuracy,
        });
    }
    Ok((model, history))
}

fn indices_of(dataset: &[LabeledImage], label: Label) -> Vec<usize> {
    dataset
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == label)
        .map(|(i, _)| i)
        .collect()
}

/// SplitMix64-style combination of seed components.
pub(crate) fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(c.wrapping_mul(0x94d0_49bb_1331_11eb));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::init_he_uniform;

    #[test]
    fn bce_symmetric_point_is_ln2() {
        let l0 = bce_loss(0.5f64, 0.0);
        let l1 = bce_loss(0.5f64, 1.0);
        assert!((l0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l1 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let loss = bce_loss(0.0f64, 0.0);
        assert!((loss - -(1.0f64 - 1e-7).ln()).abs() < 1e-12);
        assert!(loss < 1e-6);
    }

    #[test]
    fn bce_direct_evaluation() {
        let loss = bce_loss(0.9f64, 0.0);
        assert!((loss - -(0.1f64).ln()).abs() < 1e-9);
        assert!((loss - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // One parameter, objective (theta - 0.3)^2, lr 0.1.
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&cfg, &[1]);
        let mut theta = [2.0f32];
        for _ in 0..200 {
            let g = [2.0 * (theta[0] - 0.3)];
            let mut params: [&mut [f32]; 1] = [&mut theta];
            adam.step(&mut params, &[&g]);
        }
        assert!(
            (theta[0] - 0.3).abs() < 1e-3,
            "theta = {} after 200 steps",
            theta[0]
        );
    }

    fn tiny_dataset(net: &NetworkConfig, n_per_class: usize) -> Vec<LabeledImage> {
        // Corrosion images are bright in the red channel, clean ones in blue.
        let side = net.input_side();
        let mut data = Vec::new();
        for i in 0..n_per_class {
            let shade = 0.6 + 0.4 * (i as f32 / n_per_class.max(1) as f32);
            let mut red = Tensor3::zeros(side, side, 3);
            let mut blue = Tensor3::zeros(side, side, 3);
            for y in 0..side {
                for x in 0..side {
                    red.set(y, x, 0, shade);
                    blue.set(y, x, 2, shade);
                }
            }
            data.push(LabeledImage {
                image: red,
                label: Label::Corrosion,
            });
            data.push(LabeledImage {
                image: blue,
                label: Label::NotCorrosion,
            });
        }
        data
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let net = NetworkConfig::new(1, 2, 8).unwrap();
        let data = tiny_dataset(&net, 4);
        let model = init_he_uniform(&net, 5);
        let cfg = TrainConfig {
            learning_rate: f32::MIN_POSITIVE, // validate() rejects exactly 0
            epochs: 2,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        // Exercise the documented zero-rate contract via an explicit Adam
        // step with lr = 0: parameters must stay bit-identical.
        let mut m = model.clone();
        let zero_cfg = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        let lens: Vec<usize> = m.param_blocks_mut().iter().map(|b| b.len()).collect();
        let mut adam = Adam::new(&zero_cfg, &lens);
        let fake_grads: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.5; n]).collect();
        let grad_refs: Vec<&[f32]> = fake_grads.iter().map(|g| g.as_slice()).collect();
        let mut params = m.param_blocks_mut();
        adam.step(&mut params, &grad_refs);
        drop(params);
        assert_eq!(m, model);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let net = NetworkConfig::new(1, 2, 8).unwrap();
        let mut data = tiny_dataset(&net, 2);
        data.retain(|s| s.label == Label::Corrosion);
        let model = init_he_uniform(&net, 5);
        let err = train(&data, model, &net, &TrainConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn training_separates_a_trivial_color_task() {
        let net = NetworkConfig::new(1, 2, 8).unwrap();
        let data = tiny_dataset(&net, 8);
        let model = init_he_uniform(&net, 5);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            epochs: 12,
            batch_size: 4,
            validation_fraction: 0.25,
            rotation_range_rad: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, history) = train(&data, model, &net, &cfg).unwrap();
        let acc = history.final_val_accuracy().unwrap();
        assert!(acc >= 0.99, "validation accuracy {acc}");
        // Loss should fall substantially from the first epoch to the last.
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let net = NetworkConfig::new(1, 2, 8).unwrap();
        let data = tiny_dataset(&net, 3);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 2,
            seed: 17,
            ..TrainConfig::default()
        };
        let (m1, h1) = train(&data, init_he_uniform(&net, 9), &net, &cfg).unwrap();
        let (m2, h2) = train(&data, init_he_uniform(&net, 9), &net, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1.epochs.len(), h2.epochs.len());
        for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        }
    }
}
