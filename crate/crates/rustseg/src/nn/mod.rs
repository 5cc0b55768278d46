//! Encoder CNN: fixed topology (two 3x3 valid convolutions per section, 2x2
//! max pool between sections, one-neuron sigmoid head), exact backpropagation
//! for training, and closed-form derivatives of the corrosion score with
//! respect to the last convolutional layer's activations (orders 1-3) for
//! class-activation mapping.

pub mod augment;
pub mod init;
pub mod ops;
pub mod train;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub use ops::{conv2d_backward, conv2d_valid, maxpool_2x2, maxpool_backward, relu, sigmoid};
pub use ops::{ConvGrads, ConvLayer, KERNEL_SIDE};

/// Network topology. Validated at construction: the input side must walk the
/// valid-conv/pool chain exactly (each section subtracts 4, each of the first
/// `sections - 1` pools halves an even dimension, and every side stays >= 3
/// ahead of a convolution).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawNetworkConfig", into = "RawNetworkConfig")]
pub struct NetworkConfig {
    sections: usize,
    base_channels: usize,
    input_side: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawNetworkConfig {
    sections: usize,
    base_channels: usize,
    input_side: usize,
}

impl TryFrom<RawNetworkConfig> for NetworkConfig {
    type Error = Error;
    fn try_from(raw: RawNetworkConfig) -> Result<Self> {
        NetworkConfig::new(raw.sections, raw.base_channels, raw.input_side)
    }
}

impl From<NetworkConfig> for RawNetworkConfig {
    fn from(cfg: NetworkConfig) -> Self {
        RawNetworkConfig {
            sections: cfg.sections,
            base_channels: cfg.base_channels,
            input_side: cfg.input_side,
        }
    }
}

impl Default for NetworkConfig {
    /// Production topology: 5 sections, 64 base channels, 572x572 input,
    /// giving 28x28x1024 final feature maps.
    fn default() -> Self {
        NetworkConfig::new(5, 64, 572).expect("default config is valid")
    }
}

impl NetworkConfig {
    pub fn new(sections: usize, base_channels: usize, input_side: usize) -> Result<Self> {
        if sections < 1 {
            return Err(Error::Config("sections must be >= 1".into()));
        }
        if sections > 16 {
            return Err(Error::Config(format!("{sections} sections is unreasonably deep")));
        }
        if base_channels < 1 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        let cfg = NetworkConfig {
            sections,
            base_channels,
            input_side,
        };
        // Fails loudly for any inconsistent input side.
        cfg.spatial_chain()?;
        Ok(cfg)
    }

    pub fn sections(&self) -> usize {
        self.sections
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    /// Every intermediate spatial side, starting at the input:
    /// `[572, 570, 568, 284, ..., 30, 28]` for the default config.
    pub fn spatial_chain(&self) -> Result<Vec<usize>> {
        let mut chain = vec![self.input_side];
        let mut side = self.input_side;
        for s in 0..self.sections {
            for conv in 0..2 {
                if side < 3 {
                    return Err(Error::Config(format!(
                        "side {side} too small for a 3x3 valid convolution \
                         (section {s}, conv {conv}, input {})",
                        self.input_side
                    )));
                }
                side -= 2;
                chain.push(side);
            }
            if s + 1 < self.sections {
                if side % 2 != 0 {
                    return Err(Error::Config(format!(
                        "side {side} entering the pool after section {s} is odd \
                         (input {})",
                        self.input_side
                    )));
                }
                side /= 2;
                chain.push(side);
            }
        }
        Ok(chain)
    }

    /// Feature-map side after the last convolution (28 for the default).
    pub fn final_side(&self) -> usize {
        *self.spatial_chain().expect("validated at construction").last().unwrap()
    }

    /// Output channels of section `s` (0-based): `base_channels * 2^s`.
    pub fn section_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Channels of the last convolutional layer (1024 for the default).
    pub fn final_channels(&self) -> usize {
        self.section_channels(self.sections - 1)
    }

    /// Input channels of conv layer `l` (layers are numbered 0..2*sections).
    pub fn conv_in_channels(&self, l: usize) -> usize {
        let section = l / 2;
        if l % 2 == 0 {
            if section == 0 {
                3
            } else {
                self.section_channels(section - 1)
            }
        } else {
            self.section_channels(section)
        }
    }

    /// Output channels of conv layer `l`.
    pub fn conv_out_channels(&self, l: usize) -> usize {
        self.section_channels(l / 2)
    }

    /// Length of the flattened input to the dense head.
    pub fn dense_len(&self) -> usize {
        let f = self.final_side();
        f * f * self.final_channels()
    }
}

/// Dense one-neuron head: a weight per flattened feature plus one bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead<T = f32> {
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T: Float> DenseHead<T> {
    pub fn cast<U: Float>(&self) -> DenseHead<U> {
        DenseHead {
            weights: self
                .weights
                .iter()
                .map(|&v| U::from(v).expect("float cast"))
                .collect(),
            bias: U::from(self.bias).expect("float cast"),
        }
    }
}

/// The trainable state: `2 * sections` convolution layers followed by the
/// dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T = f32> {
    pub conv_layers: Vec<ConvLayer<T>>,
    pub dense: DenseHead<T>,
}

impl<T: Float> ModelWeights<T> {
    /// All-zero weights with the shapes demanded by `cfg`.
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let conv_layers = (0..2 * cfg.sections())
            .map(|l| ConvLayer::zeros(cfg.conv_in_channels(l), cfg.conv_out_channels(l)))
            .collect();
        ModelWeights {
            conv_layers,
            dense: DenseHead {
                weights: vec![T::zero(); cfg.dense_len()],
                bias: T::zero(),
            },
        }
    }

    /// Check that every layer's shape matches the configuration.
    pub fn matches(&self, cfg: &NetworkConfig) -> Result<()> {
        if self.conv_layers.len() != 2 * cfg.sections() {
            return Err(Error::Dimension(format!(
                "model has {} conv layers, config expects {}",
                self.conv_layers.len(),
                2 * cfg.sections()
            )));
        }
        for (l, layer) in self.conv_layers.iter().enumerate() {
            let (ic, oc) = (cfg.conv_in_channels(l), cfg.conv_out_channels(l));
            if layer.in_channels != ic || layer.out_channels != oc {
                return Err(Error::Dimension(format!(
                    "conv layer {l} is {}x{}, config expects {ic}x{oc}",
                    layer.in_channels, layer.out_channels
                )));
            }
            if layer.kernel.len() != KERNEL_SIDE * KERNEL_SIDE * ic * oc
                || layer.bias.len() != oc
            {
                return Err(Error::Dimension(format!("conv layer {l} buffer sizes are wrong")));
            }
        }
        if self.dense.weights.len() != cfg.dense_len() {
            return Err(Error::Dimension(format!(
                "dense head has {} weights, config expects {}",
                self.dense.weights.len(),
                cfg.dense_len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ModelWeights<U> {
        ModelWeights {
            conv_layers: self.conv_layers.iter().map(|l| l.cast()).collect(),
            dense: self.dense.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers
            .iter()
            .map(|l| l.kernel.len() + l.bias.len())
            .sum::<usize>()
            + self.dense.weights.len()
            + 1
    }
}

impl ModelWeights<f32> {
    /// Mutable views of every parameter block, in the fixed block order
    /// (conv kernels/biases in layer order, then dense weights, dense bias)
    /// shared with gradients, the optimizer and the model file layout.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f32]> {
        let mut blocks = Vec::with_capacity(2 * self.conv_layers.len() + 2);
        for layer in &mut self.conv_layers {
            blocks.push(layer.kernel.as_mut_slice());
            blocks.push(layer.bias.as_mut_slice());
        }
        blocks.push(self.dense.weights.as_mut_slice());
        blocks.push(std::slice::from_mut(&mut self.dense.bias));
        blocks
    }
}

/// Classifier output. The sigmoid emits 0 for certain corrosion and 1 for
/// certain not-corrosion, so the corrosion probability is the complement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Raw sigmoid output `o` in [0, 1] (0 = corrosion, 1 = not-corrosion).
    pub raw_output: f32,
    /// `1 - o`.
    pub corrosion_prob: f32,
    /// Strictly greater than 0.5 corrosion probability; an exact tie is
    /// classified as not-corrosion.
    pub is_corrosion: bool,
}

impl Prediction {
    pub fn from_raw_output(raw_output: f32) -> Self {
        let corrosion_prob = 1.0 - raw_output;
        Prediction {
            raw_output,
            corrosion_prob,
            is_corrosion: corrosion_prob > 0.5,
        }
    }
}

/// Record of one max pool: the pooled tensor and per-element argmax indices.
#[derive(Debug, Clone)]
pub struct PoolRecord<T = f32> {
    pub output: Tensor3<T>,
    pub argmax: Vec<u32>,
}

/// Everything a forward pass produces that localization and backpropagation
/// need: per-layer pre-activations, pooled tensors, the pre-sigmoid logit.
/// Post-activations are `relu` of the stored pre-activations.
#[derive(Debug, Clone)]
pub struct ActivationCache<T = f32> {
    pub input: Tensor3<T>,
    /// Pre-activation of each conv layer, in layer order.
    pub preacts: Vec<Tensor3<T>>,
    /// One record per pool (between the first `sections - 1` sections).
    pub pools: Vec<PoolRecord<T>>,
    /// Dense output before the sigmoid.
    pub logit: T,
    /// `sigmoid(logit)`.
    pub raw_output: T,
}

impl<T: Float> ActivationCache<T> {
    /// Activation maps of the last convolutional layer before its ReLU:
    /// `(final_side, final_side, final_channels)`.
    pub fn last_conv_preact(&self) -> &Tensor3<T> {
        self.preacts.last().expect("cache from a completed forward pass")
    }
}

/// Run the network. The image must be `(input_side, input_side, 3)` with
/// pixel values already scaled to [0, 1].
pub fn forward<T: Float>(
    image: &Tensor3<T>,
    model: &ModelWeights<T>,
    cfg: &NetworkConfig,
) -> Result<(Prediction, ActivationCache<T>)> {
    let (h, w, c) = image.shape();
    if h != cfg.input_side() || w != cfg.input_side() || c != 3 {
        return Err(Error::Dimension(format!(
            "image is {h}x{w}x{c}, config expects {0}x{0}x3",
            cfg.input_side()
        )));
    }
    model.matches(cfg)?;

    let mut preacts = Vec::with_capacity(2 * cfg.sections());
    let mut pools = Vec::with_capacity(cfg.sections() - 1);
    let mut x = image.clone();
    for s in 0..cfg.sections() {
        for conv_in_section in 0..2 {
            let layer = &model.conv_layers[2 * s + conv_in_section];
            let pre = conv2d_valid(&x, layer)?;
            x = relu(&pre);
            preacts.push(pre);
        }
        if s + 1 < cfg.sections() {
            let (pooled, argmax) = maxpool_2x2(&x)?;
            x = pooled.clone();
            pools.push(PoolRecord {
                output: pooled,
                argmax,
            });
        }
    }

    // x is relu(last pre-activation); flatten order matches the tensor layout.
    let mut logit = model.dense.bias;
    for (v, w) in x.data().iter().zip(&model.dense.weights) {
        logit = logit + *v * *w;
    }
    let raw = sigmoid(logit);
    let prediction = Prediction::from_raw_output(raw.to_f32().expect("finite output"));
    Ok((
        prediction,
        ActivationCache {
            input: image.clone(),
            preacts,
            pools,
            logit,
            raw_output: raw,
        },
    ))
}

/// Which scalar score the class-activation derivatives differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `s = 1 - sigmoid(z) = sigmoid(-z)`: the post-sigmoid corrosion
    /// probability. The default.
    #[default]
    CorrosionProb,
    /// `s = exp(-z)`: a monotone alternative whose derivatives of every
    /// order are proportional to the score itself.
    ExpNegLogit,
}

/// Derivatives of the corrosion score with respect to the last convolutional
/// layer's pre-activations, orders 1 to 3.
#[derive(Debug, Clone)]
pub struct ScoreDerivatives<T = f32> {
    pub first: Tensor3<T>,
    pub second: Tensor3<T>,
    pub third: Tensor3<T>,
}

impl<T: Float> ScoreDerivatives<T> {
    pub fn cast<U: Float>(&self) -> ScoreDerivatives<U> {
        ScoreDerivatives {
            first: self.first.cast(),
            second: self.second.cast(),
            third: self.third.cast(),
        }
    }
}

/// Closed-form score derivatives through the head.
///
/// The path from the last conv pre-activation `a_i` to the score is
/// ReLU -> flatten -> dense -> sigmoid. Writing `s = sigma(u)` with
/// `u = -z`, the chain gives per position
///
/// ```text
/// d^k s / d a_i^k = f_k(s) * (-w_i)^k * 1[a_i > 0]
/// ```
///
/// with `f_1 = s(1-s)`, `f_2 = s(1-s)(1-2s)`, `f_3 = s(1-s)(1-6s+6s^2)`
/// for the corrosion-probability score, and `f_k = s` for the exponential
/// score `s = exp(-z)`. The ReLU subgradient at exactly zero is zero.
pub fn head_derivatives<T: Float>(
    cache: &ActivationCache<T>,
    model: &ModelWeights<T>,
    score: ScoreKind,
) -> Result<ScoreDerivatives<T>> {
    let last = cache.last_conv_preact();
    if model.dense.weights.len() != last.len() {
        return Err(Error::Dimension(format!(
            "dense head has {} weights but the last conv layer has {} activations",
            model.dense.weights.len(),
            last.len()
        )));
    }
    let one = T::one();
    let (f1, f2, f3) = match score {
        ScoreKind::CorrosionProb => {
            let s = one - cache.raw_output; // sigmoid(-logit)
            let six = T::from(6.0).unwrap();
            let two = T::from(2.0).unwrap();
            let base = s * (one - s);
            (
                base,
                base * (one - two * s),
                base * (one - six * s + six * s * s),
            )
        }
        ScoreKind::ExpNegLogit => {
            let s = (-cache.logit).exp();
            (s, s, s)
        }
    };
    let (h, w, c) = last.shape();
    let n = last.len();
    let mut d1 = vec![T::zero(); n];
    let mut d2 = vec![T::zero(); n];
    let mut d3 = vec![T::zero(); n];
    for i in 0..n {
        if last.data()[i] > T::zero() {
            let wi = model.dense.weights[i];
            d1[i] = f1 * -wi;
            d2[i] = f2 * wi * wi;
            d3[i] = f3 * -(wi * wi * wi);
        }
    }
    Ok(ScoreDerivatives {
        first: Tensor3::from_data(h, w, c, d1)?,
        second: Tensor3::from_data(h, w, c, d2)?,
        third: Tensor3::from_data(h, w, c, d3)?,
    })
}

/// Value of the chosen score for a completed forward pass.
pub fn score_value<T: Float>(cache: &ActivationCache<T>, score: ScoreKind) -> T {
    match score {
        ScoreKind::CorrosionProb => T::one() - cache.raw_output,
        ScoreKind::ExpNegLogit => (-cache.logit).exp(),
    }
}
