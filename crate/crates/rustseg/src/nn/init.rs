//! He (Kaiming) uniform weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelWeights, NetworkConfig, KERNEL_SIDE};

/// Draw every weight uniformly from `[-b, b]` with `b = sqrt(6 / fan_in)`;
/// biases start at zero. Deterministic for a fixed seed: the same seed always
/// produces bit-identical weights.
pub fn init_he_uniform(cfg: &NetworkConfig, seed: u64) -> ModelWeights<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelWeights::zeros(cfg);
    for layer in &mut model.conv_layers {
        let bound = he_bound(KERNEL_SIDE * KERNEL_SIDE * layer.in_channels);
        for w in &mut layer.kernel {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    let bound = he_bound(model.dense.weights.len());
    for w in &mut model.dense.weights {
        *w = rng.gen_range(-bound..=bound);
    }
    model
}

/// `sqrt(6 / fan_in)`.
pub fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}
