//! Training-time image augmentation: random flips plus a small rotation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::TrainConfig;
use crate::tensor::Tensor3;

pub fn flip_horizontal(image: &Tensor3<f32>) -> Tensor3<f32> {
    let (h, w, c) = image.shape();
    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(y, x, ch, image.get(y, w - 1 - x, ch));
            }
        }
    }
    out
}

pub fn flip_vertical(image: &Tensor3<f32>) -> Tensor3<f32> {
    let (h, w, c) = image.shape();
    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(y, x, ch, image.get(h - 1 - y, x, ch));
            }
        }
    }
    out
}

/// Rotate about the image center by `angle` radians (counterclockwise),
/// sampling bilinearly with edge-clamped out-of-bounds reads.
pub fn rotate_bilinear(image: &Tensor3<f32>, angle: f32) -> Tensor3<f32> {
    let (h, w, c) = image.shape();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            // Inverse mapping: rotate the destination point by -angle.
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let v00 = image.get_clamped(y0, x0, ch);
                let v01 = image.get_clamped(y0, x0 + 1, ch);
                let v10 = image.get_clamped(y0 + 1, x0, ch);
                let v11 = image.get_clamped(y0 + 1, x0 + 1, ch);
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out.set(y, x, ch, top + (bottom - top) * fy);
            }
        }
    }
    out
}

/// Random augmentation, deterministic per seed: independent horizontal and
/// vertical flips with probability 0.5 each, then a rotation by an angle
/// uniform in `[-rotation_range_rad, rotation_range_rad]`.
pub fn augment(image: &Tensor3<f32>, seed: u64, cfg: &TrainConfig) -> Tensor3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_h = rng.gen_bool(0.5);
    let do_v = rng.gen_bool(0.5);
    let range = cfg.rotation_range_rad;
    let angle = if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    };
    let mut out = image.clone();
    if do_h {
        out = flip_horizontal(&out);
    }
    if do_v {
        out = flip_vertical(&out);
    }
    rotate_bilinear(&out, angle)
}
