//! Class-localization heatmaps from a forward pass.
//!
//! Plain gradient-weighted mapping averages the score gradient over each
//! feature map (global average pooling) and combines maps under a ReLU. The
//! improved variant replaces the average with per-position weights built from
//! second- and third-order score derivatives and drops negative gradients
//! before pooling, which keeps multiple disjoint regions of the class visible.
//! Both share one weighted-pooling kernel here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, ActivationCache, ScoreDerivatives};
use crate::tensor::Tensor3;

/// Small square non-negative float map; after [`normalize_heatmap`] values
/// lie in [0, 1] with the maximum at exactly 1 (or all zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    side: usize,
    values: Vec<f32>,
}

impl Heatmap {
    pub fn new(side: usize, values: Vec<f32>) -> Result<Self> {
        if side == 0 || values.len() != side * side {
            return Err(Error::Dimension(format!(
                "heatmap buffer {} does not match side {side}",
                values.len()
            )));
        }
        Ok(Heatmap { side, values })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.side + x]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn max(&self) -> f32 {
        self.values.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b))
    }

    pub fn mean(&self) -> f32 {
        self.values.iter().sum::<f32>() / self.values.len() as f32
    }

    /// Plain-text matrix rendering, one row per line, for debug dumps.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for y in 0..self.side {
            for x in 0..self.side {
                if x > 0 {
                    out.push(' ');
                }
                out.push_str(&format!("{:.6}", self.get(y, x)));
            }
            out.push('\n');
        }
        out
    }
}

/// Which activation maps the combination uses. The pre-ReLU maps are the
/// default; post-ReLU is exposed for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    #[default]
    PreRelu,
    PostRelu,
}

/// Extract the (u, v, K) feature maps the CAM combination runs over.
pub fn cam_maps(cache: &ActivationCache<f32>, source: MapSource) -> Tensor3<f32> {
    match source {
        MapSource::PreRelu => cache.last_conv_preact().clone(),
        MapSource::PostRelu => relu(cache.last_conv_preact()),
    }
}

/// Shared weighted-pooling kernel behind both CAM variants.
///
/// Per feature map `k`, pools the first-order gradients into a coefficient
/// `alpha_k = sum_ij w_ij * g_ij` (with `g` optionally passed through a ReLU)
/// and returns `ReLU(sum_k alpha_k * A_k)`. When `pixel_weights` is `None`,
/// every weight is `1 / (u * v)`, i.e. plain global average pooling.
pub fn cam_heatmap(
    maps: &Tensor3<f32>,
    grads1: &Tensor3<f32>,
    pixel_weights: Option<&Tensor3<f32>>,
    relu_grads: bool,
) -> Result<Heatmap> {
    let (u, v, k) = maps.shape();
    if u != v {
        return Err(Error::Dimension(format!("feature maps must be square, got {u}x{v}")));
    }
    if grads1.shape() != maps.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match maps {:?}",
            grads1.shape(),
            maps.shape()
        )));
    }
    if let Some(w) = pixel_weights {
        if w.shape() != maps.shape() {
            return Err(Error::Dimension(format!(
                "pixel weight shape {:?} does not match maps {:?}",
                w.shape(),
                maps.shape()
            )));
        }
    }
    let uniform = 1.0 / (u * v) as f32;
    let mut alpha = vec![0.0f32; k];
    for i in 0..u * v {
        for c in 0..k {
            let g = grads1.data()[i * k + c];
            let g = if relu_grads { g.max(0.0) } else { g };
            let w = match pixel_weights {
                Some(pw) => pw.data()[i * k + c],
                None => uniform,
            };
            alpha[c] += w * g;
        }
    }
    let mut values = vec![0.0f32; u * v];
    for (i, value) in values.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for c in 0..k {
            acc += alpha[c] * maps.data()[i * k + c];
        }
        *value = acc.max(0.0);
    }
    Heatmap::new(u, values)
}

/// Gradient-weighted map: global-average-pooled first-order gradients as map
/// coefficients, combined under a ReLU. Unnormalized.
pub fn grad_cam(
    cache: &ActivationCache<f32>,
    grads1: &Tensor3<f32>,
    source: MapSource,
) -> Result<Heatmap> {
    cam_heatmap(&cam_maps(cache, source), grads1, None, false)
}

/// Per-position weights for the improved variant:
///
/// ```text
/// w_ij = d2_ij / (2 * d2_ij + S * d3_ij),   S = sum_ab A_ab
/// ```
///
/// per feature map, with weight 0 wherever the denominator is 0 (flat-score
/// regions would otherwise divide by zero).
pub fn gradcam_pp_pixel_weights(
    maps: &Tensor3<f32>,
    grads2: &Tensor3<f32>,
    grads3: &Tensor3<f32>,
) -> Result<Tensor3<f32>> {
    let shape = maps.shape();
    if grads2.shape() != shape || grads3.shape() != shape {
        return Err(Error::Dimension(
            "second/third derivative shapes do not match the feature maps".into(),
        ));
    }
    let (u, v, k) = shape;
    let mut map_sums = vec![0.0f32; k];
    for i in 0..u * v {
        for c in 0..k {
            map_sums[c] += maps.data()[i * k + c];
        }
    }
    let mut weights = vec![0.0f32; maps.len()];
    for i in 0..u * v {
        for c in 0..k {
            let d2 = grads2.data()[i * k + c];
            let d3 = grads3.data()[i * k + c];
            let denom = 2.0 * d2 + map_sums[c] * d3;
            if denom != 0.0 {
                weights[i * k + c] = d2 / denom;
            }
        }
    }
    Tensor3::from_data(u, v, k, weights)
}

/// Improved gradient-weighted map: per-position weighted pooling of the
/// ReLU-ed first-order gradients. Unnormalized.
pub fn grad_cam_pp(
    cache: &ActivationCache<f32>,
    derivs: &ScoreDerivatives<f32>,
    source: MapSource,
) -> Result<Heatmap> {
    let maps = cam_maps(cache, source);
    let weights = gradcam_pp_pixel_weights(&maps, &derivs.second, &derivs.third)?;
    cam_heatmap(&maps, &derivs.first, Some(&weights), true)
}

/// A heatmap scaled to [0, 1], plus whether anything localized at all.
#[derive(Debug, Clone)]
pub struct NormalizedHeatmap {
    pub map: Heatmap,
    /// False when the raw heatmap was identically zero.
    pub localized: bool,
}

/// Scale a non-negative heatmap by its maximum. An all-zero map is returned
/// unchanged and flagged as "no localization".
pub fn normalize_heatmap(raw: &Heatmap) -> NormalizedHeatmap {
    let max = raw.max();
    if max > 0.0 {
        NormalizedHeatmap {
            map: Heatmap {
                side: raw.side,
                values: raw.values.iter().map(|v| v / max).collect(),
            },
            localized: true,
        }
    } else {
        NormalizedHeatmap {
            map: raw.clone(),
            localized: false,
        }
    }
}

/// Corner-aligned bilinear upsampling to `target_side`. Output values stay
/// within the input's [min, max].
pub fn upsample_bilinear(map: &Heatmap, target_side: usize) -> Result<Heatmap> {
    if target_side < map.side {
        return Err(Error::Dimension(format!(
            "target side {target_side} smaller than source {}",
            map.side
        )));
    }
    let src = map.side;
    let mut values = vec![0.0f32; target_side * target_side];
    let scale = if target_side > 1 {
        (src as f32 - 1.0) / (target_side as f32 - 1.0)
    } else {
        0.0
    };
    for y in 0..target_side {
        let sy = y as f32 * scale;
        let y0 = (sy.floor() as usize).min(src - 1);
        let y1 = (y0 + 1).min(src - 1);
        let fy = sy - y0 as f32;
        for x in 0..target_side {
            let sx = x as f32 * scale;
            let x0 = (sx.floor() as usize).min(src - 1);
            let x1 = (x0 + 1).min(src - 1);
            let fx = sx - x0 as f32;
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            values[y * target_side + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Heatmap::new(target_side, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_map(side: usize, values: Vec<f32>) -> Tensor3<f32> {
        Tensor3::from_data(side, side, 1, values).unwrap()
    }

    #[test]
    fn hand_evaluated_single_map_case() {
        // A = [[1, -1], [2, 0]], gradient identically 1:
        // alpha = mean = 0.5, heatmap = ReLU(0.5 * A) = [[0.5, 0], [1, 0]].
        let maps = single_map(2, vec![1.0, -1.0, 2.0, 0.0]);
        let grads = single_map(2, vec![1.0; 4]);
        let heat = cam_heatmap(&maps, &grads, None, false).unwrap();
        assert_eq!(heat.values(), &[0.5, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_gradients_give_zero_heatmap() {
        let maps = single_map(2, vec![1.0, 2.0, 3.0, 4.0]);
        let grads = single_map(2, vec![0.0; 4]);
        let heat = cam_heatmap(&maps, &grads, None, false).unwrap();
        assert!(heat.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negating_gradients_flips_which_map_survives() {
        // With K = 1, positive average gradient keeps positive activations;
        // negating every gradient flips the sign of alpha so the previously
        // suppressed (negative) activations survive the outer ReLU instead.
        let maps = single_map(2, vec![1.0, -2.0, 3.0, -4.0]);
        let grads = single_map(2, vec![1.0; 4]);
        let pos = cam_heatmap(&maps, &grads, None, false).unwrap();
        let neg_grads = single_map(2, vec![-1.0; 4]);
        let neg = cam_heatmap(&maps, &neg_grads, None, false).unwrap();
        assert_eq!(pos.values(), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(neg.values(), &[0.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn heatmaps_are_always_non_negative() {
        let maps = single_map(3, (0..9).map(|i| i as f32 - 4.0).collect());
        let grads = single_map(3, (0..9).map(|i| (i as f32 * 0.7).sin()).collect());
        let heat = cam_heatmap(&maps, &grads, None, false).unwrap();
        assert!(heat.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_curvature_gives_zero_weights_and_heatmap() {
        let maps = single_map(2, vec![1.0, 2.0, 3.0, 4.0]);
        let zeros = single_map(2, vec![0.0; 4]);
        let w = gradcam_pp_pixel_weights(&maps, &zeros, &zeros).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
        let grads = single_map(2, vec![1.0; 4]);
        let heat = cam_heatmap(&maps, &grads, Some(&w), true).unwrap();
        assert!(heat.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_negative_gradients_give_zero_heatmap() {
        let maps = single_map(2, vec![1.0, 2.0, 3.0, 4.0]);
        let grads = single_map(2, vec![-0.5, -1.0, -2.0, -0.1]);
        let d2 = single_map(2, vec![0.3; 4]);
        let d3 = single_map(2, vec![0.1; 4]);
        let w = gradcam_pp_pixel_weights(&maps, &d2, &d3).unwrap();
        let heat = cam_heatmap(&maps, &grads, Some(&w), true).unwrap();
        assert!(heat.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_blob_case_keeps_both_blobs() {
        // One 4x4 map with a large blob (three cells at gradient 1) and a
        // small blob (one cell at gradient 1), activations positive on both.
        // Direct evaluation of the weighted-pooling formula: with d2 and d3
        // constant and positive the per-position weights are equal, so both
        // blobs contribute; the check below freezes the directly computed
        // expected alpha.
        let mut a = vec![0.0f32; 16];
        let mut g1 = vec![0.0f32; 16];
        for i in [0usize, 1, 4] {
            a[i] = 2.0;
            g1[i] = 1.0;
        }
        a[15] = 1.0;
        g1[15] = 1.0;
        let maps = single_map(4, a.clone());
        let d2 = single_map(4, vec![0.25; 16]);
        let d3 = single_map(4, vec![0.05; 16]);
        let w = gradcam_pp_pixel_weights(&maps, &d2, &d3).unwrap();
        // Denominator per position: 2 * 0.25 + sum(A) * 0.05 = 0.5 + 7 * 0.05.
        let expected_w = 0.25 / (0.5 + 7.0 * 0.05);
        for &v in w.data() {
            assert!((v - expected_w).abs() < 1e-6);
        }
        let heat = cam_heatmap(&maps, &single_map(4, g1), Some(&w), true).unwrap();
        let alpha = 4.0 * expected_w; // four active gradient cells
        assert!((heat.get(0, 0) - 2.0 * alpha).abs() < 1e-5, "large blob");
        assert!((heat.get(3, 3) - 1.0 * alpha).abs() < 1e-5, "small blob");
        assert!(heat.get(3, 3) > 0.0, "small blob retains nonzero heat");
    }

    #[test]
    fn weighted_pool_reduces_to_average_pool() {
        let maps = single_map(3, (0..9).map(|i| (i as f32).cos()).collect());
        let grads = single_map(3, (0..9).map(|i| (i as f32 * 1.3).sin()).collect());
        let uniform = single_map(3, vec![1.0 / 9.0; 9]);
        let avg = cam_heatmap(&maps, &grads, None, false).unwrap();
        let weighted = cam_heatmap(&maps, &grads, Some(&uniform), false).unwrap();
        for (a, b) in avg.values().iter().zip(weighted.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_scales_by_max() {
        let h = Heatmap::new(2, vec![2.0, 4.0, 0.0, 1.0]).unwrap();
        let n = normalize_heatmap(&h);
        assert!(n.localized);
        assert_eq!(n.map.values(), &[0.5, 1.0, 0.0, 0.25]);
    }

    #[test]
    fn normalize_flags_all_zero_maps() {
        let h = Heatmap::new(2, vec![0.0; 4]).unwrap();
        let n = normalize_heatmap(&h);
        assert!(!n.localized);
        assert_eq!(n.map.values(), &[0.0; 4]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let h = Heatmap::new(2, vec![1.0, 0.5, 0.25, 0.0]).unwrap();
        let n = normalize_heatmap(&h);
        assert_eq!(n.map.values(), h.values());
    }

    #[test]
    fn upsample_constant_map_stays_constant() {
        let h = Heatmap::new(3, vec![0.4; 9]).unwrap();
        let up = upsample_bilinear(&h, 10).unwrap();
        assert!(up.values().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn upsample_preserves_corners() {
        let h = Heatmap::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = upsample_bilinear(&h, 5).unwrap();
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(0, 4), 1.0);
        assert_eq!(up.get(4, 0), 1.0);
        assert_eq!(up.get(4, 4), 0.0);
    }

    #[test]
    fn upsample_never_exceeds_the_input_range() {
        let values: Vec<f32> = (0..28 * 28).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let h = Heatmap::new(28, values).unwrap();
        let up = upsample_bilinear(&h, 572).unwrap();
        let (min, max) = h
            .values()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        for &v in up.values() {
            assert!(v >= min - 1e-6 && v <= max + 1e-6);
        }
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let h = Heatmap::new(4, vec![0.0; 16]).unwrap();
        assert!(upsample_bilinear(&h, 3).is_err());
    }
}
