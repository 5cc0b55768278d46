//! Mask refinement: dynamic threshold filter, dense-CRF mean-field inference
//! and the K-means + erosion + short-CRF "advanced" path.

pub mod crf;
pub mod kmeans;
pub mod morphology;

use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::localize::Heatmap;

pub use crf::{crf_refine, crf_refine_observed, crf_refine_with, mask_to_unary, CrfBackend, CrfParams, Unary};
pub use kmeans::{kmeans2, select_cluster, Kmeans2};
pub use morphology::erode_diamond5;

/// Full-resolution 8-bit graded segmentation mask: 0 is background, 255 the
/// strongest corrosion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskU8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskU8 {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask dimensions must be >= 1");
        MaskU8 {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height < 1 || width < 1 || data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask buffer {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(MaskU8 {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// True when no pixel is set.
    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Support of the mask: every strictly positive pixel.
    pub fn binarize(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v > 0).collect(),
        }
    }
}

/// Boolean mask over an image frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask dimensions must be >= 1");
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height < 1 || width < 1 || data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask buffer {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| !a || b)
    }
}

/// Dynamic threshold `T = 1 - (max(H) - mean(H))`, computed on the
/// low-resolution normalized heatmap. `T` may exceed the maximum, in which
/// case the filter empties the mask.
pub fn dynamic_threshold(heatmap: &Heatmap) -> f32 {
    1.0 - (heatmap.max() - heatmap.mean())
}

/// Threshold filter and 8-bit conversion: values below `t` are zeroed,
/// survivors are scaled by 255 and rounded half-up.
pub fn apply_threshold(upsampled: &Heatmap, t: f32) -> MaskU8 {
    let side = upsampled.side();
    let data = upsampled
        .values()
        .iter()
        .map(|&v| if v >= t { (v * 255.0 + 0.5).floor() as u8 } else { 0 })
        .collect();
    MaskU8 {
        height: side,
        width: side,
        data,
    }
}

/// The aggressive refinement path: K-means(2) color segmentation, selection
/// of the cluster covering most of the seed, a trim of the graded seed to
/// that cluster, 5x5 diamond erosion of the trimmed support, then a short
/// 10-epoch CRF. An empty trim (the seed landed in the wrong color cluster)
/// returns an empty mask without running the CRF.
pub fn advanced_refine(
    image: &RgbImage,
    mask: &MaskU8,
    params: &CrfParams,
    seed: u64,
) -> Result<MaskU8> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Dimension(format!(
            "image {}x{} and mask {}x{} differ",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let clusters = kmeans2(image, seed)?;
    let selected = select_cluster(&clusters.clusters, mask)?;

    // Trim: graded values survive only inside the selected cluster.
    let mut trimmed = mask.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !selected.get(y, x) {
                trimmed.set(y, x, 0);
            }
        }
    }
    // Erode the trimmed support and re-apply it.
    let eroded = erode_diamond5(&trimmed.binarize());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !eroded.get(y, x) {
                trimmed.set(y, x, 0);
            }
        }
    }
    if trimmed.is_empty() {
        return Ok(trimmed);
    }
    let short = CrfParams {
        epochs: 10,
        ..params.clone()
    };
    crf_refine(image, &trimmed, &short)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_from_spread() {
        let h = Heatmap::new(2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let t = dynamic_threshold(&h);
        assert!((t - 0.7).abs() < 1e-6);
    }

    #[test]
    fn constant_heatmap_thresholds_to_one() {
        let h = Heatmap::new(2, vec![0.3; 4]).unwrap();
        assert!((dynamic_threshold(&h) - 1.0).abs() < 1e-6);
        // Nothing below 1.0 survives.
        let mask = apply_threshold(&h, dynamic_threshold(&h));
        assert!(mask.is_empty());
    }

    #[test]
    fn threshold_direct_evaluation() {
        let mut values = vec![0.0f32; 4];
        values[0] = 1.0; // max 1.0, mean 0.25
        let h = Heatmap::new(2, values).unwrap();
        assert!((dynamic_threshold(&h) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn surviving_half_value_rounds_half_up() {
        let h = Heatmap::new(1, vec![0.5]).unwrap();
        let mask = apply_threshold(&h, 0.2);
        assert_eq!(mask.data(), &[128]);
    }

    #[test]
    fn threshold_above_max_empties_the_mask() {
        let h = Heatmap::new(2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mask = apply_threshold(&h, 0.5);
        assert!(mask.is_empty());
    }

    #[test]
    fn zero_threshold_keeps_every_pixel() {
        let h = Heatmap::new(2, vec![0.1, 0.25, 0.6, 1.0]).unwrap();
        let mask = apply_threshold(&h, 0.0);
        let expected: Vec<u8> = h
            .values()
            .iter()
            .map(|v| (v * 255.0 + 0.5).floor() as u8)
            .collect();
        assert_eq!(mask.data(), expected.as_slice());
    }

    #[test]
    fn threshold_outputs_bound_by_scaled_input() {
        let values: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let h = Heatmap::new(4, values).unwrap();
        let t = 0.4;
        let mask = apply_threshold(&h, t);
        for (i, &v) in h.values().iter().enumerate() {
            let full = (v * 255.0 + 0.5).floor() as u8;
            assert!(mask.data()[i] <= full);
            if mask.data()[i] > 0 {
                assert!(v >= t, "kept pixel below threshold");
            } else {
                assert!(v < t || full == 0, "zeroed pixel was above threshold");
            }
        }
    }
}
