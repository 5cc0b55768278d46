//! Synthetic desk-scale dataset: rust-colored irregular blobs over varied
//! backgrounds, plus near-rust confounder shapes in the clean class. Every
//! image carries a ground-truth mask, used for IoU scoring only; training
//! sees nothing but images and binary labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::nn::train::{mix_seed, Label};
use crate::refine::MaskU8;

/// Inclusive per-channel color ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorBand {
    pub r: [u8; 2],
    pub g: [u8; 2],
    pub b: [u8; 2],
}

impl ColorBand {
    fn channel(&self, c: usize) -> [u8; 2] {
        match c {
            0 => self.r,
            1 => self.g,
            _ => self.b,
        }
    }

    /// True when some channel's ranges do not overlap.
    pub fn disjoint_in_some_channel(&self, other: &ColorBand) -> bool {
        (0..3).any(|c| {
            let a = self.channel(c);
            let b = other.channel(c);
            a[1] < b[0] || b[1] < a[0]
        })
    }

    /// True when the color lies outside the band in at least one channel.
    pub fn excludes(&self, color: [u8; 3]) -> bool {
        (0..3).any(|c| {
            let range = self.channel(c);
            color[c] < range[0] || color[c] > range[1]
        })
    }

    fn sample(&self, rng: &mut impl Rng) -> [u8; 3] {
        [
            rng.gen_range(self.r[0]..=self.r[1]),
            rng.gen_range(self.g[0]..=self.g[1]),
            rng.gen_range(self.b[0]..=self.b[1]),
        ]
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Total images; the corrosion class gets the odd half when uneven.
    pub count: usize,
    pub side: usize,
    pub blob_count_range: [usize; 2],
    pub blob_radius_range: [f32; 2],
    /// Rust hues for corrosion blobs.
    pub foreground_color_band: ColorBand,
    /// Near-rust hues for confounder shapes in the clean class.
    pub confounder_color_band: ColorBand,
    /// Background colors, one picked per image.
    pub background_palette: Vec<[u8; 3]>,
    /// Probability that a clean image carries confounder shapes.
    pub confounder_probability: f64,
    /// Per-pixel Gaussian noise, in intensity units.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 100,
            side: 44,
            blob_count_range: [1, 3],
            blob_radius_range: [6.0, 12.0],
            foreground_color_band: ColorBand {
                r: [150, 200],
                g: [70, 110],
                b: [20, 60],
            },
            confounder_color_band: ColorBand {
                r: [150, 200],
                g: [70, 110],
                b: [130, 180],
            },
            background_palette: vec![
                [96, 112, 128],  // steel gray
                [70, 110, 150],  // painted blue
                [88, 128, 84],   // weathered green
                [140, 140, 145], // concrete
            ],
            confounder_probability: 0.4,
            noise_sigma: 6.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::Config("side must be >= 8".into()));
        }
        if self.blob_radius_range[0] < 2.0 || self.blob_radius_range[1] < self.blob_radius_range[0]
        {
            return Err(Error::Config("blob radius range must be ordered and >= 2".into()));
        }
        if self.blob_count_range[0] < 1 || self.blob_count_range[1] < self.blob_count_range[0] {
            return Err(Error::Config("blob count range must be ordered and >= 1".into()));
        }
        if self.background_palette.is_empty() {
            return Err(Error::Config("background palette must not be empty".into()));
        }
        for &bg in &self.background_palette {
            if !self.foreground_color_band.excludes(bg) {
                return Err(Error::Config(format!(
                    "background color {bg:?} overlaps the foreground band in every channel"
                )));
            }
        }
        if !self
            .foreground_color_band
            .disjoint_in_some_channel(&self.confounder_color_band)
        {
            return Err(Error::Config(
                "foreground and confounder bands must be disjoint in at least one channel".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.confounder_probability) {
            return Err(Error::Config("confounder_probability must lie in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: RgbImage,
    pub label: Label,
    /// Per-pixel ground truth, for IoU scoring only. Empty for the clean
    /// class.
    pub truth: MaskU8,
}

/// A generated dataset.
#[derive(Debug, Clone, Default)]
pub struct SynthDataset {
    pub samples: Vec<SynthSample>,
}

/// Generate the dataset. Deterministic: a fixed spec (including its seed)
/// always produces a bit-identical dataset.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let samples = (0..spec.count)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::Corrosion
            } else {
                Label::NotCorrosion
            };
            generate_sample(spec, i as u64, label)
        })
        .collect();
    Ok(SynthDataset { samples })
}

fn generate_sample(spec: &SynthSpec, index: u64, label: Label) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5e_ed, index));
    let side = spec.side;
    let bg = spec.background_palette[rng.gen_range(0..spec.background_palette.len())];
    let mut image = RgbImage::new(side, side);
    for i in 0..side * side {
        image.set_pixel_at(i, bg);
    }
    let mut truth = MaskU8::zeros(side, side);

    match label {
        Label::Corrosion => {
            let blobs = rng.gen_range(spec.blob_count_range[0]..=spec.blob_count_range[1]);
            for _ in 0..blobs {
                draw_blob(
                    &mut image,
                    Some(&mut truth),
                    &spec.foreground_color_band,
                    spec,
                    &mut rng,
                );
            }
        }
        Label::NotCorrosion => {
            if rng.gen_bool(spec.confounder_probability) {
                let blobs = rng.gen_range(spec.blob_count_range[0]..=spec.blob_count_range[1]);
                for _ in 0..blobs {
                    draw_blob(&mut image, None, &spec.confounder_color_band, spec, &mut rng);
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        apply_noise(&mut image, spec.noise_sigma, &mut rng);
    }
    SynthSample {
        image,
        label,
        truth,
    }
}

/// An irregular blob: a base radius modulated by a few low-order radial
/// harmonics, filled by scanline.
fn draw_blob(
    image: &mut RgbImage,
    mut truth: Option<&mut MaskU8>,
    band: &ColorBand,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) {
    let side = spec.side as f32;
    let r0 = rng.gen_range(spec.blob_radius_range[0]..=spec.blob_radius_range[1]);
    let margin = (r0 * 1.3).min(side / 2.0 - 1.0);
    let cy = rng.gen_range(margin..=(side - 1.0 - margin));
    let cx = rng.gen_range(margin..=(side - 1.0 - margin));
    let color = band.sample(rng);
    let harmonics: Vec<(f32, f32)> = (0..3)
        .map(|_| (rng.gen_range(-0.12..=0.12), rng.gen_range(0.0..std::f32::consts::TAU)))
        .collect();

    let reach = (r0 * 1.4).ceil() as isize;
    let (cyi, cxi) = (cy.round() as isize, cx.round() as isize);
    for y in (cyi - reach).max(0)..=(cyi + reach).min(spec.side as isize - 1) {
        for x in (cxi - reach).max(0)..=(cxi + reach).min(spec.side as isize - 1) {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            let d = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx);
            let mut radius = r0;
            for (m, (amp, phase)) in harmonics.iter().enumerate() {
                radius += r0 * amp * ((m as f32 + 2.0) * theta + phase).cos();
            }
            if d <= radius {
                image.set_pixel(y as usize, x as usize, color);
                if let Some(t) = truth.as_deref_mut() {
                    t.set(y as usize, x as usize, 255);
                }
            }
        }
    }
}

fn apply_noise(image: &mut RgbImage, sigma: f32, rng: &mut ChaCha8Rng) {
    let n = image.height() * image.width();
    for i in 0..n {
        let mut px = image.pixel_at(i);
        for c in &mut px {
            let noisy = *c as f32 + sigma * gaussian(rng);
            *c = noisy.round().clamp(0.0, 255.0) as u8;
        }
        image.set_pixel_at(i, px);
    }
}

/// Standard normal draw via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_zero_is_an_empty_dataset() {
        let spec = SynthSpec {
            count: 0,
            ..SynthSpec::default()
        };
        let ds = synth_dataset(&spec).unwrap();
        assert!(ds.samples.is_empty());
    }

    #[test]
    fn corrosion_truth_nonempty_clean_truth_empty() {
        let spec = SynthSpec {
            count: 30,
            ..SynthSpec::default()
        };
        let ds = synth_dataset(&spec).unwrap();
        assert_eq!(ds.samples.len(), 30);
        for sample in &ds.samples {
            match sample.label {
                Label::Corrosion => assert!(!sample.truth.is_empty()),
                Label::NotCorrosion => assert!(sample.truth.is_empty()),
            }
        }
        let corrosion = ds
            .samples
            .iter()
            .filter(|s| s.label == Label::Corrosion)
            .count();
        assert_eq!(corrosion, 15);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let spec = SynthSpec {
            count: 10,
            seed: 77,
            ..SynthSpec::default()
        };
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.truth, y.truth);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn overlapping_bands_are_rejected() {
        let mut spec = SynthSpec::default();
        spec.confounder_color_band = spec.foreground_color_band;
        assert!(matches!(synth_dataset(&spec), Err(Error::Config(_))));

        let mut spec = SynthSpec::default();
        // A background color inside the foreground band in every channel.
        spec.background_palette = vec![[170, 90, 40]];
        assert!(synth_dataset(&spec).is_err());
    }

    #[test]
    fn default_spec_validates() {
        SynthSpec::default().validate().unwrap();
    }
}
