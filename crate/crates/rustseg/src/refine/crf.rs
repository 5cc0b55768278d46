//! Dense (fully-connected) two-label CRF refined by parallel mean-field
//! inference.
//!
//! Every pixel pair is coupled through two Gaussian kernels:
//!
//! ```text
//! k_app(i, j)    = exp(-|p_i - p_j|^2 / (2 sa_xy^2) - |I_i - I_j|^2 / (2 sa_rgb^2))
//! k_smooth(i, j) = exp(-|p_i - p_j|^2 / (2 ss_xy^2))
//! ```
//!
//! weighted by their Potts compatibilities. One epoch updates every pixel's
//! label marginals simultaneously from the kernel-filtered messages of the
//! previous epoch. The reference backend sums all pairs exactly in O(N^2);
//! the windowed backend truncates each kernel at `radius_sigmas` standard
//! deviations and subsamples windows larger than `sample_budget`, which
//! leaves inputs up to 64x64 effectively exact under the default parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MaskU8;
use crate::error::{Error, Result};
use crate::imageio::RgbImage;

/// The five pairwise-kernel hyperparameters plus epoch count and the unary
/// certainty. Defaults follow the canonical dense-CRF example settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    /// Appearance kernel spatial standard deviation (pixels).
    pub appearance_sigma_xy: f32,
    /// Appearance kernel color standard deviation (intensity units).
    pub appearance_sigma_rgb: f32,
    /// Appearance Potts compatibility weight.
    pub appearance_compat: f32,
    /// Smoothness kernel spatial standard deviation (pixels).
    pub smooth_sigma_xy: f32,
    /// Smoothness Potts compatibility weight.
    pub smooth_compat: f32,
    /// Mean-field epochs.
    pub epochs: u32,
    /// Seed-mask certainty floor, in (0, 0.5).
    pub unary_eps: f32,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            appearance_sigma_xy: 80.0,
            appearance_sigma_rgb: 13.0,
            appearance_compat: 10.0,
            smooth_sigma_xy: 3.0,
            smooth_compat: 3.0,
            epochs: 25,
            unary_eps: 0.05,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.appearance_sigma_xy > 0.0)
            || !(self.appearance_sigma_rgb > 0.0)
            || !(self.smooth_sigma_xy > 0.0)
        {
            return Err(Error::Config("CRF sigmas must be > 0".into()));
        }
        if self.appearance_compat < 0.0 || self.smooth_compat < 0.0 {
            return Err(Error::Config("CRF compatibility weights must be >= 0".into()));
        }
        if !(self.unary_eps > 0.0 && self.unary_eps < 0.5) {
            return Err(Error::Config("unary_eps must lie strictly in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Per-pixel two-class negative log probabilities, corrosion first.
#[derive(Debug, Clone)]
pub struct Unary {
    pub height: usize,
    pub width: usize,
    /// `[-ln P(corrosion), -ln P(background)]` per pixel.
    pub neg_log: Vec<[f64; 2]>,
}

/// Turn a graded seed mask into unary potentials. The corrosion probability
/// is `eps + (1 - 2 eps) * mask / 255`, bounded away from 0 and 1.
pub fn mask_to_unary(mask: &MaskU8, eps: f32) -> Result<Unary> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Config(format!("unary_eps must lie strictly in (0, 0.5), got {eps}")));
    }
    let eps = eps as f64;
    let neg_log = mask
        .data()
        .iter()
        .map(|&m| {
            let p = eps + (1.0 - 2.0 * eps) * (m as f64 / 255.0);
            [-p.ln(), -(1.0 - p).ln()]
        })
        .collect();
    Ok(Unary {
        height: mask.height(),
        width: mask.width(),
        neg_log,
    })
}

/// Pairwise-summation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CrfBackend {
    /// Reference O(N^2) summation over every pixel pair.
    Exact,
    /// Truncated, optionally subsampled windows per kernel.
    Windowed {
        /// Kernel support radius in standard deviations.
        radius_sigmas: f32,
        /// Maximum samples per window before subsampling kicks in.
        sample_budget: usize,
    },
}

impl CrfBackend {
    pub fn windowed_default() -> Self {
        CrfBackend::Windowed {
            radius_sigmas: 5.0,
            sample_budget: 4096,
        }
    }

    /// Exact summation for small frames, windowed beyond 64x64 pixels.
    pub fn auto(height: usize, width: usize) -> Self {
        if height * width <= 64 * 64 {
            CrfBackend::Exact
        } else {
            CrfBackend::windowed_default()
        }
    }
}

/// Refine a seed mask with the backend chosen automatically from the frame
/// size. Output is binary: 255 where the corrosion marginal wins, 0 elsewhere.
pub fn crf_refine(image: &RgbImage, mask: &MaskU8, params: &CrfParams) -> Result<MaskU8> {
    crf_refine_with(image, mask, params, &CrfBackend::auto(image.height(), image.width()))
}

pub fn crf_refine_with(
    image: &RgbImage,
    mask: &MaskU8,
    params: &CrfParams,
    backend: &CrfBackend,
) -> Result<MaskU8> {
    crf_refine_observed(image, mask, params, backend, |_, _| {})
}

/// As [`crf_refine_with`], invoking `observer(epoch, corrosion_marginals)`
/// after every mean-field epoch (for per-epoch snapshot dumps).
pub fn crf_refine_observed(
    image: &RgbImage,
    mask: &MaskU8,
    params: &CrfParams,
    backend: &CrfBackend,
    observer: impl FnMut(usize, &[f64]),
) -> Result<MaskU8> {
    let q = mean_field(image, mask, params, backend, observer)?;
    let data = q.iter().map(|p| if p[0] > p[1] { 255 } else { 0 }).collect();
    MaskU8::from_data(image.height(), image.width(), data)
}

/// Final per-pixel corrosion marginals (used by backend regression tests).
pub fn crf_marginals(
    image: &RgbImage,
    mask: &MaskU8,
    params: &CrfParams,
    backend: &CrfBackend,
) -> Result<Vec<f64>> {
    let q = mean_field(image, mask, params, backend, |_, _| {})?;
    Ok(q.iter().map(|p| p[0]).collect())
}

fn mean_field(
    image: &RgbImage,
    mask: &MaskU8,
    params: &CrfParams,
    backend: &CrfBackend,
    mut observer: impl FnMut(usize, &[f64]),
) -> Result<Vec<[f64; 2]>> {
    params.validate()?;
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Dimension(format!(
            "image {}x{} and mask {}x{} differ",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let unary = mask_to_unary(mask, params.unary_eps)?;

    // All pixels start at the softmax of their negated unaries.
    let mut q: Vec<[f64; 2]> = unary
        .neg_log
        .iter()
        .map(|u| softmax2(-u[0], -u[1]))
        .collect();
    if params.epochs == 0 {
        return Ok(q);
    }

    let luts = Luts::build(params, h, w);
    let colors: Vec<[i32; 3]> = (0..h * w)
        .map(|i| {
            let p = image.pixel_at(i);
            [p[0] as i32, p[1] as i32, p[2] as i32]
        })
        .collect();

    let mut corrosion = vec![0.0f64; h * w];
    for epoch in 0..params.epochs {
        let next: Vec<[f64; 2]> = match backend {
            CrfBackend::Exact => exact_epoch(h, w, &q, &unary, &colors, &luts),
            CrfBackend::Windowed {
                radius_sigmas,
                sample_budget,
            } => windowed_epoch(
                h,
                w,
                &q,
                &unary,
                &colors,
                &luts,
                params,
                *radius_sigmas,
                *sample_budget,
            ),
        };
        q = next;
        for (c, p) in corrosion.iter_mut().zip(&q) {
            *c = p[0];
        }
        observer(epoch as usize, &corrosion);
    }
    Ok(q)
}

/// Kernel lookup tables. Spatial tables are premultiplied by their
/// compatibility weights; the color table is a plain Gaussian over the
/// integer squared RGB distance.
struct Luts {
    app_xy: Vec<f64>,
    smooth_xy: Vec<f64>,
    rgb: Vec<f64>,
}

impl Luts {
    fn build(params: &CrfParams, h: usize, w: usize) -> Self {
        let max_d2p = (h - 1) * (h - 1) + (w - 1) * (w - 1);
        let two_sa = 2.0 * (params.appearance_sigma_xy as f64).powi(2);
        let two_ss = 2.0 * (params.smooth_sigma_xy as f64).powi(2);
        let two_sc = 2.0 * (params.appearance_sigma_rgb as f64).powi(2);
        let app_xy = (0..=max_d2p)
            .map(|d| params.appearance_compat as f64 * (-(d as f64) / two_sa).exp())
            .collect();
        let smooth_xy = (0..=max_d2p)
            .map(|d| params.smooth_compat as f64 * (-(d as f64) / two_ss).exp())
            .collect();
        let rgb = (0..=3 * 255 * 255)
            .map(|d| (-(d as f64) / two_sc).exp())
            .collect();
        Luts {
            app_xy,
            smooth_xy,
            rgb,
        }
    }
}

#[inline]
fn color_d2(a: &[i32; 3], b: &[i32; 3]) -> usize {
    let dr = a[0] - b[0];
    let dg = a[1] - b[1];
    let db = a[2] - b[2];
    (dr * dr + dg * dg + db * db) as usize
}

#[inline]
fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let s = ea + eb;
    [ea / s, eb / s]
}

/// One simultaneous update over all pixels, exact O(N^2) messages.
fn exact_epoch(
    h: usize,
    w: usize,
    q: &[[f64; 2]],
    unary: &Unary,
    colors: &[[i32; 3]],
    luts: &Luts,
) -> Vec<[f64; 2]> {
    let n = h * w;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (yi, xi) = (i / w, i % w);
            let ci = &colors[i];
            let mut msg = [0.0f64; 2];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let (yj, xj) = (j / w, j % w);
                let dy = yi as isize - yj as isize;
                let dx = xi as isize - xj as isize;
                let d2p = (dy * dy + dx * dx) as usize;
                let weight =
                    luts.app_xy[d2p] * luts.rgb[color_d2(ci, &colors[j])] + luts.smooth_xy[d2p];
                msg[0] += weight * q[j][0];
                msg[1] += weight * q[j][1];
            }
            // Potts compatibility: each label is penalized by the mass the
            // kernels assign to the other label.
            softmax2(
                -unary.neg_log[i][0] - msg[1],
                -unary.neg_log[i][1] - msg[0],
            )
        })
        .collect()
}

/// Strided sampling grid along one axis: offsets `k * stride` for
/// `k in -steps..=steps`, anchored at the center pixel so the self term is
/// always on the grid (and excluded).
#[derive(Clone, Copy)]
struct Axis {
    steps: isize,
    stride: isize,
}

impl Axis {
    /// Range of k keeping `p + k * stride` inside `[0, hi]`.
    #[inline]
    fn clipped_range(&self, p: isize, hi: isize) -> (isize, isize) {
        let k_lo = (-p + self.stride - 1).div_euclid(self.stride).max(-self.steps);
        let k_hi = (hi - p).div_euclid(self.stride).min(self.steps);
        (k_lo, k_hi)
    }
}

fn kernel_axis(sigma: f32, radius_sigmas: f32, budget: usize, h: usize, w: usize) -> (Axis, f64) {
    let radius = (sigma as f64 * radius_sigmas as f64).ceil() as isize;
    let span_y = (2 * radius + 1).min(h as isize);
    let span_x = (2 * radius + 1).min(w as isize);
    let samples = (span_y * span_x) as f64;
    let stride = (samples / budget.max(1) as f64).sqrt().ceil().max(1.0) as isize;
    let weight = (stride * stride) as f64;
    (
        Axis {
            steps: (radius / stride).max(1),
            stride,
        },
        weight,
    )
}

#[allow(clippy::too_many_arguments)]
fn windowed_epoch(
    h: usize,
    w: usize,
    q: &[[f64; 2]],
    unary: &Unary,
    colors: &[[i32; 3]],
    luts: &Luts,
    params: &CrfParams,
    radius_sigmas: f32,
    sample_budget: usize,
) -> Vec<[f64; 2]> {
    let (app_axis, app_scale) =
        kernel_axis(params.appearance_sigma_xy, radius_sigmas, sample_budget, h, w);
    let (sm_axis, sm_scale) =
        kernel_axis(params.smooth_sigma_xy, radius_sigmas, sample_budget, h, w);
    let n = h * w;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (yi, xi) = ((i / w) as isize, (i % w) as isize);
            let ci = &colors[i];
            let mut msg = [0.0f64; 2];

            // Appearance kernel window.
            let (ky_lo, ky_hi) = app_axis.clipped_range(yi, h as isize - 1);
            let (kx_lo, kx_hi) = app_axis.clipped_range(xi, w as isize - 1);
            let mut acc = [0.0f64; 2];
            for ky in ky_lo..=ky_hi {
                let dy = ky * app_axis.stride;
                let row = ((yi + dy) as usize) * w;
                for kx in kx_lo..=kx_hi {
                    let dx = kx * app_axis.stride;
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let j = row + (xi + dx) as usize;
                    let d2p = (dy * dy + dx * dx) as usize;
                    let weight = luts.app_xy[d2p] * luts.rgb[color_d2(ci, &colors[j])];
                    acc[0] += weight * q[j][0];
                    acc[1] += weight * q[j][1];
                }
            }
            msg[0] += acc[0] * app_scale;
            msg[1] += acc[1] * app_scale;

            // Smoothness kernel window.
            let (ky_lo, ky_hi) = sm_axis.clipped_range(yi, h as isize - 1);
            let (kx_lo, kx_hi) = sm_axis.clipped_range(xi, w as isize - 1);
            let mut acc = [0.0f64; 2];
            for ky in ky_lo..=ky_hi {
                let dy = ky * sm_axis.stride;
                let row = ((yi + dy) as usize) * w;
                for kx in kx_lo..=kx_hi {
                    let dx = kx * sm_axis.stride;
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let j = row + (xi + dx) as usize;
                    let d2p = (dy * dy + dx * dx) as usize;
                    acc[0] += luts.smooth_xy[d2p] * q[j][0];
                    acc[1] += luts.smooth_xy[d2p] * q[j][1];
                }
            }
            msg[0] += acc[0] * sm_scale;
            msg[1] += acc[1] * sm_scale;

            softmax2(
                -unary.neg_log[i][0] - msg[1],
                -unary.neg_log[i][1] - msg[0],
            )
        })
        .collect()
}
