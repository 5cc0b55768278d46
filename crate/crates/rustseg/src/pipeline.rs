//! The end-to-end classify / localise / refine driver, its configuration,
//! and the per-stage timing harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, resize_bilinear, RgbImage};
use crate::localize::{grad_cam_pp, normalize_heatmap, upsample_bilinear, Heatmap, MapSource};
use crate::nn::train::{LabeledImage, TrainConfig};
use crate::nn::{forward, head_derivatives, ModelWeights, NetworkConfig, Prediction, ScoreKind};
use crate::refine::{
    advanced_refine, apply_threshold, crf_refine_observed, dynamic_threshold, CrfBackend,
    CrfParams, MaskU8,
};
use crate::synth::SynthDataset;

/// How the seed mask is refined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// 25-epoch dense CRF on the thresholded heatmap.
    #[default]
    PureCrf,
    /// K-means trim, erosion, then a 10-epoch CRF.
    Advanced,
}

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlatConfig", into = "FlatConfig")]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub crf: CrfParams,
    pub mode: RefineMode,
    pub gate_threshold: f32,
    pub seed: u64,
    pub double_precision_verify: bool,
    pub score: ScoreKind,
    pub cam_maps: MapSource,
    /// Write per-epoch CRF marginal snapshots into the debug directory.
    pub crf_epoch_snapshots: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            crf: CrfParams::default(),
            mode: RefineMode::default(),
            gate_threshold: 0.5,
            seed: 0,
            double_precision_verify: false,
            score: ScoreKind::default(),
            cam_maps: MapSource::default(),
            crf_epoch_snapshots: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(Error::Config("gate_threshold must lie strictly in (0, 1)".into()));
        }
        self.crf.validate()?;
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Flat key set mirroring the configuration, the on-disk JSON form. Every
/// key is optional and defaults as documented. `epochs` is the training
/// epoch count; the CRF's is `crf_epochs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FlatConfig {
    sections: usize,
    base_channels: usize,
    input_side: usize,
    learning_rate: f32,
    epochs: usize,
    batch_size: usize,
    adam_beta1: f32,
    adam_beta2: f32,
    adam_eps: f32,
    validation_fraction: f32,
    rotation_range_rad: f32,
    appearance_sigma_xy: f32,
    appearance_sigma_rgb: f32,
    appearance_compat: f32,
    smooth_sigma_xy: f32,
    smooth_compat: f32,
    crf_epochs: u32,
    unary_eps: f32,
    mode: RefineMode,
    gate_threshold: f32,
    seed: u64,
    double_precision_verify: bool,
    score: ScoreKind,
    cam_maps: MapSource,
    crf_epoch_snapshots: bool,
}

impl Default for FlatConfig {
    fn default() -> Self {
        PipelineConfig::default().into()
    }
}

impl TryFrom<FlatConfig> for PipelineConfig {
    type Error = Error;
    fn try_from(f: FlatConfig) -> Result<Self> {
        Ok(PipelineConfig {
            network: NetworkConfig::new(f.sections, f.base_channels, f.input_side)?,
            train: TrainConfig {
                learning_rate: f.learning_rate,
                epochs: f.epochs,
                batch_size: f.batch_size,
                adam_beta1: f.adam_beta1,
                adam_beta2: f.adam_beta2,
                adam_eps: f.adam_eps,
                validation_fraction: f.validation_fraction,
                rotation_range_rad: f.rotation_range_rad,
                seed: f.seed,
            },
            crf: CrfParams {
                appearance_sigma_xy: f.appearance_sigma_xy,
                appearance_sigma_rgb: f.appearance_sigma_rgb,
                appearance_compat: f.appearance_compat,
                smooth_sigma_xy: f.smooth_sigma_xy,
                smooth_compat: f.smooth_compat,
                epochs: f.crf_epochs,
                unary_eps: f.unary_eps,
            },
            mode: f.mode,
            gate_threshold: f.gate_threshold,
            seed: f.seed,
            double_precision_verify: f.double_precision_verify,
            score: f.score,
            cam_maps: f.cam_maps,
            crf_epoch_snapshots: f.crf_epoch_snapshots,
        })
    }
}

impl From<PipelineConfig> for FlatConfig {
    fn from(c: PipelineConfig) -> Self {
        FlatConfig {
            sections: c.network.sections(),
            base_channels: c.network.base_channels(),
            input_side: c.network.input_side(),
            learning_rate: c.train.learning_rate,
            epochs: c.train.epochs,
            batch_size: c.train.batch_size,
            adam_beta1: c.train.adam_beta1,
            adam_beta2: c.train.adam_beta2,
            adam_eps: c.train.adam_eps,
            validation_fraction: c.train.validation_fraction,
            rotation_range_rad: c.train.rotation_range_rad,
            appearance_sigma_xy: c.crf.appearance_sigma_xy,
            appearance_sigma_rgb: c.crf.appearance_sigma_rgb,
            appearance_compat: c.crf.appearance_compat,
            smooth_sigma_xy: c.crf.smooth_sigma_xy,
            smooth_compat: c.crf.smooth_compat,
            crf_epochs: c.crf.epochs,
            unary_eps: c.crf.unary_eps,
            mode: c.mode,
            gate_threshold: c.gate_threshold,
            seed: c.seed,
            double_precision_verify: c.double_precision_verify,
            score: c.score,
            cam_maps: c.cam_maps,
            crf_epoch_snapshots: c.crf_epoch_snapshots,
        }
    }
}

/// Wall-clock seconds per stage, following the published timing table's
/// stage split: rescale-and-filter conversions are billed to the consuming
/// refine stage, and end-to-end covers everything after image load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub classify_s: f64,
    pub localise_s: f64,
    pub refine_s: f64,
    pub end_to_end_s: f64,
}

/// Where the pipeline stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStatus {
    /// Gated out at classification; no localization attempted.
    NoCorrosion,
    /// The heatmap or the thresholded mask was empty; no refinement run.
    LocalizationFailed,
    /// Refinement (advanced trim) emptied the mask.
    RefineEmpty,
    Segmented,
}

/// Everything one image produces.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub prediction: Prediction,
    pub status: SegmentStatus,
    /// Normalized low-resolution heatmap (present past the gate).
    pub heatmap: Option<Heatmap>,
    /// Dynamic threshold applied to the upsampled map.
    pub threshold: Option<f32>,
    /// Thresholded seed mask, before refinement.
    pub seed_mask: Option<MaskU8>,
    /// Final mask (refined, or empty for `RefineEmpty`).
    pub mask: Option<MaskU8>,
    pub overlay: Option<RgbImage>,
    pub timings: StageTimings,
}

impl SegmentOutcome {
    /// Website-style confidence sentence.
    pub fn confidence_text(&self) -> String {
        if self.prediction.is_corrosion {
            format!(
                "Detected corrosion with a {:.2}% confidence.",
                self.prediction.corrosion_prob as f64 * 100.0
            )
        } else {
            format!(
                "No corrosion detected ({:.2}% confidence).",
                (1.0 - self.prediction.corrosion_prob as f64) * 100.0
            )
        }
    }
}

/// Debug-artifact options for [`segment_rgb_debug`].
#[derive(Debug, Clone)]
pub struct DebugOptions {
    /// Directory receiving one artifact per workflow box (and optional CRF
    /// epoch snapshots under `crf/`).
    pub dir: PathBuf,
    pub crf_epoch_snapshots: bool,
}

/// Run the full pipeline on an in-memory image.
pub fn segment_rgb(
    image: &RgbImage,
    model: &ModelWeights<f32>,
    cfg: &PipelineConfig,
) -> Result<SegmentOutcome> {
    segment_rgb_debug(image, model, cfg, None)
}

/// Run the pipeline on an image file.
pub fn segment_image(
    path: impl AsRef<Path>,
    model: &ModelWeights<f32>,
    cfg: &PipelineConfig,
) -> Result<SegmentOutcome> {
    let image = imageio::load_ppm(path).map_err(|e| e.in_stage("load"))?;
    segment_rgb(&image, model, cfg)
}

pub fn segment_rgb_debug(
    image: &RgbImage,
    model: &ModelWeights<f32>,
    cfg: &PipelineConfig,
    debug: Option<&DebugOptions>,
) -> Result<SegmentOutcome> {
    cfg.validate()?;
    let total = Instant::now();
    let mut timings = StageTimings::default();

    // Classify: resize, scale, forward.
    let stage = Instant::now();
    let side = cfg.network.input_side();
    let resized = resize_bilinear(image, side).map_err(|e| e.in_stage("classify"))?;
    let tensor = resized.to_unit_tensor();
    let (prediction, cache) =
        forward(&tensor, model, &cfg.network).map_err(|e| e.in_stage("classify"))?;
    timings.classify_s = stage.elapsed().as_secs_f64();

    if cfg.double_precision_verify {
        verify_double_precision(&tensor, model, cfg, &prediction).map_err(|e| e.in_stage("verify"))?;
    }

    if !(prediction.corrosion_prob > cfg.gate_threshold) {
        timings.end_to_end_s = total.elapsed().as_secs_f64();
        return Ok(SegmentOutcome {
            prediction,
            status: SegmentStatus::NoCorrosion,
            heatmap: None,
            threshold: None,
            seed_mask: None,
            mask: None,
            overlay: None,
            timings,
        });
    }

    // Localise: closed-form score derivatives and the weighted map.
    let stage = Instant::now();
    let derivs =
        head_derivatives(&cache, model, cfg.score).map_err(|e| e.in_stage("localise"))?;
    let raw_heatmap =
        grad_cam_pp(&cache, &derivs, cfg.cam_maps).map_err(|e| e.in_stage("localise"))?;
    let normalized = normalize_heatmap(&raw_heatmap);
    timings.localise_s = stage.elapsed().as_secs_f64();

    if !normalized.localized {
        timings.end_to_end_s = total.elapsed().as_secs_f64();
        return Ok(SegmentOutcome {
            prediction,
            status: SegmentStatus::LocalizationFailed,
            heatmap: Some(normalized.map),
            threshold: None,
            seed_mask: None,
            mask: None,
            overlay: None,
            timings,
        });
    }

    // Refine: upsample, dynamic threshold, then the configured mask path.
    let stage = Instant::now();
    let threshold = dynamic_threshold(&normalized.map);
    let upsampled =
        upsample_bilinear(&normalized.map, side).map_err(|e| e.in_stage("refine"))?;
    let seed_mask = apply_threshold(&upsampled, threshold);
    if seed_mask.is_empty() {
        timings.refine_s = stage.elapsed().as_secs_f64();
        timings.end_to_end_s = total.elapsed().as_secs_f64();
        return Ok(SegmentOutcome {
            prediction,
            status: SegmentStatus::LocalizationFailed,
            heatmap: Some(normalized.map),
            threshold: Some(threshold),
            seed_mask: Some(seed_mask),
            mask: None,
            overlay: None,
            timings,
        });
    }

    let snapshot_dir = debug
        .filter(|d| d.crf_epoch_snapshots)
        .map(|d| d.dir.join("crf"));
    let refined = match cfg.mode {
        RefineMode::PureCrf => {
            let backend = CrfBackend::auto(resized.height(), resized.width());
            let mut write_err = None;
            let refined = crf_refine_observed(&resized, &seed_mask, &cfg.crf, &backend, |epoch, marginals| {
                if let Some(dir) = &snapshot_dir {
                    if let Err(e) = write_marginal_snapshot(dir, epoch, side, marginals) {
                        write_err.get_or_insert(e);
                    }
                }
            })
            .map_err(|e| e.in_stage("refine"))?;
            if let Some(e) = write_err {
                return Err(e.in_stage("refine"));
            }
            refined
        }
        RefineMode::Advanced => advanced_refine(&resized, &seed_mask, &cfg.crf, cfg.seed)
            .map_err(|e| e.in_stage("refine"))?,
    };
    timings.refine_s = stage.elapsed().as_secs_f64();

    let status = if refined.is_empty() {
        SegmentStatus::RefineEmpty
    } else {
        SegmentStatus::Segmented
    };
    let overlay = imageio::overlay(&resized, &refined).map_err(|e| e.in_stage("refine"))?;
    timings.end_to_end_s = total.elapsed().as_secs_f64();

    let outcome = SegmentOutcome {
        prediction,
        status,
        heatmap: Some(normalized.map),
        threshold: Some(threshold),
        seed_mask: Some(seed_mask),
        mask: Some(refined),
        overlay: Some(overlay),
        timings,
    };
    if let Some(d) = debug {
        write_debug_artifacts(&outcome, &d.dir)?;
    }
    Ok(outcome)
}

fn write_marginal_snapshot(dir: &Path, epoch: usize, side: usize, marginals: &[f64]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let data = marginals
        .iter()
        .map(|&q| (q * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    let mask = MaskU8::from_data(side, side, data)?;
    imageio::save_pgm(dir.join(format!("epoch_{epoch:02}.pgm")), &mask)
}

/// Double-precision verification: repeat classification and the score
/// derivatives in f64 and require agreement with the f32 path.
fn verify_double_precision(
    tensor: &crate::tensor::Tensor3<f32>,
    model: &ModelWeights<f32>,
    cfg: &PipelineConfig,
    prediction: &Prediction,
) -> Result<()> {
    let image64 = tensor.cast::<f64>();
    let model64 = model.cast::<f64>();
    let (pred64, cache64) = forward(&image64, &model64, &cfg.network)?;
    if (pred64.raw_output - prediction.raw_output).abs() > 1e-3 {
        return Err(Error::Config(format!(
            "f32 output {} diverges from f64 output {}",
            prediction.raw_output, pred64.raw_output
        )));
    }
    // The derivative tensors must agree within a relative max-norm bound.
    let (_, cache32) = forward(tensor, model, &cfg.network)?;
    let d32 = head_derivatives(&cache32, model, cfg.score)?;
    let d64 = head_derivatives(&cache64, &model64, cfg.score)?;
    for (name, a, b) in [
        ("first", &d32.first, &d64.first),
        ("second", &d32.second, &d64.second),
        ("third", &d32.third, &d64.third),
    ] {
        let mut max_diff = 0.0f64;
        let mut max_val = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            max_diff = max_diff.max((*x as f64 - y).abs());
            max_val = max_val.max(y.abs());
        }
        if max_diff > 1e-3 * max_val.max(1e-6) {
            return Err(Error::Config(format!(
                "{name}-order derivatives diverge between precisions: {max_diff}"
            )));
        }
    }
    Ok(())
}

/// Write one artifact per workflow box that ran: the prediction, the
/// normalized heatmap, the thresholded seed mask and the refined mask.
pub fn write_debug_artifacts(outcome: &SegmentOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let pred = serde_json::to_string_pretty(&outcome.prediction)?;
    std::fs::write(dir.join("01_classify.json"), pred)?;
    if let Some(h) = &outcome.heatmap {
        imageio::save_pgm(dir.join("02_heatmap.pgm"), &apply_threshold(h, 0.0))?;
    }
    if let Some(m) = &outcome.seed_mask {
        imageio::save_pgm(dir.join("03_filtered.pgm"), m)?;
    }
    if let Some(m) = &outcome.mask {
        imageio::save_pgm(dir.join("04_refined.pgm"), m)?;
    }
    Ok(())
}

/// Intersection-over-union of two masks' supports. Two empty masks count as
/// a perfect match.
pub fn mask_iou(a: &MaskU8, b: &MaskU8) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0, y > 0);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Convert a synthetic dataset into trainer inputs at the network
/// resolution. Ground-truth masks are deliberately left behind.
pub fn to_labeled(dataset: &SynthDataset, input_side: usize) -> Result<Vec<LabeledImage>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let resized = resize_bilinear(&s.image, input_side)?;
            Ok(LabeledImage {
                image: resized.to_unit_tensor(),
                label: s.label,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Timing harness

/// One stage row of the timing report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub stage: String,
    pub seconds_per_image: f64,
}

/// Per-stage wall-clock averages in the published table's four-row shape.
/// Absolute values are hardware-dependent and never asserted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub runs: usize,
    pub images_used: usize,
    pub images_excluded: usize,
    pub threads: usize,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28} {:>12}\n", "Task", "Time (s)"));
        for row in &self.rows {
            out.push_str(&format!("{:<28} {:>12.4}\n", row.stage, row.seconds_per_image));
        }
        out.push_str(&format!(
            "Averaged over {} run(s) of {} image(s), {} thread(s).\n",
            self.runs, self.images_used, self.threads
        ));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// Time the pipeline stages. Every image must pass the corrosion gate;
/// gated-out images are excluded with a warning. Stage averages are per
/// image, over `runs` repetitions.
pub fn bench(
    images: &[RgbImage],
    model: &ModelWeights<f32>,
    cfg: &PipelineConfig,
    runs: usize,
) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    let mut warnings = Vec::new();
    let mut usable = Vec::new();
    for (i, image) in images.iter().enumerate() {
        let outcome = segment_rgb(image, model, cfg)?;
        if outcome.status == SegmentStatus::NoCorrosion {
            warnings.push(format!(
                "image {i} gated out (corrosion probability {:.4}); excluded",
                outcome.prediction.corrosion_prob
            ));
        } else {
            usable.push(image);
        }
    }
    if usable.is_empty() {
        return Err(Error::Config(
            "no image in the bench set passes the corrosion gate".into(),
        ));
    }

    let mut sums = StageTimings::default();
    for _ in 0..runs {
        for image in &usable {
            let outcome = segment_rgb(image, model, cfg)?;
            sums.classify_s += outcome.timings.classify_s;
            sums.localise_s += outcome.timings.localise_s;
            sums.refine_s += outcome.timings.refine_s;
            sums.end_to_end_s += outcome.timings.end_to_end_s;
        }
    }
    let denom = (runs * usable.len()) as f64;
    let rows = vec![
        BenchRow {
            stage: "Classify".to_string(),
            seconds_per_image: sums.classify_s / denom,
        },
        BenchRow {
            stage: "Localise (Grad-CAM++)".to_string(),
            seconds_per_image: sums.localise_s / denom,
        },
        BenchRow {
            stage: format!("Refine (CRF: {} Epochs)", cfg.crf.epochs),
            seconds_per_image: sums.refine_s / denom,
        },
        BenchRow {
            stage: "End-to-End".to_string(),
            seconds_per_image: sums.end_to_end_s / denom,
        },
    ];
    Ok(BenchReport {
        rows,
        runs,
        images_used: usable.len(),
        images_excluded: images.len() - usable.len(),
        threads: rayon::current_num_threads(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_round_trips_and_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.network.input_side(), 572);
        assert_eq!(cfg.crf.epochs, 25);
        assert_eq!(cfg.train.epochs, 35);

        let json = serde_json::to_string(&cfg).unwrap();
        let back = PipelineConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn flat_config_accepts_partial_keys() {
        let cfg = PipelineConfig::from_json(
            r#"{"sections": 3, "base_channels": 8, "input_side": 44,
                "mode": "advanced", "crf_epochs": 5, "seed": 9}"#,
        )
        .unwrap();
        assert_eq!(cfg.network.final_side(), 4);
        assert_eq!(cfg.mode, RefineMode::Advanced);
        assert_eq!(cfg.crf.epochs, 5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn invalid_network_in_config_is_rejected() {
        assert!(PipelineConfig::from_json(r#"{"input_side": 573}"#).is_err());
    }

    #[test]
    fn iou_counts_supports() {
        let a = MaskU8::from_data(1, 4, vec![255, 10, 0, 0]).unwrap();
        let b = MaskU8::from_data(1, 4, vec![1, 0, 5, 0]).unwrap();
        assert!((mask_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let empty = MaskU8::zeros(1, 4);
        assert_eq!(mask_iou(&empty, &empty), 1.0);
        assert_eq!(mask_iou(&a, &empty), 0.0);
    }
}
