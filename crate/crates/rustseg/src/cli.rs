//! Command-line surface: train, segment, classify, eval, bench, synth.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imageio::{load_ppm, resize_bilinear, save_pgm, save_ppm, RgbImage};
use crate::metrics::metrics_report;
use crate::model_io::{load_model, save_model};
use crate::nn::init::init_he_uniform;
use crate::nn::train::{train, Label, LabeledImage};
use crate::nn::{forward, ModelWeights, NetworkConfig, Prediction};
use crate::pipeline::{
    bench, segment_rgb_debug, DebugOptions, PipelineConfig, RefineMode, SegmentStatus,
    StageTimings,
};
use crate::synth::{synth_dataset, SynthSpec};

#[derive(Parser)]
#[command(
    name = "rustseg",
    version,
    about = "Weakly-supervised corrosion segmentation: classify, localise, refine"
)]
struct Cli {
    /// Worker threads for directory processing and CRF inner loops.
    /// Results per image are identical at any thread count.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier on labeled directories or synthetic data.
    Train(TrainArgs),
    /// Segment one image or every image in a directory.
    Segment(SegmentArgs),
    /// Classification only: corrosion probability per image.
    Classify(ClassifyArgs),
    /// Evaluate the classifier on a labeled directory.
    Eval(EvalArgs),
    /// Per-stage timing table.
    Bench(BenchArgs),
    /// Emit a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with corrosion/ and not_corrosion/ subdirectories of PPMs.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    data: Option<PathBuf>,
    /// Train on a synthetic dataset described by this JSON spec instead.
    #[arg(long)]
    synth: Option<PathBuf>,
    /// Pipeline configuration (flat JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for init, splits, shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for model.rseg and history.json.
    #[arg(long, default_value = "train_out")]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    /// Image file or directory of PPM images.
    input: PathBuf,
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Refinement path.
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (masks/, overlays/, results.json).
    #[arg(long, default_value = "segment_out")]
    out: PathBuf,
    /// Dump one artifact per workflow stage under <out>/debug/<image>/.
    #[arg(long)]
    debug_artifacts: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the records to this JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory with corrosion/ and not_corrosion/ subdirectories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Decision threshold on the corrosion probability.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Image file or directory; every image must pass the corrosion gate.
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repetitions to average over.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Directory for timings.json (printed to stdout regardless).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (corrosion/, not_corrosion/, truth/).
    #[arg(long)]
    out: PathBuf,
    /// Generator spec (JSON); defaults apply otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pure,
    Advanced,
}

impl From<ModeArg> for RefineMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pure => RefineMode::PureCrf,
            ModeArg::Advanced => RefineMode::Advanced,
        }
    }
}

/// Parse and run. Returns the process exit status: 0 on success, clap's
/// code for usage errors, 1 for stage failures.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Sorted .ppm files: the path itself, or every PPM inside a directory.
fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "no .ppm images found in {}",
                input.display()
            )));
        }
        Ok(files)
    } else if input.exists() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::Config(format!("{} does not exist", input.display())))
    }
}

/// Load a labeled directory tree: corrosion/ and not_corrosion/ PPMs.
fn load_labeled_dir(root: &Path, input_side: usize) -> Result<Vec<LabeledImage>> {
    let mut samples = Vec::new();
    for (sub, label) in [
        ("corrosion", Label::Corrosion),
        ("not_corrosion", Label::NotCorrosion),
    ] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "expected subdirectory {} under {}",
                sub,
                root.display()
            )));
        }
        for path in list_images(&dir)? {
            let image = load_ppm(&path).map_err(|e| e.in_stage("load"))?;
            let resized = resize_bilinear(&image, input_side)?;
            samples.push(LabeledImage {
                image: resized.to_unit_tensor(),
                label,
            });
        }
    }
    Ok(samples)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let dataset = if let Some(spec_path) = &args.synth {
        let spec: SynthSpec = serde_json::from_str(&fs::read_to_string(spec_path)?)?;
        let ds = synth_dataset(&spec)?;
        crate::pipeline::to_labeled(&ds, cfg.network.input_side())?
    } else {
        let data = args.data.as_ref().expect("clap enforces --data or --synth");
        load_labeled_dir(data, cfg.network.input_side())?
    };
    println!("training on {} samples", dataset.len());
    let init = init_he_uniform(&cfg.network, cfg.seed);
    let (model, history) = train(&dataset, init, &cfg.network, &cfg.train)?;

    fs::create_dir_all(&args.out)?;
    let model_path = args.out.join("model.rseg");
    save_model(&model_path, &model, &cfg.network)?;
    fs::write(
        args.out.join("history.json"),
        serde_json::to_string_pretty(&history)?,
    )?;
    match history.final_val_accuracy() {
        Some(acc) => println!(
            "wrote {} (final validation accuracy {:.2}%)",
            model_path.display(),
            acc * 100.0
        ),
        None => println!("wrote {}", model_path.display()),
    }
    Ok(())
}

/// One line of results.json.
#[derive(Debug, Serialize)]
struct SegmentRecord {
    image: String,
    status: SegmentStatus,
    raw_output: f32,
    corrosion_prob: f32,
    is_corrosion: bool,
    confidence_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    overlay: Option<String>,
    timings: StageTimings,
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode.into();
    }
    let (model, net) = load_model(&args.model)?;
    if net != cfg.network {
        cfg.network = net;
    }
    let images = list_images(&args.input)?;
    fs::create_dir_all(args.out.join("masks"))?;
    fs::create_dir_all(args.out.join("overlays"))?;

    let records: Result<Vec<SegmentRecord>> = images
        .par_iter()
        .map(|path| {
            let image = load_ppm(path).map_err(|e| e.in_stage("load"))?;
            let stem = stem_of(path);
            let debug = args.debug_artifacts.then(|| DebugOptions {
                dir: args.out.join("debug").join(&stem),
                crf_epoch_snapshots: cfg.crf_epoch_snapshots,
            });
            let outcome = segment_rgb_debug(&image, &model, &cfg, debug.as_ref())?;
            let mut record = SegmentRecord {
                image: path.display().to_string(),
                status: outcome.status,
                raw_output: outcome.prediction.raw_output,
                corrosion_prob: outcome.prediction.corrosion_prob,
                is_corrosion: outcome.prediction.is_corrosion,
                confidence_text: outcome.confidence_text(),
                threshold: outcome.threshold,
                mask: None,
                overlay: None,
                timings: outcome.timings,
            };
            if let Some(mask) = &outcome.mask {
                let rel = format!("masks/{stem}.pgm");
                save_pgm(args.out.join(&rel), mask)?;
                record.mask = Some(rel);
            }
            if let Some(overlay) = &outcome.overlay {
                let rel = format!("overlays/{stem}.ppm");
                save_ppm(args.out.join(&rel), overlay)?;
                record.overlay = Some(rel);
            }
            Ok(record)
        })
        .collect();
    let records = records?;

    let json = serde_json::to_string_pretty(&records)?;
    fs::write(args.out.join("results.json"), &json)?;
    for r in &records {
        println!("{}: {}", r.image, r.confidence_text);
    }
    println!("results written to {}", args.out.join("results.json").display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ClassifyRecord {
    image: String,
    raw_output: f32,
    corrosion_prob: f32,
    is_corrosion: bool,
    confidence_text: String,
}

fn classify_one(
    path: &Path,
    model: &ModelWeights<f32>,
    net: &NetworkConfig,
) -> Result<Prediction> {
    let image = load_ppm(path).map_err(|e| e.in_stage("load"))?;
    let resized = resize_bilinear(&image, net.input_side()).map_err(|e| e.in_stage("classify"))?;
    let (prediction, _) =
        forward(&resized.to_unit_tensor(), model, net).map_err(|e| e.in_stage("classify"))?;
    Ok(prediction)
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let cfg = load_config(&args.config, None)?;
    let (model, net) = load_model(&args.model)?;
    let _ = cfg;
    let records: Result<Vec<ClassifyRecord>> = list_images(&args.input)?
        .par_iter()
        .map(|path| {
            let p = classify_one(path, &model, &net)?;
            let text = if p.is_corrosion {
                format!(
                    "Detected corrosion with a {:.2}% confidence.",
                    p.corrosion_prob as f64 * 100.0
                )
            } else {
                format!(
                    "No corrosion detected ({:.2}% confidence).",
                    (1.0 - p.corrosion_prob as f64) * 100.0
                )
            };
            Ok(ClassifyRecord {
                image: path.display().to_string(),
                raw_output: p.raw_output,
                corrosion_prob: p.corrosion_prob,
                is_corrosion: p.is_corrosion,
                confidence_text: text,
            })
        })
        .collect();
    let records = records?;
    let json = serde_json::to_string_pretty(&records)?;
    println!("{json}");
    if let Some(out) = &args.out {
        fs::write(out, &json)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let _ = load_config(&args.config, None)?;
    let (model, net) = load_model(&args.model)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (sub, positive) in [("corrosion", true), ("not_corrosion", false)] {
        let dir = args.data.join(sub);
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "expected subdirectory {} under {}",
                sub,
                args.data.display()
            )));
        }
        for path in list_images(&dir)? {
            let p = classify_one(&path, &model, &net)?;
            scores.push(p.corrosion_prob as f64);
            labels.push(positive);
        }
    }
    let report = metrics_report(&scores, &labels, args.threshold)?;
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let cfg = load_config(&args.config, None)?;
    let mut cfg = cfg;
    let (model, net) = load_model(&args.model)?;
    cfg.network = net;
    let images: Result<Vec<RgbImage>> = list_images(&args.input)?
        .iter()
        .map(|p| load_ppm(p).map_err(|e| e.in_stage("load")))
        .collect();
    let report = bench(&images?, &model, &cfg, args.runs)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(
            out.join("timings.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => SynthSpec::default(),
    };
    if let Some(count) = args.count {
        spec.count = count;
    }
    if let Some(side) = args.side {
        spec.side = side;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dataset = synth_dataset(&spec)?;
    for sub in ["corrosion", "not_corrosion", "truth"] {
        fs::create_dir_all(args.out.join(sub))?;
    }
    let mut counts = [0usize; 2];
    for sample in &dataset.samples {
        let (sub, idx) = match sample.label {
            Label::Corrosion => ("corrosion", &mut counts[0]),
            Label::NotCorrosion => ("not_corrosion", &mut counts[1]),
        };
        let name = format!("{sub}_{idx:04}");
        *idx += 1;
        save_ppm(args.out.join(sub).join(format!("{name}.ppm")), &sample.image)?;
        save_pgm(args.out.join("truth").join(format!("{name}.pgm")), &sample.truth)?;
    }
    fs::write(
        args.out.join("spec.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;
    println!(
        "wrote {} corrosion and {} not-corrosion images to {}",
        counts[0],
        counts[1],
        args.out.display()
    );
    Ok(())
}
