//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gapbench::annotations::{load_dataset, Dataset, LoadOptions};
use gapbench::episodes::{EpisodeConfig, EpisodeSampler, EpisodeStream};
use gapbench::matcheval::{evaluate_run, write_detections_jsonl, EvalConfig};
use gapbench::protocol::{
    apply_split, make_splits, subsample_training_set, CategoryOrdering, SplitManifest, SplitPhase,
    SplitSpec, SubsampleMode, SubsampleSpec,
};
use gapbench::siamdet::{
    train_detector, write_loss_csv, DetectorConfig, DetectorModel, TrainConfig,
};
use gapbench::synthworld::{generate_with_manifest, SceneConfig};
use serde::Deserialize;

use crate::config::{ExperimentConfig, VariantConfig};
use crate::error::{BenchError, Coordinates};
use crate::experiment::{detect_queries, extract_all, read_json, run_experiment, write_json};
use crate::report::report_from_dir;

#[derive(Debug, Parser)]
#[command(
    name = "bench",
    version,
    about = "One-shot detection generalization benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with rasters.
    Synth(SynthArgs),
    /// Write the category split manifests of a dataset.
    Split(SplitArgs),
    /// Build a subsampled training set for one split.
    Subsample(SubsampleArgs),
    /// Train a detector on an annotation file.
    Train(TrainArgs),
    /// Evaluate a trained detector on one split.
    Eval(EvalArgs),
    /// Rebuild reports from the cells of an output directory.
    Report(ReportArgs),
    /// Run a full experiment from a config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "high-clutter")]
    pub preset: String,
    #[arg(long, default_value_t = 100)]
    pub n_images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderingArg {
    AscendingId,
    ListOrder,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_splits: usize,
    #[arg(long, value_enum, default_value = "ascending-id")]
    pub ordering: OrderingArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    CategoryFraction,
    InstanceMatchedSubset,
    InstanceMatchedAll,
}

#[derive(Debug, Args)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Split manifest written by `split`.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub per_category_quota: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML with optional `[train]` and `[detector]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory the annotation file names are relative to.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub empty_refs: bool,
    /// Output directory for the model and its loss trace.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Split or subsample manifest.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub k_shots: u64,
    #[arg(long)]
    pub empty_refs: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the configured variants by a single one with this many shots.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k_shots: Option<u64>,
    /// Blank the evaluation references of every variant.
    #[arg(long)]
    pub empty_refs: bool,
}

/// `[train]` and `[detector]` tables of any config file.
#[derive(Debug, Default, Deserialize)]
struct ModelConfig {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    detector: DetectorConfig,
}

fn core(stage: &'static str) -> impl FnOnce(gapbench::Error) -> BenchError {
    BenchError::stage(stage, Coordinates::default())
}

fn load_with_pixels(annotations: &Path, images: &Path) -> Result<Dataset, BenchError> {
    let mut ds = load_dataset(annotations, &LoadOptions::default()).map_err(core("load"))?;
    ds.load_pixels(images).map_err(core("load"))?;
    Ok(ds)
}

pub fn execute(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Subsample(a) => subsample(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report_from_dir(&a.out).map(|_| ()),
        Command::Run(a) => run(a),
    }
}

fn create_dir(dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir).map_err(BenchError::io(dir.display()))
}

fn synth(a: SynthArgs) -> Result<(), BenchError> {
    create_dir(&a.out)?;
    let scene = SceneConfig::preset(&a.preset, a.seed)
        .ok_or_else(|| BenchError::Config(format!("unknown preset {:?}", a.preset)))?;
    let (ds, manifest) = generate_with_manifest(&scene, a.n_images).map_err(core("synth"))?;
    ds.write_json(a.out.join("annotations.json"))
        .map_err(core("synth"))?;
    ds.write_pixels(&a.out).map_err(core("synth"))?;
    write_json(&a.out.join("scene_manifest.json"), &manifest)
}

fn split(a: SplitArgs) -> Result<(), BenchError> {
    let ds = load_dataset(&a.annotations, &LoadOptions::default()).map_err(core("load"))?;
    create_dir(&a.out)?;
    let spec = SplitSpec {
        n_splits: a.n_splits,
        ordering: match a.ordering {
            OrderingArg::AscendingId => CategoryOrdering::AscendingId,
            OrderingArg::ListOrder => CategoryOrdering::ListOrder,
        },
    };
    for s in make_splits(&ds.categories, &spec).map_err(core("split"))? {
        let path = a.out.join(format!("split{}.json", s.split_index));
        write_json(&path, &SplitManifest::from_split(&s))?;
    }
    Ok(())
}

fn subsample(a: SubsampleArgs) -> Result<(), BenchError> {
    let ds = load_dataset(&a.annotations, &LoadOptions::default()).map_err(core("load"))?;
    let split = read_json::<SplitManifest>(&a.split)?.to_split();
    let phase = apply_split(&ds, &split, SplitPhase::Train).map_err(core("split"))?;
    let spec = SubsampleSpec {
        mode: match a.mode {
            ModeArg::CategoryFraction => SubsampleMode::CategoryFraction,
            ModeArg::InstanceMatchedSubset => SubsampleMode::InstanceMatchedSubset,
            ModeArg::InstanceMatchedAll => SubsampleMode::InstanceMatchedAll,
        },
        fraction: a.fraction,
        seed: a.seed,
        per_category_quota: a.per_category_quota,
    };
    let sub = subsample_training_set(&phase.dataset, &split.train_category_ids, &spec)
        .map_err(core("subsample"))?;
    create_dir(&a.out)?;
    sub.dataset
        .write_json(a.out.join("annotations.json"))
        .map_err(core("subsample"))?;
    write_json(
        &a.out.join("manifest.json"),
        &SplitManifest::from_subsample(&split, &spec, &sub),
    )
}

fn train(a: TrainArgs) -> Result<(), BenchError> {
    let mc: ModelConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| BenchError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| BenchError::Config(e.to_string()))?
        }
        None => ModelConfig::default(),
    };
    let mut train_cfg = mc.train;
    if let Some(s) = a.seed {
        train_cfg.seed = s;
    }
    train_cfg.empty_references |= a.empty_refs;
    train_cfg.validate().map_err(core("config"))?;
    mc.detector.validate().map_err(core("config"))?;
    let ds = load_with_pixels(&a.annotations, &a.images)?;
    let episode_cfg = EpisodeConfig {
        reference_size: mc.detector.reference_size,
        context_margin: 0.0,
    };
    let mut stream = EpisodeStream::new(&ds, episode_cfg, train_cfg.seed).map_err(core("train"))?;
    let outcome =
        train_detector(&ds, &mut stream, &mc.detector, &train_cfg).map_err(core("train"))?;
    create_dir(&a.out)?;
    outcome
        .model
        .save(a.out.join("model.bin"))
        .map_err(core("train"))?;
    write_loss_csv(a.out.join("loss.csv"), &outcome.loss_trace).map_err(core("train"))
}

fn eval(a: EvalArgs) -> Result<(), BenchError> {
    let model = DetectorModel::load(&a.model).map_err(core("load-model"))?;
    let ds = load_with_pixels(&a.annotations, &a.images)?;
    let split = read_json::<SplitManifest>(&a.split)?.to_split();
    let k = a.k_shots as usize;
    let sampler = EpisodeSampler::new(
        &ds,
        EpisodeConfig {
            reference_size: model.config.reference_size,
            context_margin: 0.0,
        },
    );
    let queries = sampler
        .build_eval_queries(&split, k, a.empty_refs, a.seed)
        .map_err(core("queries"))?;
    let features = extract_all(&model, &ds).map_err(core("detect"))?;
    let detections = detect_queries(&model, &ds, &features, &queries).map_err(core("detect"))?;
    let cfg = EvalConfig {
        k_shots: k,
        ..EvalConfig::default()
    };
    let result = evaluate_run(&detections, &queries, &ds, &split, &cfg).map_err(core("eval"))?;
    create_dir(&a.out)?;
    write_detections_jsonl(a.out.join("detections.jsonl"), &detections).map_err(core("eval"))?;
    write_json(&a.out.join("result.json"), &result)
}

/// Applies command-line overrides to a loaded config.
pub fn apply_overrides(
    mut cfg: ExperimentConfig,
    a: &RunArgs,
) -> Result<ExperimentConfig, BenchError> {
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.k_shots {
        cfg.variants = vec![VariantConfig {
            name: format!("{k}_shot"),
            k_shots: k as usize,
            empty_refs: false,
            train_empty_refs: false,
            conditions: None,
        }];
    }
    if a.empty_refs {
        for v in &mut cfg.variants {
            v.empty_refs = true;
        }
    }
    if let Some(out) = &a.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(a: RunArgs) -> Result<(), BenchError> {
    let cfg = apply_overrides(ExperimentConfig::load(&a.config)?, &a)?;
    let out = cfg.out_dir.clone().ok_or_else(|| {
        BenchError::Config("no output directory: pass --out or set out_dir".into())
    })?;
    let bundle = run_experiment(&cfg, &out)?;
    for c in &bundle.conditions {
        println!(
            "{:<24} {:<16} train {:6.2}  held-out {:6.2}  delta {:6.2}",
            c.condition, c.variant, c.report.train_ap, c.report.heldout_ap, c.report.delta
        );
    }
    Ok(())
}
