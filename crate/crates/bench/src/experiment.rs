//! End-to-end pipeline: pools, splits, subsampled training sets, trained
//! detectors and repeated evaluation, with every result cell persisted under
//! the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gapbench::annotations::{load_dataset, Dataset, LoadOptions};
use gapbench::episodes::{EpisodeConfig, EpisodeSampler, EpisodeStream};
use gapbench::matcheval::{evaluate_run, Detection, EvalConfig};
use gapbench::protocol::{
    apply_split, make_splits, subsample_training_set, CategorySplit, SplitManifest, SplitPhase,
    SubsampleSpec,
};
use gapbench::seed;
use gapbench::siamdet::{train_detector, write_loss_csv, DetectorModel, FeatureMap, TrainConfig};
use gapbench::synthworld::generate_dataset;
use log::info;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{ConditionConfig, DatasetSource, ExperimentConfig, VariantConfig};
use crate::error::{BenchError, Coordinates};
use crate::report::{self, Provenance, ReportBundle};

/// Training and evaluation pools of an experiment.
#[derive(Debug, Clone)]
pub struct Pools {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn load_pools(cfg: &ExperimentConfig) -> Result<Pools, BenchError> {
    let at = Coordinates::default();
    match &cfg.dataset {
        DatasetSource::Preset {
            n_train_images,
            n_eval_images,
            ..
        }
        | DatasetSource::Synthetic {
            n_train_images,
            n_eval_images,
            ..
        } => {
            let scene = cfg.scene().expect("synthetic source");
            let all = generate_dataset(&scene, n_train_images + n_eval_images)
                .map_err(BenchError::stage("synth", at))?;
            let cut = *n_train_images as u64;
            let mut train = all.clone();
            train.retain_images(|im| im.id.0 <= cut);
            let mut eval = all;
            eval.retain_images(|im| im.id.0 > cut);
            Ok(Pools { train, eval })
        }
        DatasetSource::Files {
            train_annotations,
            eval_annotations,
            image_root,
        } => {
            let load = |p: &PathBuf| -> Result<Dataset, BenchError> {
                let mut ds = load_dataset(p, &LoadOptions::default())
                    .map_err(BenchError::stage("load", at.clone()))?;
                ds.load_pixels(image_root)
                    .map_err(BenchError::stage("load", at.clone()))?;
                Ok(ds)
            };
            Ok(Pools {
                train: load(train_annotations)?,
                eval: load(eval_annotations)?,
            })
        }
    }
}

/// Which references a model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReferenceTraining {
    Examples,
    Empty,
}

impl ReferenceTraining {
    fn of(variant: &VariantConfig) -> Self {
        if variant.train_empty_refs {
            ReferenceTraining::Empty
        } else {
            ReferenceTraining::Examples
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            ReferenceTraining::Examples => "model",
            ReferenceTraining::Empty => "model_empty_refs",
        }
    }
}

/// Derived seeds of every stochastic stage. Conditions share them so that
/// they differ only in their training sets.
pub mod seeds {
    use super::*;

    pub fn subsample(base: u64, split: usize) -> u64 {
        seed::derive(base, &[seed::tag("subsample"), split as u64])
    }

    pub fn episodes(base: u64, split: usize, kind: ReferenceTraining) -> u64 {
        seed::derive(base, &[seed::tag("episodes"), split as u64, kind as u64])
    }

    pub fn train(base: u64, split: usize, kind: ReferenceTraining) -> u64 {
        seed::derive(base, &[seed::tag("train"), split as u64, kind as u64])
    }

    pub fn queries(base: u64, split: usize, repetition: usize) -> u64 {
        seed::derive(
            base,
            &[seed::tag("queries"), split as u64, repetition as u64],
        )
    }
}

/// Directory layout of an experiment.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn cell_dir(&self, condition: &str, split: usize) -> PathBuf {
        self.root
            .join("cells")
            .join(condition)
            .join(format!("split{split}"))
    }

    pub fn manifest(&self, condition: &str, split: usize) -> PathBuf {
        self.cell_dir(condition, split).join("manifest.json")
    }

    pub fn model(&self, condition: &str, split: usize, kind: ReferenceTraining) -> PathBuf {
        self.cell_dir(condition, split)
            .join(format!("{}.bin", kind.file_stem()))
    }

    pub fn result(
        &self,
        condition: &str,
        split: usize,
        variant: &str,
        repetition: usize,
    ) -> PathBuf {
        self.cell_dir(condition, split)
            .join(variant)
            .join(format!("rep{repetition}.json"))
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }

    pub fn provenance(&self) -> PathBuf {
        self.root.join("provenance.json")
    }

    pub fn gap_report(&self) -> PathBuf {
        self.root.join("gap_report.json")
    }

    pub fn curves(&self) -> PathBuf {
        self.root.join("curves.csv")
    }
}

/// Writes through a temporary sibling so an interrupted run never leaves a
/// truncated cell behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(BenchError::io(dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(BenchError::io(tmp.display()))?;
    std::fs::rename(&tmp, path).map_err(BenchError::io(path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| BenchError::io(path.display())(e.into()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, BenchError> {
    let bytes = std::fs::read(path).map_err(BenchError::io(path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| BenchError::io(path.display())(e.into()))
}

/// Training categories kept for a condition, and the split used to group
/// evaluation categories: train means "used in training".
fn eval_split(split: &CategorySplit, manifest: &SplitManifest) -> CategorySplit {
    CategorySplit {
        split_index: split.split_index,
        train_category_ids: manifest.train_category_ids.clone(),
        heldout_category_ids: split.heldout_category_ids.clone(),
    }
}

/// The evaluation pool reduced to the categories of `split`.
pub fn restrict_to(ds: &Dataset, split: &CategorySplit) -> Dataset {
    let universe = split.universe();
    let mut out = ds.clone();
    out.annotations
        .retain(|a| universe.contains(&a.category_id));
    out.categories.retain(|c| universe.contains(&c.id));
    out.drop_unannotated_images();
    out
}

/// Runs every query of `queries` through `model`, reusing one feature map
/// per image.
pub fn detect_queries(
    model: &DetectorModel,
    ds: &Dataset,
    features: &BTreeMap<gapbench::ImageId, FeatureMap>,
    queries: &[gapbench::episodes::EvalQuery],
) -> gapbench::Result<Vec<Detection>> {
    let mut out = Vec::new();
    for q in queries {
        let image = ds
            .image(q.image_id)
            .ok_or(gapbench::Error::UnknownImage(q.image_id))?;
        let fm = match features.get(&q.image_id) {
            Some(fm) => fm,
            None => return Err(gapbench::Error::UnknownImage(q.image_id)),
        };
        for b in model.detect_features(fm, (image.width, image.height), &q.references)? {
            out.push(Detection {
                image_id: q.image_id,
                category_id: q.category_id,
                bbox: b.bbox,
                score: b.score,
            });
        }
    }
    Ok(out)
}

pub fn extract_all(
    model: &DetectorModel,
    ds: &Dataset,
) -> gapbench::Result<BTreeMap<gapbench::ImageId, FeatureMap>> {
    ds.images
        .iter()
        .map(|im| {
            let pixels = im
                .pixels
                .as_ref()
                .ok_or(gapbench::Error::MissingPixels(im.id))?;
            Ok((im.id, model.extract_features(pixels)?))
        })
        .collect()
}

/// One (condition, split, reference training) unit of work: a training set,
/// a model and all evaluation cells that use it.
#[derive(Debug, Clone)]
struct Job<'a> {
    condition: &'a ConditionConfig,
    split: &'a CategorySplit,
    kind: ReferenceTraining,
    variants: Vec<&'a VariantConfig>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    pools: &'a Pools,
    layout: Layout,
}

impl Runner<'_> {
    fn manifest(&self, job: &Job) -> Result<(SplitManifest, Dataset), BenchError> {
        let at = Coordinates {
            condition: Some(job.condition.name.clone()),
            split: Some(job.split.split_index),
            ..Default::default()
        };
        let phase = apply_split(&self.pools.train, job.split, SplitPhase::Train)
            .map_err(BenchError::stage("split", at.clone()))?;
        let spec = SubsampleSpec {
            mode: job.condition.mode,
            fraction: job.condition.fraction,
            seed: seeds::subsample(self.cfg.seed, job.split.split_index),
            per_category_quota: job.condition.per_category_quota,
        };
        let sub = subsample_training_set(&phase.dataset, &job.split.train_category_ids, &spec)
            .map_err(BenchError::stage("subsample", at))?;
        let manifest = SplitManifest::from_subsample(job.split, &spec, &sub);
        Ok((manifest, sub.dataset))
    }

    fn model(&self, job: &Job, train_set: &Dataset) -> Result<DetectorModel, BenchError> {
        let name = &job.condition.name;
        let s = job.split.split_index;
        let at = Coordinates {
            condition: Some(name.clone()),
            split: Some(s),
            ..Default::default()
        };
        let path = self.layout.model(name, s, job.kind);
        if path.exists() {
            return DetectorModel::load(&path).map_err(BenchError::stage("load-model", at));
        }
        let episode_cfg = EpisodeConfig {
            reference_size: self.cfg.detector.reference_size,
            context_margin: 0.0,
        };
        let mut stream = EpisodeStream::new(
            train_set,
            episode_cfg,
            seeds::episodes(self.cfg.seed, s, job.kind),
        )
        .map_err(BenchError::stage("train", at.clone()))?;
        let train_cfg = TrainConfig {
            seed: seeds::train(self.cfg.seed, s, job.kind),
            empty_references: job.kind == ReferenceTraining::Empty,
            ..self.cfg.train.clone()
        };
        info!("training {name} split {s} ({:?})", job.kind);
        let outcome = train_detector(train_set, &mut stream, &self.cfg.detector, &train_cfg)
            .map_err(BenchError::stage("train", at.clone()))?;
        let loss_path = path.with_extension("loss.csv");
        write_loss_csv(&loss_path, &outcome.loss_trace)
            .map_err(BenchError::stage("train", at.clone()))?;
        let bytes = outcome
            .model
            .to_bytes()
            .map_err(BenchError::stage("train", at))?;
        write_atomic(&path, &bytes)?;
        Ok(outcome.model)
    }

    fn run_job(&self, job: &Job) -> Result<(), BenchError> {
        let name = &job.condition.name;
        let s = job.split.split_index;
        let reps = self.cfg.eval.n_repetitions;
        let missing = |v: &VariantConfig| {
            (0..reps).any(|r| !self.layout.result(name, s, &v.name, r).exists())
        };
        if !job.variants.iter().any(|v| missing(v)) {
            return Ok(());
        }

        let (manifest, train_set) = self.manifest(job)?;
        let manifest_path = self.layout.manifest(name, s);
        if !manifest_path.exists() {
            write_json(&manifest_path, &manifest)?;
        }
        let model = self.model(job, &train_set)?;

        let split = eval_split(job.split, &manifest);
        let eval_ds = restrict_to(&self.pools.eval, &split);
        let at = |variant: Option<&str>, repetition: Option<usize>| Coordinates {
            condition: Some(name.clone()),
            split: Some(s),
            variant: variant.map(str::to_string),
            repetition,
        };
        let features =
            extract_all(&model, &eval_ds).map_err(BenchError::stage("eval", at(None, None)))?;
        let sampler = EpisodeSampler::new(
            &eval_ds,
            EpisodeConfig {
                reference_size: self.cfg.detector.reference_size,
                context_margin: 0.0,
            },
        );
        for v in &job.variants {
            let eval_cfg = EvalConfig {
                k_shots: v.k_shots,
                ..self.cfg.eval
            };
            for r in 0..reps {
                let path = self.layout.result(name, s, &v.name, r);
                if path.exists() {
                    continue;
                }
                let coords = at(Some(&v.name), Some(r));
                let queries = sampler
                    .build_eval_queries(
                        &split,
                        v.k_shots,
                        v.empty_refs,
                        seeds::queries(self.cfg.seed, s, r),
                    )
                    .map_err(BenchError::stage("queries", coords.clone()))?;
                let detections = detect_queries(&model, &eval_ds, &features, &queries)
                    .map_err(BenchError::stage("detect", coords.clone()))?;
                let result = evaluate_run(&detections, &queries, &eval_ds, &split, &eval_cfg)
                    .map_err(BenchError::stage("eval", coords))?;
                write_json(&path, &result)?;
            }
        }
        Ok(())
    }
}

fn jobs<'a>(cfg: &'a ExperimentConfig, splits: &'a [CategorySplit]) -> Vec<Job<'a>> {
    let mut out = Vec::new();
    for condition in &cfg.conditions {
        for split in splits {
            let mut by_kind: BTreeMap<ReferenceTraining, Vec<&VariantConfig>> = BTreeMap::new();
            for v in cfg
                .variants
                .iter()
                .filter(|v| v.applies_to(&condition.name))
            {
                by_kind.entry(ReferenceTraining::of(v)).or_default().push(v);
            }
            for (kind, variants) in by_kind {
                out.push(Job {
                    condition,
                    split,
                    kind,
                    variants,
                });
            }
        }
    }
    out
}

/// The splits an experiment runs, in configured order.
pub fn selected_splits(
    cfg: &ExperimentConfig,
    pools: &Pools,
) -> Result<Vec<CategorySplit>, BenchError> {
    let all = make_splits(&pools.train.categories, &cfg.split.spec)
        .map_err(BenchError::stage("split", Coordinates::default()))?;
    Ok(cfg
        .split
        .selected()
        .into_iter()
        .map(|i| all[i].clone())
        .collect())
}

/// Claims `root` for `cfg`: a fresh directory gets the resolved config and
/// provenance; an existing one must hold the same experiment.
pub fn prepare_output(cfg: &ExperimentConfig, root: &Path) -> Result<Provenance, BenchError> {
    let layout = Layout::new(root);
    let provenance = Provenance::of(cfg)?;
    if layout.provenance().exists() {
        let existing: Provenance = read_json(&layout.provenance())?;
        if existing.config_sha256 != provenance.config_sha256 {
            return Err(BenchError::Config(format!(
                "{} holds results of a different configuration",
                root.display()
            )));
        }
        return Ok(existing);
    }
    write_atomic(
        &layout.config_snapshot(),
        report::canonical_config(cfg)?.as_bytes(),
    )?;
    write_json(&layout.provenance(), &provenance)?;
    Ok(provenance)
}

/// Runs the whole experiment under `root` and writes the reports. Completed
/// cells found on disk are reused.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<ReportBundle, BenchError> {
    cfg.validate()?;
    let provenance = prepare_output(cfg, root)?;
    let pools = load_pools(cfg)?;
    let splits = selected_splits(cfg, &pools)?;
    let runner = Runner {
        cfg,
        pools: &pools,
        layout: Layout::new(root),
    };
    let work = jobs(cfg, &splits);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| BenchError::Config(format!("worker pool: {e}")))?;
    pool.install(|| work.par_iter().try_for_each(|job| runner.run_job(job)))?;
    let bundle = report::aggregate(cfg, root, provenance)?;
    report::write_bundle(&bundle, root)?;
    Ok(bundle)
}
