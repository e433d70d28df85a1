//! Aggregation of stored result cells into gap reports and curve data.

use std::path::Path;

use gapbench::matcheval::{gap_report, EvalResult, GapReport};
use gapbench::protocol::{SplitManifest, SubsampleMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{BenchError, Coordinates};
use crate::experiment::{read_json, seeds, write_atomic, write_json, Layout};

/// The config as hashed and snapshotted: fields that cannot change results
/// (output location, worker count) are normalized away.
pub fn canonical_config(cfg: &ExperimentConfig) -> Result<String, BenchError> {
    ExperimentConfig {
        out_dir: None,
        workers: 1,
        ..cfg.clone()
    }
    .to_toml()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub splits: Vec<usize>,
    /// Subsample seed per selected split.
    pub subsample_seeds: Vec<u64>,
    /// Query seeds, `[split][repetition]`.
    pub query_seeds: Vec<Vec<u64>>,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub gapbench: String,
    pub config_schema: u32,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Result<Self, BenchError> {
        let canonical = canonical_config(cfg)?;
        let splits = cfg.split.selected();
        Ok(Self {
            config_sha256: hex::encode(Sha256::digest(canonical.as_bytes())),
            seed: cfg.seed,
            subsample_seeds: splits
                .iter()
                .map(|&s| seeds::subsample(cfg.seed, s))
                .collect(),
            query_seeds: splits
                .iter()
                .map(|&s| {
                    (0..cfg.eval.n_repetitions)
                        .map(|r| seeds::queries(cfg.seed, s, r))
                        .collect()
                })
                .collect(),
            splits,
            versions: Versions {
                gapbench: env!("CARGO_PKG_VERSION").into(),
                config_schema: crate::config::SCHEMA_VERSION,
            },
        })
    }
}

/// Stored cell behind a report value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    pub split: usize,
    pub repetition: usize,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub variant: String,
    pub mode: SubsampleMode,
    pub fraction: f64,
    /// Training categories, averaged over splits.
    pub n_categories: f64,
    /// Training instances, averaged over splits.
    pub n_instances: f64,
    pub report: GapReport,
    pub cells: Vec<CellRef>,
}

/// One row of `curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub condition: String,
    pub variant: String,
    pub mode: SubsampleMode,
    pub fraction: f64,
    pub n_categories: f64,
    pub n_instances: f64,
    pub group: String,
    pub ap50: f64,
    pub ci95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config_sha256: String,
    pub conditions: Vec<ConditionReport>,
    #[serde(skip)]
    pub curves: Vec<CurveRow>,
    #[serde(skip)]
    pub provenance: Option<Provenance>,
}

impl ReportBundle {
    pub fn find(&self, condition: &str, variant: &str) -> Option<&ConditionReport> {
        self.conditions
            .iter()
            .find(|c| c.condition == condition && c.variant == variant)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Rebuilds the report of `cfg` from the cells under `root`.
pub fn aggregate(
    cfg: &ExperimentConfig,
    root: &Path,
    provenance: Provenance,
) -> Result<ReportBundle, BenchError> {
    let layout = Layout::new(root);
    let splits = cfg.split.selected();
    let mut conditions = Vec::new();
    let mut curves = Vec::new();
    for c in &cfg.conditions {
        let manifests: Vec<SplitManifest> = splits
            .iter()
            .map(|&s| read_json(&layout.manifest(&c.name, s)))
            .collect::<Result<_, _>>()?;
        let n_categories = mean(manifests.iter().map(|m| m.train_category_ids.len() as f64));
        let n_instances = mean(
            manifests
                .iter()
                .map(|m| m.instance_budget.unwrap_or(0) as f64),
        );
        for v in cfg.variants.iter().filter(|v| v.applies_to(&c.name)) {
            let mut results: Vec<Vec<EvalResult>> = Vec::new();
            let mut cells = Vec::new();
            for &s in &splits {
                let mut reps = Vec::new();
                for r in 0..cfg.eval.n_repetitions {
                    let path = layout.result(&c.name, s, &v.name, r);
                    reps.push(read_json::<EvalResult>(&path)?);
                    let rel = path.strip_prefix(root).unwrap_or(&path);
                    cells.push(CellRef {
                        split: s,
                        repetition: r,
                        path: rel.to_string_lossy().replace('\\', "/"),
                    });
                }
                results.push(reps);
            }
            let at = Coordinates {
                condition: Some(c.name.clone()),
                variant: Some(v.name.clone()),
                ..Default::default()
            };
            let report = gap_report(&results).map_err(BenchError::stage("report", at))?;
            for (group, ap50, ci95) in [
                ("train", report.train_ap, report.ci95_train),
                ("heldout", report.heldout_ap, report.ci95_heldout),
            ] {
                curves.push(CurveRow {
                    condition: c.name.clone(),
                    variant: v.name.clone(),
                    mode: c.mode,
                    fraction: c.fraction,
                    n_categories,
                    n_instances,
                    group: group.into(),
                    ap50,
                    ci95,
                });
            }
            conditions.push(ConditionReport {
                condition: c.name.clone(),
                variant: v.name.clone(),
                mode: c.mode,
                fraction: c.fraction,
                n_categories,
                n_instances,
                report,
                cells,
            });
        }
    }
    Ok(ReportBundle {
        config_sha256: provenance.config_sha256.clone(),
        conditions,
        curves,
        provenance: Some(provenance),
    })
}

pub fn curves_csv(rows: &[CurveRow]) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| BenchError::io("curves.csv")(std::io::Error::other(e)))?;
    }
    w.into_inner()
        .map_err(|e| BenchError::io("curves.csv")(std::io::Error::other(e.to_string())))
}

pub fn write_bundle(bundle: &ReportBundle, root: &Path) -> Result<(), BenchError> {
    let layout = Layout::new(root);
    write_json(&layout.gap_report(), bundle)?;
    write_atomic(&layout.curves(), &curves_csv(&bundle.curves)?)
}

/// Re-aggregates an existing output directory from its config snapshot.
pub fn report_from_dir(root: &Path) -> Result<ReportBundle, BenchError> {
    let layout = Layout::new(root);
    let cfg = ExperimentConfig::load(&layout.config_snapshot())?;
    let provenance: Provenance = read_json(&layout.provenance())?;
    let bundle = aggregate(&cfg, root, provenance)?;
    write_bundle(&bundle, root)?;
    Ok(bundle)
}
