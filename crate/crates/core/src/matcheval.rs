//! AP50 scoring of query detections and generalization-gap reports.
//!
//! Detections carry the category of the query that produced them. For each
//! category, AP is computed over the images where that category was queried,
//! then averaged (unweighted) over the train and held-out groups of a split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::annotations::{BoundingBox, CategoryId, Dataset, ImageId, InstanceAnnotation};
use crate::episodes::{EvalQuery, QueryGroup};
use crate::error::{Error, Result};
use crate::protocol::CategorySplit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawDetection", into = "RawDetection")]
pub struct Detection {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct RawDetection {
    image_id: ImageId,
    category_id: CategoryId,
    bbox: [f64; 4],
    score: f64,
}

impl From<RawDetection> for Detection {
    fn from(r: RawDetection) -> Self {
        Detection {
            image_id: r.image_id,
            category_id: r.category_id,
            bbox: BoundingBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]),
            score: r.score,
        }
    }
}

impl From<Detection> for RawDetection {
    fn from(d: Detection) -> Self {
        RawDetection {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
            score: d.score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Mean interpolated precision at evenly spaced recall levels.
    #[default]
    RecallPoints,
    /// Area under the monotone precision envelope at every recall change.
    AllPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub n_repetitions: usize,
    pub k_shots: usize,
    pub recall_points: usize,
    pub interpolation: Interpolation,
    /// Skip query pairs whose category is not exhaustively labeled in the image.
    pub drop_non_exhaustive: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            n_repetitions: 5,
            k_shots: 1,
            recall_points: 101,
            interpolation: Interpolation::RecallPoints,
            drop_non_exhaustive: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        if self.n_repetitions == 0 || self.k_shots == 0 || self.recall_points < 2 {
            return Err(Error::Config(
                "n_repetitions and k_shots must be >= 1, recall_points >= 2".into(),
            ));
        }
        Ok(())
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (a, b) = (a.corners(), b.corners());
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

/// Overlap used against crowd regions: intersection over the detection's area.
fn crowd_overlap(det: &BoundingBox, crowd: &BoundingBox) -> f64 {
    let (a, b) = (det.corners(), crowd.corners());
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let area = det.area();
    if area <= 0.0 {
        0.0
    } else {
        iw * ih / area
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: ImageId,
    pub bbox: BoundingBox,
    pub is_crowd: bool,
}

impl From<&InstanceAnnotation> for GroundTruth {
    fn from(a: &InstanceAnnotation) -> Self {
        GroundTruth {
            image_id: a.image_id,
            bbox: a.bbox,
            is_crowd: a.is_crowd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// AP of one category. Returns `None` when there is no non-crowd ground truth.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    cfg: &EvalConfig,
) -> Option<f64> {
    let n_pos = ground_truth.iter().filter(|g| !g.is_crowd).count();
    if n_pos == 0 {
        return None;
    }
    let mut by_image: HashMap<ImageId, Vec<usize>> = HashMap::new();
    for (i, g) in ground_truth.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));

    let mut matched = vec![false; ground_truth.len()];
    let mut outcomes = Vec::with_capacity(order.len());
    for &d in &order {
        let det = &detections[d];
        let gts = by_image
            .get(&det.image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        for &g in gts {
            let gt = &ground_truth[g];
            if gt.is_crowd || matched[g] {
                continue;
            }
            let o = iou(&det.bbox, &gt.bbox);
            if o >= cfg.iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        let outcome = if let Some((g, _)) = best {
            matched[g] = true;
            Outcome::TruePositive
        } else if gts.iter().any(|&g| {
            let gt = &ground_truth[g];
            gt.is_crowd && crowd_overlap(&det.bbox, &gt.bbox) >= cfg.iou_threshold
        }) {
            Outcome::Ignored
        } else {
            Outcome::FalsePositive
        };
        outcomes.push(outcome);
    }

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for o in outcomes {
        match o {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_pos as f64);
    }
    // Monotone envelope: precision at rank i becomes the best at rank >= i.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }

    Some(match cfg.interpolation {
        Interpolation::RecallPoints => {
            let n = cfg.recall_points;
            let total: f64 = (0..n)
                .map(|t| {
                    let level = t as f64 / (n - 1) as f64;
                    let idx = recall.partition_point(|&r| r < level);
                    precision.get(idx).copied().unwrap_or(0.0)
                })
                .sum();
            total / n as f64
        }
        Interpolation::AllPoints => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                area += (r - prev) * p;
                prev = *r;
            }
            area
        }
    })
}

/// Mean that does not depend on the order of its inputs.
pub fn order_free_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub group: QueryGroup,
    /// `None` when the category has no ground truth in its queried images.
    pub ap: Option<f64>,
    pub n_ground_truth: usize,
    pub n_detections: usize,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_category: BTreeMap<CategoryId, CategoryEval>,
    pub train_ap: Option<f64>,
    pub heldout_ap: Option<f64>,
    /// Categories excluded from the group means for lack of ground truth.
    pub n_undefined: usize,
    pub n_queries: usize,
    pub n_dropped_non_exhaustive: usize,
}

impl EvalResult {
    pub fn group_ap(&self, group: QueryGroup) -> Option<f64> {
        match group {
            QueryGroup::Train => self.train_ap,
            QueryGroup::Heldout => self.heldout_ap,
        }
    }
}

pub fn evaluate_run(
    detections: &[Detection],
    queries: &[EvalQuery],
    ds: &Dataset,
    split: &CategorySplit,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    let issued: HashSet<(ImageId, CategoryId)> = queries
        .iter()
        .map(|q| (q.image_id, q.category_id))
        .collect();
    if let Some(d) = detections
        .iter()
        .find(|d| !issued.contains(&(d.image_id, d.category_id)))
    {
        return Err(Error::Protocol(format!(
            "detection for image {} category {} without a matching query",
            d.image_id, d.category_id
        )));
    }
    let mut dropped = 0;
    let mut kept: BTreeMap<CategoryId, BTreeSet<ImageId>> = BTreeMap::new();
    for q in queries {
        if cfg.drop_non_exhaustive && q.not_exhaustive {
            dropped += 1;
            continue;
        }
        kept.entry(q.category_id).or_default().insert(q.image_id);
    }

    let mut dets_by_cat: BTreeMap<CategoryId, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        if kept
            .get(&d.category_id)
            .is_some_and(|s| s.contains(&d.image_id))
        {
            dets_by_cat.entry(d.category_id).or_default().push(*d);
        }
    }
    let mut gt_by_cat: BTreeMap<CategoryId, Vec<GroundTruth>> = BTreeMap::new();
    for a in &ds.annotations {
        if kept
            .get(&a.category_id)
            .is_some_and(|s| s.contains(&a.image_id))
        {
            gt_by_cat.entry(a.category_id).or_default().push(a.into());
        }
    }

    let mut per_category = BTreeMap::new();
    let mut n_undefined = 0;
    for c in ds.categories.iter().map(|c| c.id) {
        let dets = dets_by_cat.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        let gts = gt_by_cat.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        let ap = average_precision(dets, gts, cfg);
        if ap.is_none() {
            n_undefined += 1;
        }
        per_category.insert(
            c,
            CategoryEval {
                group: QueryGroup::of(split, c),
                ap,
                n_ground_truth: gts.iter().filter(|g| !g.is_crowd).count(),
                n_detections: dets.len(),
                n_queries: kept.get(&c).map_or(0, BTreeSet::len),
            },
        );
    }
    let group_mean = |group: QueryGroup| {
        let aps: Vec<f64> = per_category
            .values()
            .filter(|e: &&CategoryEval| e.group == group)
            .filter_map(|e| e.ap)
            .collect();
        order_free_mean(&aps)
    };
    Ok(EvalResult {
        train_ap: group_mean(QueryGroup::Train),
        heldout_ap: group_mean(QueryGroup::Heldout),
        per_category,
        n_undefined,
        n_queries: queries.len() - dropped,
        n_dropped_non_exhaustive: dropped,
    })
}

/// Split-averaged train and held-out AP50 in percent, their gap and
/// confidence intervals over evaluation repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub train_ap: f64,
    pub heldout_ap: f64,
    pub delta: f64,
    /// `heldout_ap / train_ap`; `None` (undefined) when `train_ap` is zero.
    pub relative: Option<f64>,
    /// 95% half-width; `None` with a single repetition.
    pub ci95_train: Option<f64>,
    pub ci95_heldout: Option<f64>,
    pub n_splits: usize,
    pub n_repetitions: usize,
}

impl GapReport {
    pub fn from_means(train_ap: f64, heldout_ap: f64) -> Self {
        Self {
            train_ap,
            heldout_ap,
            delta: train_ap - heldout_ap,
            relative: (train_ap != 0.0).then(|| heldout_ap / train_ap),
            ci95_train: None,
            ci95_heldout: None,
            n_splits: 1,
            n_repetitions: 1,
        }
    }
}

/// Half-width of the two-sided 95% Student-t interval of the mean.
pub fn t_interval95(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = order_free_mean(values)?;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Some(0.0);
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .ok()?
        .inverse_cdf(0.975);
    Some(t * (var / n as f64).sqrt())
}

fn group_values(results: &[Vec<EvalResult>], group: QueryGroup) -> Result<Vec<Vec<f64>>> {
    results
        .iter()
        .enumerate()
        .map(|(s, reps)| {
            reps.iter()
                .enumerate()
                .map(|(r, res)| {
                    res.group_ap(group).map(|v| 100.0 * v).ok_or_else(|| {
                        Error::Protocol(format!(
                            "split {s} repetition {r} has no {} category with ground truth",
                            group.as_str()
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

/// Aggregates `results[split][repetition]`: means over splits of repetition
/// means, with t-intervals over the split-averaged value of each repetition.
pub fn gap_report(results: &[Vec<EvalResult>]) -> Result<GapReport> {
    if results.is_empty() || results.iter().any(Vec::is_empty) {
        return Err(Error::Empty(
            "gap report needs at least one split and one repetition",
        ));
    }
    let n_reps = results[0].len();
    if results.iter().any(|r| r.len() != n_reps) {
        return Err(Error::Protocol(
            "splits have different repetition counts".into(),
        ));
    }
    let summarize = |group| -> Result<(f64, Option<f64>)> {
        let values = group_values(results, group)?;
        let split_means: Vec<f64> = values
            .iter()
            .map(|reps| order_free_mean(reps).unwrap_or(0.0))
            .collect();
        let rep_means: Vec<f64> = (0..n_reps)
            .map(|r| {
                let col: Vec<f64> = values.iter().map(|reps| reps[r]).collect();
                order_free_mean(&col).unwrap_or(0.0)
            })
            .collect();
        Ok((
            order_free_mean(&split_means).unwrap_or(0.0),
            t_interval95(&rep_means),
        ))
    };
    let (train_ap, ci95_train) = summarize(QueryGroup::Train)?;
    let (heldout_ap, ci95_heldout) = summarize(QueryGroup::Heldout)?;
    Ok(GapReport {
        ci95_train,
        ci95_heldout,
        n_splits: results.len(),
        n_repetitions: n_reps,
        ..GapReport::from_means(train_ap, heldout_ap)
    })
}

/// One CSV row of a gap report: a (split, repetition, group) cell or an
/// aggregate (`split`/`repetition` empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub split: Option<usize>,
    pub repetition: Option<usize>,
    pub group: String,
    pub ap50: f64,
    pub ci95: Option<f64>,
}

pub fn gap_rows(results: &[Vec<EvalResult>], report: &GapReport) -> Vec<GapRow> {
    let mut rows = Vec::new();
    for (s, reps) in results.iter().enumerate() {
        for (r, res) in reps.iter().enumerate() {
            for group in [QueryGroup::Train, QueryGroup::Heldout] {
                if let Some(v) = res.group_ap(group) {
                    rows.push(GapRow {
                        split: Some(s),
                        repetition: Some(r),
                        group: group.as_str().into(),
                        ap50: 100.0 * v,
                        ci95: None,
                    });
                }
            }
        }
    }
    rows.push(GapRow {
        split: None,
        repetition: None,
        group: "train".into(),
        ap50: report.train_ap,
        ci95: report.ci95_train,
    });
    rows.push(GapRow {
        split: None,
        repetition: None,
        group: "heldout".into(),
        ap50: report.heldout_ap,
        ci95: report.ci95_heldout,
    });
    rows.push(GapRow {
        split: None,
        repetition: None,
        group: "delta".into(),
        ap50: report.delta,
        ci95: None,
    });
    rows
}

pub fn write_gap_csv(path: impl AsRef<Path>, rows: &[GapRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_detections_jsonl(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line)?;
        if !d.score.is_finite() || !d.bbox.is_valid() {
            return Err(Error::InvalidDataset(format!(
                "detection on image {} has a non-finite score or degenerate box",
                d.image_id
            )));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn write_detections_jsonl(path: impl AsRef<Path>, detections: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in detections {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
