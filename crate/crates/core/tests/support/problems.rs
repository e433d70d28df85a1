//! Seeded random evaluation problems for oracle comparisons.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gapbench::episodes::{EvalQuery, QueryGroup};
use gapbench::matcheval::Detection;
use gapbench::protocol::CategorySplit;
use gapbench::{
    AnnotationId, BoundingBox, CategoryId, CategoryRecord, Dataset, ImageId, ImageRecord,
    InstanceAnnotation,
};

use super::oracle::{self, Det, Gt, Interp};

/// splitmix64 stream; independent of the library's generators.
pub struct Stream(pub u64);

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub struct Problem {
    pub dataset: Dataset,
    pub split: CategorySplit,
    pub queries: Vec<EvalQuery>,
    pub detections: Vec<Detection>,
}

fn rect(b: &BoundingBox) -> oracle::Rect {
    [b.x, b.y, b.w, b.h]
}

/// At most 6 images with at most 8 ground-truth boxes and 8 detections each.
pub fn random_problem(seed: u64) -> Problem {
    let mut s = Stream(seed);
    let n_images = 1 + s.below(6);
    let n_cats = 1 + s.below(3);
    let categories: Vec<CategoryRecord> = (1..=n_cats)
        .map(|c| CategoryRecord {
            id: CategoryId(c),
            name: format!("c{c}"),
        })
        .collect();
    let heldout: BTreeSet<CategoryId> = (1..=n_cats)
        .filter(|_| s.below(2) == 0)
        .map(CategoryId)
        .collect();
    let split = CategorySplit {
        split_index: 0,
        train_category_ids: (1..=n_cats)
            .map(CategoryId)
            .filter(|c| !heldout.contains(c))
            .collect(),
        heldout_category_ids: heldout,
    };
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut detections = Vec::new();
    let mut queries = Vec::new();
    let mut next_ann = 1;
    for i in 1..=n_images {
        let image_id = ImageId(i);
        images.push(ImageRecord {
            id: image_id,
            width: 64,
            height: 64,
            file_name: None,
            pixels: None,
        });
        let n_gt = s.below(9);
        let mut present = BTreeSet::new();
        let mut boxes = Vec::new();
        for _ in 0..n_gt {
            let b = BoundingBox::new(
                (s.below(12) * 4) as f64,
                (s.below(12) * 4) as f64,
                (4 + s.below(5) * 4) as f64,
                (4 + s.below(5) * 4) as f64,
            );
            let category_id = CategoryId(1 + s.below(n_cats));
            present.insert(category_id);
            boxes.push((b, category_id));
            annotations.push(InstanceAnnotation {
                id: AnnotationId(next_ann),
                image_id,
                category_id,
                bbox: b,
                is_crowd: s.below(10) == 0,
            });
            next_ann += 1;
        }
        if present.is_empty() {
            continue;
        }
        let present: Vec<CategoryId> = present.into_iter().collect();
        for &c in &present {
            queries.push(EvalQuery {
                image_id,
                category_id: c,
                references: Vec::new(),
                group: QueryGroup::of(&split, c),
                insufficient_refs: false,
                same_image_reference: false,
                not_exhaustive: false,
            });
        }
        for _ in 0..s.below(9) {
            let category_id = present[s.below(present.len() as u64) as usize];
            let bbox = if !boxes.is_empty() && s.below(2) == 0 {
                let (b, _) = boxes[s.below(boxes.len() as u64) as usize];
                let dx = s.below(5) as f64 - 2.0;
                let dy = s.below(5) as f64 - 2.0;
                BoundingBox::new(b.x + dx, b.y + dy, b.w + s.below(3) as f64, b.h)
            } else {
                BoundingBox::new(
                    (s.below(12) * 4) as f64,
                    (s.below(12) * 4) as f64,
                    (4 + s.below(5) * 4) as f64,
                    (4 + s.below(5) * 4) as f64,
                )
            };
            detections.push(Detection {
                image_id,
                category_id,
                bbox,
                score: s.unit(),
            });
        }
    }
    let dataset = Dataset::new(images, annotations, categories).expect("consistent problem");
    Problem {
        dataset,
        split,
        queries,
        detections,
    }
}

/// Per-category AP and group means computed without the library evaluator.
pub struct OracleResult {
    pub per_category: BTreeMap<CategoryId, Option<f64>>,
    pub train: Option<f64>,
    pub heldout: Option<f64>,
}

pub fn oracle_evaluate(p: &Problem, thr: f64, interp: Interp) -> OracleResult {
    let mut per_category = BTreeMap::new();
    for c in &p.dataset.categories {
        let queried: BTreeSet<ImageId> = p
            .queries
            .iter()
            .filter(|q| q.category_id == c.id)
            .map(|q| q.image_id)
            .collect();
        let dets: Vec<Det> = p
            .detections
            .iter()
            .filter(|d| d.category_id == c.id && queried.contains(&d.image_id))
            .map(|d| Det {
                image: d.image_id.0,
                score: d.score,
                rect: rect(&d.bbox),
            })
            .collect();
        let gts: Vec<Gt> = p
            .dataset
            .annotations
            .iter()
            .filter(|a| a.category_id == c.id && queried.contains(&a.image_id))
            .map(|a| Gt {
                image: a.image_id.0,
                rect: rect(&a.bbox),
                crowd: a.is_crowd,
            })
            .collect();
        per_category.insert(c.id, oracle::average_precision(&dets, &gts, thr, interp));
    }
    let group = |held: bool| {
        let v: Vec<f64> = per_category
            .iter()
            .filter(|(c, _)| p.split.heldout_category_ids.contains(c) == held)
            .filter_map(|(_, ap)| *ap)
            .collect();
        oracle::mean(&v)
    };
    OracleResult {
        train: group(false),
        heldout: group(true),
        per_category,
    }
}

/// Up to ten random boxes with coarse scores (so ties occur) and a random
/// suppression threshold.
pub fn nms_case(seed: u64) -> (Vec<(oracle::Rect, f64)>, f64) {
    let mut s = Stream(seed);
    let n = s.below(11) as usize;
    let boxes = (0..n)
        .map(|_| {
            let (x, y) = (s.unit() * 40.0, s.unit() * 40.0);
            let (w, h) = (1.0 + s.unit() * 20.0, 1.0 + s.unit() * 20.0);
            ([x, y, w, h], s.below(8) as f64 / 8.0)
        })
        .collect();
    (boxes, 0.1 + 0.8 * s.unit())
}
