//! Training episodes and evaluation queries.
//!
//! A training episode pairs one scene with a reference crop of a category
//! present in it; every box of the scene is relabeled 1 if it shares the
//! reference category and 0 otherwise. Evaluation issues one query for every
//! category present in every image, each with `k` reference crops drawn from
//! other evaluation images.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    AnnotationId, BoundingBox, CategoryId, Dataset, DatasetIndex, ImageId, InstanceAnnotation,
};
use crate::error::{Error, Result};
use crate::protocol::CategorySplit;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Side length of the square reference raster.
    pub reference_size: u32,
    /// Context added around the box on each side, as a fraction of its size.
    #[serde(default)]
    pub context_margin: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            reference_size: 64,
            context_margin: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCrop {
    pub source_annotation_id: AnnotationId,
    pub category_id: CategoryId,
    pub is_empty: bool,
    /// `None` when the source dataset carries no rasters.
    pub pixels: Option<GrayImage>,
}

impl ReferenceCrop {
    /// All-black stand-in that keeps the bookkeeping of `self`.
    pub fn emptied(&self, size: u32) -> ReferenceCrop {
        ReferenceCrop {
            is_empty: true,
            pixels: Some(GrayImage::new(size, size)),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEpisode {
    pub image_id: ImageId,
    pub reference: ReferenceCrop,
    pub boxes: Vec<BoundingBox>,
    pub labels: Vec<u8>,
    pub annotation_ids: Vec<AnnotationId>,
    /// No other image holds the reference category; the crop comes from the
    /// episode's own image.
    pub same_image_reference: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryGroup {
    Train,
    Heldout,
}

impl QueryGroup {
    pub fn of(split: &CategorySplit, category: CategoryId) -> Self {
        if split.is_heldout(category) {
            QueryGroup::Heldout
        } else {
            QueryGroup::Train
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QueryGroup::Train => "train",
            QueryGroup::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub references: Vec<ReferenceCrop>,
    pub group: QueryGroup,
    /// Fewer than `k` candidate references existed; drawn with replacement.
    pub insufficient_refs: bool,
    pub same_image_reference: bool,
    /// The category is flagged as not exhaustively labeled in this image.
    pub not_exhaustive: bool,
}

/// Tight (optionally padded) crop of `bbox`, padded to a centered square with
/// zeros and resized to `cfg.reference_size`.
pub fn crop_reference(image: &GrayImage, bbox: &BoundingBox, cfg: &EpisodeConfig) -> GrayImage {
    let mx = bbox.w * cfg.context_margin;
    let my = bbox.h * cfg.context_margin;
    let x0 = (bbox.x - mx).floor().max(0.0) as u32;
    let y0 = (bbox.y - my).floor().max(0.0) as u32;
    let x1 = ((bbox.x + bbox.w + mx).ceil() as u32)
        .min(image.width())
        .max(x0 + 1);
    let y1 = ((bbox.y + bbox.h + my).ceil() as u32)
        .min(image.height())
        .max(y0 + 1);
    let (w, h) = (x1 - x0, y1 - y0);
    let region = imageops::crop_imm(image, x0, y0, w, h).to_image();

    let side = w.max(h);
    let mut square = GrayImage::new(side, side);
    imageops::replace(
        &mut square,
        &region,
        i64::from((side - w) / 2),
        i64::from((side - h) / 2),
    );
    let size = cfg.reference_size;
    if side == size {
        square
    } else {
        imageops::resize(&square, size, size, FilterType::Triangle)
    }
}

/// Draws episodes and queries from one dataset.
pub struct EpisodeSampler<'a> {
    ds: &'a Dataset,
    index: DatasetIndex,
    cfg: EpisodeConfig,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(ds: &'a Dataset, cfg: EpisodeConfig) -> Self {
        Self {
            ds,
            index: DatasetIndex::new(ds),
            cfg,
        }
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    fn ann(&self, pos: usize) -> &'a InstanceAnnotation {
        &self.ds.annotations[pos]
    }

    fn crop(&self, pos: usize) -> ReferenceCrop {
        let a = self.ann(pos);
        let pixels = self
            .index
            .image_position(a.image_id)
            .and_then(|p| self.ds.images[p].pixels.as_ref())
            .map(|img| crop_reference(img, &a.bbox, &self.cfg));
        ReferenceCrop {
            source_annotation_id: a.id,
            category_id: a.category_id,
            is_empty: false,
            pixels,
        }
    }

    /// Non-crowd instances of `category` outside `image`.
    fn candidates_elsewhere(&self, category: CategoryId, image: ImageId) -> Vec<usize> {
        self.index
            .annotations_of_category(category)
            .iter()
            .copied()
            .filter(|&p| {
                let a = self.ann(p);
                !a.is_crowd && a.image_id != image
            })
            .collect()
    }

    fn candidates_within(&self, category: CategoryId, image: ImageId) -> Vec<usize> {
        self.index
            .annotations_of_image(image)
            .iter()
            .copied()
            .filter(|&p| {
                let a = self.ann(p);
                !a.is_crowd && a.category_id == category
            })
            .collect()
    }

    fn present_categories(&self, image: ImageId) -> BTreeSet<CategoryId> {
        self.index
            .annotations_of_image(image)
            .iter()
            .map(|&p| self.ann(p))
            .filter(|a| !a.is_crowd)
            .map(|a| a.category_id)
            .collect()
    }

    /// Images with at least one non-crowd annotation, in dataset order.
    pub fn trainable_images(&self) -> Vec<ImageId> {
        self.ds
            .images
            .iter()
            .map(|im| im.id)
            .filter(|&id| !self.present_categories(id).is_empty())
            .collect()
    }

    pub fn sample_training_episode(
        &self,
        image_id: ImageId,
        rng: &mut seed::Rng,
    ) -> Result<TrainingEpisode> {
        if self.index.image_position(image_id).is_none() {
            return Err(Error::UnknownImage(image_id));
        }
        let present: Vec<CategoryId> = self.present_categories(image_id).into_iter().collect();
        if present.is_empty() {
            return Err(Error::NoAnnotations(image_id));
        }
        let category = present[rng.random_range(0..present.len())];
        let mut pool = self.candidates_elsewhere(category, image_id);
        let same_image_reference = pool.is_empty();
        if same_image_reference {
            pool = self.candidates_within(category, image_id);
        }
        let reference = self.crop(pool[rng.random_range(0..pool.len())]);

        let anns: Vec<&InstanceAnnotation> = self
            .index
            .annotations_of_image(image_id)
            .iter()
            .map(|&p| self.ann(p))
            .collect();
        Ok(TrainingEpisode {
            image_id,
            reference,
            boxes: anns.iter().map(|a| a.bbox).collect(),
            labels: anns
                .iter()
                .map(|a| u8::from(a.category_id == category))
                .collect(),
            annotation_ids: anns.iter().map(|a| a.id).collect(),
            same_image_reference,
        })
    }

    /// One query per (image, present category), references drawn from the
    /// other images of this dataset. Each image uses its own stream derived
    /// from `seed` and the image id.
    pub fn build_eval_queries(
        &self,
        split: &CategorySplit,
        k: usize,
        empty_refs: bool,
        seed_value: u64,
    ) -> Result<Vec<EvalQuery>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut queries = Vec::new();
        for im in &self.ds.images {
            let mut rng = seed::derived_rng(seed_value, &[im.id.0]);
            for category in self.present_categories(im.id) {
                let mut pool = self.candidates_elsewhere(category, im.id);
                let same_image_reference = pool.is_empty();
                if same_image_reference {
                    pool = self.candidates_within(category, im.id);
                }
                let insufficient_refs = pool.len() < k;
                let picks: Vec<usize> = if insufficient_refs {
                    (0..k)
                        .map(|_| pool[rng.random_range(0..pool.len())])
                        .collect()
                } else {
                    sample(&mut rng, pool.len(), k)
                        .into_iter()
                        .map(|i| pool[i])
                        .collect()
                };
                let references = picks
                    .into_iter()
                    .map(|p| {
                        let crop = self.crop(p);
                        if empty_refs {
                            crop.emptied(self.cfg.reference_size)
                        } else {
                            crop
                        }
                    })
                    .collect();
                queries.push(EvalQuery {
                    image_id: im.id,
                    category_id: category,
                    references,
                    group: QueryGroup::of(split, category),
                    insufficient_refs,
                    same_image_reference,
                    not_exhaustive: self.ds.is_not_exhaustive(im.id, category),
                });
            }
        }
        Ok(queries)
    }
}

/// Endless seeded stream of training episodes; step `t` picks an image
/// uniformly and samples with a stream derived from `(seed, t)`.
pub struct EpisodeStream<'a> {
    sampler: EpisodeSampler<'a>,
    images: Vec<ImageId>,
    seed: u64,
    step: u64,
}

impl<'a> EpisodeStream<'a> {
    pub fn new(ds: &'a Dataset, cfg: EpisodeConfig, seed_value: u64) -> Result<Self> {
        let sampler = EpisodeSampler::new(ds, cfg);
        let images = sampler.trainable_images();
        if images.is_empty() {
            return Err(Error::Empty(
                "no image with annotations to sample episodes from",
            ));
        }
        Ok(Self {
            sampler,
            images,
            seed: seed_value,
            step: 0,
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.sampler.dataset()
    }

    /// Number of distinct images episodes are drawn from.
    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn next_episode(&mut self) -> Result<TrainingEpisode> {
        let mut rng = seed::derived_rng(self.seed, &[self.step]);
        self.step += 1;
        let image = self.images[rng.random_range(0..self.images.len())];
        self.sampler.sample_training_episode(image, &mut rng)
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<TrainingEpisode>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_episode())
    }
}

/// Audit record for one episode or query; never carries pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub kind: String,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub reference_annotation_ids: Vec<AnnotationId>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<QueryGroup>,
    pub same_image_reference: bool,
    pub insufficient_refs: bool,
    pub empty_refs: bool,
}

impl TrainingEpisode {
    pub fn record(&self, seed_value: u64) -> EpisodeRecord {
        EpisodeRecord {
            kind: "train".into(),
            image_id: self.image_id,
            category_id: self.reference.category_id,
            reference_annotation_ids: vec![self.reference.source_annotation_id],
            seed: seed_value,
            group: None,
            same_image_reference: self.same_image_reference,
            insufficient_refs: false,
            empty_refs: self.reference.is_empty,
        }
    }
}

impl EvalQuery {
    pub fn record(&self, seed_value: u64) -> EpisodeRecord {
        EpisodeRecord {
            kind: "eval".into(),
            image_id: self.image_id,
            category_id: self.category_id,
            reference_annotation_ids: self
                .references
                .iter()
                .map(|r| r.source_annotation_id)
                .collect(),
            seed: seed_value,
            group: Some(self.group),
            same_image_reference: self.same_image_reference,
            insufficient_refs: self.insufficient_refs,
            empty_refs: self.references.iter().all(|r| r.is_empty),
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
