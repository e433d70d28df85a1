//! COCO-style detection datasets: loading, validation, writing and summary
//! statistics.
//!
//! The JSON schema read and written here is the detection subset of COCO:
//!
//! ```json
//! {
//!   "images": [{"id": 1, "width": 640, "height": 480, "file_name": "a.jpg"}],
//!   "annotations": [{"id": 1, "image_id": 1, "category_id": 3,
//!                    "bbox": [x, y, w, h], "iscrowd": 0}],
//!   "categories": [{"id": 3, "name": "dog"}]
//! }
//! ```
//!
//! Images may carry the LVIS key `not_exhaustive_category_ids`. Unknown keys
//! (segmentation, area, licenses, ...) are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use image::GrayImage;
use log::warn;
use rand::seq::index::sample;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, IntegrityReport, Result};
use crate::seed;

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(ImageId);
id_type!(CategoryId);
id_type!(AnnotationId);

/// Axis-aligned box in COCO `(x, y, w, h)` pixel convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x1, y1, x2, y2)` used by IoU and suppression code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(c: Corners) -> Self {
        Self::new(c.x1, c.y1, c.x2 - c.x1, c.y2 - c.y1)
    }

    pub fn corners(&self) -> Corners {
        Corners {
            x1: self.x,
            y1: self.y,
            x2: self.x + self.w,
            y2: self.y + self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// Clips the box to `[0, width] x [0, height]`. Returns `None` when nothing
    /// of positive area remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let c = self.corners();
        // in-bounds boxes skip the corner round trip, which is not exact
        if c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= width && c.y2 <= height {
            return self.is_valid().then_some(*self);
        }
        let clipped = Corners {
            x1: c.x1.clamp(0.0, width),
            y1: c.y1.clamp(0.0, height),
            x2: c.x2.clamp(0.0, width),
            y2: c.y2.clamp(0.0, height),
        };
        let b = BoundingBox::from_corners(clipped);
        b.is_valid().then_some(b)
    }

    fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub file_name: Option<String>,
    pub pixels: Option<GrayImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BoundingBox,
    pub is_crowd: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: CategoryId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<InstanceAnnotation>,
    pub categories: Vec<CategoryRecord>,
    /// Every instance of every category is annotated.
    pub exhaustive: bool,
    /// Per image, categories that are present but not exhaustively labeled.
    pub not_exhaustive_map: Option<BTreeMap<ImageId, BTreeSet<CategoryId>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_classes: usize,
    pub n_images: usize,
    pub n_instances: usize,
    pub instances_per_image: f64,
    pub classes_per_image: f64,
}

/// Seeded random subset of images kept at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSubset {
    pub n_images: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    pub clamp_boxes: bool,
    pub image_subset: Option<ImageSubset>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            clamp_boxes: true,
            image_subset: None,
        }
    }
}

/// Counts of geometry fixes applied while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub clamped: usize,
    pub dropped_degenerate: usize,
}

// --- raw JSON schema -------------------------------------------------------

#[derive(Deserialize)]
struct RawDataset {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<CategoryRecord>,
}

#[derive(Serialize, Deserialize)]
struct RawImage {
    id: ImageId,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    not_exhaustive_category_ids: Option<Vec<CategoryId>>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    id: AnnotationId,
    image_id: ImageId,
    category_id: CategoryId,
    bbox: [f64; 4],
    #[serde(default, deserialize_with = "de_crowd")]
    iscrowd: u8,
}

#[derive(Serialize)]
struct RawDatasetOut<'a> {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: &'a [CategoryRecord],
}

fn de_crowd<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u8, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Crowd {
        Int(u64),
        Bool(bool),
    }
    Ok(match Crowd::deserialize(d)? {
        Crowd::Int(v) => u8::from(v != 0),
        Crowd::Bool(b) => u8::from(b),
    })
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes, opts).map(|(ds, _)| ds)
}

/// Parses COCO-style JSON, checks referential integrity, then clamps boxes to
/// their image and drops boxes left without area.
pub fn parse_dataset(bytes: &[u8], opts: &LoadOptions) -> Result<(Dataset, LoadReport)> {
    let raw: RawDataset = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let mut not_exhaustive: Option<BTreeMap<ImageId, BTreeSet<CategoryId>>> = None;
    let mut images = Vec::with_capacity(raw.images.len());
    for im in raw.images {
        if let Some(ids) = im.not_exhaustive_category_ids {
            let map = not_exhaustive.get_or_insert_with(BTreeMap::new);
            if !ids.is_empty() {
                map.insert(im.id, ids.into_iter().collect());
            }
        }
        images.push(ImageRecord {
            id: im.id,
            width: im.width,
            height: im.height,
            file_name: im.file_name,
            pixels: None,
        });
    }
    let annotations = raw
        .annotations
        .into_iter()
        .map(|a| InstanceAnnotation {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: BoundingBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
            is_crowd: a.iscrowd != 0,
        })
        .collect();

    let mut ds = Dataset {
        images,
        annotations,
        categories: raw.categories,
        exhaustive: not_exhaustive.is_none(),
        not_exhaustive_map: not_exhaustive,
    };
    let integrity = ds.integrity_report();
    if !integrity.is_clean() {
        return Err(Error::Integrity(Box::new(integrity)));
    }

    let report = if opts.clamp_boxes {
        ds.clamp_boxes()
    } else {
        let before = ds.annotations.len();
        ds.annotations.retain(|a| a.bbox.is_valid());
        LoadReport {
            clamped: 0,
            dropped_degenerate: before - ds.annotations.len(),
        }
    };
    if report.clamped > 0 || report.dropped_degenerate > 0 {
        warn!(
            "clamped {} boxes to image bounds, dropped {} degenerate boxes",
            report.clamped, report.dropped_degenerate
        );
    }

    if let Some(subset) = opts.image_subset {
        ds = ds.random_image_subset(subset.n_images, subset.seed);
    }
    Ok((ds, report))
}

impl Dataset {
    pub fn new(
        images: Vec<ImageRecord>,
        annotations: Vec<InstanceAnnotation>,
        categories: Vec<CategoryRecord>,
    ) -> Result<Self> {
        let ds = Self {
            images,
            annotations,
            categories,
            exhaustive: true,
            not_exhaustive_map: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Collects every referential or shape problem in the dataset.
    pub fn integrity_report(&self) -> IntegrityReport {
        let mut report = IntegrityReport::default();
        let mut image_ids = HashSet::new();
        for im in &self.images {
            if !image_ids.insert(im.id) {
                report.duplicate_image_ids.push(im.id);
            }
            let raster_ok = im
                .pixels
                .as_ref()
                .is_none_or(|p| p.width() == im.width && p.height() == im.height);
            if im.width == 0 || im.height == 0 || !raster_ok {
                report.invalid_images.push(im.id);
            }
        }
        let mut category_ids = HashSet::new();
        for c in &self.categories {
            if !category_ids.insert(c.id) {
                report.duplicate_category_ids.push(c.id);
            }
            if c.name.is_empty() {
                report.empty_category_names.push(c.id);
            }
        }
        let mut ann_ids = HashSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                report.duplicate_annotation_ids.push(a.id);
            }
            if !image_ids.contains(&a.image_id) {
                report.dangling_image.push((a.id, a.image_id));
            }
            if !category_ids.contains(&a.category_id) {
                report.dangling_category.push((a.id, a.category_id));
            }
        }
        report
    }

    pub fn validate(&self) -> Result<()> {
        let report = self.integrity_report();
        if !report.is_clean() {
            return Err(Error::Integrity(Box::new(report)));
        }
        if !self.exhaustive && self.not_exhaustive_map.is_none() {
            return Err(Error::InvalidDataset(
                "non-exhaustive dataset without a not-exhaustive map".into(),
            ));
        }
        if let Some(bad) = self.annotations.iter().find(|a| !a.bbox.is_valid()) {
            return Err(Error::InvalidDataset(format!(
                "annotation {} has a degenerate box",
                bad.id
            )));
        }
        Ok(())
    }

    fn clamp_boxes(&mut self) -> LoadReport {
        let sizes: HashMap<ImageId, (f64, f64)> = self
            .images
            .iter()
            .map(|im| (im.id, (f64::from(im.width), f64::from(im.height))))
            .collect();
        let mut report = LoadReport::default();
        self.annotations.retain_mut(|a| {
            let (w, h) = sizes[&a.image_id];
            match a.bbox.clamp_to(w, h) {
                Some(b) => {
                    if b != a.bbox {
                        report.clamped += 1;
                        a.bbox = b;
                    }
                    true
                }
                None => {
                    report.dropped_degenerate += 1;
                    false
                }
            }
        });
        report
    }

    fn random_image_subset(mut self, n_images: usize, seed_value: u64) -> Dataset {
        let n = n_images.min(self.images.len());
        let mut rng = seed::rng(seed_value);
        let mut picked: Vec<usize> = sample(&mut rng, self.images.len(), n).into_vec();
        picked.sort_unstable();
        let keep: HashSet<ImageId> = picked.iter().map(|&i| self.images[i].id).collect();
        self.retain_images(|im| keep.contains(&im.id));
        self
    }

    /// Keeps images matching `pred` along with their annotations.
    pub fn retain_images(&mut self, mut pred: impl FnMut(&ImageRecord) -> bool) {
        self.images.retain(|im| pred(im));
        let keep: HashSet<ImageId> = self.images.iter().map(|im| im.id).collect();
        self.annotations.retain(|a| keep.contains(&a.image_id));
        if let Some(map) = self.not_exhaustive_map.as_mut() {
            map.retain(|id, _| keep.contains(id));
        }
    }

    /// Removes images that carry no annotation.
    pub fn drop_unannotated_images(&mut self) {
        let used: HashSet<ImageId> = self.annotations.iter().map(|a| a.image_id).collect();
        self.retain_images(|im| used.contains(&im.id));
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn category_ids(&self) -> BTreeSet<CategoryId> {
        self.categories.iter().map(|c| c.id).collect()
    }

    /// Distinct categories annotated in each image, in image order.
    pub fn categories_per_image(&self) -> BTreeMap<ImageId, BTreeSet<CategoryId>> {
        let mut map: BTreeMap<ImageId, BTreeSet<CategoryId>> = self
            .images
            .iter()
            .map(|im| (im.id, BTreeSet::new()))
            .collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().insert(a.category_id);
        }
        map
    }

    pub fn is_not_exhaustive(&self, image: ImageId, category: CategoryId) -> bool {
        self.not_exhaustive_map
            .as_ref()
            .and_then(|m| m.get(&image))
            .is_some_and(|s| s.contains(&category))
    }

    /// Serializes to the COCO-style schema with fixed key order.
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let images = self
            .images
            .iter()
            .map(|im| RawImage {
                id: im.id,
                width: im.width,
                height: im.height,
                file_name: im.file_name.clone(),
                not_exhaustive_category_ids: self.not_exhaustive_map.as_ref().map(|m| {
                    m.get(&im.id)
                        .map(|s| s.iter().copied().collect())
                        .unwrap_or_default()
                }),
            })
            .collect();
        let annotations = self
            .annotations
            .iter()
            .map(|a| RawAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox.to_array(),
                iscrowd: u8::from(a.is_crowd),
            })
            .collect();
        let out = RawDatasetOut {
            images,
            annotations,
            categories: &self.categories,
        };
        let mut bytes = serde_json::to_vec_pretty(&out)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Loads rasters for images that name a file, relative to `root`.
    pub fn load_pixels(&mut self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for im in &mut self.images {
            let Some(name) = &im.file_name else { continue };
            let raster = image::open(root.join(name))?.to_luma8();
            if raster.width() != im.width || raster.height() != im.height {
                return Err(Error::InvalidDataset(format!(
                    "raster {} is {}x{}, record says {}x{}",
                    name,
                    raster.width(),
                    raster.height(),
                    im.width,
                    im.height
                )));
            }
            im.pixels = Some(raster);
        }
        Ok(())
    }

    /// Writes every in-memory raster to `root/<file_name>`; the extension
    /// picks the codec (`.png` or `.pgm`).
    pub fn write_pixels(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for im in &self.images {
            if let (Some(name), Some(px)) = (&im.file_name, &im.pixels) {
                let path = root.join(name);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                px.save(&path)?;
            }
        }
        Ok(())
    }
}

pub fn dataset_stats(ds: &Dataset) -> Result<DatasetStats> {
    if ds.images.is_empty() {
        return Err(Error::Empty("dataset has no images"));
    }
    let n_images = ds.images.len();
    let per_image = ds.categories_per_image();
    let distinct: usize = per_image.values().map(BTreeSet::len).sum();
    Ok(DatasetStats {
        n_classes: ds.categories.len(),
        n_images,
        n_instances: ds.annotations.len(),
        instances_per_image: ds.annotations.len() as f64 / n_images as f64,
        classes_per_image: distinct as f64 / n_images as f64,
    })
}

/// Lookup tables from images and categories to annotation positions.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    image_pos: HashMap<ImageId, usize>,
    by_image: Vec<Vec<usize>>,
    by_category: BTreeMap<CategoryId, Vec<usize>>,
}

impl DatasetIndex {
    pub fn new(ds: &Dataset) -> Self {
        let image_pos: HashMap<ImageId, usize> = ds
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id, i))
            .collect();
        let mut by_image = vec![Vec::new(); ds.images.len()];
        let mut by_category: BTreeMap<CategoryId, Vec<usize>> =
            ds.categories.iter().map(|c| (c.id, Vec::new())).collect();
        for (i, a) in ds.annotations.iter().enumerate() {
            by_image[image_pos[&a.image_id]].push(i);
            by_category.entry(a.category_id).or_default().push(i);
        }
        Self {
            image_pos,
            by_image,
            by_category,
        }
    }

    pub fn image_position(&self, id: ImageId) -> Option<usize> {
        self.image_pos.get(&id).copied()
    }

    /// Annotation positions for an image, in dataset order.
    pub fn annotations_of_image(&self, id: ImageId) -> &[usize] {
        self.image_pos
            .get(&id)
            .map(|&p| self.by_image[p].as_slice())
            .unwrap_or(&[])
    }

    pub fn annotations_of_category(&self, id: CategoryId) -> &[usize] {
        self.by_category.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }
}
