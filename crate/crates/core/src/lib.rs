//! # gapbench
//!
//! Toolkit for example-based (one-shot) object detection experiments:
//!
//! - [`annotations`]: COCO-style dataset ingestion, validation and statistics.
//! - [`protocol`]: category hold-out splits, cross-dataset exclusion splits and
//!   category-fraction / instance-matched training-set subsampling.
//! - [`episodes`]: training episodes and evaluation queries with reference crops.
//! - [`matcheval`]: AP50 evaluation of query detections and generalization-gap reports.
//! - [`synthworld`]: seeded synthetic cluttered glyph scenes with exact ground truth.
//! - [`siamdet`]: a small Siamese matching detector trained with SGD.
//!
//! Boxes are stored as `(x, y, w, h)`; geometry that needs corners converts with
//! [`BoundingBox::corners`].

pub mod annotations;
pub mod episodes;
pub mod error;
pub mod matcheval;
pub mod protocol;
pub mod seed;
pub mod siamdet;
pub mod synthworld;

pub use annotations::{
    AnnotationId, BoundingBox, CategoryId, CategoryRecord, Dataset, DatasetStats, ImageId,
    ImageRecord, InstanceAnnotation,
};
pub use error::{Error, Result};
