use std::path::PathBuf;

use thiserror::Error;

use crate::annotations::{AnnotationId, CategoryId, ImageId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("referential integrity violated: {0}")]
    Integrity(Box<IntegrityReport>),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("empty dataset: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown category {0} in split")]
    UnknownCategory(CategoryId),

    #[error("image {0} not found")]
    UnknownImage(ImageId),

    #[error("image {0} has no annotations")]
    NoAnnotations(ImageId),

    #[error("image {0} has no pixel data")]
    MissingPixels(ImageId),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("raster {width}x{height} smaller than receptive field {min}")]
    RasterTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("channel mismatch: image has {image}, reference has {reference}")]
    ChannelMismatch { image: usize, reference: usize },

    #[error("no positive training windows: {0}")]
    NoPositives(String),

    #[error("scene generation failed after {attempts} attempts for image {image_index}: {config}")]
    Placement {
        image_index: usize,
        attempts: usize,
        config: String,
    },

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Offending records found while checking references between images,
/// annotations and categories.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IntegrityReport {
    pub dangling_image: Vec<(AnnotationId, ImageId)>,
    pub dangling_category: Vec<(AnnotationId, CategoryId)>,
    pub duplicate_annotation_ids: Vec<AnnotationId>,
    pub duplicate_image_ids: Vec<ImageId>,
    pub duplicate_category_ids: Vec<CategoryId>,
    pub empty_category_names: Vec<CategoryId>,
    pub invalid_images: Vec<ImageId>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.dangling_image.is_empty()
            && self.dangling_category.is_empty()
            && self.duplicate_annotation_ids.is_empty()
            && self.duplicate_image_ids.is_empty()
            && self.duplicate_category_ids.is_empty()
            && self.empty_category_names.is_empty()
            && self.invalid_images.is_empty()
    }
}

impl std::fmt::Display for IntegrityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        for (ann, img) in &self.dangling_image {
            parts.push(format!("annotation {ann} references missing image {img}"));
        }
        for (ann, cat) in &self.dangling_category {
            parts.push(format!(
                "annotation {ann} references missing category {cat}"
            ));
        }
        for id in &self.duplicate_annotation_ids {
            parts.push(format!("duplicate annotation id {id}"));
        }
        for id in &self.duplicate_image_ids {
            parts.push(format!("duplicate image id {id}"));
        }
        for id in &self.duplicate_category_ids {
            parts.push(format!("duplicate category id {id}"));
        }
        for id in &self.empty_category_names {
            parts.push(format!("category {id} has an empty name"));
        }
        for id in &self.invalid_images {
            parts.push(format!("image {id} has invalid size or raster"));
        }
        write!(f, "{}", parts.join("; "))
    }
}
