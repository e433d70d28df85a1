//! Seeded synthetic detection datasets: procedural stroke glyphs scattered
//! over noisy grayscale canvases, with exact ground-truth boxes.
//!
//! Each category is a glyph made of 3-7 line and arc strokes. A scene picks
//! a handful of categories, places jittered copies of their glyphs without
//! exceeding a pairwise box-IoU cap, and records the tight box of every
//! rendered mask. Everything is a pure function of the config seed and the
//! image index.

use std::f64::consts::PI;

use image::{GrayImage, Luma};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    AnnotationId, BoundingBox, CategoryId, CategoryRecord, Dataset, ImageId, ImageRecord,
    InstanceAnnotation,
};
use crate::error::{Error, Result};
use crate::matcheval::iou;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub n_categories: usize,
    /// Target mean instances per image.
    pub instances_per_image: f64,
    /// Target mean distinct categories per image.
    pub categories_per_image: f64,
    /// Nominal glyph side in pixels.
    pub glyph_size: f64,
    pub stroke_width: f64,
    /// Multiplicative scale range.
    pub scale_jitter: (f64, f64),
    /// Rotation drawn from `[-r, r]` degrees.
    pub rotation_jitter: f64,
    /// Largest box IoU allowed between two placed instances.
    pub overlap_cap: f64,
    /// Background noise amplitude as a fraction of full intensity.
    pub noise: f64,
    pub seed: u64,
    pub placement_retries: usize,
    pub image_attempts: usize,
}

impl SceneConfig {
    fn base(seed_value: u64) -> Self {
        Self {
            width: 128,
            height: 128,
            n_categories: 64,
            instances_per_image: 3.0,
            categories_per_image: 1.5,
            glyph_size: 16.0,
            stroke_width: 1.6,
            scale_jitter: (0.85, 1.15),
            rotation_jitter: 10.0,
            overlap_cap: 0.1,
            noise: 0.15,
            seed: seed_value,
            placement_retries: 200,
            image_attempts: 8,
        }
    }

    /// Few objects of few categories per scene.
    pub fn low_clutter(seed_value: u64) -> Self {
        Self::base(seed_value)
    }

    /// Many objects of many categories per scene.
    pub fn high_clutter(seed_value: u64) -> Self {
        Self {
            instances_per_image: 14.0,
            categories_per_image: 6.0,
            ..Self::base(seed_value)
        }
    }

    pub fn preset(name: &str, seed_value: u64) -> Option<Self> {
        match name {
            "low-clutter" => Some(Self::low_clutter(seed_value)),
            "high-clutter" => Some(Self::high_clutter(seed_value)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || self.height == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.n_categories == 0 {
            return bad("n_categories must be positive".into());
        }
        if !(self.categories_per_image >= 1.0
            && self.categories_per_image <= self.n_categories as f64)
        {
            return bad(format!(
                "categories_per_image {} must lie in [1, n_categories]",
                self.categories_per_image
            ));
        }
        if !(self.instances_per_image >= self.categories_per_image) {
            return bad("instances_per_image must be at least categories_per_image".into());
        }
        if !(0.0..1.0).contains(&self.overlap_cap) {
            return bad(format!(
                "overlap_cap {} must lie in [0, 1)",
                self.overlap_cap
            ));
        }
        let (lo, hi) = self.scale_jitter;
        if !(lo > 0.0 && lo <= hi) || !(self.glyph_size > 2.0) || !(self.stroke_width > 0.0) {
            return bad("glyph size, stroke width and scale range must be positive".into());
        }
        let reach = self.glyph_size * hi * 2f64.sqrt() + self.stroke_width + 2.0;
        if reach >= f64::from(self.width.min(self.height)) {
            return bad("glyphs do not fit on the canvas".into());
        }
        if !(0.0..=1.0).contains(&self.noise)
            || self.placement_retries == 0
            || self.image_attempts == 0
        {
            return bad("noise must lie in [0, 1]; retries and attempts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Line {
        from: (f64, f64),
        to: (f64, f64),
    },
    Arc {
        center: (f64, f64),
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

impl Primitive {
    fn polyline(&self) -> Vec<(f64, f64)> {
        match *self {
            Primitive::Line { from, to } => vec![from, to],
            Primitive::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let steps = ((sweep.abs() * radius * 40.0).ceil() as usize).max(6);
                (0..=steps)
                    .map(|i| {
                        let t = start + sweep * i as f64 / steps as f64;
                        (center.0 + radius * t.cos(), center.1 + radius * t.sin())
                    })
                    .collect()
            }
        }
    }
}

/// Stroke composition; `frame` maps the raw strokes onto the unit square so
/// that they span `[0, 1]` on both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub category_id: CategoryId,
    pub strokes: Vec<Primitive>,
    /// `(x0, y0, sx, sy)`: unit coordinates are `((x - x0) / sx, (y - y0) / sy)`.
    pub frame: (f64, f64, f64, f64),
}

impl GlyphSpec {
    pub fn generate(category_id: CategoryId, seed_value: u64) -> Self {
        let mut rng = seed::derived_rng(seed_value, &[seed::tag("glyph"), category_id.0]);
        loop {
            let n = rng.random_range(3..=7);
            let strokes: Vec<Primitive> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.55) {
                        Primitive::Line {
                            from: (rng.random(), rng.random()),
                            to: (rng.random(), rng.random()),
                        }
                    } else {
                        Primitive::Arc {
                            center: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                            radius: rng.random_range(0.15..0.45),
                            start: rng.random_range(0.0..2.0 * PI),
                            sweep: rng.random_range(0.5 * PI..2.0 * PI),
                        }
                    }
                })
                .collect();
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for (x, y) in strokes.iter().flat_map(Primitive::polyline) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            // near-degenerate shapes would be stretched into noise
            if x1 - x0 >= 0.35 && y1 - y0 >= 0.35 {
                return Self {
                    category_id,
                    strokes,
                    frame: (x0, y0, x1 - x0, y1 - y0),
                };
            }
        }
    }

    /// Stroke segments in unit-square coordinates.
    pub fn segments(&self) -> Vec<((f64, f64), (f64, f64))> {
        let (x0, y0, sx, sy) = self.frame;
        let map = |(x, y): (f64, f64)| ((x - x0) / sx, (y - y0) / sy);
        self.strokes
            .iter()
            .flat_map(|p| {
                let line = p.polyline();
                line.windows(2)
                    .map(|w| (map(w[0]), map(w[1])))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Rendered side of the unit square, in pixels.
    pub scale: f64,
    pub rotation_deg: f64,
}

/// Foreground pixels of one rendered glyph in a local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphMask {
    pub side: u32,
    pub pixels: Vec<(u32, u32)>,
}

impl GlyphMask {
    /// Tight `(x0, y0, x1, y1)` of the foreground, inclusive.
    pub fn extent(&self) -> (u32, u32, u32, u32) {
        let mut e = (u32::MAX, u32::MAX, 0, 0);
        for &(x, y) in &self.pixels {
            e = (e.0.min(x), e.1.min(y), e.2.max(x), e.3.max(y));
        }
        e
    }

    pub fn to_image(&self) -> GrayImage {
        let mut img = GrayImage::new(self.side, self.side);
        for &(x, y) in &self.pixels {
            img.put_pixel(x, y, Luma([255]));
        }
        img
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders `glyph` centered in a square frame just large enough for any
/// rotation. Pixel `(x, y)` is foreground when its center lies within half a
/// stroke width of a stroke.
pub fn render_glyph(glyph: &GlyphSpec, pose: &Pose, stroke_width: f64) -> GlyphMask {
    let side = (pose.scale * 2f64.sqrt() + stroke_width + 2.0).ceil() as u32;
    let c = f64::from(side) / 2.0;
    let (sin, cos) = pose.rotation_deg.to_radians().sin_cos();
    let place = |(u, v): (f64, f64)| {
        let (x, y) = ((u - 0.5) * pose.scale, (v - 0.5) * pose.scale);
        (c + x * cos - y * sin, c + x * sin + y * cos)
    };
    let segments: Vec<_> = glyph
        .segments()
        .into_iter()
        .map(|(a, b)| (place(a), place(b)))
        .collect();
    let half = stroke_width / 2.0;
    let mut pixels = Vec::new();
    for y in 0..side {
        for x in 0..side {
            let p = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            if segments
                .iter()
                .any(|&(a, b)| point_segment_distance(p, a, b) <= half)
            {
                pixels.push((x, y));
            }
        }
    }
    GlyphMask { side, pixels }
}

/// Where one instance was drawn: its mask frame's top-left corner on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedInstance {
    pub image_id: ImageId,
    pub annotation_id: AnnotationId,
    pub category_id: CategoryId,
    pub pose: Pose,
    pub offset: (i64, i64),
}

/// Everything needed to regenerate or audit a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub config: SceneConfig,
    pub n_images: usize,
    pub instances: Vec<PlacedInstance>,
}

struct Placement {
    category: CategoryId,
    pose: Pose,
    offset: (i64, i64),
    bbox: BoundingBox,
    mask: GlyphMask,
}

struct Scene {
    pixels: GrayImage,
    placements: Vec<Placement>,
}

/// Ground truth of a placed mask: the tight box of its foreground pixels.
fn mask_box(mask: &GlyphMask, offset: (i64, i64)) -> BoundingBox {
    let (x0, y0, x1, y1) = mask.extent();
    BoundingBox::new(
        (i64::from(x0) + offset.0) as f64,
        (i64::from(y0) + offset.1) as f64,
        f64::from(x1 - x0 + 1),
        f64::from(y1 - y0 + 1),
    )
}

fn noise_background(cfg: &SceneConfig, rng: &mut seed::Rng) -> GrayImage {
    let amplitude = cfg.noise * 255.0;
    GrayImage::from_fn(cfg.width, cfg.height, |_, _| {
        Luma([(amplitude * rng.random::<f64>()) as u8])
    })
}

/// A scene of the configured size and noise with no glyphs.
pub fn background_scene(cfg: &SceneConfig, index: u64) -> GrayImage {
    let mut rng = seed::derived_rng(cfg.seed, &[seed::tag("background"), index]);
    noise_background(cfg, &mut rng)
}

fn sample_scene(cfg: &SceneConfig, glyphs: &[GlyphSpec], rng: &mut seed::Rng) -> Option<Scene> {
    let n_cat = cfg.n_categories;
    let spread = (2 * cfg.categories_per_image.ceil() as usize)
        .min(n_cat)
        .max(1)
        - 1;
    let k = if spread == 0 {
        1
    } else {
        let p = ((cfg.categories_per_image - 1.0) / spread as f64).clamp(0.0, 1.0);
        1 + Binomial::new(spread as u64, p).map_or(0, |d| d.sample(rng) as usize)
    };
    let extra_mean = cfg.instances_per_image - cfg.categories_per_image;
    let extra = if extra_mean > 0.0 {
        Poisson::new(extra_mean).map_or(0, |d| d.sample(rng) as usize)
    } else {
        0
    };
    let cats: Vec<usize> = sample(rng, n_cat, k).into_vec();
    let mut instances: Vec<usize> = cats.clone();
    instances.extend((0..extra).map(|_| cats[rng.random_range(0..k)]));

    let mut placements: Vec<Placement> = Vec::with_capacity(instances.len());
    for &c in &instances {
        let mut placed = None;
        for _ in 0..cfg.placement_retries {
            let pose = Pose {
                scale: cfg.glyph_size * rng.random_range(cfg.scale_jitter.0..=cfg.scale_jitter.1),
                rotation_deg: rng.random_range(-cfg.rotation_jitter..=cfg.rotation_jitter),
            };
            let mask = render_glyph(&glyphs[c], &pose, cfg.stroke_width);
            let (x0, y0, x1, y1) = mask.extent();
            let (w, h) = (i64::from(cfg.width), i64::from(cfg.height));
            let (lo_x, hi_x) = (-i64::from(x0), w - 1 - i64::from(x1));
            let (lo_y, hi_y) = (-i64::from(y0), h - 1 - i64::from(y1));
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            let offset = (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y));
            let bbox = mask_box(&mask, offset);
            if placements
                .iter()
                .all(|p| iou(&p.bbox, &bbox) <= cfg.overlap_cap)
            {
                placed = Some(Placement {
                    category: glyphs[c].category_id,
                    pose,
                    offset,
                    bbox,
                    mask,
                });
                break;
            }
        }
        placements.push(placed?);
    }

    let mut pixels = noise_background(cfg, rng);
    for p in &placements {
        for &(x, y) in &p.mask.pixels {
            let gx = (i64::from(x) + p.offset.0) as u32;
            let gy = (i64::from(y) + p.offset.1) as u32;
            pixels.put_pixel(gx, gy, Luma([255]));
        }
    }
    Some(Scene { pixels, placements })
}

pub fn glyphs_for(cfg: &SceneConfig) -> Vec<GlyphSpec> {
    (1..=cfg.n_categories as u64)
        .map(|c| GlyphSpec::generate(CategoryId(c), cfg.seed))
        .collect()
}

pub fn generate_dataset(cfg: &SceneConfig, n_images: usize) -> Result<Dataset> {
    generate_with_manifest(cfg, n_images).map(|(ds, _)| ds)
}

/// Builds `n_images` scenes (ids `1..=n`) with categories `1..=n_categories`.
/// A scene whose instances cannot all be placed is redrawn from a derived
/// seed, up to `image_attempts` times.
pub fn generate_with_manifest(
    cfg: &SceneConfig,
    n_images: usize,
) -> Result<(Dataset, SceneManifest)> {
    cfg.validate()?;
    let glyphs = glyphs_for(cfg);
    let scenes: Vec<Scene> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            (0..cfg.image_attempts)
                .find_map(|attempt| {
                    let mut rng = seed::derived_rng(
                        cfg.seed,
                        &[seed::tag("scene"), i as u64, attempt as u64],
                    );
                    sample_scene(cfg, &glyphs, &mut rng)
                })
                .ok_or_else(|| Error::Placement {
                    image_index: i,
                    attempts: cfg.image_attempts,
                    config: format!("{cfg:?}"),
                })
        })
        .collect::<Result<_>>()?;

    let mut images = Vec::with_capacity(n_images);
    let mut annotations = Vec::new();
    let mut instances = Vec::new();
    for (i, scene) in scenes.into_iter().enumerate() {
        let image_id = ImageId(i as u64 + 1);
        for p in &scene.placements {
            let annotation_id = AnnotationId(annotations.len() as u64 + 1);
            annotations.push(InstanceAnnotation {
                id: annotation_id,
                image_id,
                category_id: p.category,
                bbox: p.bbox,
                is_crowd: false,
            });
            instances.push(PlacedInstance {
                image_id,
                annotation_id,
                category_id: p.category,
                pose: p.pose,
                offset: p.offset,
            });
        }
        images.push(ImageRecord {
            id: image_id,
            width: cfg.width,
            height: cfg.height,
            file_name: Some(format!("images/{:06}.png", image_id.0)),
            pixels: Some(scene.pixels),
        });
    }
    let categories = glyphs
        .iter()
        .map(|g| CategoryRecord {
            id: g.category_id,
            name: format!("glyph_{:03}", g.category_id.0),
        })
        .collect();
    let ds = Dataset::new(images, annotations, categories)?;
    let manifest = SceneManifest {
        config: cfg.clone(),
        n_images,
        instances,
    };
    Ok((ds, manifest))
}

/// Re-renders one manifest entry and returns the tight box of its mask.
pub fn rerender_box(
    glyph: &GlyphSpec,
    instance: &PlacedInstance,
    stroke_width: f64,
) -> BoundingBox {
    mask_box(
        &render_glyph(glyph, &instance.pose, stroke_width),
        instance.offset,
    )
}
