//! Small Siamese matching detector.
//!
//! One convolutional extractor (valid convolutions, ReLU) embeds both the
//! scene and the reference crop. The reference map is average-pooled to a
//! `C`-vector; every scene cell gets `[f, |f - r|]` (2C channels). A linear
//! head scores square and rectangular windows of cells from the window mean
//! of those channels plus a one-hot window-shape code, and overlapping
//! windows are suppressed greedily.
//!
//! Training minimizes the logistic loss over sampled windows of training
//! episodes with mini-batch SGD (momentum). Positives are windows with
//! IoU >= 0.5 against a label-1 box; negatives are capped at
//! `negative_ratio` per positive, half taken from windows on label-0 boxes.

use std::io::Write;
use std::path::Path;

use image::GrayImage;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{BoundingBox, Dataset};
use crate::episodes::{EpisodeStream, ReferenceCrop, TrainingEpisode};
use crate::error::{Error, Result};
use crate::matcheval::iou;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

/// Window extent in feature cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceFusion {
    /// Average the reference embeddings into one vector.
    #[default]
    MeanEmbedding,
    /// Score against each reference and keep the best score per window.
    MaxScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub layers: Vec<ConvSpec>,
    pub windows: Vec<WindowShape>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Highest-scoring windows kept before suppression.
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
    pub reference_size: u32,
    pub fusion: ReferenceFusion,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let sq = |n| WindowShape { w: n, h: n };
        Self {
            layers: vec![
                ConvSpec {
                    kernel: 3,
                    stride: 2,
                    out_channels: 8,
                },
                ConvSpec {
                    kernel: 3,
                    stride: 2,
                    out_channels: 16,
                },
                ConvSpec {
                    kernel: 3,
                    stride: 1,
                    out_channels: 16,
                },
            ],
            windows: vec![sq(3), sq(4), sq(5), sq(6)],
            score_threshold: 0.1,
            nms_iou: 0.3,
            pre_nms_top_k: 300,
            max_detections: 100,
            reference_size: 16,
            fusion: ReferenceFusion::MeanEmbedding,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers.is_empty() || self.windows.is_empty() {
            return bad("detector needs at least one layer and one window shape");
        }
        if self
            .layers
            .iter()
            .any(|l| l.kernel == 0 || l.stride == 0 || l.out_channels == 0)
        {
            return bad("layer kernel, stride and channels must be positive");
        }
        if self.windows.iter().any(|w| w.w == 0 || w.h == 0) {
            return bad("window shapes must be non-empty");
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0)
            || !(self.nms_iou > 0.0 && self.nms_iou < 1.0)
        {
            return bad("score_threshold and nms_iou must lie in (0, 1)");
        }
        if (self.reference_size as usize) < self.geometry().receptive_field {
            return bad("reference_size is smaller than the receptive field");
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn geometry(&self) -> Geometry {
        let mut rf = 1;
        let mut jump = 1;
        let mut first = 0.5;
        for l in &self.layers {
            rf += (l.kernel - 1) * jump;
            first += ((l.kernel - 1) as f64 / 2.0) * jump as f64;
            jump *= l.stride;
        }
        Geometry {
            receptive_field: rf,
            stride: jump,
            first_center: first,
        }
    }

    fn head_len(&self) -> usize {
        2 * self.channels() + self.windows.len()
    }
}

/// Mapping between feature cells and pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub receptive_field: usize,
    pub stride: usize,
    /// Pixel coordinate of the center of cell 0.
    pub first_center: f64,
}

impl Geometry {
    /// Pixel box covered by the cells `[i, i + h) x [j, j + w)`.
    pub fn window_box(&self, i: usize, j: usize, shape: WindowShape) -> BoundingBox {
        let s = self.stride as f64;
        let x0 = self.first_center - s / 2.0 + j as f64 * s;
        let y0 = self.first_center - s / 2.0 + i as f64 * s;
        BoundingBox::new(x0, y0, shape.w as f64 * s, shape.h as f64 * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    FixedRandom,
    #[default]
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    /// Episodes per epoch; defaults to the number of trainable images.
    pub episodes_per_epoch: Option<usize>,
    pub batch_episodes: usize,
    /// Largest number of negative windows per positive window.
    pub negative_ratio: usize,
    pub max_positives: usize,
    pub seed: u64,
    pub extractor_mode: ExtractorMode,
    /// Replace every training reference with an all-black raster.
    pub empty_references: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(5.0),
            epochs: 4,
            episodes_per_epoch: None,
            batch_episodes: 4,
            negative_ratio: 3,
            max_positives: 32,
            seed: 0,
            extractor_mode: ExtractorMode::Trained,
            empty_references: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_episodes == 0 || self.negative_ratio == 0 {
            return Err(Error::Config(
                "learning_rate must be > 0; batch_episodes and negative_ratio >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub in_channels: usize,
    /// `(kernel * kernel * in_channels, out_channels)`, rows ordered `(ky, kx, c)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

struct ConvCache {
    input_dim: (usize, usize, usize),
    cols: Array2<f64>,
    pre: Array2<f64>,
}

fn im2col(input: &Array3<f64>, k: usize, s: usize) -> (Array2<f64>, usize, usize) {
    let (h, w, c) = input.dim();
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let kc = k * c;
    let mut cols = Array2::zeros((oh * ow, k * kc));
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * k * kc;
            for ky in 0..k {
                let start = ((oy * s + ky) * w + ox * s) * c;
                dst[row + ky * kc..row + (ky + 1) * kc].copy_from_slice(&src[start..start + kc]);
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &Array2<f64>, dim: (usize, usize, usize), k: usize, s: usize) -> Array3<f64> {
    let (h, w, c) = dim;
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let kc = k * c;
    let mut out = Array3::zeros(dim);
    let dst = out.as_slice_mut().expect("fresh array");
    let src = cols.as_slice().expect("standard layout");
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * k * kc;
            for ky in 0..k {
                let start = ((oy * s + ky) * w + ox * s) * c;
                for (d, v) in dst[start..start + kc]
                    .iter_mut()
                    .zip(&src[row + ky * kc..row + (ky + 1) * kc])
                {
                    *d += v;
                }
            }
        }
    }
    out
}

impl ConvLayer {
    fn forward(&self, input: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (cols, oh, ow) = im2col(input, self.spec.kernel, self.spec.stride);
        let mut pre = cols.dot(&self.weight);
        pre += &self.bias;
        let out = pre
            .mapv(|v| v.max(0.0))
            .into_shape_with_order((oh, ow, self.spec.out_channels))
            .expect("conv output shape");
        let cache = ConvCache {
            input_dim: input.dim(),
            cols,
            pre,
        };
        (out, cache)
    }

    /// Accumulates weight gradients; returns the input gradient when asked.
    fn backward(
        &self,
        cache: &ConvCache,
        d_out: Array3<f64>,
        grad: &mut (Array2<f64>, Array1<f64>),
        want_input: bool,
    ) -> Option<Array3<f64>> {
        let n = cache.pre.nrows();
        let mut dz = d_out
            .into_shape_with_order((n, self.spec.out_channels))
            .expect("conv grad shape");
        ndarray::Zip::from(&mut dz)
            .and(&cache.pre)
            .for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        grad.0 += &cache.cols.t().dot(&dz);
        grad.1 += &dz.sum_axis(Axis(0));
        want_input.then(|| {
            let d_cols = dz.dot(&self.weight.t());
            col2im(&d_cols, cache.input_dim, self.spec.kernel, self.spec.stride)
        })
    }
}

/// Cell grid of activations, `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub geometry: Geometry,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub layers: Vec<ConvLayer>,
    /// Head weights: `[image (C), |image - ref| (C), window one-hot]`.
    pub head_weight: Array1<f64>,
    pub head_bias: f64,
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub head_weight: Array1<f64>,
    pub head_bias: f64,
}

impl Gradients {
    fn zeros_like(model: &DetectorModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect(),
            head_weight: Array1::zeros(model.head_weight.len()),
            head_bias: 0.0,
        }
    }

    fn scale(&mut self, f: f64) {
        for (w, b) in &mut self.layers {
            *w *= f;
            *b *= f;
        }
        self.head_weight *= f;
        self.head_bias *= f;
    }

    fn norm(&self) -> f64 {
        let mut sq = self.head_bias * self.head_bias + self.head_weight.mapv(|v| v * v).sum();
        for (w, b) in &self.layers {
            sq += w.mapv(|v| v * v).sum() + b.mapv(|v| v * v).sum();
        }
        sq.sqrt()
    }
}

pub fn gray_to_array(pixels: &GrayImage) -> Array3<f64> {
    let (w, h) = pixels.dimensions();
    Array3::from_shape_vec(
        (h as usize, w as usize, 1),
        pixels
            .as_raw()
            .iter()
            .map(|&v| f64::from(v) / 255.0)
            .collect(),
    )
    .expect("raster shape")
}

/// One window considered by the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSample {
    pub shape: usize,
    pub i: usize,
    pub j: usize,
    pub label: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z)) - y z`, the logistic loss on logit `z`.
fn logistic_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

/// Greedy suppression: repeatedly keep the best remaining box and drop every
/// box whose IoU with it exceeds `iou_threshold`. Ties keep input order.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (n, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[n + 1..] {
            if !suppressed[j] && iou(&boxes[i].bbox, &boxes[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

impl DetectorModel {
    /// He-initialized extractor, small random head.
    pub fn init(config: DetectorConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::derived_rng(seed_value, &[seed::tag("init")]);
        let mut in_ch = 1;
        let mut layers = Vec::new();
        for spec in &config.layers {
            let fan_in = spec.kernel * spec.kernel * in_ch;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let weight =
                Array2::from_shape_fn((fan_in, spec.out_channels), |_| normal.sample(&mut rng));
            layers.push(ConvLayer {
                spec: *spec,
                in_channels: in_ch,
                weight,
                bias: Array1::from_elem(spec.out_channels, 0.01),
            });
            in_ch = spec.out_channels;
        }
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        let head_weight = Array1::from_shape_fn(config.head_len(), |_| normal.sample(&mut rng));
        Ok(Self {
            config,
            layers,
            head_weight,
            head_bias: -1.0,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.config.geometry()
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let rf = self.geometry().receptive_field;
        if h < rf || w < rf {
            return Err(Error::RasterTooSmall {
                width: w,
                height: h,
                min: rf,
            });
        }
        Ok(())
    }

    fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x).0;
        }
        x
    }

    fn forward_cached(&self, input: &Array3<f64>) -> (Array3<f64>, Vec<ConvCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x);
            caches.push(cache);
            x = y;
        }
        (x, caches)
    }

    fn backward_extractor(&self, caches: &[ConvCache], d_out: Array3<f64>, grads: &mut Gradients) {
        let mut d = d_out;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            match layer.backward(&caches[idx], d, &mut grads.layers[idx], idx > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    /// Runs the shared extractor on a raster.
    pub fn extract_features(&self, pixels: &GrayImage) -> Result<FeatureMap> {
        let input = gray_to_array(pixels);
        let (h, w, _) = input.dim();
        self.check_size(h, w)?;
        Ok(FeatureMap {
            data: self.forward(&input),
            geometry: self.geometry(),
        })
    }

    /// Global average of a crop's feature map.
    pub fn embed_reference(&self, crop: &ReferenceCrop) -> Result<Array1<f64>> {
        let pixels = crop.pixels.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "reference from annotation {} has no pixels",
                crop.source_annotation_id
            ))
        })?;
        let fm = self.extract_features(pixels)?;
        Ok(pool(&fm.data))
    }

    /// Mean of the per-crop embeddings.
    pub fn embed_references(&self, crops: &[ReferenceCrop]) -> Result<Array1<f64>> {
        if crops.is_empty() {
            return Err(Error::Config("at least one reference is required".into()));
        }
        let mut acc = Array1::zeros(self.config.channels());
        for c in crops {
            acc += &self.embed_reference(c)?;
        }
        Ok(acc / crops.len() as f64)
    }

    /// Per-cell head projection of the matched map, `(H, W)`.
    fn projection(&self, matched: &Array3<f64>) -> Array2<f64> {
        let c2 = matched.dim().2;
        let w = self.head_weight.slice(s![..c2]);
        let (h, wd, _) = matched.dim();
        let flat = matched
            .view()
            .into_shape_with_order((h * wd, c2))
            .expect("matched shape");
        flat.dot(&w)
            .into_shape_with_order((h, wd))
            .expect("projection shape")
    }

    /// Logit of every window; `out[shape][(i, j)]`.
    fn window_logits(&self, proj: &Array2<f64>) -> Vec<Array2<f64>> {
        let (h, w) = proj.dim();
        let integral = integral_image(proj);
        let c2 = 2 * self.config.channels();
        self.config
            .windows
            .iter()
            .enumerate()
            .map(|(si, shape)| {
                if shape.h > h || shape.w > w {
                    return Array2::zeros((0, 0));
                }
                let area = (shape.h * shape.w) as f64;
                let bias = self.head_weight[c2 + si] + self.head_bias;
                Array2::from_shape_fn((h - shape.h + 1, w - shape.w + 1), |(i, j)| {
                    window_sum(&integral, i, j, *shape) / area + bias
                })
            })
            .collect()
    }

    /// Scores windows of a precomputed scene map against reference crops.
    pub fn detect_features(
        &self,
        features: &FeatureMap,
        image_size: (u32, u32),
        references: &[ReferenceCrop],
    ) -> Result<Vec<ScoredBox>> {
        let logits: Vec<Array2<f64>> = match self.config.fusion {
            ReferenceFusion::MeanEmbedding => {
                let r = self.embed_references(references)?;
                let matched = match_features(features, &r)?;
                self.window_logits(&self.projection(&matched))
            }
            ReferenceFusion::MaxScore => {
                if references.is_empty() {
                    return Err(Error::Config("at least one reference is required".into()));
                }
                let mut best: Option<Vec<Array2<f64>>> = None;
                for crop in references {
                    let r = self.embed_reference(crop)?;
                    let matched = match_features(features, &r)?;
                    let l = self.window_logits(&self.projection(&matched));
                    best = Some(match best {
                        None => l,
                        Some(mut b) => {
                            for (bm, lm) in b.iter_mut().zip(&l) {
                                ndarray::Zip::from(bm)
                                    .and(lm)
                                    .for_each(|x, &y| *x = x.max(y));
                            }
                            b
                        }
                    });
                }
                best.expect("non-empty references")
            }
        };

        let geo = features.geometry;
        let (iw, ih) = (f64::from(image_size.0), f64::from(image_size.1));
        let mut candidates = Vec::new();
        for (si, map) in logits.iter().enumerate() {
            let shape = self.config.windows[si];
            for ((i, j), &z) in map.indexed_iter() {
                let score = sigmoid(z);
                if score > self.config.score_threshold {
                    if let Some(bbox) = geo.window_box(i, j, shape).clamp_to(iw, ih) {
                        candidates.push(ScoredBox { bbox, score });
                    }
                }
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        candidates.truncate(self.config.pre_nms_top_k);
        let mut kept: Vec<ScoredBox> = nms(&candidates, self.config.nms_iou)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        kept.truncate(self.config.max_detections);
        Ok(kept)
    }

    pub fn detect(
        &self,
        pixels: &GrayImage,
        references: &[ReferenceCrop],
    ) -> Result<Vec<ScoredBox>> {
        let features = self.extract_features(pixels)?;
        self.detect_features(&features, pixels.dimensions(), references)
    }

    /// Windows used by the loss for one episode.
    pub fn plan_windows(
        &self,
        episode: &TrainingEpisode,
        map_dim: (usize, usize),
        negative_ratio: usize,
        max_positives: usize,
        rng: &mut seed::Rng,
    ) -> Vec<WindowSample> {
        let geo = self.geometry();
        let (h, w) = map_dim;
        let mut positives = Vec::new();
        let mut hard = Vec::new();
        let mut easy = Vec::new();
        for (si, shape) in self.config.windows.iter().enumerate() {
            if shape.h > h || shape.w > w {
                continue;
            }
            for i in 0..=h - shape.h {
                for j in 0..=w - shape.w {
                    let wb = geo.window_box(i, j, *shape);
                    let mut pos = false;
                    let mut other = false;
                    for (b, &label) in episode.boxes.iter().zip(&episode.labels) {
                        if iou(&wb, b) >= 0.5 {
                            if label == 1 {
                                pos = true;
                            } else {
                                other = true;
                            }
                        }
                    }
                    let sample = (si, i, j);
                    if pos {
                        positives.push(sample);
                    } else if other {
                        hard.push(sample);
                    } else {
                        easy.push(sample);
                    }
                }
            }
        }
        let pick = |pool: &[(usize, usize, usize)], n: usize, rng: &mut seed::Rng| {
            let n = n.min(pool.len());
            let mut idx = sample(rng, pool.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|k| pool[k]).collect::<Vec<_>>()
        };
        let positives = pick(&positives, max_positives, rng);
        let n_neg = negative_ratio * positives.len().max(1);
        let hard = pick(&hard, n_neg / 2, rng);
        let easy = pick(&easy, n_neg - hard.len(), rng);
        let as_samples = |v: Vec<(usize, usize, usize)>, label: f64| {
            v.into_iter()
                .map(move |(shape, i, j)| WindowSample { shape, i, j, label })
        };
        as_samples(positives, 1.0)
            .chain(as_samples(hard, 0.0))
            .chain(as_samples(easy, 0.0))
            .collect()
    }

    /// Mean logistic loss of one episode over `windows`, with gradients added
    /// to `grads` (scaled by `weight`) when given. The extractor is
    /// backpropagated only when `train_extractor` is set.
    pub fn episode_loss(
        &self,
        episode: &TrainingEpisode,
        scene: &Array3<f64>,
        windows: &[WindowSample],
        grads: Option<(&mut Gradients, f64, bool)>,
    ) -> Result<f64> {
        let ref_pixels = episode
            .reference
            .pixels
            .as_ref()
            .ok_or_else(|| Error::Config("training reference has no pixels".into()))?;
        let ref_input = gray_to_array(ref_pixels);
        self.check_size(scene.dim().0, scene.dim().1)?;
        self.check_size(ref_input.dim().0, ref_input.dim().1)?;
        let want_grads = grads.is_some();
        let (feat, img_caches) = self.forward_cached(scene);
        let (ref_feat, ref_caches) = self.forward_cached(&ref_input);
        let r = pool(&ref_feat);
        let (h, w, c) = feat.dim();
        let mut matched = Array3::zeros((h, w, 2 * c));
        matched.slice_mut(s![.., .., ..c]).assign(&feat);
        let diff = &feat - &r;
        matched
            .slice_mut(s![.., .., c..])
            .assign(&diff.mapv(f64::abs));
        let proj = self.projection(&matched);
        let integral = integral_image(&proj);

        if windows.is_empty() {
            return Ok(0.0);
        }
        let n = windows.len() as f64;
        let mut loss = 0.0;
        let mut d_logits = Vec::with_capacity(windows.len());
        for win in windows {
            let shape = self.config.windows[win.shape];
            let area = (shape.h * shape.w) as f64;
            let z = window_sum(&integral, win.i, win.j, shape) / area
                + self.head_weight[2 * c + win.shape]
                + self.head_bias;
            loss += logistic_loss(z, win.label) / n;
            d_logits.push((sigmoid(z) - win.label) / n);
        }
        let Some((grads, weight, train_extractor)) = grads else {
            return Ok(loss);
        };
        debug_assert!(want_grads);

        // Spread each window's logit gradient over its cells.
        let mut diffs = Array2::<f64>::zeros((h + 1, w + 1));
        for (win, &g) in windows.iter().zip(&d_logits) {
            let shape = self.config.windows[win.shape];
            let g = g * weight;
            let a = g / (shape.h * shape.w) as f64;
            diffs[(win.i, win.j)] += a;
            diffs[(win.i, win.j + shape.w)] -= a;
            diffs[(win.i + shape.h, win.j)] -= a;
            diffs[(win.i + shape.h, win.j + shape.w)] += a;
            grads.head_weight[2 * c + win.shape] += g;
            grads.head_bias += g;
        }
        let d_proj = prefix_sum(&diffs, h, w);

        let flat = matched
            .view()
            .into_shape_with_order((h * w, 2 * c))
            .expect("matched shape");
        let dp_flat = d_proj
            .view()
            .into_shape_with_order(h * w)
            .expect("proj shape");
        let head_grad = flat.t().dot(&dp_flat);
        {
            let mut hw = grads.head_weight.slice_mut(s![..2 * c]);
            hw += &head_grad;
        }
        if !train_extractor {
            return Ok(loss);
        }

        let w_img = self.head_weight.slice(s![..c]);
        let w_l1 = self.head_weight.slice(s![c..2 * c]);
        let mut d_feat = Array3::<f64>::zeros((h, w, c));
        let mut d_ref = Array1::<f64>::zeros(c);
        for i in 0..h {
            for j in 0..w {
                let dp = d_proj[(i, j)];
                if dp == 0.0 {
                    continue;
                }
                for k in 0..c {
                    let sgn = signum0(diff[(i, j, k)]);
                    let l1 = dp * w_l1[k] * sgn;
                    d_feat[(i, j, k)] = dp * w_img[k] + l1;
                    d_ref[k] -= l1;
                }
            }
        }
        let (rh, rw, _) = ref_feat.dim();
        let cells = (rh * rw) as f64;
        let d_ref_feat = Array3::from_shape_fn((rh, rw, c), |(_, _, k)| d_ref[k] / cells);
        self.backward_extractor(&img_caches, d_feat, grads);
        self.backward_extractor(&ref_caches, d_ref_feat, grads);
        Ok(loss)
    }

    /// Mean episode loss and its gradient over a batch with fixed windows.
    pub fn batch_loss_and_grad(
        &self,
        batch: &[(TrainingEpisode, Array3<f64>, Vec<WindowSample>)],
        train_extractor: bool,
    ) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let weight = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for (ep, scene, windows) in batch {
            loss += weight
                * self.episode_loss(
                    ep,
                    scene,
                    windows,
                    Some((&mut grads, weight, train_extractor)),
                )?;
        }
        Ok((loss, grads))
    }

    pub fn batch_loss(
        &self,
        batch: &[(TrainingEpisode, Array3<f64>, Vec<WindowSample>)],
    ) -> Result<f64> {
        let weight = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for (ep, scene, windows) in batch {
            loss += weight * self.episode_loss(ep, scene, windows, None)?;
        }
        Ok(loss)
    }

    /// Pairs episodes with their scene tensors and sampled windows.
    pub fn prepare_batch(
        &self,
        ds: &Dataset,
        episodes: Vec<TrainingEpisode>,
        cfg: &TrainConfig,
        rng: &mut seed::Rng,
    ) -> Result<Vec<(TrainingEpisode, Array3<f64>, Vec<WindowSample>)>> {
        let geo = self.geometry();
        episodes
            .into_iter()
            .map(|ep| {
                let image = ds
                    .image(ep.image_id)
                    .ok_or(Error::UnknownImage(ep.image_id))?;
                let pixels = image
                    .pixels
                    .as_ref()
                    .ok_or(Error::MissingPixels(ep.image_id))?;
                let scene = gray_to_array(pixels);
                let (h, w, _) = scene.dim();
                self.check_size(h, w)?;
                let map_dim = (
                    (h - geo.receptive_field) / geo.stride + 1,
                    (w - geo.receptive_field) / geo.stride + 1,
                );
                let windows =
                    self.plan_windows(&ep, map_dim, cfg.negative_ratio, cfg.max_positives, rng);
                Ok((ep, scene, windows))
            })
            .collect()
    }

    fn apply(
        &mut self,
        grads: &Gradients,
        velocity: &mut Gradients,
        cfg: &TrainConfig,
        train_extractor: bool,
    ) {
        let lr = cfg.learning_rate;
        let mu = cfg.momentum;
        let wd = cfg.weight_decay;
        let step = |p: &mut f64, g: f64, v: &mut f64, decay: bool| {
            let g = if decay { g + wd * *p } else { g };
            *v = mu * *v + g;
            *p -= lr * *v;
        };
        if train_extractor {
            for ((layer, g), v) in self
                .layers
                .iter_mut()
                .zip(&grads.layers)
                .zip(&mut velocity.layers)
            {
                ndarray::Zip::from(&mut layer.weight)
                    .and(&g.0)
                    .and(&mut v.0)
                    .for_each(|p, &g, v| step(p, g, v, true));
                ndarray::Zip::from(&mut layer.bias)
                    .and(&g.1)
                    .and(&mut v.1)
                    .for_each(|p, &g, v| step(p, g, v, false));
            }
        }
        ndarray::Zip::from(&mut self.head_weight)
            .and(&grads.head_weight)
            .and(&mut velocity.head_weight)
            .for_each(|p, &g, v| step(p, g, v, true));
        step(
            &mut self.head_bias,
            grads.head_bias,
            &mut velocity.head_bias,
            false,
        );
    }
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pool(map: &Array3<f64>) -> Array1<f64> {
    let (h, w, c) = map.dim();
    map.view()
        .into_shape_with_order((h * w, c))
        .expect("feature shape")
        .mean_axis(Axis(0))
        .expect("non-empty map")
}

fn integral_image(map: &Array2<f64>) -> Array2<f64> {
    let (h, w) = map.dim();
    let mut s = Array2::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += map[(i, j)];
            s[(i + 1, j + 1)] = s[(i, j + 1)] + row;
        }
    }
    s
}

fn window_sum(integral: &Array2<f64>, i: usize, j: usize, shape: WindowShape) -> f64 {
    integral[(i + shape.h, j + shape.w)] - integral[(i, j + shape.w)] - integral[(i + shape.h, j)]
        + integral[(i, j)]
}

fn prefix_sum(diffs: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let up = if i > 0 { out[(i - 1, j)] } else { 0.0 };
            let left = if j > 0 { out[(i, j - 1)] } else { 0.0 };
            let diag = if i > 0 && j > 0 {
                out[(i - 1, j - 1)]
            } else {
                0.0
            };
            out[(i, j)] = diffs[(i, j)] + up + left - diag;
        }
    }
    out
}

/// `[f, |f - r|]` at every cell.
pub fn match_features(image: &FeatureMap, reference: &Array1<f64>) -> Result<Array3<f64>> {
    let (h, w, c) = image.data.dim();
    if reference.len() != c {
        return Err(Error::ChannelMismatch {
            image: c,
            reference: reference.len(),
        });
    }
    let mut out = Array3::zeros((h, w, 2 * c));
    out.slice_mut(s![.., .., ..c]).assign(&image.data);
    out.slice_mut(s![.., .., c..])
        .assign(&(&image.data - reference).mapv(f64::abs));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub loss_trace: Vec<LossPoint>,
}

/// Fits the head (and the extractor in `Trained` mode) on episodes drawn
/// from `stream`.
pub fn train_detector(
    ds: &Dataset,
    stream: &mut EpisodeStream<'_>,
    detector: &DetectorConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut images_per_category: std::collections::BTreeMap<_, std::collections::BTreeSet<_>> =
        Default::default();
    for a in ds.annotations.iter().filter(|a| !a.is_crowd) {
        images_per_category
            .entry(a.category_id)
            .or_default()
            .insert(a.image_id);
    }
    if !images_per_category.values().any(|imgs| imgs.len() >= 2) {
        return Err(Error::NoPositives(
            "no category has instances in two different images".into(),
        ));
    }
    let mut model = DetectorModel::init(detector.clone(), cfg.seed)?;
    let train_extractor = cfg.extractor_mode == ExtractorMode::Trained;
    let mut velocity = Gradients::zeros_like(&model);
    let per_epoch = cfg
        .episodes_per_epoch
        .unwrap_or_else(|| stream.image_count());
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_episodes);
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let episodes = (0..cfg.batch_episodes)
                .map(|_| {
                    stream.next_episode().map(|mut ep| {
                        if cfg.empty_references {
                            ep.reference = ep.reference.emptied(detector.reference_size);
                        }
                        ep
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rng = seed::derived_rng(cfg.seed, &[seed::tag("windows"), step as u64]);
            let batch = model.prepare_batch(ds, episodes, cfg, &mut rng)?;
            let (loss, mut grads) = model.batch_loss_and_grad(&batch, train_extractor)?;
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            model.apply(&grads, &mut velocity, cfg, train_extractor);
            trace.push(LossPoint { step, epoch, loss });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

pub fn write_loss_csv(path: impl AsRef<Path>, trace: &[LossPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in trace {
        w.serialize(p)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

const MAGIC: &[u8; 8] = b"SIAMDET\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    config: DetectorConfig,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f64>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn tensor(&mut self, expect_name: &str, expect_shape: &[usize]) -> Result<Vec<f64>> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::ModelFormat("tensor name is not UTF-8".into()))?;
        if name != expect_name {
            return Err(Error::ModelFormat(format!(
                "expected tensor {expect_name}, found {name}"
            )));
        }
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != expect_shape {
            return Err(Error::ModelFormat(format!(
                "tensor {name} has shape {shape:?}, expected {expect_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl DetectorModel {
    /// Magic, version, JSON header, then named little-endian f64 tensors
    /// with shape headers.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&ModelHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u32(&mut out, (2 * self.layers.len() + 2) as u32);
        for (i, l) in self.layers.iter().enumerate() {
            let (r, c) = l.weight.dim();
            put_tensor(
                &mut out,
                &format!("conv{i}.weight"),
                &[r, c],
                l.weight.iter().copied(),
            );
            put_tensor(
                &mut out,
                &format!("conv{i}.bias"),
                &[l.bias.len()],
                l.bias.iter().copied(),
            );
        }
        put_tensor(
            &mut out,
            "head.weight",
            &[self.head_weight.len()],
            self.head_weight.iter().copied(),
        );
        put_tensor(&mut out, "head.bias", &[1], std::iter::once(self.head_bias));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: ModelHeader = serde_json::from_slice(r.take(len)?)?;
        let mut model = DetectorModel::init(header.config, 0)?;
        let n = r.u32()? as usize;
        if n != 2 * model.layers.len() + 2 {
            return Err(Error::ModelFormat(format!("unexpected tensor count {n}")));
        }
        for (i, l) in model.layers.iter_mut().enumerate() {
            let (rows, cols) = l.weight.dim();
            let w = r.tensor(&format!("conv{i}.weight"), &[rows, cols])?;
            l.weight = Array2::from_shape_vec((rows, cols), w).expect("checked shape");
            let b = r.tensor(&format!("conv{i}.bias"), &[l.bias.len()])?;
            l.bias = Array1::from(b);
        }
        let hw = r.tensor("head.weight", &[model.head_weight.len()])?;
        model.head_weight = Array1::from(hw);
        model.head_bias = r.tensor("head.bias", &[1])?[0];
        if r.pos != bytes.len() {
            return Err(Error::ModelFormat("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
