//! Central finite-difference checks of the detector's analytic gradients.

#![allow(dead_code)]

use gapbench::episodes::{EpisodeConfig, EpisodeStream};
use gapbench::seed;
use gapbench::siamdet::{DetectorConfig, DetectorModel, TrainConfig};
use gapbench::synthworld::{generate_dataset, SceneConfig};
use gapbench::Dataset;

use super::problems::Stream;

pub fn small_world(seed_value: u64) -> Dataset {
    let cfg = SceneConfig {
        width: 64,
        height: 64,
        n_categories: 6,
        instances_per_image: 3.0,
        categories_per_image: 2.0,
        ..SceneConfig::low_clutter(seed_value)
    };
    generate_dataset(&cfg, 8).expect("small world")
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Largest relative error between analytic and numeric gradients on one
/// random batch: every head weight and the bias, plus `extractor_samples`
/// extractor weights when non-zero. Extractor coordinates sitting on a kink
/// are skipped and counted in the second value.
pub fn max_relative_error(seed_value: u64, extractor_samples: usize) -> (f64, usize) {
    let ds = small_world(seed_value);
    let det = DetectorConfig::default();
    let mut model = DetectorModel::init(det.clone(), seed_value).expect("model");
    // spread the head so that logits leave the flat start region
    let mut s = Stream(seed::derive(seed_value, &[seed::tag("gradcheck")]));
    model.head_weight.mapv_inplace(|_| s.unit() - 0.5);
    model.head_bias = 2.0 * s.unit() - 1.0;

    let ep_cfg = EpisodeConfig {
        reference_size: det.reference_size,
        context_margin: 0.0,
    };
    let mut stream = EpisodeStream::new(&ds, ep_cfg, seed_value).expect("stream");
    let episodes = (0..2)
        .map(|_| stream.next_episode().expect("episode"))
        .collect();
    let train_cfg = TrainConfig::default();
    let batch = model
        .prepare_batch(&ds, episodes, &train_cfg, &mut seed::rng(s.next_u64()))
        .expect("batch");
    let (_, grads) = model
        .batch_loss_and_grad(&batch, extractor_samples > 0)
        .expect("grad");

    let eps = 1e-6;
    // central difference, or None when halving the step changes it by more
    // than smooth curvature allows (a ReLU or |.| kink lies within the step)
    let numeric = |m: &mut DetectorModel, get: &dyn Fn(&mut DetectorModel) -> &mut f64| {
        let orig = *get(m);
        let mut central = |h: f64| {
            *get(m) = orig + h;
            let up = m.batch_loss(&batch).expect("loss");
            *get(m) = orig - h;
            let down = m.batch_loss(&batch).expect("loss");
            *get(m) = orig;
            (up - down) / (2.0 * h)
        };
        let (fine, coarse) = (central(eps), central(2.0 * eps));
        ((fine - coarse).abs() <= 1e-9 + 1e-6 * fine.abs()).then_some(fine)
    };
    let mut worst = 0.0f64;
    for k in 0..model.head_weight.len() {
        let n = numeric(&mut model, &|m| &mut m.head_weight[k]).expect("head loss is smooth");
        worst = worst.max(relative_error(grads.head_weight[k], n));
    }
    let n = numeric(&mut model, &|m| &mut m.head_bias).expect("head loss is smooth");
    worst = worst.max(relative_error(grads.head_bias, n));

    let mut skipped = 0;
    for _ in 0..extractor_samples {
        let l = s.below(model.layers.len() as u64) as usize;
        let (rows, cols) = model.layers[l].weight.dim();
        if s.unit() < 0.8 {
            let (r, c) = (s.below(rows as u64) as usize, s.below(cols as u64) as usize);
            if let Some(n) = numeric(&mut model, &|m| &mut m.layers[l].weight[(r, c)]) {
                worst = worst.max(relative_error(grads.layers[l].0[(r, c)], n));
            } else {
                skipped += 1;
            }
        } else {
            let c = s.below(cols as u64) as usize;
            if let Some(n) = numeric(&mut model, &|m| &mut m.layers[l].bias[c]) {
                worst = worst.max(relative_error(grads.layers[l].1[c], n));
            } else {
                skipped += 1;
            }
        }
    }
    (worst, skipped)
}
