//! Brute-force reference implementations used by the integration and
//! acceptance tests. They share no code with the library.

#![allow(dead_code)]

/// Box as `[x, y, w, h]`.
pub type Rect = [f64; 4];

pub fn iou(a: Rect, b: Rect) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

fn covered(det: Rect, crowd: Rect) -> f64 {
    let ix = ((det[0] + det[2]).min(crowd[0] + crowd[2]) - det[0].max(crowd[0])).max(0.0);
    let iy = ((det[1] + det[3]).min(crowd[1] + crowd[3]) - det[1].max(crowd[1])).max(0.0);
    if det[2] * det[3] <= 0.0 {
        0.0
    } else {
        ix * iy / (det[2] * det[3])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Det {
    pub image: u64,
    pub score: f64,
    pub rect: Rect,
}

#[derive(Debug, Clone, Copy)]
pub struct Gt {
    pub image: u64,
    pub rect: Rect,
    pub crowd: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interp {
    Points(usize),
    All,
}

/// Greedy matching in descending score order (ties by input position); each
/// detection takes the unmatched non-crowd box of its image with the highest
/// IoU at or above `thr` (ties by position). Unmatched detections covered by
/// a crowd region are ignored. Returns one `Some(tp)` per counted detection.
fn outcomes(dets: &[Det], gts: &[Gt], thr: f64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // insertion sort keeps equal scores in input order
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j - 1]].score < dets[idx[j]].score {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for &d in &idx {
        let det = dets[d];
        let mut best: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.image != det.image || gt.crowd || taken[g] {
                continue;
            }
            let o = iou(det.rect, gt.rect);
            if o >= thr && best.is_none_or(|b| o > iou(det.rect, gts[b].rect)) {
                best = Some(g);
            }
        }
        match best {
            Some(g) => {
                taken[g] = true;
                out.push(true);
            }
            None => {
                let ignored = gts.iter().any(|gt| {
                    gt.image == det.image && gt.crowd && covered(det.rect, gt.rect) >= thr
                });
                if !ignored {
                    out.push(false);
                }
            }
        }
    }
    out
}

/// AP by recomputing precision and recall of every prefix from scratch.
pub fn average_precision(dets: &[Det], gts: &[Gt], thr: f64, interp: Interp) -> Option<f64> {
    let n_pos = gts.iter().filter(|g| !g.crowd).count();
    if n_pos == 0 {
        return None;
    }
    let hits = outcomes(dets, gts, thr);
    let pr: Vec<(f64, f64)> = (1..=hits.len())
        .map(|k| {
            let tp = hits[..k].iter().filter(|&&h| h).count() as f64;
            (tp / k as f64, tp / n_pos as f64)
        })
        .collect();
    let best_from = |level: f64| {
        pr.iter()
            .filter(|(_, r)| *r >= level)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max)
    };
    Some(match interp {
        Interp::Points(n) => {
            let mut sum = 0.0;
            for t in 0..n {
                sum += best_from(t as f64 / (n - 1) as f64);
            }
            sum / n as f64
        }
        Interp::All => {
            let mut area = 0.0;
            let mut prev = 0.0;
            for &(_, r) in &pr {
                if r > prev {
                    area += (r - prev) * best_from(r);
                    prev = r;
                }
            }
            area
        }
    })
}

/// Greedy suppression by repeated arg-max over the survivors.
pub fn nms(boxes: &[(Rect, f64)], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].1 > boxes[b].1) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && iou(boxes[b].0, boxes[i].0) > thr {
                alive[i] = false;
            }
        }
    }
    keep
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}
