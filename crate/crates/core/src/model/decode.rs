use crate::metrics::{iou_unchecked, BBox};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One decoded box in image-normalised coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub num_classes: usize,
    pub reg_max: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

/// Decode raw head maps into per-image detections.
///
/// Each map is `[N, 4 * reg_max + classes, H, W]` at the matching stride.
/// Box sides are softmax expectations over `reg_max` bins (left, top,
/// right, bottom) scaled by the stride from the cell centre; each cell
/// keeps its best class when its sigmoid score exceeds the threshold.
/// Corners are clipped to the image before normalising.
pub fn decode_predictions(maps: &[Tensor], strides: &[usize], cfg: DecodeConfig) -> Result<Vec<Vec<Detection>>> {
    for (name, v) in [("conf_threshold", cfg.conf_threshold), ("nms_iou", cfg.nms_iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Param(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if maps.is_empty() || maps.len() != strides.len() {
        return Err(Error::Param(format!(
            "{} maps for {} strides",
            maps.len(),
            strides.len()
        )));
    }
    let r = cfg.reg_max;
    let per_cell = 4 * r + cfg.num_classes;
    let n = maps[0].batch();
    let img_h = (maps[0].height() * strides[0]) as f64;
    let img_w = (maps[0].width() * strides[0]) as f64;
    for m in maps {
        if m.channels() != per_cell || m.batch() != n {
            return Err(Error::shape(
                "decode",
                format!("map {:?}, expected {per_cell} channels and batch {n}", m.shape()),
            ));
        }
    }

    let mut out = Vec::with_capacity(n);
    let mut bins = vec![0.0; r];
    for b in 0..n {
        let mut cands = Vec::new();
        for (m, &s) in maps.iter().zip(strides) {
            let [_, _, h, w] = m.shape();
            let s = s as f64;
            for y in 0..h {
                for x in 0..w {
                    let (mut best, mut best_c) = (f64::NEG_INFINITY, 0);
                    for c in 0..cfg.num_classes {
                        let v = m.at(b, 4 * r + c, y, x);
                        if v > best {
                            best = v;
                            best_c = c;
                        }
                    }
                    let score = sigmoid(best);
                    if score <= cfg.conf_threshold {
                        continue;
                    }
                    let mut d = [0.0; 4];
                    for (side, dist) in d.iter_mut().enumerate() {
                        for (i, v) in bins.iter_mut().enumerate() {
                            *v = m.at(b, side * r + i, y, x);
                        }
                        *dist = dfl_expectation(&bins) * s;
                    }
                    let (ax, ay) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    let x1 = ((ax - d[0]) / img_w).clamp(0.0, 1.0);
                    let y1 = ((ay - d[1]) / img_h).clamp(0.0, 1.0);
                    let x2 = ((ax + d[2]) / img_w).clamp(0.0, 1.0);
                    let y2 = ((ay + d[3]) / img_h).clamp(0.0, 1.0);
                    if x2 <= x1 || y2 <= y1 {
                        continue;
                    }
                    cands.push(Detection {
                        class_id: best_c,
                        score,
                        bbox: BBox::from_corners(x1, y1, x2, y2),
                    });
                }
            }
        }
        out.push(nms(cands, cfg.nms_iou));
    }
    Ok(out)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Expected bin index under a softmax over `logits`.
pub fn dfl_expectation(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut e = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let p = (l - m).exp();
        z += p;
        e += p * i as f64;
    }
    e / z
}

/// Class-wise greedy suppression: highest score first, drop any box whose
/// IoU with a kept box of the same class exceeds `iou_thr`.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou_unchecked(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}
