use std::collections::HashMap;
use std::fmt::Write as _;

use super::boxes::iou_unchecked;
use super::losses::{GroundTruth, ScoredBox};
use super::matching::{confidence_order, precision_recall_f1, Counts};
use crate::dataset::CLASS_NAMES;
use crate::{Error, Result};

/// IoU thresholds, interpolation grid and the operating point used for
/// P/R/F1.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    /// Confidence cut for the P/R/F1 operating point.
    pub conf_threshold: f64,
    /// IoU threshold for the P/R/F1 operating point.
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            conf_threshold: 0.25,
            match_iou: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.len() != 10 {
            return Err(Error::Param(format!(
                "mAP@50-95 needs 10 IoU thresholds, got {}",
                self.iou_thresholds.len()
            )));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param("IoU thresholds must be strictly increasing".into()));
        }
        if self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Param("IoU thresholds must lie in [0, 1]".into()));
        }
        if self.recall_points < 2 {
            return Err(Error::Param("need at least 2 recall points".into()));
        }
        Ok(())
    }
}

/// A prediction tagged with the image it belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePred {
    pub image: usize,
    pub det: ScoredBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageGt {
    pub image: usize,
    pub gt: GroundTruth,
}

/// TP flags of one class's predictions in descending-confidence order,
/// plus the ground-truth count. Matching is greedy within each image.
fn tp_flags(preds: &[ImagePred], gts: &[ImageGt], class_id: usize, iou_thr: f64) -> (Vec<bool>, usize) {
    let mut per_image: HashMap<usize, Vec<(usize, bool)>> = HashMap::new();
    let cls_gts: Vec<&ImageGt> = gts.iter().filter(|g| g.gt.class_id == class_id).collect();
    for (i, g) in cls_gts.iter().enumerate() {
        per_image.entry(g.image).or_default().push((i, false));
    }
    let cls_preds: Vec<&ImagePred> = preds.iter().filter(|p| p.det.class_id == class_id).collect();
    let mut flags = Vec::with_capacity(cls_preds.len());
    for pi in confidence_order(cls_preds.iter().map(|p| p.det.confidence)) {
        let p = cls_preds[pi];
        let mut hit = false;
        if let Some(cands) = per_image.get_mut(&p.image) {
            let mut best: Option<(usize, f64)> = None;
            for (k, (gi, claimed)) in cands.iter().enumerate() {
                if *claimed {
                    continue;
                }
                let iou = iou_unchecked(&p.det.bbox, &cls_gts[*gi].gt.bbox);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                cands[k].1 = true;
                hit = true;
            }
        }
        flags.push(hit);
    }
    (flags, cls_gts.len())
}

/// `(recall, precision)` after each prediction in confidence order.
pub fn pr_curve(preds: &[ImagePred], gts: &[ImageGt], class_id: usize, iou_thr: f64) -> Vec<(f64, f64)> {
    let (flags, n_gt) = tp_flags(preds, gts, class_id, iou_thr);
    let (mut tp, mut fp) = (0usize, 0usize);
    flags
        .iter()
        .map(|&f| {
            if f {
                tp += 1;
            } else {
                fp += 1;
            }
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (recall, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// Area under the precision envelope sampled at `points` evenly spaced
/// recall levels in `[0, 1]`.
pub fn interpolated_ap(curve: &[(f64, f64)], points: usize) -> f64 {
    let mut env: Vec<f64> = curve.iter().map(|c| c.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..points {
        let r = k as f64 / (points - 1) as f64;
        // first curve point reaching recall r (curve recall is non-decreasing)
        let idx = curve.partition_point(|c| c.0 < r - 1e-12);
        if idx < curve.len() {
            sum += env[idx];
        }
    }
    sum / points as f64
}

/// AP of one class at one IoU threshold; `None` when the class has no
/// ground truth.
pub fn average_precision(preds: &[ImagePred], gts: &[ImageGt], class_id: usize, iou_thr: f64, points: usize) -> Option<f64> {
    if !gts.iter().any(|g| g.gt.class_id == class_id) {
        return None;
    }
    Some(interpolated_ap(&pr_curve(preds, gts, class_id, iou_thr), points))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEval {
    pub class_id: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    /// One AP per configured IoU threshold.
    pub ap: Vec<f64>,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassEval>,
    /// Classes without ground truth; they are left out of the means.
    pub excluded: Vec<usize>,
    pub map50: f64,
    pub map50_95: f64,
    pub config: EvalConfig,
}

/// Per-class AP over all thresholds, mAP@50 and mAP@50-95, and P/R/F1 at
/// the configured operating point.
pub fn evaluate(preds: &[ImagePred], gts: &[ImageGt], num_classes: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..num_classes {
        let gt_count = gts.iter().filter(|g| g.gt.class_id == c).count();
        let pred_count = preds.iter().filter(|p| p.det.class_id == c).count();
        if gt_count == 0 {
            excluded.push(c);
            continue;
        }
        let ap: Vec<f64> = cfg
            .iou_thresholds
            .iter()
            .map(|&t| average_precision(preds, gts, c, t, cfg.recall_points).unwrap_or(0.0))
            .collect();
        let kept: Vec<ImagePred> = preds
            .iter()
            .filter(|p| p.det.confidence >= cfg.conf_threshold)
            .copied()
            .collect();
        let (flags, n_gt) = tp_flags(&kept, gts, c, cfg.match_iou);
        let tp = flags.iter().filter(|&&f| f).count();
        let counts = Counts {
            tp,
            fp: flags.len() - tp,
            fn_: n_gt - tp,
        };
        let (precision, recall, f1) = precision_recall_f1(counts);
        classes.push(ClassEval {
            class_id: c,
            gt_count,
            pred_count,
            ap,
            counts,
            precision,
            recall,
            f1,
        });
    }
    let mean = |f: &dyn Fn(&ClassEval) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    let map50 = mean(&|c| c.ap[0]);
    let map50_95 = mean(&|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64);
    Ok(EvalReport {
        classes,
        excluded,
        map50,
        map50_95,
        config: cfg.clone(),
    })
}

/// Mean over thresholds and classes (zero-gt classes excluded).
pub fn map50_95(preds: &[ImagePred], gts: &[ImageGt], num_classes: usize) -> Result<f64> {
    Ok(evaluate(preds, gts, num_classes, &EvalConfig::default())?.map50_95)
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "class", "gt", "pred", "P", "R", "F1", "AP50", "AP50-95"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                class_name(c.class_id),
                c.gt_count,
                c.pred_count,
                c.precision,
                c.recall,
                c.f1,
                c.ap[0],
                c.ap.iter().sum::<f64>() / c.ap.len() as f64
            );
        }
        let _ = writeln!(s, "mAP@50     {:.4}", self.map50);
        let _ = writeln!(s, "mAP@50-95  {:.4}", self.map50_95);
        let _ = writeln!(
            s,
            "P/R/F1 at conf >= {} and IoU >= {}; {}-point interpolation",
            self.config.conf_threshold, self.config.match_iou, self.config.recall_points
        );
        if !self.excluded.is_empty() {
            let names: Vec<String> = self.excluded.iter().map(|&c| class_name(c)).collect();
            let _ = writeln!(s, "excluded from means (no ground truth): {}", names.join(", "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,gt,pred,tp,fp,fn,precision,recall,f1");
        for t in &self.config.iou_thresholds {
            let _ = write!(s, ",ap{:.0}", t * 100.0);
        }
        s.push('\n');
        for c in &self.classes {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                class_name(c.class_id),
                c.gt_count,
                c.pred_count,
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_,
                c.precision,
                c.recall,
                c.f1
            );
            for a in &c.ap {
                let _ = write!(s, ",{a}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "map50,{}", self.map50);
        let _ = writeln!(s, "map50_95,{}", self.map50_95);
        s
    }
}
