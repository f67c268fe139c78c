use super::boxes::{iou_unchecked, BBox};
use super::losses::{GroundTruth, ScoredBox};

/// Outcome of greedy matching. `matches` holds `(pred, gt, iou)` in the
/// order predictions were processed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.matches.len(),
            fp: self.unmatched_preds.len(),
            fn_: self.unmatched_gts.len(),
        }
    }
}

/// Indices sorted by descending confidence; equal confidences keep input
/// order.
pub(crate) fn confidence_order(conf: impl Iterator<Item = f64>) -> Vec<usize> {
    let c: Vec<f64> = conf.collect();
    let mut idx: Vec<usize> = (0..c.len()).collect();
    idx.sort_by(|&a, &b| c[b].total_cmp(&c[a]));
    idx
}

/// Core greedy rule over `(class, confidence, box)` predictions and
/// `(class, box)` ground truths: by descending confidence, each prediction
/// takes the unclaimed same-class ground truth of highest IoU accepted by
/// `accept`; ties go to the lower ground-truth index.
pub(crate) fn greedy_iou_match(
    preds: &[(usize, f64, BBox)],
    gts: &[(usize, BBox)],
    accept: impl Fn(f64) -> bool,
) -> MatchResult {
    let mut claimed = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for pi in confidence_order(preds.iter().map(|p| p.1)) {
        let (pc, _, pb) = preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gc, gb)) in gts.iter().enumerate() {
            if claimed[gi] || *gc != pc {
                continue;
            }
            let iou = iou_unchecked(&pb, gb);
            if accept(iou) && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) => {
                claimed[gi] = true;
                out.matches.push((pi, gi, iou));
            }
            None => out.unmatched_preds.push(pi),
        }
    }
    out.unmatched_gts = (0..gts.len()).filter(|&g| !claimed[g]).collect();
    out
}

/// Greedy confidence-ordered matching with `IoU >= iou_thr`.
pub fn match_detections(preds: &[ScoredBox], gts: &[GroundTruth], iou_thr: f64) -> MatchResult {
    let p: Vec<_> = preds.iter().map(|p| (p.class_id, p.confidence, p.bbox)).collect();
    let g: Vec<_> = gts.iter().map(|g| (g.class_id, g.bbox)).collect();
    greedy_iou_match(&p, &g, |iou| iou >= iou_thr)
}

/// True/false positive and false negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// `(precision, recall, f1)`; any 0/0 ratio is reported as 0.
pub fn precision_recall_f1(c: Counts) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}
