use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Sub};

use super::boxes::BBox;
use super::matching::greedy_iou_match;
use crate::{Error, Result};

pub const CIOU_EPS: f64 = 1e-9;
/// Box-loss contribution of a ground truth that no prediction overlaps.
pub const UNMATCHED_GT_PENALTY: f64 = 2.0;
pub const DEFAULT_BOX_WEIGHT: f64 = 5.0;
const PROB_CLAMP: f64 = 1e-12;

/// Scalar arithmetic shared by plain values and forward-mode duals.
trait Real: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    fn lift(v: f64) -> Self;
    fn value(self) -> f64;
    fn atan(self) -> Self;

    fn max(self, o: Self) -> Self {
        if self.value() >= o.value() {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.value() <= o.value() {
            self
        } else {
            o
        }
    }
}

impl Real for f64 {
    fn lift(v: f64) -> Self {
        v
    }

    fn value(self) -> f64 {
        self
    }

    fn atan(self) -> Self {
        f64::atan(self)
    }
}

/// Value with partials along the four prediction coordinates.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn seed(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual { v, d }
    }

    fn scale(self, s: f64, v: f64) -> Self {
        Dual {
            v,
            d: self.d.map(|x| x * s),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual {
            v: q,
            d: std::array::from_fn(|i| (self.d[i] - q * o.d[i]) / o.v),
        }
    }
}

impl Real for Dual {
    fn lift(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }

    fn value(self) -> f64 {
        self.v
    }

    fn atan(self) -> Self {
        self.scale(1.0 / (1.0 + self.v * self.v), self.v.atan())
    }
}

fn ciou_generic<T: Real>(p: [T; 4], g: [T; 4]) -> T {
    let half = T::lift(0.5);
    let corners = |b: [T; 4]| (b[0] - half * b[2], b[1] - half * b[3], b[0] + half * b[2], b[1] + half * b[3]);
    let (px1, py1, px2, py2) = corners(p);
    let (gx1, gy1, gx2, gy2) = corners(g);
    let zero = T::lift(0.0);
    let iw = (px2.min(gx2) - px1.max(gx1)).max(zero);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(zero);
    let inter = iw * ih;
    // areas from the corners so identical boxes give IoU of exactly 1
    let union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter;
    let iou = inter / union;

    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let c2 = cw * cw + ch * ch;
    let dx = p[0] - g[0];
    let dy = p[1] - g[1];
    let rho2 = dx * dx + dy * dy;

    let da = (g[2] / g[3]).atan() - (p[2] / p[3]).atan();
    let v = T::lift(4.0 / (PI * PI)) * da * da;
    let one = T::lift(1.0);
    let alpha = v / ((one - iou) + v + T::lift(CIOU_EPS));
    one - iou + rho2 / c2 + alpha * v
}

fn coords(b: &BBox) -> [f64; 4] {
    [b.cx, b.cy, b.w, b.h]
}

/// Complete-IoU loss `1 - IoU + rho^2 / c^2 + alpha * v`.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    Ok(ciou_generic(coords(pred), coords(gt)))
}

/// CIoU loss and its gradient with respect to the predicted `(cx, cy, w, h)`.
pub fn ciou_loss_grad(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    pred.validate()?;
    gt.validate()?;
    let p = coords(pred);
    let out = ciou_generic(std::array::from_fn(|i| Dual::seed(p[i], i)), coords(gt).map(Dual::lift));
    Ok((out.v, out.d))
}

fn check_pairs(logits: &[f64], targets: &[f64]) -> Result<()> {
    if logits.len() != targets.len() {
        return Err(Error::Param(format!(
            "{} logits but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Param(format!("target {t} outside [0, 1]")));
    }
    Ok(())
}

/// Stable `-(t ln s(x) + (1 - t) ln(1 - s(x)))`.
pub fn bce_term(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy on logits; zero for empty input.
pub fn bce_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    check_pairs(logits, targets)?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    Ok(logits.iter().zip(targets).map(|(&x, &t)| bce_term(x, t)).sum::<f64>() / logits.len() as f64)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss: each BCE term times `(1 - p_t)^gamma`, optionally times
/// `alpha_t`. `gamma = 0` with no alpha reproduces [`bce_loss`] exactly.
pub fn focal_loss(logits: &[f64], targets: &[f64], gamma: f64, alpha: Option<f64>) -> Result<f64> {
    check_pairs(logits, targets)?;
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Param(format!("gamma must be >= 0, got {gamma}")));
    }
    if let Some(a) = alpha {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Param(format!("alpha must lie in [0, 1], got {a}")));
        }
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| {
            let mut term = bce_term(x, t);
            if gamma != 0.0 {
                let p = sigmoid(x);
                let pt = p * t + (1.0 - p) * (1.0 - t);
                term *= (1.0 - pt).powf(gamma);
            }
            if let Some(a) = alpha {
                term *= a * t + (1.0 - a) * (1.0 - t);
            }
            term
        })
        .sum();
    Ok(sum / logits.len() as f64)
}

/// BCE of a probability (clamped away from 0 and 1).
pub fn bce_prob(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// A scored, classed box as produced by decoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionLoss {
    pub box_term: f64,
    pub class_term: f64,
    pub total: f64,
    pub matched: usize,
    pub unmatched_gts: usize,
}

/// `box_weight * mean box loss + mean class BCE`.
///
/// Predictions, by descending confidence, claim the unclaimed ground truth
/// of highest IoU (> 0, any class). A matched pair contributes its CIoU
/// loss and a class target of 1 when the classes agree, else 0; leftover
/// predictions get target 0; leftover ground truths contribute
/// [`UNMATCHED_GT_PENALTY`] to the box mean.
pub fn detection_loss(preds: &[ScoredBox], gts: &[GroundTruth], box_weight: f64) -> Result<DetectionLoss> {
    for b in preds.iter().map(|p| &p.bbox).chain(gts.iter().map(|g| &g.bbox)) {
        b.validate()?;
    }
    if let Some(p) = preds.iter().find(|p| !(0.0..=1.0).contains(&p.confidence)) {
        return Err(Error::Param(format!("confidence {} outside [0, 1]", p.confidence)));
    }
    let pb: Vec<(usize, f64, BBox)> = preds.iter().map(|p| (0, p.confidence, p.bbox)).collect();
    let gb: Vec<(usize, BBox)> = gts.iter().map(|g| (0, g.bbox)).collect();
    let m = greedy_iou_match(&pb, &gb, |iou| iou > 0.0);

    let mut box_sum = 0.0;
    let mut targets = vec![0.0; preds.len()];
    for &(pi, gi, _) in &m.matches {
        box_sum += ciou_loss(&preds[pi].bbox, &gts[gi].bbox)?;
        if preds[pi].class_id == gts[gi].class_id {
            targets[pi] = 1.0;
        }
    }
    box_sum += UNMATCHED_GT_PENALTY * m.unmatched_gts.len() as f64;
    let box_n = m.matches.len() + m.unmatched_gts.len();
    let box_term = if box_n == 0 { 0.0 } else { box_sum / box_n as f64 };
    let class_term = if preds.is_empty() {
        0.0
    } else {
        preds.iter().zip(&targets).map(|(p, &t)| bce_prob(p.confidence, t)).sum::<f64>() / preds.len() as f64
    };
    Ok(DetectionLoss {
        box_term,
        class_term,
        total: box_weight * box_term + class_term,
        matched: m.matches.len(),
        unmatched_gts: m.unmatched_gts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_box(r: &mut impl Rng) -> BBox {
        BBox::new(
            r.random_range(0.2..0.8),
            r.random_range(0.2..0.8),
            r.random_range(0.05..0.5),
            r.random_range(0.05..0.5),
        )
    }

    /// Straight transcription of the CIoU definition in corner form.
    fn ciou_oracle(p: &BBox, g: &BBox) -> f64 {
        let (a1, b1, a2, b2) = (p.cx - p.w / 2.0, p.cy - p.h / 2.0, p.cx + p.w / 2.0, p.cy + p.h / 2.0);
        let (c1, d1, c2, d2) = (g.cx - g.w / 2.0, g.cy - g.h / 2.0, g.cx + g.w / 2.0, g.cy + g.h / 2.0);
        let inter = (f64::min(a2, c2) - f64::max(a1, c1)).max(0.0) * (f64::min(b2, d2) - f64::max(b1, d1)).max(0.0);
        let iou = inter / ((a2 - a1) * (b2 - b1) + (c2 - c1) * (d2 - d1) - inter);
        let diag = (f64::max(a2, c2) - f64::min(a1, c1)).powi(2) + (f64::max(b2, d2) - f64::min(b1, d1)).powi(2);
        let centre = ((a1 + a2) / 2.0 - (c1 + c2) / 2.0).powi(2) + ((b1 + b2) / 2.0 - (d1 + d2) / 2.0).powi(2);
        let v = 4.0 / PI.powi(2) * (((c2 - c1) / (d2 - d1)).atan() - ((a2 - a1) / (b2 - b1)).atan()).powi(2);
        let alpha = v / (1.0 - iou + v + 1e-9);
        1.0 - iou + centre / diag + alpha * v
    }

    #[test]
    fn ciou_identity_and_concentric() {
        let b = BBox::new(0.4, 0.5, 0.2, 0.1);
        assert_eq!(ciou_loss(&b, &b).unwrap(), 0.0);
        let big = BBox::new(0.4, 0.5, 0.4, 0.2);
        let l = ciou_loss(&b, &big).unwrap();
        assert!((l - (1.0 - 0.25)).abs() < 1e-15);
        assert!(ciou_loss(&BBox::new(0.5, 0.5, 0.0, 0.1), &b).is_err());
    }

    #[test]
    fn ciou_matches_formula_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (p, g) = (rand_box(&mut r), rand_box(&mut r));
            let l = ciou_loss(&p, &g).unwrap();
            assert!((l - ciou_oracle(&p, &g)).abs() < 1e-9);
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn ciou_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 50 {
            let (p, g) = (rand_box(&mut r), rand_box(&mut r));
            let (l, grad) = ciou_loss_grad(&p, &g).unwrap();
            assert!((l - ciou_loss(&p, &g).unwrap()).abs() < 1e-15);
            let h = 1e-6;
            let mut ok = true;
            let mut numeric = [0.0; 4];
            for i in 0..4 {
                let mut a = coords(&p);
                let mut b = coords(&p);
                a[i] += h;
                b[i] -= h;
                let f = |c: [f64; 4]| ciou_loss(&BBox::new(c[0], c[1], c[2], c[3]), &g).unwrap();
                numeric[i] = (f(a) - f(b)) / (2.0 * h);
                // skip samples sitting on a max/min kink of the box geometry
                let one_sided = ((f(a) - l) / h - (l - f(b)) / h).abs();
                ok &= one_sided < 1e-4;
            }
            if !ok {
                continue;
            }
            for i in 0..4 {
                let rel = (grad[i] - numeric[i]).abs() / grad[i].abs().max(numeric[i].abs()).max(1e-2);
                assert!(rel < 1e-3, "{i}: {} vs {}", grad[i], numeric[i]);
            }
            checked += 1;
        }
    }

    #[test]
    fn bce_and_focal() {
        assert!((bce_loss(&[0.0], &[0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..64).map(|_| r.random_range(-30.0..30.0)).collect();
        let t: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
        assert_eq!(focal_loss(&x, &t, 0.0, None).unwrap().to_bits(), bce_loss(&x, &t).unwrap().to_bits());
        // p_t = 0.9 with a hard target of 1: weight (1 - 0.9)^2 = 0.01
        let logit = (0.9f64 / 0.1).ln();
        let f = focal_loss(&[logit], &[1.0], 2.0, None).unwrap();
        assert!((f - 0.01 * bce_term(logit, 1.0)).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 2.0], &[1.0]).is_err());
        assert!(bce_loss(&[1.0], &[1.5]).is_err());
        // large logits stay finite
        assert!(bce_loss(&[800.0, -800.0], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn detection_loss_examples() {
        let g = GroundTruth {
            class_id: 1,
            bbox: BBox::new(0.5, 0.5, 0.2, 0.2),
        };
        let perfect = ScoredBox {
            class_id: 1,
            confidence: 1.0,
            bbox: g.bbox,
        };
        let l = detection_loss(&[perfect], &[g], 5.0).unwrap();
        assert_eq!(l.box_term, 0.0);
        assert!(l.class_term < 1e-9);

        let p1 = ScoredBox {
            class_id: 1,
            confidence: 0.8,
            bbox: BBox::new(0.52, 0.5, 0.2, 0.25),
        };
        let p2 = ScoredBox {
            class_id: 0,
            confidence: 0.3,
            bbox: BBox::new(0.1, 0.1, 0.05, 0.05),
        };
        let g2 = GroundTruth {
            class_id: 0,
            bbox: BBox::new(0.8, 0.8, 0.1, 0.1),
        };
        let l = detection_loss(&[p1, p2], &[g, g2], 5.0).unwrap();
        // p1 matches g; p2 overlaps nothing; g2 is unmatched
        let want_box = (ciou_loss(&p1.bbox, &g.bbox).unwrap() + UNMATCHED_GT_PENALTY) / 2.0;
        let want_cls = (bce_prob(0.8, 1.0) + bce_prob(0.3, 0.0)) / 2.0;
        assert!((l.box_term - want_box).abs() < 1e-15);
        assert!((l.class_term - want_cls).abs() < 1e-15);
        assert!((l.total - (5.0 * want_box + want_cls)).abs() < 1e-14);
        let pure = detection_loss(&[p1, p2], &[g, g2], 0.0).unwrap();
        assert_eq!(pure.total, pure.class_term);
    }
}
