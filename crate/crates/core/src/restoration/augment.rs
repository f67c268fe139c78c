use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

use super::image::{resize_bilinear, Image};
use crate::dataset::LabelRecord;
use crate::{Error, Result};

/// Boxes whose visible area after rotation drops below this fraction of the
/// original are discarded.
pub const MIN_VISIBLE_FRACTION: f64 = 0.1;

/// An image with its normalised labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: Vec<LabelRecord>,
}

impl Sample {
    pub fn new(image: Image, labels: Vec<LabelRecord>) -> Self {
        Self { image, labels }
    }
}

/// Augmentation probabilities and magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub hflip_p: f64,
    /// Rotation angle is drawn uniformly from `[-rotate_deg, rotate_deg]`.
    pub rotate_deg: f64,
    pub noise_sigma: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    /// Hue shift as a fraction of the colour wheel; also the relative
    /// saturation/value range.
    pub hsv: f64,
    pub mixup_alpha: f64,
    pub mixup_p: f64,
    pub mosaic_p: f64,
}

impl Default for Policy {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            rotate_deg: 15.0,
            noise_sigma: (0.01, 0.05),
            brightness: 0.2,
            contrast: 0.2,
            hsv: 0.1,
            mixup_alpha: 0.2,
            mixup_p: 0.5,
            mosaic_p: 0.5,
        }
    }
}

impl Policy {
    /// The default policy without the multi-image operations.
    pub fn single_image() -> Self {
        Self {
            mixup_p: 0.0,
            mosaic_p: 0.0,
            ..Self::default()
        }
    }

    /// A policy that changes nothing.
    pub fn identity() -> Self {
        Self {
            hflip_p: 0.0,
            rotate_deg: 0.0,
            noise_sigma: (0.0, 0.0),
            brightness: 0.0,
            contrast: 0.0,
            hsv: 0.0,
            mixup_alpha: 0.2,
            mixup_p: 0.0,
            mosaic_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Policy(format!("{name} must be a probability, got {p}")))
            }
        };
        prob("hflip_p", self.hflip_p)?;
        prob("mixup_p", self.mixup_p)?;
        prob("mosaic_p", self.mosaic_p)?;
        let (lo, hi) = self.noise_sigma;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Policy(format!("noise sigma range ({lo}, {hi}) is invalid")));
        }
        for (name, v, max) in [
            ("rotate_deg", self.rotate_deg, 180.0),
            ("brightness", self.brightness, 1.0),
            ("contrast", self.contrast, 1.0),
            ("hsv", self.hsv, 1.0),
        ] {
            if !(0.0..=max).contains(&v) {
                return Err(Error::Policy(format!("{name} must lie in [0, {max}], got {v}")));
            }
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Policy(format!("mixup alpha must be positive, got {}", self.mixup_alpha)));
        }
        Ok(())
    }
}

/// Clip a normalised box to the unit square; `None` when nothing is left.
fn clip_label(l: &LabelRecord) -> Option<LabelRecord> {
    let x1 = (l.cx - l.w / 2.0).clamp(0.0, 1.0);
    let x2 = (l.cx + l.w / 2.0).clamp(0.0, 1.0);
    let y1 = (l.cy - l.h / 2.0).clamp(0.0, 1.0);
    let y2 = (l.cy + l.h / 2.0).clamp(0.0, 1.0);
    (x2 > x1 && y2 > y1).then(|| LabelRecord::new(l.class_id, (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1))
}

pub fn hflip(s: &Sample) -> Sample {
    let img = &s.image;
    let w = img.width();
    let image = Image::from_fn(w, img.height(), img.channels(), |c, y, x| img.get(c, y, w - 1 - x)).expect("same shape");
    let labels = s
        .labels
        .iter()
        .map(|l| LabelRecord { cx: 1.0 - l.cx, ..*l })
        .collect();
    Sample { image, labels }
}

/// Rotate about the image centre by `degrees` (zero fill). Boxes are
/// re-fitted around their rotated corners and clipped to the frame.
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    let img = &s.image;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w / 2.0, h / 2.0);
    let sample = |c: usize, sy: f64, sx: f64| -> f64 {
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let px = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= h || xx >= w {
                0.0
            } else {
                img.get(c, yy as usize, xx as usize)
            }
        };
        let mut v = px(y0, x0) * (1.0 - fy) * (1.0 - fx);
        if fx > 0.0 {
            v += px(y0, x0 + 1.0) * (1.0 - fy) * fx;
        }
        if fy > 0.0 {
            v += px(y0 + 1.0, x0) * fy * (1.0 - fx);
            if fx > 0.0 {
                v += px(y0 + 1.0, x0 + 1.0) * fy * fx;
            }
        }
        v
    };
    let image = Image::from_fn(img.width(), img.height(), img.channels(), |c, y, x| {
        if degrees == 0.0 {
            return img.get(c, y, x);
        }
        // inverse map the output pixel centre
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let sx = cos * dx + sin * dy + cx - 0.5;
        let sy = -sin * dx + cos * dy + cy - 0.5;
        sample(c, sy, sx).clamp(0.0, 1.0)
    })
    .expect("same shape");

    let mut labels = Vec::new();
    for l in &s.labels {
        if degrees == 0.0 {
            labels.push(*l);
            continue;
        }
        let (bx, by, bw, bh) = (l.cx * w, l.cy * h, l.w * w, l.h * h);
        let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (px, py) in [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)] {
            let (dx, dy) = (bx + px * bw - cx, by + py * bh - cy);
            let rx = cos * dx - sin * dy + cx;
            let ry = sin * dx + cos * dy + cy;
            x1 = x1.min(rx);
            x2 = x2.max(rx);
            y1 = y1.min(ry);
            y2 = y2.max(ry);
        }
        let (cx1, cx2) = (x1.clamp(0.0, w), x2.clamp(0.0, w));
        let (cy1, cy2) = (y1.clamp(0.0, h), y2.clamp(0.0, h));
        let visible = (cx2 - cx1).max(0.0) * (cy2 - cy1).max(0.0);
        if visible < MIN_VISIBLE_FRACTION * bw * bh || visible <= 0.0 {
            continue;
        }
        let fitted = LabelRecord::new(
            l.class_id,
            (cx1 + cx2) / 2.0 / w,
            (cy1 + cy2) / 2.0 / h,
            (cx2 - cx1) / w,
            (cy2 - cy1) / h,
        );
        labels.extend(clip_label(&fitted));
    }
    Sample { image, labels }
}

pub fn add_gaussian_noise(img: &Image, sigma: f64, rng: &mut impl Rng) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Policy(format!("noise sigma {sigma}: {e}")))?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// `((v - 0.5) * contrast + 0.5) * brightness`, clamped; factors near 1.
pub fn brightness_contrast(img: &Image, brightness: f64, contrast: f64) -> Image {
    img.map(|v| (((v - 0.5) * contrast + 0.5) * brightness).clamp(0.0, 1.0))
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Shift hue by `dh` (fraction of the wheel) and scale saturation/value.
/// Single-channel images only receive the value scale.
pub fn hsv_jitter(img: &Image, dh: f64, s_gain: f64, v_gain: f64) -> Image {
    if img.channels() == 1 {
        return img.map(|v| (v * v_gain).clamp(0.0, 1.0));
    }
    let n = img.width() * img.height();
    let mut out = img.clone();
    let d = img.data();
    let o = out.data_mut();
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + dh, (s * s_gain).clamp(0.0, 1.0), (v * v_gain).clamp(0.0, 1.0));
        o[i] = r.clamp(0.0, 1.0);
        o[n + i] = g.clamp(0.0, 1.0);
        o[2 * n + i] = b.clamp(0.0, 1.0);
    }
    out
}

/// `lambda * A + (1 - lambda) * B`; labels are the union of both sets. `b`
/// is resized to `a` when needed.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Policy(format!("mixup weight must lie in [0, 1], got {lambda}")));
    }
    if a.image.channels() != b.image.channels() {
        return Err(Error::Policy("mixup partners must have the same channel count".into()));
    }
    let bi = if (b.image.width(), b.image.height()) == (a.image.width(), a.image.height()) {
        b.image.clone()
    } else {
        resize_bilinear(&b.image, a.image.width(), a.image.height())?
    };
    let mut image = a.image.clone();
    for (o, &v) in image.data_mut().iter_mut().zip(bi.data()) {
        *o = (lambda * *o + (1.0 - lambda) * v).clamp(0.0, 1.0);
    }
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    Ok(Sample { image, labels })
}

/// Tile four samples around the split point `(xc, yc)` (pixels) on a canvas
/// the size of the first; each tile is resized into its quadrant.
pub fn mosaic(tiles: [&Sample; 4], xc: usize, yc: usize) -> Result<Sample> {
    let (w, h, ch) = (tiles[0].image.width(), tiles[0].image.height(), tiles[0].image.channels());
    if xc == 0 || yc == 0 || xc >= w || yc >= h {
        return Err(Error::Policy(format!("mosaic centre ({xc}, {yc}) must lie inside a {w}x{h} canvas")));
    }
    if tiles.iter().any(|t| t.image.channels() != ch) {
        return Err(Error::Policy("mosaic tiles must have the same channel count".into()));
    }
    let mut canvas = Image::filled(w, h, ch, 0.0)?;
    let mut labels = Vec::new();
    let quads = [(0, 0, xc, yc), (xc, 0, w - xc, yc), (0, yc, xc, h - yc), (xc, yc, w - xc, h - yc)];
    for (t, (x0, y0, qw, qh)) in tiles.iter().zip(quads) {
        let r = resize_bilinear(&t.image, qw, qh)?;
        for c in 0..ch {
            for y in 0..qh {
                for x in 0..qw {
                    canvas.set(c, y0 + y, x0 + x, r.get(c, y, x));
                }
            }
        }
        let (sx, sy) = (qw as f64 / w as f64, qh as f64 / h as f64);
        for l in &t.labels {
            let moved = LabelRecord::new(
                l.class_id,
                (x0 as f64 + l.cx * qw as f64) / w as f64,
                (y0 as f64 + l.cy * qh as f64) / h as f64,
                l.w * sx,
                l.h * sy,
            );
            labels.extend(clip_label(&moved));
        }
    }
    Ok(Sample { image: canvas, labels })
}

/// Apply the policy with all randomness drawn from `seed`, in the order
/// mosaic, mixup, flip, rotation, brightness/contrast, HSV, noise. Every
/// random quantity is drawn whether or not its operation fires, so the
/// stream layout never depends on earlier outcomes.
pub fn augment(sample: &Sample, partners: &[Sample], policy: &Policy, seed: u64) -> Result<Sample> {
    policy.validate()?;
    if (policy.mixup_p > 0.0 || policy.mosaic_p > 0.0) && partners.is_empty() {
        return Err(Error::Policy("mixup/mosaic requested but the partner set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (sample.image.width(), sample.image.height());

    let do_mosaic = rng.random::<f64>() < policy.mosaic_p;
    let picks: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..partners.len().max(1)));
    let fx = rng.random_range(0.25..=0.75);
    let fy = rng.random_range(0.25..=0.75);
    let do_mixup = rng.random::<f64>() < policy.mixup_p;
    let mix_pick = rng.random_range(0..partners.len().max(1));
    let beta = Beta::new(policy.mixup_alpha, policy.mixup_alpha).map_err(|e| Error::Policy(e.to_string()))?;
    let lambda: f64 = beta.sample(&mut rng);
    let do_flip = rng.random::<f64>() < policy.hflip_p;
    let angle = policy.rotate_deg * rng.random_range(-1.0..=1.0);
    let bright = 1.0 + policy.brightness * rng.random_range(-1.0..=1.0);
    let contrast = 1.0 + policy.contrast * rng.random_range(-1.0..=1.0);
    let dh = policy.hsv * rng.random_range(-1.0..=1.0);
    let s_gain = 1.0 + policy.hsv * rng.random_range(-1.0..=1.0);
    let v_gain = 1.0 + policy.hsv * rng.random_range(-1.0..=1.0);
    let sigma = policy.noise_sigma.0 + (policy.noise_sigma.1 - policy.noise_sigma.0) * rng.random::<f64>();

    let mut cur = sample.clone();
    if do_mosaic && w > 1 && h > 1 {
        let xc = ((w as f64 * fx).round() as usize).clamp(1, w - 1);
        let yc = ((h as f64 * fy).round() as usize).clamp(1, h - 1);
        cur = mosaic([&cur, &partners[picks[0]], &partners[picks[1]], &partners[picks[2]]], xc, yc)?;
    }
    if do_mixup {
        cur = mixup(&cur, &partners[mix_pick], lambda)?;
    }
    if do_flip {
        cur = hflip(&cur);
    }
    if angle != 0.0 {
        cur = rotate(&cur, angle);
    }
    if bright != 1.0 || contrast != 1.0 {
        cur.image = brightness_contrast(&cur.image, bright, contrast);
    }
    if dh != 0.0 || s_gain != 1.0 || v_gain != 1.0 {
        cur.image = hsv_jitter(&cur.image, dh, s_gain, v_gain);
    }
    cur.image = add_gaussian_noise(&cur.image, sigma, &mut rng)?;
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64, channels: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..24 * 16 * channels).map(|_| rng.random::<f64>()).collect();
        let labels = vec![
            LabelRecord::new(1, 0.3, 0.4, 0.2, 0.1),
            LabelRecord::new(0, 0.7, 0.6, 0.1, 0.3),
        ];
        Sample::new(Image::new(24, 16, channels, data).unwrap(), labels)
    }

    fn labels_close(a: &[LabelRecord], b: &[LabelRecord]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.class_id == y.class_id
                    && (x.cx - y.cx).abs() < 1e-12
                    && (x.cy - y.cy).abs() < 1e-12
                    && (x.w - y.w).abs() < 1e-12
                    && (x.h - y.h).abs() < 1e-12
            })
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = sample(1, 3);
        let f = hflip(&s);
        assert!((f.labels[0].cx - 0.7).abs() < 1e-15);
        let ff = hflip(&f);
        assert_eq!(ff.image, s.image);
        assert!(labels_close(&ff.labels, &s.labels));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = sample(2, 1);
        assert_eq!(rotate(&s, 0.0), s);
    }

    #[test]
    fn right_angle_rotation_on_square_image() {
        let img = Image::from_fn(8, 8, 1, |_, y, x| (y * 8 + x) as f64 / 64.0).unwrap();
        let s = Sample::new(img.clone(), vec![LabelRecord::new(0, 0.25, 0.5, 0.25, 0.125)]);
        let r = rotate(&s, 90.0);
        // a quarter turn permutes pixels exactly (up to rounding of sin/cos)
        let mut src: Vec<f64> = img.data().to_vec();
        let mut dst: Vec<f64> = r.image.data().to_vec();
        src.sort_by(f64::total_cmp);
        dst.sort_by(f64::total_cmp);
        assert!(src.iter().zip(&dst).all(|(a, b)| (a - b).abs() < 1e-9));
        let l = r.labels[0];
        assert!((l.w - 0.125).abs() < 1e-9 && (l.h - 0.25).abs() < 1e-9);
        assert!((l.cx - 0.5).abs() < 1e-9 && (l.cy - 0.25).abs() < 1e-9);
    }

    #[test]
    fn rotation_drops_boxes_pushed_out_of_frame() {
        let img = Image::filled(100, 20, 1, 0.5).unwrap();
        // thin box near the right end of a wide image leaves the frame at 60 degrees
        let s = Sample::new(img, vec![LabelRecord::new(1, 0.97, 0.5, 0.04, 0.1), LabelRecord::new(0, 0.5, 0.5, 0.1, 0.2)]);
        let r = rotate(&s, 60.0);
        assert_eq!(r.labels.len(), 1);
        assert_eq!(r.labels[0].class_id, 0);
    }

    #[test]
    fn mixup_endpoint_keeps_a_and_unions_labels() {
        let (a, b) = (sample(3, 3), sample(4, 3));
        let m = mixup(&a, &b, 1.0).unwrap();
        assert_eq!(m.image, a.image);
        assert_eq!(m.labels.len(), 4);
        assert_eq!(&m.labels[..2], &a.labels[..]);
        assert_eq!(&m.labels[2..], &b.labels[..]);
    }

    #[test]
    fn mosaic_rescales_labels_into_quadrants() {
        let tiles: Vec<Sample> = (0..4).map(|i| sample(10 + i, 1)).collect();
        let m = mosaic([&tiles[0], &tiles[1], &tiles[2], &tiles[3]], 12, 8).unwrap();
        assert_eq!(m.labels.len(), 8);
        // bottom-right tile, first label: (0.5 + 0.3 * 0.5, 0.5 + 0.4 * 0.5)
        let l = m.labels[6];
        assert!((l.cx - 0.65).abs() < 1e-12 && (l.cy - 0.7).abs() < 1e-12);
        assert!((l.w - 0.1).abs() < 1e-12 && (l.h - 0.05).abs() < 1e-12);
        assert!(mosaic([&tiles[0], &tiles[1], &tiles[2], &tiles[3]], 0, 8).is_err());
    }

    #[test]
    fn hsv_and_brightness_keep_labels_and_range() {
        let s = sample(5, 3);
        let j = hsv_jitter(&s.image, 0.1, 1.1, 0.9);
        assert!(j.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(hsv_jitter(&s.image, 0.0, 1.0, 1.0).data().len(), s.image.data().len());
        let back = hsv_jitter(&s.image, 0.0, 1.0, 1.0);
        assert!(back.data().iter().zip(s.image.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let ir = sample(6, 1);
        let v = hsv_jitter(&ir.image, 0.3, 0.5, 1.0);
        assert_eq!(v, ir.image);
        assert_eq!(brightness_contrast(&s.image, 1.0, 1.0), s.image.map(|v| v.clamp(0.0, 1.0)));
    }

    #[test]
    fn augment_reproducible_and_validated() {
        let s = sample(7, 3);
        let partners = vec![sample(8, 3), sample(9, 3)];
        let p = Policy::default();
        let a = augment(&s, &partners, &p, 42).unwrap();
        let b = augment(&s, &partners, &p, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, augment(&s, &partners, &p, 43).unwrap());
        assert!(matches!(augment(&s, &[], &p, 1), Err(Error::Policy(_))));
        assert!(augment(&s, &[], &Policy::single_image(), 1).is_ok());
        assert_eq!(augment(&s, &[], &Policy::identity(), 5).unwrap(), s);
        let bad = Policy {
            hflip_p: 1.5,
            ..Policy::single_image()
        };
        assert!(matches!(augment(&s, &[], &bad, 1), Err(Error::Policy(_))));
    }
}
