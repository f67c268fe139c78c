use std::path::Path;

use super::image::Image;
use crate::{Error, Result};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 1e-3;
pub const RL_EPSILON: f64 = 1e-12;

/// Half-sample symmetric reflection (`d c b a | a b c d`), valid for any
/// offset.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn replicate(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Square, odd-sized, non-negative point-spread function summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    size: usize,
    data: Vec<f64>,
}

impl Psf {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::Param(format!("psf size must be odd, got {size}")));
        }
        if data.len() != size * size {
            return Err(Error::Param(format!("psf of size {size} needs {} values, got {}", size * size, data.len())));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Param("psf entries must be finite and non-negative".into()));
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Param(format!("psf must sum to 1, sums to {sum}")));
        }
        Ok(Self { size, data })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut data = vec![0.0; size * size];
        if size % 2 == 1 {
            data[size * size / 2] = 1.0;
        }
        Self::new(size, data)
    }

    pub fn box_kernel(size: usize) -> Result<Self> {
        let n = size * size;
        Self::new(size, vec![1.0 / n as f64; n])
    }

    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Param(format!("sigma must be positive, got {sigma}")));
        }
        let r = (size / 2) as f64;
        let mut data: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= s);
        Self::new(size, data)
    }

    /// Whitespace-separated rows of numbers; the row count sets the size.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, line) in text.lines().enumerate() {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.is_empty() {
                continue;
            }
            rows += 1;
            for v in vals {
                data.push(v.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("'{v}' is not a number"),
                })?);
            }
        }
        Self::new(rows, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn flipped(&self) -> Psf {
        Psf {
            size: self.size,
            data: self.data.iter().rev().cloned().collect(),
        }
    }
}

/// 2-D convolution of one plane with reflective borders.
fn convolve_plane(src: &[f64], w: usize, h: usize, k: &Psf) -> Vec<f64> {
    let r = (k.size / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k.size {
                let sy = reflect(y as isize + r - ky as isize, h);
                for kx in 0..k.size {
                    let sx = reflect(x as isize + r - kx as isize, w);
                    acc += k.data[ky * k.size + kx] * src[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn per_plane(img: &Image, f: impl Fn(&[f64]) -> Vec<f64>) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        let p = f(img.plane(c));
        out.plane_mut(c).copy_from_slice(&p);
    }
    out.clamp01();
    out
}

/// Replace pixels whose local window variance exceeds `threshold` by the
/// window median. Borders replicate the edge pixel.
pub fn adaptive_median(img: &Image, window: usize, threshold: f64) -> Result<Image> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Param(format!("median window must be odd, got {window}")));
    }
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Param(format!("variance threshold must be >= 0, got {threshold}")));
    }
    let (w, h) = (img.width(), img.height());
    let r = (window / 2) as isize;
    Ok(per_plane(img, |src| {
        let mut buf = Vec::with_capacity(window * window);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                buf.clear();
                for dy in -r..=r {
                    let sy = replicate(y as isize + dy, h);
                    for dx in -r..=r {
                        buf.push(src[sy * w + replicate(x as isize + dx, w)]);
                    }
                }
                let n = buf.len() as f64;
                let mean = buf.iter().sum::<f64>() / n;
                let var = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                out[y * w + x] = if var > threshold {
                    buf.sort_by(f64::total_cmp);
                    buf[buf.len() / 2]
                } else {
                    src[y * w + x]
                };
            }
        }
        out
    }))
}

/// Normalised 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    Ok(per_plane(img, |src| {
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[y * w + reflect(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                    .sum();
            }
        }
        out
    }))
}

pub fn unsharp_mask(img: &Image, sigma: f64, amount: f64, threshold: f64) -> Result<Image> {
    if amount.is_nan() || amount < 0.0 {
        return Err(Error::Param(format!("amount must be >= 0, got {amount}")));
    }
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Param(format!("threshold must be >= 0, got {threshold}")));
    }
    let blurred = gaussian_blur(img, sigma)?;
    let mut out = img.clone();
    for (o, (&v, &b)) in out.data_mut().iter_mut().zip(img.data().iter().zip(blurred.data())) {
        let mask = v - b;
        if mask.abs() > threshold {
            *o = (v + amount * mask).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Richardson-Lucy deconvolution, `u <- u * (K^T conv (img / (K conv u + eps)))`,
/// starting from the observed image.
pub fn richardson_lucy(img: &Image, psf: &Psf, iterations: usize) -> Result<Image> {
    if iterations == 0 {
        return Err(Error::Param("richardson-lucy needs at least one iteration".into()));
    }
    // re-validate in case the caller built the kernel by hand
    let psf = Psf::new(psf.size, psf.data.clone())?;
    let adjoint = psf.flipped();
    let (w, h) = (img.width(), img.height());
    Ok(per_plane(img, |obs| {
        let mut u = obs.to_vec();
        for _ in 0..iterations {
            let est = convolve_plane(&u, w, h, &psf);
            let ratio: Vec<f64> = obs.iter().zip(&est).map(|(o, e)| o / (e + RL_EPSILON)).collect();
            let corr = convolve_plane(&ratio, w, h, &adjoint);
            for (v, c) in u.iter_mut().zip(corr) {
                *v *= c;
            }
        }
        u
    }))
}

/// One stage of a restoration pipeline.
#[derive(Clone, Debug, PartialEq)]
pub enum FilterStep {
    Median { window: usize, threshold: f64 },
    RichardsonLucy { psf: Psf, iterations: usize },
    Unsharp { sigma: f64, amount: f64, threshold: f64 },
}

impl FilterStep {
    pub fn name(&self) -> &'static str {
        match self {
            FilterStep::Median { .. } => "median",
            FilterStep::RichardsonLucy { .. } => "rl",
            FilterStep::Unsharp { .. } => "unsharp",
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self {
            FilterStep::Median { window, threshold } => adaptive_median(img, *window, *threshold),
            FilterStep::RichardsonLucy { psf, iterations } => richardson_lucy(img, psf, *iterations),
            FilterStep::Unsharp {
                sigma,
                amount,
                threshold,
            } => unsharp_mask(img, *sigma, *amount, *threshold),
        }
    }
}

/// Filter parameters shared by every chain built from names.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSettings {
    pub median_window: usize,
    pub variance_threshold: f64,
    pub psf: Option<Psf>,
    pub rl_iterations: usize,
    pub unsharp_sigma: f64,
    pub unsharp_amount: f64,
    pub unsharp_threshold: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            median_window: 3,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            psf: None,
            rl_iterations: 10,
            unsharp_sigma: 1.0,
            unsharp_amount: 1.5,
            unsharp_threshold: 0.01,
        }
    }
}

/// Ordered list of filters; the default order is median, RL (only when a
/// PSF is supplied), unsharp.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterChain {
    pub steps: Vec<FilterStep>,
}

impl FilterChain {
    pub fn standard(settings: &FilterSettings) -> Self {
        Self::from_names(&["median", "rl", "unsharp"], settings).expect("built-in names")
    }

    /// Build from names (`median`, `rl`, `unsharp`); `rl` is skipped when
    /// no PSF is configured.
    pub fn from_names<S: AsRef<str>>(names: &[S], s: &FilterSettings) -> Result<Self> {
        let mut steps = Vec::new();
        for n in names {
            match n.as_ref().trim() {
                "median" => steps.push(FilterStep::Median {
                    window: s.median_window,
                    threshold: s.variance_threshold,
                }),
                "rl" => {
                    if let Some(psf) = &s.psf {
                        steps.push(FilterStep::RichardsonLucy {
                            psf: psf.clone(),
                            iterations: s.rl_iterations,
                        });
                    }
                }
                "unsharp" => steps.push(FilterStep::Unsharp {
                    sigma: s.unsharp_sigma,
                    amount: s.unsharp_amount,
                    threshold: s.unsharp_threshold,
                }),
                "" => {}
                other => return Err(Error::Param(format!("unknown filter '{other}' (median, rl, unsharp)"))),
            }
        }
        Ok(Self { steps })
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut cur = img.clone();
        for s in &self.steps {
            cur = s.apply(&cur)?;
        }
        Ok(cur)
    }
}
