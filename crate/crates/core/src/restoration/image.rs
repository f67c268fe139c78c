use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Planar image with values in `[0, 1]`; 1 (grey/IR) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Param(format!(
                "image must be non-empty with 1 or 3 channels, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Param(format!(
                "image data has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone()).expect("image shape")
    }

    /// Decode PNG/JPEG; grey inputs become 1 channel, everything else RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let grey = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if grey {
            let buf = img.to_luma8();
            let data = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Self::new(w, h, 1, data)
        } else {
            let buf = img.to_rgb8();
            let raw = buf.as_raw();
            let n = w * h;
            let mut data = vec![0.0; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    data[c * n + i] = raw[3 * i + c] as f64 / 255.0;
                }
            }
            Self::new(w, h, 3, data)
        }
    }

    /// 8-bit values, interleaved.
    pub fn to_u8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = vec![0u8; n * self.channels];
        for i in 0..n {
            for c in 0..self.channels {
                out[i * self.channels + c] = (self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    /// Encode by extension (png, jpg/jpeg).
    pub fn save(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color).map_err(|e| {
            Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            }
        })
    }
}

/// Min-max scale a single-channel image to `[0, 1]`; a constant image maps
/// to all zeros.
pub fn normalize_ir(img: &Image) -> Result<Image> {
    if img.channels() != 1 {
        return Err(Error::Param(format!("IR normalisation needs 1 channel, got {}", img.channels())));
    }
    let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(img.map(|_| 0.0));
    }
    Ok(img.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)))
}

/// Bilinear resize with half-pixel centres (align-corners off); source
/// coordinates are clamped to the image.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::Param(format!("resize target must be positive, got {width}x{height}")));
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    let axis = |dst: usize, scale: f64, n: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, sx, img.width())).collect();
    let ys: Vec<_> = (0..height).map(|y| axis(y, sy, img.height())).collect();
    Image::from_fn(width, height, img.channels(), |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
        let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0)
    })
}
