//! Forward and backward kernels on plain [`Tensor`]s.
//!
//! Every kernel computes each output element with a fixed summation order,
//! so results are bitwise identical regardless of the rayon pool size.

use rayon::prelude::*;

use super::{numel, Shape, Tensor};
use crate::{Error, Result};

/// Below this many multiply-adds a kernel runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;
/// Output rows updated together by one gemm task.
const ROW_BLOCK: usize = 8;
/// Column tile width of the gemm inner loop.
const COL_TILE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            ..Self::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Output extent along one spatial axis, or `None` when the dilated
    /// kernel does not fit in the padded input.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if kernel == 0 || self.stride == 0 || padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

/// Output shape of a convolution, validating group divisibility and geometry.
pub fn conv2d_out_shape(x: Shape, w: Shape, geom: ConvGeom) -> Result<Shape> {
    let [n, c_in, h, wd] = x;
    let [c_out, cg, kh, kw] = w;
    if geom.groups == 0 || geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::Param(format!(
            "conv2d: stride/dilation/groups must be >= 1, got {geom:?}"
        )));
    }
    if c_in % geom.groups != 0 || c_out % geom.groups != 0 {
        return Err(Error::Param(format!(
            "conv2d: in_channels {c_in} and out_channels {c_out} must be divisible by groups {}",
            geom.groups
        )));
    }
    if cg != c_in / geom.groups {
        return Err(Error::Param(format!(
            "conv2d: weight {w:?} expects {cg} channels per group, input {x:?} with {} groups gives {}",
            geom.groups,
            c_in / geom.groups
        )));
    }
    let ho = geom.out_extent(h, kh);
    let wo = geom.out_extent(wd, kw);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok([n, c_out, ho, wo]),
        _ => Err(Error::Param(format!(
            "conv2d: kernel {kh}x{kw} (dilation {}) exceeds padded input {h}x{wd} (padding {})",
            geom.dilation, geom.padding
        ))),
    }
}

/// `out[m, :] += sum_r a[m, r] * b[r, :]` for row-major `a` (m x k) and
/// `b` (k x l). `out` must be `m x l`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, l: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * l);
    debug_assert_eq!(out.len(), m * l);
    if l == 0 || m == 0 {
        return;
    }
    let block = |(bi, rows): (usize, &mut [f64])| {
        let m0 = bi * ROW_BLOCK;
        let nrows = rows.len() / l;
        for t0 in (0..l).step_by(COL_TILE) {
            let t1 = (t0 + COL_TILE).min(l);
            for r in 0..k {
                let brow = &b[r * l + t0..r * l + t1];
                for mi in 0..nrows {
                    let coef = a[(m0 + mi) * k + r];
                    let orow = &mut rows[mi * l + t0..mi * l + t1];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += coef * bv;
                    }
                }
            }
        }
    };
    if m * k * l >= PAR_THRESHOLD {
        out.par_chunks_mut(ROW_BLOCK * l).enumerate().for_each(block);
    } else {
        out.chunks_mut(ROW_BLOCK * l).enumerate().for_each(block);
    }
}

/// Unfold one sample/group into a `(cg*kh*kw) x (ho*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    cg: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
) -> Vec<f64> {
    let l = ho * wo;
    let mut cols = vec![0.0; cg * kh * kw * l];
    let fill = |(r, row): (usize, &mut [f64])| {
        let c = r / (kh * kw);
        let i = (r / kw) % kh;
        let j = r % kw;
        let plane = &src[c * h * w..(c + 1) * h * w];
        for oy in 0..ho {
            let iy = (oy * geom.stride + i * geom.dilation) as isize - geom.padding as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..wo {
                let ix = (ox * geom.stride + j * geom.dilation) as isize - geom.padding as isize;
                if ix >= 0 && (ix as usize) < w {
                    row[oy * wo + ox] = plane[iy * w + ix as usize];
                }
            }
        }
    };
    if cols.len() >= PAR_THRESHOLD {
        cols.par_chunks_mut(l).enumerate().for_each(fill);
    } else {
        cols.chunks_mut(l).enumerate().for_each(fill);
    }
    cols
}

/// Fold a column matrix back, accumulating into `dst` (inverse of `im2col`).
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    dst: &mut [f64],
    cg: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
) {
    let l = ho * wo;
    for r in 0..cg * kh * kw {
        let c = r / (kh * kw);
        let i = (r / kw) % kh;
        let j = r % kw;
        let row = &cols[r * l..(r + 1) * l];
        for oy in 0..ho {
            let iy = (oy * geom.stride + i * geom.dilation) as isize - geom.padding as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..wo {
                let ix = (ox * geom.stride + j * geom.dilation) as isize - geom.padding as isize;
                if ix >= 0 && (ix as usize) < w {
                    dst[c * h * w + iy as usize * w + ix as usize] += row[oy * wo + ox];
                }
            }
        }
    }
}

/// 2-D cross-correlation with optional per-output-channel bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&[f64]>, geom: ConvGeom) -> Result<Tensor> {
    let out_shape = conv2d_out_shape(x.shape(), weight.shape(), geom)?;
    let [n, c_in, h, w] = x.shape();
    let [c_out, cg, kh, kw] = weight.shape();
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Param(format!(
                "conv2d: bias has {} entries for {c_out} output channels",
                b.len()
            )));
        }
    }
    let [_, _, ho, wo] = out_shape;
    let l = ho * wo;
    let groups = geom.groups;
    let og = c_out / groups;
    let mut out = Tensor::zeros(out_shape);

    if cg == 1 && og == 1 {
        depthwise(x, weight, geom, &mut out);
    } else {
        let k = cg * kh * kw;
        let direct = kh == 1 && kw == 1 && geom.stride == 1 && geom.padding == 0;
        for ni in 0..n {
            for g in 0..groups {
                let src = &x.data()[(ni * c_in + g * cg) * h * w..(ni * c_in + (g + 1) * cg) * h * w];
                let wg = &weight.data()[g * og * k..(g + 1) * og * k];
                let dst_off = (ni * c_out + g * og) * l;
                let dst = &mut out.data_mut()[dst_off..dst_off + og * l];
                if direct {
                    gemm_acc(wg, src, dst, og, k, l);
                } else {
                    let cols = im2col(src, cg, h, w, kh, kw, ho, wo, geom);
                    gemm_acc(wg, &cols, dst, og, k, l);
                }
            }
        }
    }

    if let Some(b) = bias {
        out.data_mut()
            .chunks_mut(l)
            .enumerate()
            .for_each(|(i, plane)| {
                let bv = b[i % c_out];
                plane.iter_mut().for_each(|v| *v += bv);
            });
    }
    Ok(out)
}

/// Direct kernel for groups == in == out channels. Taps are summed in the
/// same `(i, j)` order the im2col path uses.
fn depthwise(x: &Tensor, weight: &Tensor, geom: ConvGeom, out: &mut Tensor) {
    let [_, c, h, w] = x.shape();
    let [_, _, kh, kw] = weight.shape();
    let [_, _, ho, wo] = out.shape();
    let xd = x.data();
    let wd = weight.data();
    let work = |(plane_idx, dst): (usize, &mut [f64])| {
        let ch = plane_idx % c;
        let src = &xd[plane_idx * h * w..(plane_idx + 1) * h * w];
        let ker = &wd[ch * kh * kw..(ch + 1) * kh * kw];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for i in 0..kh {
                    let iy = (oy * geom.stride + i * geom.dilation) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let ix =
                            (ox * geom.stride + j * geom.dilation) as isize - geom.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            acc += ker[i * kw + j] * src[iy as usize * w + ix as usize];
                        }
                    }
                }
                dst[oy * wo + ox] = acc;
            }
        }
    };
    let l = ho * wo;
    if out.numel() * kh * kw >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(l).enumerate().for_each(work);
    } else {
        out.data_mut().chunks_mut(l).enumerate().for_each(work);
    }
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let out_shape = conv2d_out_shape(x.shape(), weight.shape(), geom)?;
    if dy.shape() != out_shape {
        return Err(Error::shape(
            "conv2d_backward",
            format!("output grad {:?} vs output {out_shape:?}", dy.shape()),
        ));
    }
    let [n, c_in, h, w] = x.shape();
    let [c_out, cg, kh, kw] = weight.shape();
    let [_, _, ho, wo] = out_shape;
    let l = ho * wo;
    let og = c_out / geom.groups;
    let k = cg * kh * kw;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![0.0; c_out];

    for ni in 0..n {
        for g in 0..geom.groups {
            let src = &x.data()[(ni * c_in + g * cg) * h * w..(ni * c_in + (g + 1) * cg) * h * w];
            let cols = im2col(src, cg, h, w, kh, kw, ho, wo, geom);
            let dy_g = &dy.data()[(ni * c_out + g * og) * l..(ni * c_out + (g + 1) * og) * l];
            let wg = &weight.data()[g * og * k..(g + 1) * og * k];
            // dW_g += dy_g * cols^T
            {
                let dwg = &mut dw.data_mut()[g * og * k..(g + 1) * og * k];
                for o in 0..og {
                    let dyrow = &dy_g[o * l..(o + 1) * l];
                    db[g * og + o] += dyrow.iter().sum::<f64>();
                    for r in 0..k {
                        let crow = &cols[r * l..(r + 1) * l];
                        dwg[o * k + r] += dyrow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            // dcols = W_g^T * dy_g
            let mut dcols = vec![0.0; k * l];
            for o in 0..og {
                let dyrow = &dy_g[o * l..(o + 1) * l];
                for r in 0..k {
                    let coef = wg[o * k + r];
                    if coef == 0.0 {
                        continue;
                    }
                    for (d, &v) in dcols[r * l..(r + 1) * l].iter_mut().zip(dyrow) {
                        *d += coef * v;
                    }
                }
            }
            let off = (ni * c_in + g * cg) * h * w;
            let dst = &mut dx.data_mut()[off..off + cg * h * w];
            col2im_acc(&dcols, dst, cg, h, w, kh, kw, ho, wo, geom);
        }
    }
    Ok((dx, dw, db))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

fn pool_out_shape(x: Shape, k: usize, stride: usize, padding: usize) -> Result<Shape> {
    if k == 0 || stride == 0 || padding >= k {
        return Err(Error::Param(format!(
            "pool2d: need k >= 1, stride >= 1, padding < k (k={k}, stride={stride}, padding={padding})"
        )));
    }
    let g = ConvGeom::new(stride, padding);
    match (g.out_extent(x[2], k), g.out_extent(x[3], k)) {
        (Some(ho), Some(wo)) => Ok([x[0], x[1], ho, wo]),
        _ => Err(Error::Param(format!(
            "pool2d: window {k} exceeds padded input {}x{}",
            x[2], x[3]
        ))),
    }
}

/// Max pooling treats padding as negative infinity; average pooling divides
/// by the full window size `k*k`.
pub fn pool2d(x: &Tensor, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let out_shape = pool_out_shape(x.shape(), k, stride, padding)?;
    let [_, _, h, w] = x.shape();
    let [_, _, ho, wo] = out_shape;
    let mut out = Tensor::zeros(out_shape);
    let xd = x.data();
    let work = |(p, dst): (usize, &mut [f64])| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = match kind {
                    PoolKind::Max => f64::NEG_INFINITY,
                    PoolKind::Avg => 0.0,
                };
                for i in 0..k {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let ix = (ox * stride + j) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = src[iy as usize * w + ix as usize];
                        match kind {
                            PoolKind::Max => {
                                if v > acc {
                                    acc = v
                                }
                            }
                            PoolKind::Avg => acc += v,
                        }
                    }
                }
                dst[oy * wo + ox] = match kind {
                    PoolKind::Max => acc,
                    PoolKind::Avg => acc / (k * k) as f64,
                };
            }
        }
    };
    let l = ho * wo;
    if out.numel() * k * k >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(l).enumerate().for_each(work);
    } else {
        out.data_mut().chunks_mut(l).enumerate().for_each(work);
    }
    Ok(out)
}

pub fn pool2d_backward(
    x: &Tensor,
    dy: &Tensor,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let out_shape = pool_out_shape(x.shape(), k, stride, padding)?;
    if dy.shape() != out_shape {
        return Err(Error::shape("pool2d_backward", format!("{:?} vs {out_shape:?}", dy.shape())));
    }
    let [n, c, h, w] = x.shape();
    let [_, _, ho, wo] = out_shape;
    let mut dx = Tensor::zeros(x.shape());
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let g = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst_off = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[oy * wo + ox];
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in 0..k {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let ix = (ox * stride + j) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        match kind {
                            PoolKind::Max => {
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                            PoolKind::Avg => dx.data_mut()[dst_off + idx] += gv / (k * k) as f64,
                        }
                    }
                }
                if kind == PoolKind::Max && best_idx != usize::MAX {
                    dx.data_mut()[dst_off + best_idx] += gv;
                }
            }
        }
    }
    Ok(dx)
}

fn adaptive_window(i: usize, out: usize, input: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end)
}

/// Average over `out_h x out_w` contiguous windows using floor/ceil index
/// partitioning.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Param(format!(
            "adaptive_avg_pool: output {out_h}x{out_w} must be non-zero and at most input {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1) = adaptive_window(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_window(ox, out_w, w);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += src[iy * w + ix];
                    }
                }
                out.data_mut()[p * out_h * out_w + oy * out_w + ox] =
                    acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward(x_shape: Shape, dy: &Tensor) -> Tensor {
    let [n, c, h, w] = x_shape;
    let [_, _, out_h, out_w] = dy.shape();
    let mut dx = Tensor::zeros(x_shape);
    for p in 0..n * c {
        for oy in 0..out_h {
            let (y0, y1) = adaptive_window(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_window(ox, out_w, w);
                let g = dy.data()[p * out_h * out_w + oy * out_w + ox]
                    / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx.data_mut()[p * h * w + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

pub fn upsample_nearest(x: &Tensor, scale: usize) -> Result<Tensor> {
    if scale < 1 {
        return Err(Error::Param("upsample_nearest: scale must be >= 1".into()));
    }
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * scale, w * scale);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                out.data_mut()[(p * ho + oy) * wo + ox] = x.data()[(p * h + oy / scale) * w + ox / scale];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward(x_shape: Shape, dy: &Tensor, scale: usize) -> Tensor {
    let [n, c, h, w] = x_shape;
    let (ho, wo) = (h * scale, w * scale);
    let mut dx = Tensor::zeros(x_shape);
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                dx.data_mut()[(p * h + oy / scale) * w + ox / scale] += dy.data()[(p * ho + oy) * wo + ox];
            }
        }
    }
    dx
}

/// Bilinear sampling with zero padding outside the image.
///
/// `coords` has shape `[N, 2P, Ho, Wo]`: channel `2p` holds row (y) and
/// `2p + 1` column (x) coordinates of sample set `p`. The output has shape
/// `[N, C*P, Ho, Wo]` with channel `c*P + p` sampling input channel `c`.
pub fn bilinear_sample(x: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let [cn, cp2, ho, wo] = coords.shape();
    if cn != n || cp2 % 2 != 0 || cp2 == 0 {
        return Err(Error::shape(
            "bilinear_sample",
            format!("coords {:?} incompatible with input {:?}", coords.shape(), x.shape()),
        ));
    }
    if !coords.is_finite() {
        return Err(Error::Param("bilinear_sample: non-finite coordinate".into()));
    }
    let p_count = cp2 / 2;
    let l = ho * wo;
    let mut out = Tensor::zeros([n, c * p_count, ho, wo]);
    let xd = x.data();
    let cd = coords.data();
    let work = |(plane, dst): (usize, &mut [f64])| {
        let ni = plane / (c * p_count);
        let ci = (plane / p_count) % c;
        let pi = plane % p_count;
        let src = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
        let ys = &cd[(ni * cp2 + 2 * pi) * l..(ni * cp2 + 2 * pi + 1) * l];
        let xs = &cd[(ni * cp2 + 2 * pi + 1) * l..(ni * cp2 + 2 * pi + 2) * l];
        for li in 0..l {
            dst[li] = interpolate(src, h, w, ys[li], xs[li]);
        }
    };
    if out.numel() * 4 >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(l).enumerate().for_each(work);
    } else {
        out.data_mut().chunks_mut(l).enumerate().for_each(work);
    }
    Ok(out)
}

#[inline]
fn fetch(src: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        src[y as usize * w + x as usize]
    } else {
        0.0
    }
}

#[inline]
fn interpolate(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (ly, lx) = (y - y0, x - x0);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0 as isize, x0 as isize);
    hy * hx * fetch(src, h, w, y0, x0)
        + hy * lx * fetch(src, h, w, y0, x0 + 1)
        + ly * hx * fetch(src, h, w, y0 + 1, x0)
        + ly * lx * fetch(src, h, w, y0 + 1, x0 + 1)
}

/// Gradients of [`bilinear_sample`] with respect to input and coordinates.
pub fn bilinear_sample_backward(x: &Tensor, coords: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let [_, cp2, ho, wo] = coords.shape();
    let p_count = cp2 / 2;
    let l = ho * wo;
    let mut dx = Tensor::zeros(x.shape());
    let mut dc = Tensor::zeros(coords.shape());
    for ni in 0..n {
        for ci in 0..c {
            let src_off = (ni * c + ci) * h * w;
            for pi in 0..p_count {
                let yo = (ni * cp2 + 2 * pi) * l;
                let xo = yo + l;
                let go = (ni * c * p_count + ci * p_count + pi) * l;
                for li in 0..l {
                    let g = dy.data()[go + li];
                    if g == 0.0 {
                        continue;
                    }
                    let y = coords.data()[yo + li];
                    let xv = coords.data()[xo + li];
                    let y0f = y.floor();
                    let x0f = xv.floor();
                    let (ly, lx) = (y - y0f, xv - x0f);
                    let (hy, hx) = (1.0 - ly, 1.0 - lx);
                    let (y0, x0) = (y0f as isize, x0f as isize);
                    let src = &x.data()[src_off..src_off + h * w];
                    let v00 = fetch(src, h, w, y0, x0);
                    let v01 = fetch(src, h, w, y0, x0 + 1);
                    let v10 = fetch(src, h, w, y0 + 1, x0);
                    let v11 = fetch(src, h, w, y0 + 1, x0 + 1);
                    for (dy_, dx_, wgt) in [
                        (0, 0, hy * hx),
                        (0, 1, hy * lx),
                        (1, 0, ly * hx),
                        (1, 1, ly * lx),
                    ] {
                        let yy = y0 + dy_;
                        let xx = x0 + dx_;
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            dx.data_mut()[src_off + yy as usize * w + xx as usize] += g * wgt;
                        }
                    }
                    dc.data_mut()[yo + li] += g * (hx * (v10 - v00) + lx * (v11 - v01));
                    dc.data_mut()[xo + li] += g * (hy * (v01 - v00) + ly * (v11 - v10));
                }
            }
        }
    }
    (dx, dc)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn axis_split(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 3 {
        return Err(Error::Param(format!("{op}: axis {axis} out of range 0..4")));
    }
    Ok(())
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let m = (0..len).map(|a| x.data()[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for a in 0..len {
                let e = (x.data()[idx(a)] - m).exp();
                out.data_mut()[idx(a)] = e;
                denom += e;
            }
            for a in 0..len {
                out.data_mut()[idx(a)] /= denom;
            }
        }
    }
    Ok(out)
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot: f64 = (0..len).map(|a| y.data()[idx(a)] * dy.data()[idx(a)]).sum();
            for a in 0..len {
                dx.data_mut()[idx(a)] = y.data()[idx(a)] * (dy.data()[idx(a)] - dot);
            }
        }
    }
    dx
}

/// Inference-mode batch normalisation with per-channel statistics.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let c = x.channels();
    for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if v.len() != c {
            return Err(Error::Param(format!(
                "batchnorm: {name} has {} entries for {c} channels",
                v.len()
            )));
        }
    }
    if var.iter().any(|&v| v < 0.0) {
        return Err(Error::Param("batchnorm: running_var must be non-negative".into()));
    }
    let hw = x.height() * x.width();
    let mut out = x.clone();
    out.requires_grad = false;
    for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = p % c;
        let scale = gamma[ch] / (var[ch] + eps).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean[ch]) * scale + beta[ch];
        }
    }
    Ok(out)
}

/// Group normalisation; statistics are computed in two passes per
/// `(sample, group)`.
pub fn groupnorm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Param(format!(
            "groupnorm: {c} channels not divisible into {groups} groups"
        )));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Param(format!(
            "groupnorm: affine parameters must have {c} entries"
        )));
    }
    let cpg = c / groups;
    let block = cpg * h * w;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for g in 0..groups {
            let off = (ni * c + g * cpg) * h * w;
            let src = &x.data()[off..off + block];
            let (mean, inv_std) = group_stats(src, eps);
            for (i, &v) in src.iter().enumerate() {
                let ch = g * cpg + i / (h * w);
                out.data_mut()[off + i] = (v - mean) * inv_std * gamma[ch] + beta[ch];
            }
        }
    }
    Ok(out)
}

fn group_stats(src: &[f64], eps: f64) -> (f64, f64) {
    let m = src.len() as f64;
    let mean = src.iter().sum::<f64>() / m;
    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Gradients of [`groupnorm`] with respect to input, gamma and beta.
pub fn groupnorm_backward(
    x: &Tensor,
    groups: usize,
    gamma: &[f64],
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let cpg = c / groups;
    let block = cpg * h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for g in 0..groups {
            let off = (ni * c + g * cpg) * h * w;
            let src = &x.data()[off..off + block];
            let (mean, inv_std) = group_stats(src, eps);
            let m = block as f64;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for (i, &v) in src.iter().enumerate() {
                let ch = g * cpg + i / (h * w);
                let xhat = (v - mean) * inv_std;
                let d = dy.data()[off + i];
                dgamma[ch] += d * xhat;
                dbeta[ch] += d;
                let dxhat = d * gamma[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for (i, &v) in src.iter().enumerate() {
                let ch = g * cpg + i / (h * w);
                let xhat = (v - mean) * inv_std;
                let dxhat = dy.data()[off + i] * gamma[ch];
                dx.data_mut()[off + i] =
                    inv_std * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    check_axis("concat", axis)?;
    let first = inputs
        .first()
        .ok_or_else(|| Error::Param("concat: no inputs".into()))?;
    let mut shape = first.shape();
    for t in &inputs[1..] {
        let s = t.shape();
        if (0..4).any(|d| d != axis && s[d] != shape[d]) {
            let shapes: Vec<_> = inputs.iter().map(|t| t.shape()).collect();
            return Err(Error::shape(
                "concat",
                format!("extents differ off axis {axis}: {shapes:?}"),
            ));
        }
        shape[axis] += s[axis];
    }
    let (outer, _, inner) = axis_split(shape, axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_vec(shape, data)
}

/// Split along `axis` into consecutive pieces of the given sizes.
pub fn split(x: &Tensor, sizes: &[usize], axis: usize) -> Result<Vec<Tensor>> {
    check_axis("split", axis)?;
    let total: usize = sizes.iter().sum();
    if total != x.shape()[axis] {
        return Err(Error::shape(
            "split",
            format!("sizes {sizes:?} do not sum to extent {} of {:?}", x.shape()[axis], x.shape()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut start = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &sz in sizes {
        let mut shape = x.shape();
        shape[axis] = sz;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&x.data()[base..base + sz * inner]);
        }
        parts.push(Tensor::from_vec(shape, data)?);
        start += sz;
    }
    Ok(parts)
}

/// Batched matrix product over the last two axes: `[B0,B1,M,K] x [B0,B1,K,N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [a0, a1, m, k] = a.shape();
    let [b0, b1, k2, nn] = b.shape();
    if a0 != b0 || a1 != b1 || k != k2 {
        return Err(Error::Param(format!(
            "matmul: {:?} x {:?} dimension mismatch",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([a0, a1, m, nn]);
    for bi in 0..a0 * a1 {
        let am = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bm = &b.data()[bi * k * nn..(bi + 1) * k * nn];
        let om = &mut out.data_mut()[bi * m * nn..(bi + 1) * m * nn];
        gemm_acc(am, bm, om, m, k, nn);
    }
    Ok(out)
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let [a0, a1, m, k] = a.shape();
    let nn = b.shape()[3];
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for bi in 0..a0 * a1 {
        let am = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bm = &b.data()[bi * k * nn..(bi + 1) * k * nn];
        let g = &dy.data()[bi * m * nn..(bi + 1) * m * nn];
        for i in 0..m {
            for r in 0..k {
                let mut acc_a = 0.0;
                for j in 0..nn {
                    acc_a += g[i * nn + j] * bm[r * nn + j];
                    db.data_mut()[bi * k * nn + r * nn + j] += am[i * k + r] * g[i * nn + j];
                }
                da.data_mut()[bi * m * k + i * k + r] = acc_a;
            }
        }
    }
    (da, db)
}

/// Broadcast shape of two operands: each axis equal or 1.
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape("broadcast", format!("{a:?} vs {b:?}")));
            }
        }
    }
    Ok(out)
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut st = [0; 4];
    for d in 0..4 {
        st[d] = if s[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    st
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(out_shape, data);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut data = Vec::with_capacity(numel(&out_shape));
    for n in 0..out_shape[0] {
        for c in 0..out_shape[1] {
            for h in 0..out_shape[2] {
                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out_shape[3] {
                    data.push(f(a.data()[ba + w * sa[3]], b.data()[bb + w * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Sum a full-shape gradient down to a (possibly broadcast) operand shape.
pub(crate) fn reduce_to(grad: &Tensor, target: Shape) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let st = broadcast_strides(target, out_shape);
    let mut red = Tensor::zeros(target);
    let mut i = 0;
    for n in 0..out_shape[0] {
        for c in 0..out_shape[1] {
            for h in 0..out_shape[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..out_shape[3] {
                    red.data_mut()[base + w * st[3]] += grad.data()[i];
                    i += 1;
                }
            }
        }
    }
    red
}

/// Swap the two spatial axes.
pub fn transpose_hw(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, w, h]);
    for p in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                out.data_mut()[p * h * w + j * h + i] = x.data()[p * h * w + i * w + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Six nested loops, no im2col.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&[f64]>, g: ConvGeom) -> Tensor {
        let [n, _, h, wd] = x.shape();
        let [co, cg, kh, kw] = w.shape();
        let ho = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
        let wo = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
        let og = co / g.groups;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        for ni in 0..n {
            for o in 0..co {
                let grp = o / og;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b[o]);
                        for ci in 0..cg {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + j * g.dilation) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at(o, ci, i, j)
                                            * x.at(ni, grp * cg + ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(ni, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, ConvGeom::default()).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut r = rng();
        let x = Tensor::rand_uniform([2, 1, 4, 5], -1.0, 1.0, &mut r);
        let w = Tensor::ones([1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, ConvGeom::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_naive_with_padding() {
        let mut r = rng();
        let x = Tensor::rand_uniform([1, 4, 5, 5], -1.0, 1.0, &mut r);
        let w = Tensor::rand_uniform([8, 4, 3, 3], -1.0, 1.0, &mut r);
        let g = ConvGeom::new(1, 1);
        let y = conv2d(&x, &w, None, g).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &w, None, g)).unwrap() < 1e-12);
    }

    #[test]
    fn conv_grouped_strided_dilated_and_depthwise() {
        let mut r = rng();
        let x = Tensor::rand_uniform([2, 6, 9, 8], -1.0, 1.0, &mut r);
        let bias: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        for geom in [
            ConvGeom::new(2, 1).with_groups(2),
            ConvGeom::new(1, 2).with_dilation(2).with_groups(3),
            ConvGeom::new(1, 2).with_groups(6),
            ConvGeom::new(2, 2).with_groups(6),
        ] {
            let w = Tensor::rand_uniform([6, 6 / geom.groups, 5, 3], -1.0, 1.0, &mut r);
            let y = conv2d(&x, &w, Some(&bias), geom).unwrap();
            let want = naive_conv(&x, &w, Some(&bias), geom);
            assert!(y.max_abs_diff(&want).unwrap() < 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let w = Tensor::zeros([4, 1, 3, 3]);
        let err = conv2d(&x, &w, None, ConvGeom::default().with_groups(2)).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        let w = Tensor::zeros([4, 3, 7, 7]);
        assert!(conv2d(&x, &w, None, ConvGeom::default()).is_err());
    }

    #[test]
    fn pool_basic_cases() {
        let x = Tensor::full([1, 2, 5, 5], 0.3);
        let y = pool2d(&x, PoolKind::Avg, 3, 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool2d(&x, PoolKind::Max, 2, 1, 0).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert!(pool2d(&x, PoolKind::Max, 2, 1, 2).is_err());
    }

    #[test]
    fn max_pool_matches_window_scan() {
        let mut r = rng();
        let x = Tensor::rand_uniform([1, 2, 6, 6], -1.0, 1.0, &mut r);
        let y = pool2d(&x, PoolKind::Max, 5, 1, 2).unwrap();
        for c in 0..2 {
            for i in 0..6usize {
                for j in 0..6usize {
                    let mut m = f64::NEG_INFINITY;
                    for a in i.saturating_sub(2)..(i + 3).min(6) {
                        for b in j.saturating_sub(2)..(j + 3).min(6) {
                            m = m.max(x.at(0, c, a, b));
                        }
                    }
                    assert_eq!(y.at(0, c, i, j), m);
                }
            }
        }
    }

    #[test]
    fn max_pool_padding_never_wins() {
        let x = Tensor::full([1, 1, 3, 3], -5.0);
        let y = pool2d(&x, PoolKind::Max, 3, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == -5.0));
    }

    #[test]
    fn adaptive_pool_cases() {
        let mut r = rng();
        let x = Tensor::rand_uniform([1, 2, 4, 4], 0.0, 1.0, &mut r);
        assert_eq!(adaptive_avg_pool(&x, 4, 4).unwrap(), x);
        let ones = Tensor::ones([1, 1, 4, 4]);
        assert_eq!(adaptive_avg_pool(&ones, 1, 1).unwrap().data(), &[1.0]);
        assert!(adaptive_avg_pool(&ones, 0, 1).is_err());

        let x = Tensor::rand_uniform([1, 1, 4, 6], 0.0, 1.0, &mut r);
        let y = adaptive_avg_pool(&x, 1, 3).unwrap();
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 2 * k..2 * k + 2 {
                    s += x.at(0, 0, i, j);
                }
            }
            assert!((y.at(0, 0, 0, k) - s / 8.0).abs() < 1e-14);
        }
    }

    #[test]
    fn upsample_cases() {
        let mut r = rng();
        let x = Tensor::rand_uniform([1, 3, 2, 2], 0.0, 1.0, &mut r);
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        assert!(upsample_nearest(&x, 0).is_err());
        let seven = Tensor::full([1, 1, 1, 1], 7.0);
        assert_eq!(upsample_nearest(&seven, 2).unwrap().data(), &[7.0; 4]);
        let y = upsample_nearest(&x, 2).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(y.at(0, c, i, j), x.at(0, c, i / 2, j / 2));
                }
            }
        }
    }

    #[test]
    fn bilinear_cases() {
        let mut r = rng();
        let x = Tensor::rand_uniform([1, 1, 5, 5], 0.0, 1.0, &mut r);
        let c = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(bilinear_sample(&x, &c).unwrap().data()[0], x.at(0, 0, 1, 2));
        let c = Tensor::from_vec([1, 2, 1, 1], vec![1.5, 2.5]).unwrap();
        let mean = (x.at(0, 0, 1, 2) + x.at(0, 0, 1, 3) + x.at(0, 0, 2, 2) + x.at(0, 0, 2, 3)) / 4.0;
        assert!((bilinear_sample(&x, &c).unwrap().data()[0] - mean).abs() < 1e-15);

        // Random coordinates, including out-of-bounds ones.
        let coords = Tensor::rand_uniform([1, 2, 4, 4], -1.5, 5.5, &mut r);
        let y = bilinear_sample(&x, &coords).unwrap();
        let px = |i: isize, j: isize| {
            if (0..5).contains(&i) && (0..5).contains(&j) {
                x.at(0, 0, i as usize, j as usize)
            } else {
                0.0
            }
        };
        for k in 0..16 {
            let yy = coords.data()[k];
            let xx = coords.data()[16 + k];
            let (fy, fx) = (yy.floor(), xx.floor());
            let (ay, ax) = (yy - fy, xx - fx);
            let (i, j) = (fy as isize, fx as isize);
            let want = (1.0 - ay) * (1.0 - ax) * px(i, j)
                + (1.0 - ay) * ax * px(i, j + 1)
                + ay * (1.0 - ax) * px(i + 1, j)
                + ay * ax * px(i + 1, j + 1);
            assert!((y.data()[k] - want).abs() < 1e-14);
        }

        let bad = Tensor::from_vec([1, 2, 1, 1], vec![f64::NAN, 0.0]).unwrap();
        assert!(bilinear_sample(&x, &bad).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let s = silu(&Tensor::scalar(1.0)).data()[0];
        assert!((s - 0.731_058_578_630_004_9).abs() < 1e-12);
        let x = Tensor::full([1, 1, 1, 6], 3.3);
        let y = softmax(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!(softmax(&x, 4).is_err());
        assert!(sigmoid_scalar(-800.0).is_finite() && sigmoid_scalar(800.0) == 1.0);
    }

    #[test]
    fn batchnorm_cases() {
        let mut r = rng();
        let x = Tensor::rand_uniform([2, 3, 2, 2], -1.0, 1.0, &mut r);
        let y = batchnorm_infer(&x, &[1.0; 3], &[0.0; 3], &[0.0; 3], &[1.0; 3], 0.0).unwrap();
        assert_eq!(y.data(), x.data());
        let y = batchnorm_infer(&x, &[0.0; 3], &[0.1, 0.2, 0.3], &[0.5; 3], &[2.0; 3], 1e-5).unwrap();
        for c in 0..3 {
            assert_eq!(y.at(1, c, 1, 0), [0.1, 0.2, 0.3][c]);
        }
        let (g, b, m, v) = ([0.5, -1.0, 2.0], [0.1, 0.0, -0.2], [0.3, -0.1, 0.0], [0.9, 1.5, 0.1]);
        let y = batchnorm_infer(&x, &g, &b, &m, &v, 1e-3).unwrap();
        for (i, &val) in x.data().iter().enumerate() {
            let c = (i / 4) % 3;
            let want = (val - m[c]) / (v[c] + 1e-3f64).sqrt() * g[c] + b[c];
            assert!((y.data()[i] - want).abs() < 1e-14);
        }
        assert!(batchnorm_infer(&x, &[1.0; 2], &[0.0; 3], &[0.0; 3], &[1.0; 3], 0.0).is_err());
    }

    #[test]
    fn groupnorm_cases() {
        let mut r = rng();
        let x = Tensor::rand_uniform([1, 8, 3, 3], -2.0, 3.0, &mut r);
        let y = groupnorm(&x, 2, &[1.0; 8], &[0.0; 8], 1e-12).unwrap();
        for g in 0..2 {
            let s = &y.data()[g * 36..(g + 1) * 36];
            let mean = s.iter().sum::<f64>() / 36.0;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
            // two-pass oracle
            let src = &x.data()[g * 36..(g + 1) * 36];
            let m = src.iter().sum::<f64>() / 36.0;
            let v = src.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 36.0;
            for (a, b) in src.iter().zip(s) {
                assert!(((a - m) / (v + 1e-12).sqrt() - b).abs() < 1e-12);
            }
        }
        let c = groupnorm(&Tensor::full([1, 4, 2, 2], 3.0), 2, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert!(groupnorm(&x, 3, &[1.0; 8], &[0.0; 8], 1e-5).is_err());
    }

    #[test]
    fn concat_split_cases() {
        let mut r = rng();
        let rgb = Tensor::rand_uniform([1, 3, 2, 2], 0.0, 1.0, &mut r);
        let ir = Tensor::rand_uniform([1, 1, 2, 2], 0.0, 1.0, &mut r);
        assert_eq!(concat(&[&rgb], 1).unwrap(), rgb);
        let f = concat(&[&rgb, &ir], 1).unwrap();
        assert_eq!(f.shape(), [1, 4, 2, 2]);
        assert_eq!(&f.data()[..12], rgb.data());
        assert_eq!(&f.data()[12..], ir.data());
        let bad = Tensor::zeros([1, 1, 3, 2]);
        let err = concat(&[&rgb, &bad], 1).unwrap_err();
        assert!(err.to_string().contains("[1, 3, 2, 2]"), "{err}");
        assert!(split(&f, &[3, 2], 1).is_err());
    }

    #[test]
    fn matmul_cases() {
        let mut r = rng();
        let a = Tensor::rand_uniform([1, 1, 3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform([1, 1, 4, 2], -1.0, 1.0, &mut r);
        let y = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(0, 0, i, k) * b.at(0, 0, k, j);
                }
                assert!((y.at(0, 0, i, j) - s).abs() < 1e-14);
            }
        }
        let mut eye = Tensor::zeros([1, 1, 3, 3]);
        for i in 0..3 {
            eye.set(0, 0, i, i, 1.0);
        }
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let s = matmul(&Tensor::scalar(3.0), &Tensor::scalar(-2.0)).unwrap();
        assert_eq!(s.data(), &[-6.0]);
        assert!(matmul(&a, &a).is_err());
    }
}
