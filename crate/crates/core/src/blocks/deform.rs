use super::{join, kaiming_weight, same_padding, BatchNorm, Block, ConvBias, ConvBnAct, Cost, InitRng, Param};
use super::{ParamVisitor, ParamVisitorMut};
use crate::tensor::kernels::conv2d_out_shape;
use crate::tensor::{Activation, ConvGeom, Shape, Tape, Tensor, Var};
use crate::{Error, Result};

/// Mask-conv bias at initialisation; sigmoid(30) differs from 1 by ~1e-13,
/// so a fresh layer behaves as an ordinary convolution.
pub const MASK_BIAS_INIT: f64 = 30.0;

/// Modulated deformable convolution.
///
/// `offsets` is `[N, 2K, Ho, Wo]` with `K = k*k` taps in row-major order;
/// channel `2t` is the row shift and `2t + 1` the column shift of tap `t`.
/// `mask`, when present, is `[N, K, Ho, Wo]` and multiplies each sample.
/// `None` means unit modulation. Only `groups = 1` is supported.
pub fn deform_conv2d(
    tape: &mut Tape,
    x: &Var,
    offsets: &Var,
    mask: Option<&Var>,
    weight: &Var,
    geom: ConvGeom,
) -> Result<Var> {
    let [n, c, _, _] = x.shape();
    let [o, wc, kh, kw] = weight.shape();
    if geom.groups != 1 || wc != c {
        return Err(Error::Config(format!(
            "deformable conv: weight {:?} incompatible with input {:?} (groups {})",
            weight.shape(),
            x.shape(),
            geom.groups
        )));
    }
    let out = conv2d_out_shape(x.shape(), weight.shape(), geom)?;
    let (ho, wo) = (out[2], out[3]);
    let taps = kh * kw;
    if offsets.shape() != [n, 2 * taps, ho, wo] {
        return Err(Error::Config(format!(
            "deformable conv: offsets {:?}, expected {:?}",
            offsets.shape(),
            [n, 2 * taps, ho, wo]
        )));
    }
    if let Some(m) = mask {
        if m.shape() != [n, taps, ho, wo] {
            return Err(Error::Config(format!(
                "deformable conv: mask {:?}, expected {:?}",
                m.shape(),
                [n, taps, ho, wo]
            )));
        }
    }

    let grid = tape.constant(base_grid(kh, kw, ho, wo, geom));
    let coords = tape.add(offsets, &grid)?;
    let mut sampled = tape.bilinear_sample(x, &coords)?;
    if let Some(m) = mask {
        let s = tape.reshape(&sampled, [n, c, taps, ho * wo])?;
        let m = tape.reshape(m, [n, 1, taps, ho * wo])?;
        let s = tape.mul(&s, &m)?;
        sampled = tape.reshape(&s, [n, c * taps, ho, wo])?;
    }
    let w = tape.reshape(weight, [o, c * taps, 1, 1])?;
    tape.conv2d(&sampled, &w, None, ConvGeom::new(1, 0))
}

/// Sampling positions of every tap without offsets, `[1, 2K, Ho, Wo]`.
fn base_grid(kh: usize, kw: usize, ho: usize, wo: usize, geom: ConvGeom) -> Tensor {
    let mut g = Tensor::zeros([1, 2 * kh * kw, ho, wo]);
    let (s, p, d) = (geom.stride as f64, geom.padding as f64, geom.dilation as f64);
    for i in 0..kh {
        for j in 0..kw {
            let t = i * kw + j;
            for oy in 0..ho {
                for ox in 0..wo {
                    g.set(0, 2 * t, oy, ox, oy as f64 * s - p + i as f64 * d);
                    g.set(0, 2 * t + 1, oy, ox, ox as f64 * s - p + j as f64 * d);
                }
            }
        }
    }
    g
}

/// Kernel plus the convolutions that predict its offsets and modulation.
#[derive(Clone, Debug)]
pub struct DeformConvParams {
    pub weight: Param,
    pub offset_conv: ConvBias,
    pub mask_conv: ConvBias,
    pub geom: ConvGeom,
    kernel: usize,
}

impl DeformConvParams {
    /// Random kernel; offset and mask predictors start at zero weights.
    pub fn new(c1: usize, c2: usize, k: usize, s: usize, rng: &mut InitRng) -> Result<Self> {
        if c1 == 0 || c2 == 0 || k == 0 || s == 0 {
            return Err(Error::Param(format!("deformable conv: zero extent ({c1}->{c2}, k={k}, s={s})")));
        }
        let weight = kaiming_weight([c2, c1, k, k], rng);
        Ok(Self {
            weight: Param::new(weight, vec![c2, c1, k, k], true),
            offset_conv: ConvBias::zeroed(c1, 2 * k * k, k, s, 0.0),
            mask_conv: ConvBias::zeroed(c1, k * k, k, s, MASK_BIAS_INIT),
            geom: ConvGeom::new(s, same_padding(k)),
            kernel: k,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let offsets = self.offset_conv.forward(tape, x)?;
        let m = self.mask_conv.forward(tape, x)?;
        let m = tape.sigmoid(&m)?;
        let w = self.weight.var(tape);
        deform_conv2d(tape, x, &offsets, Some(&m), &w, self.geom)
    }

    pub fn cost(&self, input: Shape) -> Result<Cost> {
        let (c1, c2, k) = (self.in_channels(), self.out_channels(), self.kernel);
        if input[1] != c1 {
            return Err(Error::shape("deformable conv", format!("expects {c1} channels, got {input:?}")));
        }
        let off = self.offset_conv.cost(input)?;
        let mask = self.mask_conv.cost(input)?;
        let out = conv2d_out_shape(input, [c2, c1, k, k], self.geom)?;
        let out_pixels = (out[0] * out[2] * out[3]) as u64;
        let taps = (k * k) as u64;
        let sampling = 8 * out_pixels * c1 as u64 * taps;
        let main = out_pixels * c2 as u64 * c1 as u64 * taps;
        Ok(Cost {
            out,
            params: (c2 * c1 * k * k) as u64 + off.params + mask.params,
            macs: off.macs + mask.macs + sampling + main,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        self.offset_conv.visit(&join(prefix, "offset"), f);
        self.mask_conv.visit(&join(prefix, "mask"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        self.offset_conv.visit_mut(&join(prefix, "offset"), f);
        self.mask_conv.visit_mut(&join(prefix, "mask"), f);
    }
}

/// Deformable counterpart of [`ConvBnAct`].
#[derive(Clone, Debug)]
pub struct DeformConvBnAct {
    pub conv: DeformConvParams,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl DeformConvBnAct {
    pub fn new(c1: usize, c2: usize, k: usize, s: usize, rng: &mut InitRng) -> Result<Self> {
        Ok(Self {
            conv: DeformConvParams::new(c1, c2, k, s, rng)?,
            bn: BatchNorm::identity(c2),
            act: Some(Activation::Silu),
        })
    }

    /// The same kernel, BN and activation as a plain convolution, sharing
    /// the stored tensors.
    pub fn to_standard(&self) -> ConvBnAct {
        ConvBnAct::from_parts(self.conv.weight.clone(), self.bn.clone(), self.conv.geom, self.act)
    }
}

impl Block for DeformConvBnAct {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y)?;
        match self.act {
            Some(a) => tape.activation(&y, a),
            None => Ok(y),
        }
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        let mut c = self.conv.cost(input)?;
        c.params += 2 * self.conv.out_channels() as u64;
        Ok(c)
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
