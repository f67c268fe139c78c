use super::{join, Block, ConvBnAct, Cost, InitRng, Param, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Shape, Tape, Var};
use crate::{Error, Result};

/// Group count used by the assembled models; divides every nano stage width.
pub const DEFAULT_EMA_FACTOR: usize = 8;

const GN_EPS: f64 = 1e-5;

/// Weights of one attention block. All convolutions act on `C / factor`
/// channels of a regrouped input.
#[derive(Clone, Debug)]
pub struct EmaParams {
    pub factor: usize,
    pub conv1x1: ConvBnAct,
    pub conv3x3: ConvBnAct,
    pub gn_gamma: Param,
    pub gn_beta: Param,
}

/// Grouped attention: directional (row/column) pooled gates feed a
/// group-normalised branch, a 3x3 branch runs in parallel, and the two are
/// mixed through softmax-weighted global descriptors into one spatial gate.
#[derive(Clone, Debug)]
pub struct Ema {
    pub params: EmaParams,
    channels: usize,
}

impl Ema {
    pub fn new(channels: usize, factor: usize, rng: &mut InitRng) -> Result<Self> {
        if factor == 0 || channels == 0 || !channels.is_multiple_of(factor) {
            return Err(Error::Param(format!(
                "EMA: {channels} channels not divisible by factor {factor}"
            )));
        }
        let cg = channels / factor;
        Ok(Self {
            params: EmaParams {
                factor,
                conv1x1: ConvBnAct::with_options(cg, cg, 1, 1, 1, None, rng)?,
                conv3x3: ConvBnAct::with_options(cg, cg, 3, 1, 1, None, rng)?,
                gn_gamma: Param::vector(vec![1.0; cg], true),
                gn_beta: Param::vector(vec![0.0; cg], true),
            },
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn factor(&self) -> usize {
        self.params.factor
    }

    fn check(&self, input: Shape) -> Result<()> {
        if input[1] != self.channels {
            return Err(Error::shape(
                "EMA",
                format!("expects {} channels, got {input:?}", self.channels),
            ));
        }
        Ok(())
    }
}

impl Block for Ema {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let [n, c, h, w] = x.shape();
        self.check(x.shape())?;
        let p = &self.params;
        let g = p.factor;
        let (b, cg) = (n * g, c / g);

        let gx = tape.reshape(x, [b, cg, h, w])?;
        let xh = tape.adaptive_avg_pool(&gx, h, 1)?;
        let xw = tape.adaptive_avg_pool(&gx, 1, w)?;
        let xw = tape.transpose_hw(&xw)?;
        let cat = tape.concat(&[&xh, &xw], 2)?;
        let mixed = p.conv1x1.forward(tape, &cat)?;
        let parts = tape.split(&mixed, &[h, w], 2)?;
        let gate_h = tape.sigmoid(&parts[0])?;
        let gate_w = tape.transpose_hw(&parts[1])?;
        let gate_w = tape.sigmoid(&gate_w)?;

        let gated = tape.mul(&gx, &gate_h)?;
        let gated = tape.mul(&gated, &gate_w)?;
        let gamma = p.gn_gamma.var(tape);
        let beta = p.gn_beta.var(tape);
        let x1 = tape.groupnorm(&gated, cg, &gamma, &beta, GN_EPS)?;
        let x2 = p.conv3x3.forward(tape, &gx)?;

        let descriptor = |tape: &mut Tape, v: &Var| -> Result<Var> {
            let pooled = tape.adaptive_avg_pool(v, 1, 1)?;
            let flat = tape.reshape(&pooled, [b, 1, 1, cg])?;
            tape.softmax(&flat, 3)
        };
        let a1 = descriptor(tape, &x1)?;
        let a2 = descriptor(tape, &x2)?;
        let f1 = tape.reshape(&x1, [b, 1, cg, h * w])?;
        let f2 = tape.reshape(&x2, [b, 1, cg, h * w])?;
        let y1 = tape.matmul(&a1, &f2)?;
        let y2 = tape.matmul(&a2, &f1)?;
        let y = tape.add(&y1, &y2)?;
        let y = tape.reshape(&y, [b, 1, h, w])?;
        let weights = tape.sigmoid(&y)?;
        let out = tape.mul(&gx, &weights)?;
        tape.reshape(&out, [n, c, h, w])
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        self.check(input)?;
        let [n, c, h, w] = input;
        let g = self.params.factor;
        let (b, cg) = ((n * g) as u64, (c / g) as u64);
        let (h, w) = (h as u64, w as u64);
        let p1 = self.params.conv1x1.param_count();
        let p3 = self.params.conv3x3.param_count();
        Ok(Cost {
            out: input,
            params: p1 + p3 + 2 * cg,
            macs: b * cg * (h + w) * cg + b * cg * h * w * cg * 9 + 2 * b * cg * h * w,
        })
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.params.conv1x1.visit(&join(prefix, "conv1x1"), f);
        self.params.conv3x3.visit(&join(prefix, "conv3x3"), f);
        f(&join(prefix, "gn.weight"), &self.params.gn_gamma);
        f(&join(prefix, "gn.bias"), &self.params.gn_beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.params.conv1x1.visit_mut(&join(prefix, "conv1x1"), f);
        self.params.conv3x3.visit_mut(&join(prefix, "conv3x3"), f);
        f(&join(prefix, "gn.weight"), &mut self.params.gn_gamma);
        f(&join(prefix, "gn.bias"), &mut self.params.gn_beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::SeedableRng;

    #[test]
    fn rejects_indivisible_channels() {
        let mut r = InitRng::seed_from_u64(0);
        assert!(matches!(Ema::new(12, 8, &mut r), Err(Error::Param(_))));
        assert!(Ema::new(16, 8, &mut r).is_ok());
    }

    #[test]
    fn preserves_shape_and_shrinks_magnitude() {
        let mut r = InitRng::seed_from_u64(1);
        for (c, g, h, w) in [(16usize, 8usize, 5usize, 7usize), (32, 4, 4, 4), (8, 2, 3, 6)] {
            let e = Ema::new(c, g, &mut r).unwrap();
            let x = Tensor::rand_uniform([2, c, h, w], -2.0, 2.0, &mut r);
            let mut t = Tape::inference();
            let xv = t.constant(x.clone());
            let y = e.forward(&mut t, &xv).unwrap();
            assert_eq!(y.shape(), x.shape());
            for (a, b) in y.value().data().iter().zip(x.data()) {
                assert!(a.abs() <= b.abs());
                assert!(a.signum() == b.signum() || *a == 0.0);
            }
        }
    }

    #[test]
    fn cost_matches_tape_and_enumeration() {
        let mut r = InitRng::seed_from_u64(2);
        let e = Ema::new(64, 8, &mut r).unwrap();
        let mut t = Tape::inference();
        let x = t.constant(Tensor::rand_uniform([1, 64, 6, 5], -1.0, 1.0, &mut r));
        e.forward(&mut t, &x).unwrap();
        let c = e.cost([1, 64, 6, 5]).unwrap();
        assert_eq!(c.macs, t.macs());
        assert_eq!(c.params, e.enumerate_params());
        // cg = 8: 1x1 (64 + 16) + 3x3 (576 + 16) + gn 16
        assert_eq!(c.params, 688);
    }

    #[test]
    fn passes_grad_check() {
        let mut r = InitRng::seed_from_u64(3);
        let e = Ema::new(8, 2, &mut r).unwrap();
        let x = Tensor::rand_uniform([1, 8, 6, 6], -1.0, 1.0, &mut r);
        let rep = grad_check(|t, v| e.forward(t, &v[0]), &[x], 1e-4, 1e-3).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
