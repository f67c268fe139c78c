use super::{Block, Cost, GhostConv, InitRng, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Shape, Tape, Var};
use crate::{Error, Result};

/// Stack an RGB tensor and a single-channel IR tensor as (R, G, B, IR).
pub fn fuse_rgb_ir(tape: &mut Tape, rgb: &Var, ir: &Var) -> Result<Var> {
    let (a, b) = (rgb.shape(), ir.shape());
    if a[1] != 3 || b[1] != 1 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3] {
        return Err(Error::Alignment { rgb: a, ir: b });
    }
    tape.concat(&[rgb, ir], 1)
}

/// Ghost stem over the 4-channel early-fusion input.
#[derive(Clone, Debug)]
pub struct FusionStem {
    pub ghost: GhostConv,
}

impl FusionStem {
    pub fn new(out_channels: usize, rng: &mut InitRng) -> Result<Self> {
        Ok(Self {
            ghost: GhostConv::new(4, out_channels, 3, 2, true, rng)?,
        })
    }

    pub fn forward_pair(&self, tape: &mut Tape, rgb: &Var, ir: &Var) -> Result<Var> {
        let x = fuse_rgb_ir(tape, rgb, ir)?;
        self.ghost.forward(tape, &x)
    }
}

impl Block for FusionStem {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        self.ghost.forward(tape, x)
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        self.ghost.cost(input)
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.ghost.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.ghost.visit_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn halves_spatial_extent() {
        let mut r = InitRng::seed_from_u64(41);
        let s = FusionStem::new(16, &mut r).unwrap();
        assert_eq!(s.cost([1, 4, 640, 640]).unwrap().out, [1, 16, 320, 320]);
        let mut t = Tape::inference();
        let rgb = t.constant(Tensor::rand_uniform([1, 3, 10, 12], 0.0, 1.0, &mut r));
        let ir = t.constant(Tensor::rand_uniform([1, 1, 10, 12], 0.0, 1.0, &mut r));
        assert_eq!(s.forward_pair(&mut t, &rgb, &ir).unwrap().shape(), [1, 16, 5, 6]);
    }

    #[test]
    fn zero_ir_matches_explicit_stack() {
        let mut r = InitRng::seed_from_u64(42);
        let s = FusionStem::new(16, &mut r).unwrap();
        let rgb = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut r);
        let mut stacked = Tensor::zeros([1, 4, 8, 8]);
        stacked.data_mut()[..3 * 64].copy_from_slice(rgb.data());
        let mut t = Tape::inference();
        let (rv, iv) = (t.constant(rgb), t.constant(Tensor::zeros([1, 1, 8, 8])));
        let a = s.forward_pair(&mut t, &rv, &iv).unwrap();
        let sv = t.constant(stacked);
        let b = s.forward(&mut t, &sv).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn misaligned_pair_names_shapes() {
        let mut t = Tape::inference();
        let rgb = t.constant(Tensor::zeros([1, 3, 8, 8]));
        let ir = t.constant(Tensor::zeros([1, 1, 8, 6]));
        match fuse_rgb_ir(&mut t, &rgb, &ir) {
            Err(Error::Alignment { rgb, ir }) => {
                assert_eq!(rgb, [1, 3, 8, 8]);
                assert_eq!(ir, [1, 1, 8, 6]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extra_channel_costs_one_kernel_slice_per_primary_filter() {
        let mut r = InitRng::seed_from_u64(43);
        let four = FusionStem::new(16, &mut r).unwrap().enumerate_params();
        let three = GhostConv::new(3, 16, 3, 2, true, &mut r).unwrap().enumerate_params();
        assert_eq!(four - three, 8 * 3 * 3);
    }
}
