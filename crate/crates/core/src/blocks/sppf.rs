use super::{join, Block, ConvBnAct, Cost, InitRng, ParamVisitor, ParamVisitorMut};
use crate::tensor::{PoolKind, Shape, Tape, Var};
use crate::{Error, Result};

/// Spatial pyramid pooling, fast form: three chained stride-1 max-pools
/// whose outputs are concatenated with their input.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
    pub k: usize,
}

impl Sppf {
    pub fn new(c1: usize, c2: usize, k: usize, rng: &mut InitRng) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Param(format!("SPPF: pool size must be odd, got {k}")));
        }
        if c1 < 2 {
            return Err(Error::Param(format!("SPPF: need at least 2 input channels, got {c1}")));
        }
        let hidden = c1 / 2;
        Ok(Self {
            cv1: ConvBnAct::new(c1, hidden, 1, 1, rng)?,
            cv2: ConvBnAct::new(4 * hidden, c2, 1, 1, rng)?,
            k,
        })
    }

    fn pool(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        tape.pool2d(x, PoolKind::Max, self.k, 1, self.k / 2)
    }
}

impl Block for Sppf {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let a = self.cv1.forward(tape, x)?;
        let b = self.pool(tape, &a)?;
        let c = self.pool(tape, &b)?;
        let d = self.pool(tape, &c)?;
        let cat = tape.concat(&[&a, &b, &c, &d], 1)?;
        self.cv2.forward(tape, &cat)
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        let a = self.cv1.cost(input)?;
        let mut cat = a.out;
        cat[1] *= 4;
        Ok(a.then(self.cv2.cost(cat)?))
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
    }
}
