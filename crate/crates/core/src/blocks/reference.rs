//! Baseline YOLOv8 blocks, kept for accounting comparisons and the
//! baseline graph.

use super::{join, Block, ConvBnAct, Cost, InitRng, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Shape, Tape, Var};
use crate::{Error, Result};

/// Two 3x3 ConvBnAct with an optional residual.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
    add: bool,
}

impl Bottleneck {
    pub fn new(c1: usize, c2: usize, shortcut: bool, rng: &mut InitRng) -> Result<Self> {
        Ok(Self {
            cv1: ConvBnAct::new(c1, c2, 3, 1, rng)?,
            cv2: ConvBnAct::new(c2, c2, 3, 1, rng)?,
            add: shortcut && c1 == c2,
        })
    }
}

impl Block for Bottleneck {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let y = self.cv1.forward(tape, x)?;
        let y = self.cv2.forward(tape, &y)?;
        if self.add {
            tape.add(&y, x)
        } else {
            Ok(y)
        }
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        let c = self.cv1.cost(input)?;
        Ok(c.then(self.cv2.cost(c.out)?))
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

/// CSP bottleneck with two convolutions, as in YOLOv8: the 1x1 projection
/// is split in half, each bottleneck output is kept, and everything is
/// concatenated before the final 1x1.
#[derive(Clone, Debug)]
pub struct C2f {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
    pub m: Vec<Bottleneck>,
    hidden: usize,
}

impl C2f {
    pub fn new(c1: usize, c2: usize, n: usize, shortcut: bool, rng: &mut InitRng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Param("C2f: need at least one bottleneck".into()));
        }
        if c2 == 0 || !c2.is_multiple_of(2) {
            return Err(Error::Param(format!("C2f: output channels must be even, got {c2}")));
        }
        let hidden = c2 / 2;
        let cv1 = ConvBnAct::new(c1, 2 * hidden, 1, 1, rng)?;
        let m = (0..n)
            .map(|_| Bottleneck::new(hidden, hidden, shortcut, rng))
            .collect::<Result<Vec<_>>>()?;
        let cv2 = ConvBnAct::new((2 + n) * hidden, c2, 1, 1, rng)?;
        Ok(Self { cv1, cv2, m, hidden })
    }
}

impl Block for C2f {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let y = self.cv1.forward(tape, x)?;
        let mut parts = tape.split(&y, &[self.hidden, self.hidden], 1)?;
        for b in &self.m {
            let next = b.forward(tape, parts.last().expect("non-empty"))?;
            parts.push(next);
        }
        let refs: Vec<&Var> = parts.iter().collect();
        let cat = tape.concat(&refs, 1)?;
        self.cv2.forward(tape, &cat)
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        let mut total = self.cv1.cost(input)?;
        let mut half = total.out;
        half[1] = self.hidden;
        for b in &self.m {
            let c = b.cost(half)?;
            total.params += c.params;
            total.macs += c.macs;
            half = c.out;
        }
        let mut cat = half;
        cat[1] = (2 + self.m.len()) * self.hidden;
        Ok(total.then(self.cv2.cost(cat)?))
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
        for (i, b) in self.m.iter().enumerate() {
            b.visit(&join(prefix, &format!("m.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
        for (i, b) in self.m.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("m.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn c2f_forward_matches_cost_shape() {
        let mut r = InitRng::seed_from_u64(5);
        let m = C2f::new(8, 16, 2, true, &mut r).unwrap();
        let mut t = Tape::inference();
        let x = t.constant(Tensor::rand_uniform([1, 8, 6, 6], -1.0, 1.0, &mut r));
        let y = m.forward(&mut t, &x).unwrap();
        let c = m.cost([1, 8, 6, 6]).unwrap();
        assert_eq!(y.shape(), c.out);
        assert_eq!(c.params, m.enumerate_params());
        assert_eq!(c.macs, t.macs());
    }
}
