use super::{join, Block, ConvBias, ConvBnAct, Cost, DeformConvBnAct, InitRng, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Shape, Tape, Var};
use crate::{Error, Result};

/// Which convolution opens each head branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Standard,
    DDetect,
}

/// First 3x3 convolution of a head branch.
#[derive(Clone, Debug)]
pub enum HeadConv {
    Standard(ConvBnAct),
    Deformable(DeformConvBnAct),
}

impl HeadConv {
    fn new(kind: HeadKind, c1: usize, c2: usize, rng: &mut InitRng) -> Result<Self> {
        Ok(match kind {
            HeadKind::Standard => Self::Standard(ConvBnAct::new(c1, c2, 3, 1, rng)?),
            HeadKind::DDetect => Self::Deformable(DeformConvBnAct::new(c1, c2, 3, 1, rng)?),
        })
    }

    fn block(&self) -> &dyn Block {
        match self {
            Self::Standard(c) => c,
            Self::Deformable(c) => c,
        }
    }

    fn block_mut(&mut self) -> &mut dyn Block {
        match self {
            Self::Standard(c) => c,
            Self::Deformable(c) => c,
        }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    first: HeadConv,
    second: ConvBnAct,
    pred: ConvBias,
}

impl Branch {
    fn new(kind: HeadKind, c1: usize, hidden: usize, out: usize, bias: f64, rng: &mut InitRng) -> Result<Self> {
        let first = HeadConv::new(kind, c1, hidden, rng)?;
        let second = ConvBnAct::new(hidden, hidden, 3, 1, rng)?;
        let mut pred = ConvBias::new(hidden, out, 1, 1, rng)?;
        pred.set_bias(bias);
        Ok(Self { first, second, pred })
    }

    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let y = self.first.block().forward(tape, x)?;
        let y = self.second.forward(tape, &y)?;
        self.pred.forward(tape, &y)
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        let c = self.first.block().cost(input)?;
        let c = c.then(self.second.cost(c.out)?);
        Ok(c.then(self.pred.cost(c.out)?))
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.first.block().visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
        self.pred.visit(&join(prefix, "2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.first.block_mut().visit_mut(&join(prefix, "0"), f);
        self.second.visit_mut(&join(prefix, "1"), f);
        self.pred.visit_mut(&join(prefix, "2"), f);
    }
}

/// Decoupled three-scale detection head. Each scale emits raw maps with
/// `4 * reg_max` box-distribution channels followed by `num_classes` logits.
#[derive(Clone, Debug)]
pub struct DetectHead {
    pub kind: HeadKind,
    pub num_classes: usize,
    pub reg_max: usize,
    pub strides: [usize; 3],
    in_channels: [usize; 3],
    boxes: Vec<Branch>,
    classes: Vec<Branch>,
}

impl DetectHead {
    pub fn new(
        kind: HeadKind,
        in_channels: [usize; 3],
        num_classes: usize,
        reg_max: usize,
        strides: [usize; 3],
        rng: &mut InitRng,
    ) -> Result<Self> {
        if num_classes == 0 || reg_max == 0 {
            return Err(Error::Config("detect head: need at least one class and one bin".into()));
        }
        let ch0 = in_channels[0];
        let box_hidden = 16.max(ch0 / 4).max(4 * reg_max);
        let cls_hidden = ch0.max(num_classes.min(100));
        let mut boxes = Vec::with_capacity(3);
        let mut classes = Vec::with_capacity(3);
        for (&c, &s) in in_channels.iter().zip(&strides) {
            boxes.push(Branch::new(kind, c, box_hidden, 4 * reg_max, 1.0, rng)?);
            let cells = (640.0 / s as f64).powi(2);
            let prior = (5.0 / num_classes as f64 / cells).ln();
            classes.push(Branch::new(kind, c, cls_hidden, num_classes, prior, rng)?);
        }
        Ok(Self {
            kind,
            num_classes,
            reg_max,
            strides,
            in_channels,
            boxes,
            classes,
        })
    }

    /// Channels of every output map.
    pub fn outputs_per_cell(&self) -> usize {
        4 * self.reg_max + self.num_classes
    }

    pub fn in_channels(&self) -> [usize; 3] {
        self.in_channels
    }

    fn check_len(n: usize) -> Result<()> {
        if n != 3 {
            return Err(Error::Config(format!("detect head expects 3 pyramid levels, got {n}")));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, pyramid: &[Var]) -> Result<Vec<Var>> {
        Self::check_len(pyramid.len())?;
        let mut out = Vec::with_capacity(3);
        for ((x, b), c) in pyramid.iter().zip(&self.boxes).zip(&self.classes) {
            let bx = b.forward(tape, x)?;
            let cl = c.forward(tape, x)?;
            out.push(tape.concat(&[&bx, &cl], 1)?);
        }
        Ok(out)
    }

    /// Per-scale costs.
    pub fn cost(&self, pyramid: &[Shape]) -> Result<Vec<Cost>> {
        Self::check_len(pyramid.len())?;
        let mut out = Vec::with_capacity(3);
        for ((&s, b), c) in pyramid.iter().zip(&self.boxes).zip(&self.classes) {
            let bc = b.cost(s)?;
            let cc = c.cost(s)?;
            let mut shape = bc.out;
            shape[1] += cc.out[1];
            out.push(Cost {
                out: shape,
                params: bc.params + cc.params,
                macs: bc.macs + cc.macs,
            });
        }
        Ok(out)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, b) in self.boxes.iter().enumerate() {
            b.visit(&join(prefix, &format!("cv2.{i}")), f);
        }
        for (i, c) in self.classes.iter().enumerate() {
            c.visit(&join(prefix, &format!("cv3.{i}")), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        for (i, b) in self.boxes.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("cv2.{i}")), f);
        }
        for (i, c) in self.classes.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("cv3.{i}")), f);
        }
    }

    /// Same head with every deformable convolution replaced by a plain one
    /// sharing its kernel; offset and mask predictors are dropped.
    pub fn to_standard(&self) -> Self {
        let mut h = self.clone();
        h.kind = HeadKind::Standard;
        for b in h.boxes.iter_mut().chain(h.classes.iter_mut()) {
            if let HeadConv::Deformable(d) = &b.first {
                b.first = HeadConv::Standard(d.to_standard());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn head(kind: HeadKind) -> DetectHead {
        let mut r = InitRng::seed_from_u64(31);
        DetectHead::new(kind, [16, 32, 64], 2, 16, [8, 16, 32], &mut r).unwrap()
    }

    #[test]
    fn output_channels_and_sizes() {
        let h = head(HeadKind::DDetect);
        assert_eq!(h.outputs_per_cell(), 66);
        let costs = h.cost(&[[1, 16, 80, 80], [1, 32, 40, 40], [1, 64, 20, 20]]).unwrap();
        let outs: Vec<Shape> = costs.iter().map(|c| c.out).collect();
        assert_eq!(outs, vec![[1, 66, 80, 80], [1, 66, 40, 40], [1, 66, 20, 20]]);
        assert!(matches!(h.cost(&[[1, 16, 8, 8]]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_offset_head_matches_standard_head() {
        let mut r = InitRng::seed_from_u64(32);
        let d = head(HeadKind::DDetect);
        let s = d.to_standard();
        let feats = [
            Tensor::rand_uniform([1, 16, 8, 8], -1.0, 1.0, &mut r),
            Tensor::rand_uniform([1, 32, 4, 4], -1.0, 1.0, &mut r),
            Tensor::rand_uniform([1, 64, 2, 2], -1.0, 1.0, &mut r),
        ];
        let mut t = Tape::inference();
        let vars: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
        let a = d.forward(&mut t, &vars).unwrap();
        let b = s.forward(&mut t, &vars).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.value().max_abs_diff(y.value()).unwrap() < 1e-5);
        }
    }

    #[test]
    fn bias_priors_and_counts() {
        let h = head(HeadKind::Standard);
        let mut seen = 0;
        h.visit("", &mut |name, p| {
            if name == "cv3.0.2.bias" {
                let want = (5.0f64 / 2.0 / 6400.0).ln();
                assert!(p.tensor().data().iter().all(|&v| (v - want).abs() < 1e-12));
                seen += 1;
            }
            if name == "cv2.2.2.bias" {
                assert!(p.tensor().data().iter().all(|&v| v == 1.0));
                seen += 1;
            }
        });
        assert_eq!(seen, 2);
        let total: u64 = h
            .cost(&[[1, 16, 8, 8], [1, 32, 4, 4], [1, 64, 2, 2]])
            .unwrap()
            .iter()
            .map(|c| c.params)
            .sum();
        let mut walked = 0;
        h.visit("", &mut |_, p| {
            if p.learnable() {
                walked += p.numel() as u64;
            }
        });
        assert_eq!(total, walked);
    }
}
