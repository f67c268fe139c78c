use super::{join, Block, ConvBnAct, Cost, InitRng, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Activation, Shape, Tape, Var};
use crate::{Error, Result};

/// Kernel of the cheap depthwise branch, independent of the primary kernel.
pub const CHEAP_KERNEL: usize = 5;

/// Half the output channels come from a regular convolution, the other half
/// from a 5x5 depthwise "cheap operation" applied to that result.
#[derive(Clone, Debug)]
pub struct GhostConv {
    pub primary: ConvBnAct,
    pub cheap: ConvBnAct,
}

impl GhostConv {
    pub fn new(c1: usize, c2: usize, k: usize, s: usize, act: bool, rng: &mut InitRng) -> Result<Self> {
        if c2 == 0 || !c2.is_multiple_of(2) {
            return Err(Error::Param(format!("GhostConv: output channels must be even, got {c2}")));
        }
        let act = act.then_some(Activation::Silu);
        let half = c2 / 2;
        Ok(Self {
            primary: ConvBnAct::with_options(c1, half, k, s, 1, act, rng)?,
            cheap: ConvBnAct::depthwise(half, CHEAP_KERNEL, 1, act, rng)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.primary.out_channels()
    }
}

impl Block for GhostConv {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let y = self.primary.forward(tape, x)?;
        let z = self.cheap.forward(tape, &y)?;
        tape.concat(&[&y, &z], 1)
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        let p = self.primary.cost(input)?;
        let c = self.cheap.cost(p.out)?;
        let mut out = p.out;
        out[1] = self.out_channels();
        Ok(Cost {
            out,
            params: p.params + c.params,
            macs: p.macs + c.macs,
        })
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.primary.visit(&join(prefix, "primary"), f);
        self.cheap.visit(&join(prefix, "cheap"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.primary.visit_mut(&join(prefix, "primary"), f);
        self.cheap.visit_mut(&join(prefix, "cheap"), f);
    }
}

#[derive(Clone, Debug)]
enum Shortcut {
    Identity,
    Disabled,
    Projection { dw: ConvBnAct, pw: ConvBnAct },
}

/// Two 1x1 ghost convolutions (expand then project) with an optional
/// stride-2 depthwise stage between them, plus a residual path.
#[derive(Clone, Debug)]
pub struct GhostBottleneck {
    pub ghost1: GhostConv,
    pub dw: Option<ConvBnAct>,
    pub ghost2: GhostConv,
    shortcut: Shortcut,
}

impl GhostBottleneck {
    /// `shortcut = false` drops the identity residual when it would apply;
    /// projection shortcuts are always kept.
    pub fn new(c1: usize, c2: usize, k: usize, s: usize, shortcut: bool, rng: &mut InitRng) -> Result<Self> {
        if s != 1 && s != 2 {
            return Err(Error::Param(format!("GhostBottleneck: stride must be 1 or 2, got {s}")));
        }
        let hidden = c2 / 2;
        let ghost1 = GhostConv::new(c1, hidden, 1, 1, true, rng)?;
        let dw = if s == 2 {
            Some(ConvBnAct::depthwise(hidden, k, 2, None, rng)?)
        } else {
            None
        };
        let ghost2 = GhostConv::new(hidden, c2, 1, 1, false, rng)?;
        let shortcut = if s == 1 && c1 == c2 {
            if shortcut {
                Shortcut::Identity
            } else {
                Shortcut::Disabled
            }
        } else {
            Shortcut::Projection {
                dw: ConvBnAct::depthwise(c1, k, s, None, rng)?,
                pw: ConvBnAct::with_options(c1, c2, 1, 1, 1, None, rng)?,
            }
        };
        Ok(Self {
            ghost1,
            dw,
            ghost2,
            shortcut,
        })
    }
}

impl Block for GhostBottleneck {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let mut y = self.ghost1.forward(tape, x)?;
        if let Some(dw) = &self.dw {
            y = dw.forward(tape, &y)?;
        }
        let y = self.ghost2.forward(tape, &y)?;
        match &self.shortcut {
            Shortcut::Identity => tape.add(&y, x),
            Shortcut::Disabled => Ok(y),
            Shortcut::Projection { dw, pw } => {
                let s = dw.forward(tape, x)?;
                let s = pw.forward(tape, &s)?;
                tape.add(&y, &s)
            }
        }
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        let mut c = self.ghost1.cost(input)?;
        if let Some(dw) = &self.dw {
            c = c.then(dw.cost(c.out)?);
        }
        c = c.then(self.ghost2.cost(c.out)?);
        if let Shortcut::Projection { dw, pw } = &self.shortcut {
            let s = dw.cost(input)?;
            let s = s.then(pw.cost(s.out)?);
            c.params += s.params;
            c.macs += s.macs;
        }
        Ok(c)
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.ghost1.visit(&join(prefix, "ghost1"), f);
        if let Some(dw) = &self.dw {
            dw.visit(&join(prefix, "dw"), f);
        }
        self.ghost2.visit(&join(prefix, "ghost2"), f);
        if let Shortcut::Projection { dw, pw } = &self.shortcut {
            dw.visit(&join(prefix, "shortcut.dw"), f);
            pw.visit(&join(prefix, "shortcut.pw"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.ghost1.visit_mut(&join(prefix, "ghost1"), f);
        if let Some(dw) = &mut self.dw {
            dw.visit_mut(&join(prefix, "dw"), f);
        }
        self.ghost2.visit_mut(&join(prefix, "ghost2"), f);
        if let Shortcut::Projection { dw, pw } = &mut self.shortcut {
            dw.visit_mut(&join(prefix, "shortcut.dw"), f);
            pw.visit_mut(&join(prefix, "shortcut.pw"), f);
        }
    }
}

/// CSP wrapper: one half-width branch runs `n` ghost bottlenecks, the other
/// is a plain 1x1 projection; a 1x1 convolution fuses the concatenation.
#[derive(Clone, Debug)]
pub struct C3Ghost {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
    pub cv3: ConvBnAct,
    pub m: Vec<GhostBottleneck>,
}

impl C3Ghost {
    pub fn new(c1: usize, c2: usize, n: usize, shortcut: bool, rng: &mut InitRng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Param("C3Ghost: need at least one bottleneck".into()));
        }
        if c2 == 0 || !c2.is_multiple_of(2) {
            return Err(Error::Param(format!("C3Ghost: output channels must be even, got {c2}")));
        }
        let hidden = c2 / 2;
        let cv1 = ConvBnAct::new(c1, hidden, 1, 1, rng)?;
        let cv2 = ConvBnAct::new(c1, hidden, 1, 1, rng)?;
        let m = (0..n)
            .map(|_| GhostBottleneck::new(hidden, hidden, 3, 1, shortcut, rng))
            .collect::<Result<Vec<_>>>()?;
        let cv3 = ConvBnAct::new(2 * hidden, c2, 1, 1, rng)?;
        Ok(Self { cv1, cv2, cv3, m })
    }
}

impl Block for C3Ghost {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let mut a = self.cv1.forward(tape, x)?;
        for b in &self.m {
            a = b.forward(tape, &a)?;
        }
        let b = self.cv2.forward(tape, x)?;
        let cat = tape.concat(&[&a, &b], 1)?;
        self.cv3.forward(tape, &cat)
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        let mut a = self.cv1.cost(input)?;
        for b in &self.m {
            a = a.then(b.cost(a.out)?);
        }
        let b = self.cv2.cost(input)?;
        let mut cat = a.out;
        cat[1] += b.out[1];
        let c = self.cv3.cost(cat)?;
        Ok(Cost {
            out: c.out,
            params: a.params + b.params + c.params,
            macs: a.macs + b.macs + c.macs,
        })
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
        self.cv3.visit(&join(prefix, "cv3"), f);
        for (i, b) in self.m.iter().enumerate() {
            b.visit(&join(prefix, &format!("m.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
        self.cv3.visit_mut(&join(prefix, "cv3"), f);
        for (i, b) in self.m.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("m.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::C2f;
    use crate::tensor::{grad_check, Tensor};
    use rand::SeedableRng;

    fn rng() -> InitRng {
        InitRng::seed_from_u64(11)
    }

    /// Learnable parameters of ConvBnAct(c1 -> c2, k, groups).
    fn conv_bn(c1: u64, c2: u64, k: u64, groups: u64) -> u64 {
        c2 * (c1 / groups) * k * k + 2 * c2
    }

    fn ghost(c1: u64, c2: u64, k: u64) -> u64 {
        let h = c2 / 2;
        conv_bn(c1, h, k, 1) + conv_bn(h, h, 5, h)
    }

    fn ghost_bottleneck_s1(c: u64) -> u64 {
        ghost(c, c / 2, 1) + ghost(c / 2, c, 1)
    }

    fn c3ghost(c1: u64, c2: u64, n: u64) -> u64 {
        let h = c2 / 2;
        2 * conv_bn(c1, h, 1, 1) + conv_bn(2 * h, c2, 1, 1) + n * ghost_bottleneck_s1(h)
    }

    fn c2f(c1: u64, c2: u64, n: u64) -> u64 {
        let h = c2 / 2;
        conv_bn(c1, 2 * h, 1, 1) + n * 2 * conv_bn(h, h, 3, 1) + conv_bn((2 + n) * h, c2, 1, 1)
    }

    #[test]
    fn ghost_conv_param_count() {
        let g = GhostConv::new(16, 32, 1, 1, true, &mut rng()).unwrap();
        assert_eq!(ghost(16, 32, 1), 720);
        assert_eq!(g.cost([1, 16, 8, 8]).unwrap().params, 720);
        assert_eq!(g.enumerate_params(), 720);
    }

    #[test]
    fn ghost_conv_rejects_odd_channels() {
        assert!(matches!(GhostConv::new(16, 31, 1, 1, true, &mut rng()), Err(Error::Param(_))));
    }

    #[test]
    fn ghost_conv_shape_and_composition() {
        let mut r = rng();
        let g = GhostConv::new(6, 10, 3, 2, true, &mut r).unwrap();
        let x = Tensor::rand_uniform([2, 6, 9, 7], -1.0, 1.0, &mut r);
        let mut t = Tape::inference();
        let xv = t.constant(x);
        let y = g.forward(&mut t, &xv).unwrap();
        assert_eq!(y.shape(), [2, 10, 5, 4]);
        assert_eq!(g.cost([2, 6, 9, 7]).unwrap().out, [2, 10, 5, 4]);
        // hand-composed: concat(primary(x), cheap(primary(x)))
        let p = g.primary.forward(&mut t, &xv).unwrap();
        let c = g.cheap.forward(&mut t, &p).unwrap();
        let want = t.concat(&[&p, &c], 1).unwrap();
        assert_eq!(y.value(), want.value());
    }

    #[test]
    fn ghost_conv_mac_ratio_below_055() {
        let mut r = rng();
        for c in [64usize, 128, 256] {
            let g = GhostConv::new(c, c, 3, 1, true, &mut r).unwrap();
            let s = ConvBnAct::new(c, c, 3, 1, &mut r).unwrap();
            let shape = [1, c, 80, 80];
            let ratio = g.cost(shape).unwrap().macs as f64 / s.cost(shape).unwrap().macs as f64;
            // (9c + 25) / 18c
            let want = (9.0 * c as f64 + 25.0) / (18.0 * c as f64);
            assert!((ratio - want).abs() < 1e-12 && ratio < 0.55, "{c}: {ratio}");
        }
    }

    #[test]
    fn bottleneck_zero_weights_is_identity() {
        let mut r = rng();
        let mut b = GhostBottleneck::new(8, 8, 3, 1, true, &mut r).unwrap();
        b.visit_mut("", &mut |name, p| {
            if name.ends_with("weight") {
                p.set_data(vec![0.0; p.numel()]).unwrap();
            }
        });
        let x = Tensor::rand_uniform([1, 8, 5, 5], -1.0, 1.0, &mut r);
        let mut t = Tape::inference();
        let xv = t.constant(x.clone());
        let y = b.forward(&mut t, &xv).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn bottleneck_stride_two_halves_both_paths() {
        let mut r = rng();
        let b = GhostBottleneck::new(8, 16, 3, 2, true, &mut r).unwrap();
        let mut t = Tape::inference();
        let x = t.constant(Tensor::rand_uniform([1, 8, 10, 10], -1.0, 1.0, &mut r));
        assert_eq!(b.forward(&mut t, &x).unwrap().shape(), [1, 16, 5, 5]);
        assert_eq!(b.cost([1, 8, 10, 10]).unwrap().out, [1, 16, 5, 5]);
        assert!(GhostBottleneck::new(8, 8, 3, 3, true, &mut r).is_err());
    }

    #[test]
    fn bottleneck_param_count_matches_enumeration() {
        let b = GhostBottleneck::new(64, 64, 3, 1, true, &mut rng()).unwrap();
        assert_eq!(ghost_bottleneck_s1(64), 3440);
        assert_eq!(b.cost([1, 64, 4, 4]).unwrap().params, 3440);
        assert_eq!(b.enumerate_params(), 3440);
    }

    #[test]
    fn c3ghost_shapes_and_counts() {
        let mut r = rng();
        for (c1, c2, n) in [(32usize, 32usize, 1usize), (64, 64, 2), (384, 128, 1), (128, 128, 2)] {
            let m = C3Ghost::new(c1, c2, n, true, &mut r).unwrap();
            let cost = m.cost([1, c1, 8, 8]).unwrap();
            assert_eq!(cost.out, [1, c2, 8, 8]);
            assert_eq!(cost.params, c3ghost(c1 as u64, c2 as u64, n as u64));
            assert_eq!(m.enumerate_params(), cost.params);
        }
        assert!(C3Ghost::new(8, 8, 0, true, &mut r).is_err());
    }

    #[test]
    fn c3ghost_depth_delta_is_one_bottleneck() {
        let mut r = rng();
        let one = C3Ghost::new(64, 64, 1, true, &mut r).unwrap();
        let two = C3Ghost::new(64, 64, 2, true, &mut r).unwrap();
        let b = GhostBottleneck::new(32, 32, 3, 1, true, &mut r).unwrap();
        assert_eq!(two.enumerate_params() - one.enumerate_params(), b.enumerate_params());
    }

    #[test]
    fn c3ghost_is_smaller_than_c2f() {
        // Exact enumerated values; the ghost composition removes roughly
        // two thirds of the reference parameters at these widths.
        let mut r = rng();
        for (c, n) in [(64usize, 1usize), (64, 2), (128, 1), (128, 2)] {
            let g = C3Ghost::new(c, c, n, true, &mut r).unwrap().enumerate_params();
            let f = C2f::new(c, c, n, true, &mut r).unwrap().enumerate_params();
            assert_eq!(g, c3ghost(c as u64, c as u64, n as u64));
            assert_eq!(f, c2f(c as u64, c as u64, n as u64));
            assert!(g < f);
        }
        assert_eq!(c3ghost(64, 64, 1), 9656);
        assert_eq!(c2f(64, 64, 1), 29056);
    }

    #[test]
    fn ghost_blocks_pass_grad_check() {
        let mut r = rng();
        let g = GhostConv::new(3, 4, 3, 2, true, &mut r).unwrap();
        let x = Tensor::rand_uniform([1, 3, 5, 5], -1.0, 1.0, &mut r);
        let rep = grad_check(|t, v| g.forward(t, &v[0]), &[x], 1e-4, 1e-3).unwrap();
        assert!(rep.passed(), "{rep:?}");

        let b = GhostBottleneck::new(4, 8, 3, 2, true, &mut r).unwrap();
        let x = Tensor::rand_uniform([1, 4, 6, 6], -1.0, 1.0, &mut r);
        let rep = grad_check(|t, v| b.forward(t, &v[0]), &[x], 1e-4, 1e-3).unwrap();
        assert!(rep.passed(), "{rep:?}");

        let c = C3Ghost::new(4, 8, 1, true, &mut r).unwrap();
        let x = Tensor::rand_uniform([1, 4, 4, 4], -1.0, 1.0, &mut r);
        let rep = grad_check(|t, v| c.forward(t, &v[0]), &[x], 1e-4, 1e-3).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
