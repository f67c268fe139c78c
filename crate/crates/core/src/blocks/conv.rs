use super::{join, kaiming_weight, same_padding, Block, Cost, InitRng, Param, ParamVisitor, ParamVisitorMut};
use crate::tensor::kernels::conv2d_out_shape;
use crate::tensor::{Activation, ConvGeom, Shape, Tape, Tensor, Var};
use crate::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-3;

/// Inference-mode batch norm: learnable `gamma`/`beta`, fixed running stats.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub mean: Param,
    pub var: Param,
    pub eps: f64,
}

impl BatchNorm {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Param::vector(vec![1.0; channels], true),
            beta: Param::vector(vec![0.0; channels], true),
            mean: Param::vector(vec![0.0; channels], false),
            var: Param::vector(vec![1.0; channels], false),
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let (g, b, m, v) = (
            self.gamma.var(tape),
            self.beta.var(tape),
            self.mean.var(tape),
            self.var.var(tape),
        );
        tape.batchnorm(x, &g, &b, &m, &v, self.eps)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.mean);
        f(&join(prefix, "running_var"), &self.var);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.mean);
        f(&join(prefix, "running_var"), &mut self.var);
    }
}

/// Convolution (no bias) + batch norm + optional activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub weight: Param,
    pub bn: BatchNorm,
    pub geom: ConvGeom,
    pub act: Option<Activation>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl ConvBnAct {
    /// `k x k` kernel with "same" padding `k / 2` and SiLU activation.
    pub fn new(c1: usize, c2: usize, k: usize, s: usize, rng: &mut InitRng) -> Result<Self> {
        Self::with_options(c1, c2, k, s, 1, Some(Activation::Silu), rng)
    }

    pub fn with_options(
        c1: usize,
        c2: usize,
        k: usize,
        s: usize,
        groups: usize,
        act: Option<Activation>,
        rng: &mut InitRng,
    ) -> Result<Self> {
        if c1 == 0 || c2 == 0 || k == 0 || s == 0 || groups == 0 {
            return Err(Error::Param(format!(
                "ConvBnAct: zero extent (c1={c1}, c2={c2}, k={k}, s={s}, groups={groups})"
            )));
        }
        if !c1.is_multiple_of(groups) || !c2.is_multiple_of(groups) {
            return Err(Error::Param(format!(
                "ConvBnAct: channels {c1}->{c2} not divisible by groups {groups}"
            )));
        }
        let weight = kaiming_weight([c2, c1 / groups, k, k], rng);
        Ok(Self {
            weight: Param::new(weight, vec![c2, c1 / groups, k, k], true),
            bn: BatchNorm::identity(c2),
            geom: ConvGeom::new(s, same_padding(k)).with_groups(groups),
            act,
            in_channels: c1,
            out_channels: c2,
            kernel: k,
        })
    }

    /// Assemble from existing tensors; `weight` is `[c2, c1 / groups, k, k]`.
    pub fn from_parts(weight: Param, bn: BatchNorm, geom: ConvGeom, act: Option<Activation>) -> Self {
        let d = weight.dims().to_vec();
        Self {
            in_channels: d[1] * geom.groups,
            out_channels: d[0],
            kernel: d[2],
            weight,
            bn,
            geom,
            act,
        }
    }

    /// Depthwise variant: groups = channels.
    pub fn depthwise(c: usize, k: usize, s: usize, act: Option<Activation>, rng: &mut InitRng) -> Result<Self> {
        Self::with_options(c, c, k, s, c, act, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn param_count(&self) -> u64 {
        (self.out_channels * self.in_channels / self.geom.groups * self.kernel * self.kernel
            + 2 * self.out_channels) as u64
    }
}

impl Block for ConvBnAct {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let w = self.weight.var(tape);
        let y = tape.conv2d(x, &w, None, self.geom)?;
        let y = self.bn.forward(tape, &y)?;
        match self.act {
            Some(a) => tape.activation(&y, a),
            None => Ok(y),
        }
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        if input[1] != self.in_channels {
            return Err(Error::shape(
                "ConvBnAct",
                format!("expects {} input channels, got {input:?}", self.in_channels),
            ));
        }
        let out = conv2d_out_shape(
            input,
            [self.out_channels, self.in_channels / self.geom.groups, self.kernel, self.kernel],
            self.geom,
        )?;
        let per_out = (self.in_channels / self.geom.groups * self.kernel * self.kernel) as u64;
        Ok(Cost {
            out,
            params: self.param_count(),
            macs: out.iter().product::<usize>() as u64 * per_out,
        })
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "conv.weight"), &self.weight);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "conv.weight"), &mut self.weight);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Plain convolution with bias: no normalisation, no activation.
#[derive(Clone, Debug)]
pub struct ConvBias {
    pub weight: Param,
    pub bias: Param,
    pub geom: ConvGeom,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl ConvBias {
    pub fn new(c1: usize, c2: usize, k: usize, s: usize, rng: &mut InitRng) -> Result<Self> {
        if c1 == 0 || c2 == 0 || k == 0 || s == 0 {
            return Err(Error::Param(format!("ConvBias: zero extent ({c1}->{c2}, k={k}, s={s})")));
        }
        let weight = kaiming_weight([c2, c1, k, k], rng);
        Ok(Self {
            weight: Param::new(weight, vec![c2, c1, k, k], true),
            bias: Param::vector(vec![0.0; c2], true),
            geom: ConvGeom::new(s, same_padding(k)),
            in_channels: c1,
            out_channels: c2,
            kernel: k,
        })
    }

    /// Weights zero, bias constant.
    pub fn zeroed(c1: usize, c2: usize, k: usize, s: usize, bias: f64) -> Self {
        Self {
            weight: Param::new(Tensor::zeros([c2, c1, k, k]), vec![c2, c1, k, k], true),
            bias: Param::vector(vec![bias; c2], true),
            geom: ConvGeom::new(s, same_padding(k)),
            in_channels: c1,
            out_channels: c2,
            kernel: k,
        }
    }

    pub fn set_bias(&mut self, value: f64) {
        self.bias
            .set_data(vec![value; self.out_channels])
            .expect("bias length");
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

impl Block for ConvBias {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var> {
        let w = self.weight.var(tape);
        let b = self.bias.var(tape);
        tape.conv2d(x, &w, Some(&b), self.geom)
    }

    fn cost(&self, input: Shape) -> Result<Cost> {
        if input[1] != self.in_channels {
            return Err(Error::shape(
                "ConvBias",
                format!("expects {} input channels, got {input:?}", self.in_channels),
            ));
        }
        let out = conv2d_out_shape(
            input,
            [self.out_channels, self.in_channels, self.kernel, self.kernel],
            self.geom,
        )?;
        Ok(Cost {
            out,
            params: (self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels) as u64,
            macs: out.iter().product::<usize>() as u64 * (self.in_channels * self.kernel * self.kernel) as u64,
        })
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
