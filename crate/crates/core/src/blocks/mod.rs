//! Network building blocks over the tensor tape.
//!
//! Every block owns its parameters as shared [`Param`]s, runs forward on a
//! [`Tape`], enumerates its tensors by dotted name, and reports a
//! closed-form [`Cost`] for a given input shape. The closed-form parameter
//! count is derived from block geometry, not from the stored tensors, so it
//! can be checked against [`Block::visit`].

mod conv;
mod deform;
mod ema;
mod fusion;
mod ghost;
mod head;
mod reference;
mod sppf;

pub use conv::{BatchNorm, ConvBias, ConvBnAct};
pub use deform::{deform_conv2d, DeformConvBnAct, DeformConvParams, MASK_BIAS_INIT};
pub use ema::{Ema, EmaParams, DEFAULT_EMA_FACTOR};
pub use fusion::{fuse_rgb_ir, FusionStem};
pub use ghost::{C3Ghost, GhostBottleneck, GhostConv};
pub use head::{DetectHead, HeadConv, HeadKind};
pub use reference::{Bottleneck, C2f};
pub use sppf::Sppf;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tape, Tensor, Var};
use crate::Result;

/// Random source used for weight initialisation.
pub type InitRng = ChaCha8Rng;

/// A named tensor owned by a block.
///
/// `dims` is the logical shape written to weight files (a bias is rank 1
/// even though it is stored as a `[C, 1, 1, 1]` tensor). Running BN
/// statistics are stored but not `learnable`.
#[derive(Clone, Debug)]
pub struct Param {
    value: Arc<Tensor>,
    dims: Vec<usize>,
    learnable: bool,
}

impl Param {
    pub fn new(value: Tensor, dims: Vec<usize>, learnable: bool) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), value.numel());
        Self {
            value: Arc::new(value),
            dims,
            learnable,
        }
    }

    /// Per-channel vector stored as `[len, 1, 1, 1]`.
    pub fn vector(values: Vec<f64>, learnable: bool) -> Self {
        let len = values.len();
        let t = Tensor::from_vec([len, 1, 1, 1], values).expect("vector length");
        Self::new(t, vec![len], learnable)
    }

    pub fn tensor(&self) -> &Arc<Tensor> {
        &self.value
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Replace the values, keeping the shape.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(self.value.shape(), data)?;
        self.value = Arc::new(t);
        Ok(())
    }

    pub(crate) fn var(&self, tape: &mut Tape) -> Var {
        tape.param(&self.value)
    }
}

/// Output shape, learnable parameter count and multiply-accumulates of a
/// block applied to one input shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub out: Shape,
    pub params: u64,
    pub macs: u64,
}

impl Cost {
    pub(crate) fn then(self, next: Cost) -> Cost {
        Cost {
            out: next.out,
            params: self.params + next.params,
            macs: self.macs + next.macs,
        }
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, &Param) + 'a;
pub type ParamVisitorMut<'a> = dyn FnMut(&str, &mut Param) + 'a;

/// Single-input block.
pub trait Block {
    fn forward(&self, tape: &mut Tape, x: &Var) -> Result<Var>;

    /// Closed-form cost for `input`; errors on incompatible shapes.
    fn cost(&self, input: Shape) -> Result<Cost>;

    /// Visit every owned tensor as `prefix.name`.
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>);

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>);

    /// Learnable parameters found by walking the stored tensors.
    fn enumerate_params(&self) -> u64 {
        let mut total = 0;
        self.visit("", &mut |_, p| {
            if p.learnable() {
                total += p.numel() as u64;
            }
        });
        total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Kaiming-uniform (fan-in) conv weight, rounded to single precision so a
/// weight-file round trip is lossless.
pub(crate) fn kaiming_weight(shape: Shape, rng: &mut InitRng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-bound..bound) as f32 as f64)
        .collect();
    Tensor::from_vec(shape, data).expect("weight shape")
}

pub(crate) fn same_padding(k: usize) -> usize {
    k / 2
}
