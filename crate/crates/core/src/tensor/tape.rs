use std::sync::Arc;

use super::kernels::{self, ConvGeom, PoolKind};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value produced on a [`Tape`].
///
/// Cloning is cheap: the value is shared. A `Var` created by an inference
/// tape carries no node id; passing it to a recording tape registers it as
/// a constant.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> super::Shape {
        self.value.shape()
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|arc| (*arc).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Silu,
    /// Softmax along the given axis.
    Softmax(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Pool {
        x: usize,
        kind: PoolKind,
        k: usize,
        stride: usize,
        padding: usize,
    },
    AdaptivePool {
        x: usize,
    },
    Upsample {
        x: usize,
        scale: usize,
    },
    Bilinear {
        x: usize,
        coords: usize,
    },
    Act {
        x: usize,
        kind: Activation,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
        eps: f64,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: f64,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    TransposeHw {
        x: usize,
    },
    Sum {
        x: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A recording tape keeps every intermediate value until it is dropped; an
/// inference tape ([`Tape::inference`]) records nothing and only computes.
/// A tape is single-threaded; kernels may still use rayon internally.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    track_params: bool,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    grad_fault: Option<f64>,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            track_params: false,
            grads: Vec::new(),
            backward_done: false,
            grad_fault: None,
            macs: 0,
        }
    }

    /// Non-recording tape for plain forward passes.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// When set, [`Tape::param`] leaves require gradients.
    pub fn set_track_params(&mut self, track: bool) {
        self.track_params = track;
    }

    /// Multiply-accumulates executed so far (convolutions, matmuls and
    /// 8 per bilinear sample).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Test hook: scales every leaf gradient by `1 + factor` after backward,
    /// so gradient checks can prove they detect a broken backward pass.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, factor: f64) {
        self.grad_fault = Some(factor);
    }

    fn push_node(&mut self, op: Op, value: Arc<Tensor>, requires_grad: bool) -> usize {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Leaf from an owned tensor; it requires gradients iff the tensor does.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.leaf_arc(Arc::new(t), rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf_arc(Arc::new(t), false)
    }

    /// Leaf sharing a parameter tensor without copying it.
    pub fn param(&mut self, t: &Arc<Tensor>) -> Var {
        let rg = self.track_params;
        self.leaf_arc(Arc::clone(t), rg)
    }

    fn leaf_arc(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let id = if self.recording {
            Some(self.push_node(Op::Leaf, Arc::clone(&value), requires_grad))
        } else {
            None
        };
        Var { id, value }
    }

    fn id_of(&mut self, v: &Var) -> usize {
        match v.id {
            Some(id) => id,
            None => self.push_node(Op::Leaf, Arc::clone(&v.value), false),
        }
    }

    fn record(
        &mut self,
        name: &'static str,
        value: Tensor,
        inputs: &[&Var],
        make: impl FnOnce(&[usize]) -> Op,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let value = Arc::new(value);
        if !self.recording {
            return Ok(Var { id: None, value });
        }
        let ids: Vec<usize> = inputs.iter().map(|v| self.id_of(v)).collect();
        let requires_grad = ids.iter().any(|&i| self.nodes[i].requires_grad);
        let id = self.push_node(make(&ids), Arc::clone(&value), requires_grad);
        Ok(Var {
            id: Some(id),
            value,
        })
    }

    pub fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d(x.value(), w.value(), b.map(|b| b.value().data()), geom)?;
        let [_, cg, kh, kw] = w.shape();
        self.macs += (out.numel() * cg * kh * kw) as u64;
        match b {
            Some(bv) => self.record("conv2d", out, &[x, w, bv], |ids| Op::Conv2d {
                x: ids[0],
                w: ids[1],
                b: Some(ids[2]),
                geom,
            }),
            None => self.record("conv2d", out, &[x, w], |ids| Op::Conv2d {
                x: ids[0],
                w: ids[1],
                b: None,
                geom,
            }),
        }
    }

    pub fn pool2d(&mut self, x: &Var, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::pool2d(x.value(), kind, k, stride, padding)?;
        self.record("pool2d", out, &[x], |ids| Op::Pool {
            x: ids[0],
            kind,
            k,
            stride,
            padding,
        })
    }

    pub fn adaptive_avg_pool(&mut self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::adaptive_avg_pool(x.value(), out_h, out_w)?;
        self.record("adaptive_avg_pool", out, &[x], |ids| Op::AdaptivePool { x: ids[0] })
    }

    pub fn upsample_nearest(&mut self, x: &Var, scale: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(x.value(), scale)?;
        self.record("upsample_nearest", out, &[x], |ids| Op::Upsample { x: ids[0], scale })
    }

    /// See [`kernels::bilinear_sample`] for the coordinate layout.
    pub fn bilinear_sample(&mut self, x: &Var, coords: &Var) -> Result<Var> {
        let out = kernels::bilinear_sample(x.value(), coords.value())?;
        self.macs += 8 * out.numel() as u64;
        self.record("bilinear_sample", out, &[x, coords], |ids| Op::Bilinear {
            x: ids[0],
            coords: ids[1],
        })
    }

    pub fn activation(&mut self, x: &Var, kind: Activation) -> Result<Var> {
        let (name, out) = match kind {
            Activation::Sigmoid => ("sigmoid", kernels::sigmoid(x.value())),
            Activation::Silu => ("silu", kernels::silu(x.value())),
            Activation::Softmax(axis) => ("softmax", kernels::softmax(x.value(), axis)?),
        };
        self.record(name, out, &[x], |ids| Op::Act { x: ids[0], kind })
    }

    pub fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn silu(&mut self, x: &Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        self.activation(x, Activation::Softmax(axis))
    }

    /// Inference batch norm. `gamma`, `beta`, `mean` and `var` hold one value
    /// per channel (any shape with `C` elements); only `x`, `gamma` and
    /// `beta` receive gradients.
    pub fn batchnorm(&mut self, x: &Var, gamma: &Var, beta: &Var, mean: &Var, var: &Var, eps: f64) -> Result<Var> {
        let out = kernels::batchnorm_infer(
            x.value(),
            gamma.value().data(),
            beta.value().data(),
            mean.value().data(),
            var.value().data(),
            eps,
        )?;
        self.record("batchnorm", out, &[x, gamma, beta, mean, var], |ids| Op::BatchNorm {
            x: ids[0],
            gamma: ids[1],
            beta: ids[2],
            mean: ids[3],
            var: ids[4],
            eps,
        })
    }

    pub fn groupnorm(&mut self, x: &Var, groups: usize, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let out = kernels::groupnorm(x.value(), groups, gamma.value().data(), beta.value().data(), eps)?;
        self.record("groupnorm", out, &[x, gamma, beta], |ids| Op::GroupNorm {
            x: ids[0],
            gamma: ids[1],
            beta: ids[2],
            groups,
            eps,
        })
    }

    pub fn concat(&mut self, inputs: &[&Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| v.value()).collect();
        let out = kernels::concat(&values, axis)?;
        self.record("concat", out, inputs, |ids| Op::Concat {
            inputs: ids.to_vec(),
            axis,
        })
    }

    pub fn split(&mut self, x: &Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let parts = kernels::split(x.value(), sizes, axis)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(parts.len());
        for (part, &sz) in parts.into_iter().zip(sizes) {
            let s = start;
            out.push(self.record("split", part, &[x], |ids| Op::Slice {
                x: ids[0],
                axis,
                start: s,
            })?);
            start += sz;
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul(a.value(), b.value())?;
        let [b0, b1, m, k] = a.shape();
        self.macs += (b0 * b1 * m * k * b.shape()[3]) as u64;
        self.record("matmul", out, &[a, b], |ids| Op::MatMul { a: ids[0], b: ids[1] })
    }

    /// Elementwise sum with size-1 broadcasting.
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::broadcast_binary(a.value(), b.value(), |x, y| x + y)?;
        self.record("add", out, &[a, b], |ids| Op::Add { a: ids[0], b: ids[1] })
    }

    /// Elementwise product with size-1 broadcasting.
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::broadcast_binary(a.value(), b.value(), |x, y| x * y)?;
        self.record("mul", out, &[a, b], |ids| Op::Mul { a: ids[0], b: ids[1] })
    }

    pub fn scale(&mut self, x: &Var, factor: f64) -> Result<Var> {
        let out = x.value().map(|v| v * factor);
        self.record("scale", out, &[x], |ids| Op::Scale { x: ids[0], factor })
    }

    pub fn add_scalar(&mut self, x: &Var, c: f64) -> Result<Var> {
        let out = x.value().map(|v| v + c);
        self.record("add_scalar", out, &[x], |ids| Op::AddScalar { x: ids[0] })
    }

    pub fn reshape(&mut self, x: &Var, shape: super::Shape) -> Result<Var> {
        let out = x.value().reshape(shape)?;
        self.record("reshape", out, &[x], |ids| Op::Reshape { x: ids[0] })
    }

    pub fn transpose_hw(&mut self, x: &Var) -> Result<Var> {
        let out = kernels::transpose_hw(x.value());
        self.record("transpose_hw", out, &[x], |ids| Op::TransposeHw { x: ids[0] })
    }

    /// Sum of all elements as a `[1,1,1,1]` value.
    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let out = Tensor::scalar(x.value().sum());
        self.record("sum", out, &[x], |ids| Op::Sum { x: ids[0] })
    }

    /// Clear gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// Propagate `output_grad` from `output` back to every leaf that
    /// requires gradients.
    pub fn backward(&mut self, output: &Var, output_grad: &Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        let out_id = output
            .id
            .ok_or_else(|| Error::Autograd("output was not recorded on this tape".into()))?;
        if out_id >= self.nodes.len() || !Arc::ptr_eq(&self.nodes[out_id].value, &output.value) {
            return Err(Error::Autograd("output belongs to a different tape".into()));
        }
        if output_grad.shape() != output.shape() {
            return Err(Error::shape(
                "backward",
                format!("output grad {:?} vs output {:?}", output_grad.shape(), output.shape()),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[out_id] = Some(output_grad.clone());
        for id in (0..=out_id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            let contributions = self.node_backward(id, &g)?;
            self.grads[id] = Some(g);
            for (input, gi) in contributions {
                if self.nodes[input].requires_grad {
                    accumulate(&mut self.grads[input], gi);
                }
            }
        }
        if let Some(f) = self.grad_fault {
            for (id, node) in self.nodes.iter().enumerate() {
                if matches!(node.op, Op::Leaf) {
                    if let Some(g) = self.grads[id].as_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v *= 1.0 + f);
                    }
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn node_backward(&self, id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.val(*x), self.val(*w), g, *geom)?;
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, Tensor::from_vec(self.val(*b).shape(), db)?));
                }
                v
            }
            Op::Pool {
                x,
                kind,
                k,
                stride,
                padding,
            } => vec![(*x, kernels::pool2d_backward(self.val(*x), g, *kind, *k, *stride, *padding)?)],
            Op::AdaptivePool { x } => {
                vec![(*x, kernels::adaptive_avg_pool_backward(self.val(*x).shape(), g))]
            }
            Op::Upsample { x, scale } => {
                vec![(*x, kernels::upsample_nearest_backward(self.val(*x).shape(), g, *scale))]
            }
            Op::Bilinear { x, coords } => {
                let (dx, dc) = kernels::bilinear_sample_backward(self.val(*x), self.val(*coords), g);
                vec![(*x, dx), (*coords, dc)]
            }
            Op::Act { x, kind } => {
                let dx = match kind {
                    Activation::Sigmoid => kernels::broadcast_binary(g, y, |gv, s| gv * s * (1.0 - s))?,
                    Activation::Silu => kernels::broadcast_binary(g, self.val(*x), |gv, xv| {
                        let s = kernels::sigmoid_scalar(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })?,
                    Activation::Softmax(axis) => kernels::softmax_backward(y, g, *axis),
                };
                vec![(*x, dx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = self.val(*x);
                let (gm, mn, vr) = (self.val(*gamma).data(), self.val(*mean).data(), self.val(*var).data());
                let c = xv.channels();
                let hw = xv.height() * xv.width();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (p, (gp, xp)) in g.data().chunks(hw).zip(xv.data().chunks(hw)).enumerate() {
                    let ch = p % c;
                    let inv = 1.0 / (vr[ch] + eps).sqrt();
                    for (i, (&gv, &xval)) in gp.iter().zip(xp).enumerate() {
                        dx.data_mut()[p * hw + i] = gv * gm[ch] * inv;
                        dgamma[ch] += gv * (xval - mn[ch]) * inv;
                        dbeta[ch] += gv;
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::from_vec(self.val(*gamma).shape(), dgamma)?),
                    (*beta, Tensor::from_vec(self.val(*beta).shape(), dbeta)?),
                ]
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let (dx, dg, db) =
                    kernels::groupnorm_backward(self.val(*x), *groups, self.val(*gamma).data(), *eps, g);
                vec![
                    (*x, dx),
                    (*gamma, Tensor::from_vec(self.val(*gamma).shape(), dg)?),
                    (*beta, Tensor::from_vec(self.val(*beta).shape(), db)?),
                ]
            }
            Op::Concat { inputs, axis } => {
                let sizes: Vec<usize> = inputs.iter().map(|&i| self.val(i).shape()[*axis]).collect();
                let parts = kernels::split(g, &sizes, *axis)?;
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Slice { x, axis, start } => {
                let full = self.val(*x).shape();
                let len = g.shape()[*axis];
                let sizes = [*start, len, full[*axis] - start - len];
                let mut pieces = Vec::new();
                for (i, &sz) in sizes.iter().enumerate() {
                    if i == 1 {
                        pieces.push(g.clone());
                    } else if sz > 0 {
                        let mut s = full;
                        s[*axis] = sz;
                        pieces.push(Tensor::zeros(s));
                    }
                }
                let refs: Vec<&Tensor> = pieces.iter().collect();
                vec![(*x, kernels::concat(&refs, *axis)?)]
            }
            Op::MatMul { a, b } => {
                let (da, db) = kernels::matmul_backward(self.val(*a), self.val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![
                (*a, kernels::reduce_to(g, self.val(*a).shape())),
                (*b, kernels::reduce_to(g, self.val(*b).shape())),
            ],
            Op::Mul { a, b } => {
                let ga = kernels::broadcast_binary(g, self.val(*b), |x, y| x * y)?;
                let gb = kernels::broadcast_binary(g, self.val(*a), |x, y| x * y)?;
                vec![
                    (*a, kernels::reduce_to(&ga, self.val(*a).shape())),
                    (*b, kernels::reduce_to(&gb, self.val(*b).shape())),
                ]
            }
            Op::Scale { x, factor } => vec![(*x, g.map(|v| v * factor))],
            Op::AddScalar { x } => vec![(*x, g.clone())],
            Op::Reshape { x } => vec![(*x, g.reshape(self.val(*x).shape())?)],
            Op::TransposeHw { x } => vec![(*x, kernels::transpose_hw(g))],
            Op::Sum { x } => vec![(*x, Tensor::full(self.val(*x).shape(), g.data()[0]))],
        };
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
