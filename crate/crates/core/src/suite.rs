//! Finite-difference sweep over every differentiable tape operation and
//! detection block, on small random configurations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::blocks::{
    deform_conv2d, Block, C3Ghost, ConvBnAct, DeformConvBnAct, DetectHead, Ema, FusionStem, GhostBottleneck,
    GhostConv, HeadKind, InitRng, Sppf,
};
use crate::tensor::{grad_check_with, Activation, ConvGeom, PoolKind, Shape, Tape, Tensor, Var};
use crate::Result;

pub const SUITE_STEP: f64 = 1e-4;
pub const SUITE_TOLERANCE: f64 = 1e-3;
pub const CONFIGS_PER_ENTRY: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub configs: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Check = fn(&mut InitRng, Option<f64>) -> Result<f64>;

const ENTRIES: &[(&str, Check)] = &[
    ("conv2d", check_conv2d),
    ("max_pool", check_max_pool),
    ("avg_pool", check_avg_pool),
    ("adaptive_avg_pool", check_adaptive_pool),
    ("upsample_nearest", check_upsample),
    ("bilinear_sample", check_bilinear),
    ("sigmoid", check_sigmoid),
    ("silu", check_silu),
    ("softmax", check_softmax),
    ("batchnorm", check_batchnorm),
    ("groupnorm", check_groupnorm),
    ("concat_split", check_concat_split),
    ("matmul", check_matmul),
    ("add_mul_broadcast", check_add_mul),
    ("scale_add_scalar", check_scale_shift),
    ("reshape_transpose", check_reshape_transpose),
    ("ConvBnAct", check_conv_bn_act),
    ("GhostConv", check_ghost_conv),
    ("GhostBottleneck", check_ghost_bottleneck),
    ("C3Ghost", check_c3ghost),
    ("EMA", check_ema),
    ("SPPF", check_sppf),
    ("DeformConv", check_deform_conv),
    ("DeformConv offsets", check_deform_offsets),
    ("DetectHead", check_detect_head),
    ("FusionStem", check_fusion_stem),
];

/// Names of the suite entries, in execution order.
pub fn suite_names() -> Vec<&'static str> {
    ENTRIES.iter().map(|e| e.0).collect()
}

/// Run every entry on [`CONFIGS_PER_ENTRY`] random configurations. `fault`
/// scales the analytic gradients, which every entry must then reject.
pub fn run_gradient_suite(seed: u64, fault: Option<f64>) -> Result<Vec<SuiteEntry>> {
    ENTRIES
        .iter()
        .enumerate()
        .map(|(i, &(name, check))| {
            let mut rng = InitRng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let mut worst = 0.0f64;
            for _ in 0..CONFIGS_PER_ENTRY {
                worst = worst.max(check(&mut rng, fault)?);
            }
            Ok(SuiteEntry {
                name: name.to_string(),
                configs: CONFIGS_PER_ENTRY,
                max_rel_error: worst,
                passed: worst < SUITE_TOLERANCE,
            })
        })
        .collect()
}

fn run<F>(f: F, inputs: &[Tensor], fault: Option<f64>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_with(f, inputs, SUITE_STEP, SUITE_TOLERANCE, fault)?.max_rel_error())
}

fn uniform(shape: Shape, r: &mut InitRng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, r)
}

/// Distinct values at least 0.05 apart, so no max-pool window is near a tie.
fn separated(shape: Shape, r: &mut InitRng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(r);
    Tensor::from_vec(shape, v).expect("shape matches")
}

/// Sum of the scalar totals of several outputs.
fn total(t: &mut Tape, outs: &[Var]) -> Result<Var> {
    let mut acc = t.sum(&outs[0])?;
    for o in &outs[1..] {
        let s = t.sum(o)?;
        acc = t.add(&acc, &s)?;
    }
    Ok(acc)
}

/// Weighted sum so that gradients are not uniform across outputs.
fn weighted(t: &mut Tape, y: &Var, r: &mut InitRng) -> Result<Var> {
    let w = t.constant(uniform(y.shape(), r));
    t.mul(y, &w)
}

fn check_conv2d(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let groups = [1, 2][r.random_range(0..2)];
    let c = groups * r.random_range(1..3);
    let o = groups * r.random_range(1..3);
    let k = [1, 3][r.random_range(0..2)];
    let geom = ConvGeom::new(r.random_range(1..3), r.random_range(0..2))
        .with_groups(groups)
        .with_dilation(r.random_range(1..3));
    let hw = r.random_range(5..7);
    let x = uniform([1, c, hw, hw], r);
    let w = uniform([o, c / groups, k, k], r);
    let b = uniform([1, o, 1, 1], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.conv2d(&v[0], &v[1], Some(&v[2]), geom)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x, w, b],
        fault,
    )
}

fn check_max_pool(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let k = [2, 3, 5][r.random_range(0..3)];
    let (s, p) = (r.random_range(1..3), r.random_range(0..=k / 2));
    let x = separated([1, r.random_range(1..3), 6, 6], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.pool2d(&v[0], PoolKind::Max, k, s, p)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x],
        fault,
    )
}

fn check_avg_pool(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let k = [2, 3][r.random_range(0..2)];
    let (s, p) = (r.random_range(1..3), r.random_range(0..=k / 2));
    let x = uniform([1, 2, 6, 5], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.pool2d(&v[0], PoolKind::Avg, k, s, p)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x],
        fault,
    )
}

fn check_adaptive_pool(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let (oh, ow) = (r.random_range(1..4), r.random_range(1..4));
    let x = uniform([1, 2, r.random_range(3..7), r.random_range(3..7)], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.adaptive_avg_pool(&v[0], oh, ow)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x],
        fault,
    )
}

fn check_upsample(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let scale = r.random_range(2..4);
    let x = uniform([1, 2, 3, 3], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.upsample_nearest(&v[0], scale)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x],
        fault,
    )
}

fn check_bilinear(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let (h, w) = (r.random_range(3..6), r.random_range(3..6));
    let p = r.random_range(1..3);
    let x = uniform([1, 2, h, w], r);
    // integer part plus a fraction kept away from the kinks at integers;
    // some samples fall partly outside the image
    let mut coords = Tensor::zeros([1, 2 * p, 3, 3]);
    for c in 0..2 * p {
        let lim = if c % 2 == 0 { h } else { w } as i64;
        for i in 0..3 {
            for j in 0..3 {
                let base = r.random_range(-1..lim) as f64;
                coords.set(0, c, i, j, base + r.random_range(0.15..0.85));
            }
        }
    }
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.bilinear_sample(&v[0], &v[1])?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x, coords],
        fault,
    )
}

fn check_activation(r: &mut InitRng, fault: Option<f64>, kind: Activation) -> Result<f64> {
    let x = Tensor::rand_uniform([1, r.random_range(1..4), 3, 4], -4.0, 4.0, r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.activation(&v[0], kind)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x],
        fault,
    )
}

fn check_sigmoid(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    check_activation(r, fault, Activation::Sigmoid)
}

fn check_silu(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    check_activation(r, fault, Activation::Silu)
}

fn check_softmax(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let axis = r.random_range(1..4);
    check_activation(r, fault, Activation::Softmax(axis))
}

fn check_batchnorm(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let c = r.random_range(1..4);
    let x = uniform([2, c, 3, 3], r);
    let gamma = Tensor::rand_uniform([1, c, 1, 1], 0.5, 1.5, r);
    let beta = uniform([1, c, 1, 1], r);
    let mean = uniform([1, c, 1, 1], r);
    let var = Tensor::rand_uniform([1, c, 1, 1], 0.5, 1.5, r);
    let seed = r.random::<u64>();
    // running statistics are buffers, not differentiated
    run(
        |t, v| {
            let (m, s) = (t.constant(mean.clone()), t.constant(var.clone()));
            let y = t.batchnorm(&v[0], &v[1], &v[2], &m, &s, 1e-3)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x, gamma, beta],
        fault,
    )
}

fn check_groupnorm(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let groups = r.random_range(1..3);
    let c = groups * r.random_range(1..3);
    let x = uniform([1, c, 3, 3], r);
    let gamma = Tensor::rand_uniform([1, c, 1, 1], 0.5, 1.5, r);
    let beta = uniform([1, c, 1, 1], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.groupnorm(&v[0], groups, &v[1], &v[2], 1e-5)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x, gamma, beta],
        fault,
    )
}

fn check_concat_split(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let axis = r.random_range(1..4);
    let mut sa = [1, 2, 3, 3];
    let mut sb = sa;
    sa[axis] = r.random_range(1..3);
    sb[axis] = r.random_range(1..3);
    let (a, b) = (uniform(sa, r), uniform(sb, r));
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.concat(&[&v[0], &v[1]], axis)?;
            let len = y.shape()[axis];
            let parts = t.split(&y, &[1, len - 1], axis)?;
            let mut rr = InitRng::seed_from_u64(seed);
            let p0 = weighted(t, &parts[0], &mut rr)?;
            let p1 = weighted(t, &parts[1], &mut rr)?;
            total(t, &[p0, p1])
        },
        &[a, b],
        fault,
    )
}

fn check_matmul(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let (m, k, n) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
    let a = uniform([1, 2, m, k], r);
    let b = uniform([1, 2, k, n], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.matmul(&v[0], &v[1])?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[a, b],
        fault,
    )
}

fn check_add_mul(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let full = [1, 3, 2, 4];
    let mut small = full;
    for d in small.iter_mut().skip(1) {
        if r.random_bool(0.5) {
            *d = 1;
        }
    }
    let (a, b) = (uniform(full, r), uniform(small, r));
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let s = t.add(&v[0], &v[1])?;
            let p = t.mul(&s, &v[1])?;
            let q = t.mul(&v[1], &v[0])?;
            let y = t.add(&p, &q)?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[a, b],
        fault,
    )
}

fn check_scale_shift(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let (f, c) = (r.random_range(-3.0..3.0), r.random_range(-2.0..2.0));
    let x = uniform([1, 2, 3, 3], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.scale(&v[0], f)?;
            let y = t.add_scalar(&y, c)?;
            let y = t.mul(&y, &v[0])?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x],
        fault,
    )
}

fn check_reshape_transpose(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let (h, w) = (r.random_range(1..4), r.random_range(2..5));
    let x = uniform([1, 2, h, w], r);
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = t.transpose_hw(&v[0])?;
            let y = t.reshape(&y, [1, 1, 2 * w, h])?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x],
        fault,
    )
}

fn check_block(block: &dyn Block, x: Tensor, r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = block.forward(t, &v[0])?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[x],
        fault,
    )
}

fn check_conv_bn_act(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let (c1, c2) = (r.random_range(1..4), r.random_range(1..5));
    let b = ConvBnAct::new(c1, c2, [1, 3][r.random_range(0..2)], r.random_range(1..3), r)?;
    let x = uniform([1, c1, 5, 5], r);
    check_block(&b, x, r, fault)
}

fn check_ghost_conv(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let c1 = r.random_range(1..4);
    let c2 = 2 * r.random_range(1..3);
    let b = GhostConv::new(c1, c2, [1, 3][r.random_range(0..2)], r.random_range(1..3), r.random_bool(0.5), r)?;
    let x = uniform([1, c1, 5, 5], r);
    check_block(&b, x, r, fault)
}

fn check_ghost_bottleneck(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let c = 4 * r.random_range(1..3);
    let s = r.random_range(1..3);
    let b = GhostBottleneck::new(c, c, 3, s, true, r)?;
    let x = uniform([1, c, 4, 4], r);
    check_block(&b, x, r, fault)
}

fn check_c3ghost(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let c1 = 2 * r.random_range(1..3);
    let c2 = 8 * r.random_range(1..3);
    let b = C3Ghost::new(c1, c2, r.random_range(1..3), r.random_bool(0.5), r)?;
    let x = uniform([1, c1, 4, 4], r);
    check_block(&b, x, r, fault)
}

fn check_ema(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let factor = r.random_range(1..3);
    let c = factor * 2 * r.random_range(1..3);
    let b = Ema::new(c, factor, r)?;
    let x = uniform([1, c, r.random_range(3..5), r.random_range(3..5)], r);
    check_block(&b, x, r, fault)
}

fn check_sppf(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let c = 2 * r.random_range(1..3);
    let b = Sppf::new(c, c, 3, r)?;
    let x = separated([1, c, 4, 4], r);
    check_block(&b, x, r, fault)
}

/// Deformable layer with live offset and mask predictors.
fn live_deform(c1: usize, c2: usize, r: &mut InitRng) -> Result<DeformConvBnAct> {
    let mut layer = DeformConvBnAct::new(c1, c2, 3, 1, r)?;
    let w = Tensor::rand_uniform([18, c1, 3, 3], -0.3, 0.3, r);
    layer.conv.offset_conv.weight.set_data(w.into_data())?;
    layer.conv.mask_conv.set_bias(r.random_range(-1.0..1.0));
    Ok(layer)
}

fn check_deform_conv(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let (c1, c2) = (r.random_range(1..3), r.random_range(1..4));
    let layer = live_deform(c1, c2, r)?;
    let x = uniform([1, c1, 4, 4], r);
    check_block(&layer, x, r, fault)
}

fn check_deform_offsets(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let c = r.random_range(1..3);
    let x = uniform([1, c, 4, 4], r);
    let weight = uniform([2, c, 3, 3], r);
    let off = Tensor::rand_uniform([1, 18, 4, 4], 0.15, 0.85, r);
    let mask = Tensor::rand_uniform([1, 9, 4, 4], 0.1, 0.9, r);
    run(
        |t, v| {
            let w = t.constant(weight.clone());
            deform_conv2d(t, &v[0], &v[1], Some(&v[2]), &w, ConvGeom::new(1, 1))
        },
        &[x, off, mask],
        fault,
    )
}

fn check_detect_head(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let kind = [HeadKind::Standard, HeadKind::DDetect][r.random_range(0..2)];
    let ch = [4, 4 * r.random_range(1..3), 8];
    let head = DetectHead::new(kind, ch, 2, r.random_range(1..3), [8, 16, 32], r)?;
    let inputs = [uniform([1, ch[0], 4, 4], r), uniform([1, ch[1], 2, 2], r), uniform([1, ch[2], 1, 1], r)];
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let outs = head.forward(t, v)?;
            let mut rr = InitRng::seed_from_u64(seed);
            let w: Vec<Var> = outs.iter().map(|o| weighted(t, o, &mut rr)).collect::<Result<_>>()?;
            total(t, &w)
        },
        &inputs,
        fault,
    )
}

fn check_fusion_stem(r: &mut InitRng, fault: Option<f64>) -> Result<f64> {
    let stem = FusionStem::new(2 * r.random_range(1..4), r)?;
    let hw = r.random_range(3..6);
    let (rgb, ir) = (uniform([1, 3, hw, hw], r), uniform([1, 1, hw, hw], r));
    let seed = r.random::<u64>();
    run(
        |t, v| {
            let y = stem.forward_pair(t, &v[0], &v[1])?;
            weighted(t, &y, &mut InitRng::seed_from_u64(seed))
        },
        &[rgb, ir],
        fault,
    )
}
